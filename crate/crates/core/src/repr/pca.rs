//! Principal component analysis via an iterated, deflated power method on the
//! token-embedding covariance matrix. Deterministic per seed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RunRng;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("requested {k} components from dimension {d}")]
    TooManyComponents { k: usize, d: usize },
    #[error("need at least {k} sample rows, got {n}")]
    TooFewSamples { k: usize, n: usize },
    #[error("row length {got} does not match dimension {want}")]
    DimensionMismatch { got: usize, want: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaProjection {
    pub d: usize,
    pub k: usize,
    pub mean: Vec<f32>,
    /// Row-major k x d, rows orthonormal.
    pub components: Vec<f32>,
    /// Fraction of total variance per component, non-increasing.
    pub explained: Vec<f32>,
}

const POWER_ITERS: usize = 500;
const TOL: f64 = 1e-12;

/// Fit the top-k principal components of `n` rows of length `d`.
pub fn fit_projection(rows: &[f32], n: usize, d: usize, k: usize, seed: u64) -> Result<PcaProjection, PcaError> {
    if k > d {
        return Err(PcaError::TooManyComponents { k, d });
    }
    if n < k {
        return Err(PcaError::TooFewSamples { k, n });
    }
    if rows.len() != n * d {
        return Err(PcaError::DimensionMismatch { got: rows.len(), want: n * d });
    }

    let mut mean = vec![0.0f64; d];
    for r in 0..n {
        for (m, &x) in mean.iter_mut().zip(&rows[r * d..(r + 1) * d]) {
            *m += x as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    // Covariance (biased normalization; scale cancels in ratios/directions).
    let mut cov = vec![0.0f64; d * d];
    for r in 0..n {
        let row = &rows[r * d..(r + 1) * d];
        for i in 0..d {
            let ci = row[i] as f64 - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (row[j] as f64 - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= n as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let total_var: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let root = RunRng::new(seed);
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigvals = Vec::with_capacity(k);
    for c in 0..k {
        let mut rng = root.stream("pca-power", c as u64);
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        orthonormalize(&mut v, &comps);
        let mut lambda = 0.0f64;
        for _ in 0..POWER_ITERS {
            let mut w = vec![0.0f64; d];
            for i in 0..d {
                let vi = v[i];
                if vi != 0.0 {
                    for j in 0..d {
                        w[j] += cov[i * d + j] * vi;
                    }
                }
            }
            // Re-orthogonalize against accepted components each iteration to
            // keep deflation exact in floating point.
            orthonormalize(&mut w, &comps);
            let new_lambda: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            let delta = (new_lambda - lambda).abs();
            v = w;
            lambda = new_lambda;
            if delta <= TOL * lambda.abs().max(1.0) {
                break;
            }
        }
        // Rayleigh quotient on the unit vector.
        let mut cv = vec![0.0f64; d];
        for i in 0..d {
            for j in 0..d {
                cv[j] += cov[i * d + j] * v[i];
            }
        }
        lambda = cv.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        eigvals.push(lambda.max(0.0));
        comps.push(v);
    }

    Ok(PcaProjection {
        d,
        k,
        mean: mean.iter().map(|&m| m as f32).collect(),
        components: comps
            .iter()
            .flat_map(|v| v.iter().map(|&x| x as f32))
            .collect(),
        explained: eigvals
            .iter()
            .map(|&l| if total_var > 0.0 { (l / total_var) as f32 } else { 0.0 })
            .collect(),
    })
}

fn orthonormalize(v: &mut [f64], comps: &[Vec<f64>]) {
    for c in comps {
        let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
        for (x, y) in v.iter_mut().zip(c) {
            *x -= dot * y;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

impl PcaProjection {
    /// Per-row (x - mean) . components^T; n rows of length d -> n rows of k.
    pub fn project_rows(&self, rows: &[f32], n: usize) -> Result<Vec<f32>, PcaError> {
        if rows.len() != n * self.d {
            return Err(PcaError::DimensionMismatch { got: rows.len(), want: n * self.d });
        }
        let mut out = vec![0.0f32; n * self.k];
        for r in 0..n {
            let row = &rows[r * self.d..(r + 1) * self.d];
            for c in 0..self.k {
                let comp = &self.components[c * self.d..(c + 1) * self.d];
                let mut acc = 0.0f64;
                for i in 0..self.d {
                    acc += (row[i] as f64 - self.mean[i] as f64) * comp[i] as f64;
                }
                out[r * self.k + c] = acc as f32;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RunRng;

    /// Dense cyclic Jacobi eigensolver for small symmetric matrices; the
    /// independent oracle for the power method.
    fn jacobi_eigh(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
        let mut m = a.to_vec();
        let mut v = vec![0.0f64; d * d];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }
        for _ in 0..200 {
            let mut off = 0.0;
            for i in 0..d {
                for j in (i + 1)..d {
                    off += m[i * d + j] * m[i * d + j];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..d {
                for q in (p + 1)..d {
                    if m[p * d + q].abs() < 1e-18 {
                        continue;
                    }
                    let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * m[p * d + q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for i in 0..d {
                        let (mip, miq) = (m[i * d + p], m[i * d + q]);
                        m[i * d + p] = c * mip - s * miq;
                        m[i * d + q] = s * mip + c * miq;
                    }
                    for i in 0..d {
                        let (mpi, mqi) = (m[p * d + i], m[q * d + i]);
                        m[p * d + i] = c * mpi - s * mqi;
                        m[q * d + i] = s * mpi + c * mqi;
                        let (vip, viq) = (v[i * d + p], v[i * d + q]);
                        v[i * d + p] = c * vip - s * viq;
                        v[i * d + q] = s * vip + c * viq;
                    }
                }
            }
        }
        let eig: Vec<f64> = (0..d).map(|i| m[i * d + i]).collect();
        (eig, v)
    }

    #[test]
    fn line_data_concentrates_on_first_component() {
        let mut rng = RunRng::new(0).stream("t", 0);
        let n = 200;
        let mut rows = Vec::with_capacity(n * 2);
        for _ in 0..n {
            let t = rng.normal() as f32;
            rows.push(3.0 * t + 1.0);
            rows.push(-4.0 * t + 2.0);
        }
        let p = fit_projection(&rows, n, 2, 2, 1).unwrap();
        assert!(p.explained[0] > 0.999, "{:?}", p.explained);
        assert!(p.explained[1] < 1e-3);
        // Direction proportional to (3, -4)/5 up to sign.
        let c = &p.components[0..2];
        let cosine = (c[0] * 0.6 + c[1] * -0.8).abs();
        assert!(cosine > 0.999, "component {c:?}");
    }

    #[test]
    fn explained_ratios_non_increasing_and_orthonormal() {
        let mut rng = RunRng::new(3).stream("t", 0);
        let (n, d, k) = (300, 12, 6);
        let rows: Vec<f32> = (0..n * d).map(|i| (rng.normal() * (1.0 + (i % d) as f64)) as f32).collect();
        let p = fit_projection(&rows, n, d, k, 5).unwrap();
        for w in p.explained.windows(2) {
            assert!(w[0] >= w[1] - 1e-6, "{:?}", p.explained);
        }
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = (0..d)
                    .map(|i| p.components[a * d + i] as f64 * p.components[b * d + i] as f64)
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6, "({a},{b}) dot {dot}");
            }
        }
    }

    #[test]
    fn matches_jacobi_oracle_on_random_10d_data() {
        let mut rng = RunRng::new(7).stream("t", 0);
        let (n, d, k) = (400, 10, 10);
        // Anisotropic random data.
        let rows: Vec<f32> = (0..n * d)
            .map(|i| {
                let scale = 0.5 + (i % d) as f64 * 0.7;
                (rng.normal() * scale) as f64 as f32
            })
            .collect();
        let p = fit_projection(&rows, n, d, k, 9).unwrap();

        // Oracle covariance + Jacobi.
        let mut mean = vec![0.0f64; d];
        for r in 0..n {
            for i in 0..d {
                mean[i] += rows[r * d + i] as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut cov = vec![0.0f64; d * d];
        for r in 0..n {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] +=
                        (rows[r * d + i] as f64 - mean[i]) * (rows[r * d + j] as f64 - mean[j]);
                }
            }
        }
        for cvar in cov.iter_mut() {
            *cvar /= n as f64;
        }
        let (eig, vecs) = jacobi_eigh(&cov, d);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig[b].partial_cmp(&eig[a]).unwrap());
        let total: f64 = eig.iter().sum();

        for c in 0..k {
            let col = order[c];
            // Eigenvalue agreement through explained ratios.
            let want_ratio = eig[col] / total;
            assert!(
                (p.explained[c] as f64 - want_ratio).abs() < 1e-4,
                "component {c}: ratio {} vs oracle {want_ratio}",
                p.explained[c]
            );
            // Direction agreement up to sign.
            let dot: f64 = (0..d)
                .map(|i| p.components[c * d + i] as f64 * vecs[i * d + col])
                .sum();
            assert!(dot.abs() > 1.0 - 1e-4, "component {c}: |dot| {}", dot.abs());
        }
    }

    #[test]
    fn projection_behaviors() {
        let mut rng = RunRng::new(11).stream("t", 0);
        let (n, d) = (50, 6);
        let rows: Vec<f32> = (0..n * d).map(|_| rng.normal() as f32).collect();
        let p = fit_projection(&rows, n, d, d, 2).unwrap();

        // Mean vector projects to zeros.
        let z = p.project_rows(&p.mean.clone(), 1).unwrap();
        for x in &z {
            assert!(x.abs() < 1e-5);
        }

        // Full-rank round trip reconstructs.
        let y = p.project_rows(&rows[0..d], 1).unwrap();
        let mut recon = p.mean.clone();
        for c in 0..d {
            for i in 0..d {
                recon[i] += y[c] * p.components[c * d + i];
            }
        }
        for (a, b) in recon.iter().zip(&rows[0..d]) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }

        // Errors.
        assert!(matches!(
            fit_projection(&rows, n, d, d + 1, 0),
            Err(PcaError::TooManyComponents { .. })
        ));
        assert!(matches!(
            fit_projection(&rows[0..d], 1, d, 3, 0),
            Err(PcaError::TooFewSamples { .. })
        ));
    }
}
