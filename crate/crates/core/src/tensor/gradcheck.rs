//! Central-difference gradient verification, always in f64.

use super::{NodeId, Result, Tape};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub pass: bool,
}

/// Compare analytic gradients of a scalar-valued graph against central
/// differences. `build` must construct the same graph each call from the
/// provided input nodes; every input is treated as differentiable.
///
/// `max_coords_per_input` caps the number of coordinates perturbed per input
/// (evenly strided) so large parameter blocks stay affordable.
pub fn grad_check<F>(
    build: F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
    tol: f64,
    max_coords_per_input: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |data: &[Vec<f64>]| -> Result<(Tape<f64>, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .zip(data)
            .map(|((shape, _), d)| tape.input(shape.clone(), d.clone(), true))
            .collect();
        let out = build(&mut tape, &ids)?;
        Ok((tape, ids, out))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let (mut tape, ids, out) = eval(&base)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let g = tape.grad(id);
            if g.is_empty() {
                vec![0.0; tape.value(id).len()]
            } else {
                g.to_vec()
            }
        })
        .collect();

    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;
    for (ii, (_, data)) in inputs.iter().enumerate() {
        let n = data.len();
        let stride = match max_coords_per_input {
            Some(cap) if cap < n => n.div_ceil(cap),
            _ => 1,
        };
        let mut coord = 0;
        while coord < n {
            let mut plus = base.clone();
            plus[ii][coord] += eps;
            let (t_plus, _, o_plus) = eval(&plus)?;
            let f_plus = t_plus.value(o_plus)[0];

            let mut minus = base.clone();
            minus[ii][coord] -= eps;
            let (t_minus, _, o_minus) = eval(&minus)?;
            let f_minus = t_minus.value(o_minus)[0];

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[ii][coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst = Some((ii, coord));
            }
            checked += 1;
            coord += stride;
        }
    }

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked,
        pass: max_rel <= tol,
    })
}
