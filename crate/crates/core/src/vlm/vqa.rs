//! Synthetic visual question answering built from ground-truth environment
//! state. Six question families: presence, presence with an auxiliary style
//! hint, target position, room identity, goal plausibility (optionally with a
//! templated rationale), and scripted action instructions.

use serde_json::json;

use crate::gridcraft::{
    self, create_world, CombatVariant, EntityKind, GridWorldState, TargetPosition, TaskSpec,
    WorldStyle, ACTION_ATTACK, ACTION_USE, GLYPH_DARK_BLOB, GLYPH_LIGHT_BLOB,
};
use crate::navhome::{
    generate_layout, nav_step, GoalClass, HouseLayout, NavState, GOALS, NAV_WINDOW,
};
use crate::rng::{RunRng, Stream};

use super::vocab::{TokenId, Vocab, END};
use super::{Result, SeqSpec};

#[derive(Debug, Clone)]
pub struct VqaSample {
    pub family: &'static str,
    /// seq.decoded holds the answer tokens.
    pub seq: SeqSpec,
    /// Ground truth for yes/no families.
    pub truth_yes: Option<bool>,
    /// Class index for position (0 left / 1 middle / 2 right) and similar.
    pub class_index: Option<usize>,
    pub hinted: bool,
}

impl VqaSample {
    /// Training targets: answer tokens plus the end token.
    pub fn targets(&self) -> Vec<TokenId> {
        let mut t = self.seq.decoded.clone();
        t.push(END);
        t
    }
}

#[derive(Debug, Clone)]
pub struct VqaDataset {
    pub samples: Vec<VqaSample>,
}

impl VqaDataset {
    pub fn to_jsonl(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let line = json!({
                "family": s.family,
                "window": s.seq.image_glyphs,
                "grid": s.seq.grid,
                "prompt": vocab.decode(&s.seq.prompt),
                "answer": vocab.decode(&s.seq.decoded),
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn yes_fraction(&self) -> f64 {
        let n = self
            .samples
            .iter()
            .filter(|s| s.truth_yes.is_some())
            .count();
        let yes = self
            .samples
            .iter()
            .filter(|s| s.truth_yes == Some(true))
            .count();
        yes as f64 / n.max(1) as f64
    }
}

/// Fraction of plain aliased-presence samples drawn from white-style worlds.
/// The skew makes the style-typical blob of the *other* style read as "not the
/// target" unless a hint pins the style down.
pub const ALIASED_PLAIN_WHITE_FRAC: f64 = 0.7;

const STATE_ATTEMPTS: usize = 80;

fn window_has(window: &[u8], glyph: u8) -> bool {
    window.contains(&glyph)
}

fn blob_visible(window: &[u8]) -> bool {
    window_has(window, GLYPH_DARK_BLOB) || window_has(window, GLYPH_LIGHT_BLOB)
}

fn diversified_state(task: &TaskSpec, rng: &mut Stream) -> GridWorldState {
    let mut st = create_world(task, rng.next_u64()).expect("world generation");
    let n = 5 + rng.below(25);
    // Movement-heavy action mix (turns, steps, a jump) to spread viewpoints.
    const MOVES: [usize; 12] = [0, 1, 2, 3, 4, 5, 5, 5, 5, 6, 7, 8];
    for _ in 0..n {
        if st.done {
            break;
        }
        let a = MOVES[rng.below(MOVES.len())];
        let _ = gridcraft::step(&mut st, a);
    }
    st
}

fn grid_seq(v: &Vocab, window: Vec<u8>, prompt: &str, answer: &str) -> SeqSpec {
    SeqSpec {
        image_glyphs: window,
        grid: gridcraft::WINDOW,
        prompt: v.encode(prompt).expect("prompt in vocabulary"),
        decoded: v.encode(answer).expect("answer in vocabulary"),
    }
}

/// Unambiguous presence words with the task that can make them appear.
const PRESENCE_WORDS: [(&str, EntityKind, Option<CombatVariant>); 6] = [
    ("cow", EntityKind::Cow, None),
    ("chicken", EntityKind::Chicken, None),
    ("sheep", EntityKind::Sheep, None),
    ("zombie", EntityKind::Zombie, Some(CombatVariant::Zombie)),
    ("enderman", EntityKind::Enderman, Some(CombatVariant::Enderman)),
    ("pigman", EntityKind::Pigman, Some(CombatVariant::Pigman)),
];

fn presence_sample(v: &Vocab, rng: &mut Stream, i: usize) -> VqaSample {
    let (word, kind, variant) = PRESENCE_WORDS[i % PRESENCE_WORDS.len()];
    let desired = i % 2 == 0;
    // Negatives for target-only kinds come from a task that never spawns them.
    let task = match (desired, variant) {
        (true, Some(va)) => TaskSpec::combat(va),
        _ => TaskSpec::combat(CombatVariant::Spider),
    };
    let mut chosen = None;
    for _ in 0..STATE_ATTEMPTS {
        let st = diversified_state(&task, rng);
        let truth = st.kind_visible(kind);
        if truth == desired {
            chosen = Some((st, truth));
            break;
        }
        if chosen.is_none() {
            chosen = Some((st, truth));
        }
    }
    // Keep the last attempt if the desired label never materialized.
    let (st, truth) = chosen.expect("at least one attempt");
    let window = st.observe().window;
    let prompt = format!("is there a {word} in this image");
    VqaSample {
        family: "presence",
        seq: grid_seq(v, window, &prompt, if truth { "yes" } else { "no" }),
        truth_yes: Some(truth),
        class_index: None,
        hinted: false,
    }
}

fn aliased_sample(v: &Vocab, rng: &mut Stream, hinted: bool) -> VqaSample {
    let white = if hinted {
        rng.bernoulli(0.5)
    } else {
        rng.bernoulli(ALIASED_PLAIN_WHITE_FRAC)
    };
    let mut task = TaskSpec::combat(CombatVariant::Spider);
    task.style = if white {
        WorldStyle::White
    } else {
        WorldStyle::Black
    };
    let mut st = diversified_state(&task, rng);
    for _ in 0..STATE_ATTEMPTS {
        if blob_visible(&st.observe().window) {
            break;
        }
        st = diversified_state(&task, rng);
    }
    let truth = st.kind_visible(EntityKind::Spider);
    let window = st.observe().window;
    let question = "is there a spider in this image";
    let prompt = if hinted {
        // Truthful style hint: in black worlds the spider renders dark.
        let shade = if white { "light" } else { "dark" };
        format!("the spider here is {shade} {question}")
    } else {
        question.to_string()
    };
    VqaSample {
        family: if hinted {
            "presence_hinted"
        } else {
            "presence_aliased"
        },
        seq: grid_seq(v, window, &prompt, if truth { "yes" } else { "no" }),
        truth_yes: Some(truth),
        class_index: None,
        hinted,
    }
}

fn position_sample(v: &Vocab, rng: &mut Stream) -> VqaSample {
    // Black worlds keep both spider renderings unique to the spider.
    let task = TaskSpec::combat(CombatVariant::Spider);
    let mut found = None;
    for _ in 0..STATE_ATTEMPTS {
        let st = diversified_state(&task, rng);
        let (visible, pos) = gridcraft::oracle_target_visible(&st);
        if visible {
            found = Some((st, pos));
            break;
        }
    }
    let (st, pos) = found.expect("spider task target is usually visible");
    let (word, class) = match pos {
        TargetPosition::Left => ("left", 0usize),
        TargetPosition::Middle => ("middle", 1),
        TargetPosition::Right => ("right", 2),
        TargetPosition::Absent => unreachable!("visible target has a position"),
    };
    VqaSample {
        family: "position",
        seq: grid_seq(
            v,
            st.observe().window,
            "where is the spider in this image",
            word,
        ),
        truth_yes: None,
        class_index: Some(class),
        hinted: false,
    }
}

fn action_word(action: usize) -> &'static str {
    match action {
        0 | 1 | 3 | 4 => "turn",
        5 | 9 => "forward",
        6 => "move",
        7 => "left",
        8 => "right",
        ACTION_ATTACK => "attack",
        ACTION_USE => "use",
        _ => "move",
    }
}

fn action_sample(v: &Vocab, rng: &mut Stream, i: usize) -> VqaSample {
    let task = match i % 4 {
        0 => TaskSpec::combat(CombatVariant::Spider),
        1 => TaskSpec::combat(CombatVariant::Zombie),
        2 => TaskSpec::milk(),
        _ => TaskSpec::shear(),
    };
    let st = diversified_state(&task, rng);
    let a = gridcraft::expert_action(&st);
    VqaSample {
        family: "action",
        seq: grid_seq(
            v,
            st.observe().window,
            "i can attack move or turn what should i do",
            action_word(a),
        ),
        truth_yes: None,
        class_index: Some(a),
        hinted: false,
    }
}

pub fn make_gridcraft_vqa(per_family: usize, seed: u64) -> Result<VqaDataset> {
    let v = Vocab::new();
    let root = RunRng::new(seed);
    let mut samples = Vec::with_capacity(per_family * 5);
    let mut rng = root.stream("vqa-presence", 0);
    for i in 0..per_family {
        samples.push(presence_sample(&v, &mut rng, i));
    }
    let mut rng = root.stream("vqa-aliased", 0);
    for _ in 0..per_family {
        samples.push(aliased_sample(&v, &mut rng, false));
    }
    let mut rng = root.stream("vqa-hinted", 0);
    for _ in 0..per_family {
        samples.push(aliased_sample(&v, &mut rng, true));
    }
    let mut rng = root.stream("vqa-position", 0);
    for _ in 0..per_family {
        samples.push(position_sample(&v, &mut rng));
    }
    let mut rng = root.stream("vqa-action", 0);
    for i in 0..per_family {
        samples.push(action_sample(&v, &mut rng, i));
    }
    Ok(VqaDataset { samples })
}

const LAYOUT_POOL: usize = 24;

fn nav_pool(seed: u64) -> Vec<HouseLayout> {
    let root = RunRng::new(seed);
    let mut rng = root.stream("vqa-nav-layouts", 0);
    (0..LAYOUT_POOL)
        .map(|_| generate_layout(rng.next_u64(), NAV_WINDOW).expect("layout generation"))
        .collect()
}

fn nav_state(pool: &[HouseLayout], rng: &mut Stream) -> NavState {
    let layout = &pool[rng.below(pool.len())];
    let start = layout.start_cells[rng.below(layout.start_cells.len())];
    let goal = GOALS[rng.below(3)];
    let mut st = NavState::new(layout, goal, start, rng.below(4) as u8);
    let n = rng.below(15);
    for _ in 0..n {
        if st.done {
            break;
        }
        let a = rng.below(3); // never STOP
        let _ = nav_step(&mut st, a);
    }
    st
}

fn nav_seq(v: &Vocab, st: &NavState, prompt: &str, answer: &str) -> SeqSpec {
    SeqSpec {
        image_glyphs: st.observe().window,
        grid: NAV_WINDOW,
        prompt: v.encode(prompt).expect("prompt in vocabulary"),
        decoded: v.encode(answer).expect("answer in vocabulary"),
    }
}

fn current_room(st: &NavState) -> usize {
    st.layout.room_of[st.y as usize * st.layout.size + st.x as usize]
}

fn room_sample(v: &Vocab, pool: &[HouseLayout], rng: &mut Stream) -> VqaSample {
    let st = nav_state(pool, rng);
    let room = current_room(&st);
    let word = st.layout.room_types[room].word();
    VqaSample {
        family: "room",
        seq: nav_seq(v, &st, "what room is this", word),
        truth_yes: None,
        class_index: Some(st.layout.room_types[room] as usize),
        hinted: false,
    }
}

fn goal_here(st: &NavState, goal: GoalClass) -> bool {
    let room = current_room(st);
    st.layout.furniture.iter().any(|f| {
        f.class.goal() == Some(goal) && {
            // Furniture sits on a room cell; look at its 4-neighborhood since
            // the piece itself is not floor.
            let idx = |x: i32, y: i32| y as usize * st.layout.size + x as usize;
            [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|&(dx, dy)| {
                    let (x, y) = (f.x + dx, f.y + dy);
                    st.layout.is_floor(x, y) && st.layout.room_of[idx(x, y)] == room
                })
        }
    })
}

fn plausibility_sample(
    v: &Vocab,
    pool: &[HouseLayout],
    rng: &mut Stream,
    i: usize,
    rationale: bool,
) -> VqaSample {
    let goal = GOALS[i % 3];
    let desired = i % 2 == 0;
    let mut chosen = None;
    for _ in 0..STATE_ATTEMPTS {
        let st = nav_state(pool, rng);
        let truth = goal_here(&st, goal);
        if truth == desired {
            chosen = Some((st, truth));
            break;
        }
        if chosen.is_none() {
            chosen = Some((st, truth));
        }
    }
    let (st, truth) = chosen.expect("at least one attempt");
    let name = goal.name();
    let question = format!("would a {name} be found here");
    let (family, prompt, answer): (&'static str, String, String) = if rationale {
        let room_word = st.layout.room_types[current_room(&st)].word();
        let home = goal.home_room().word();
        let lead = if truth { "yes" } else { "no" };
        (
            "plausibility_rationale",
            format!("{question} why or not"),
            format!("{lead} - this is a {room_word} - {name} belongs in {home}"),
        )
    } else {
        (
            "plausibility",
            question,
            (if truth { "yes" } else { "no" }).to_string(),
        )
    };
    VqaSample {
        family,
        seq: nav_seq(v, &st, &prompt, &answer),
        truth_yes: Some(truth),
        class_index: None,
        hinted: false,
    }
}

pub fn make_navhome_vqa(per_family: usize, seed: u64) -> Result<VqaDataset> {
    let v = Vocab::new();
    let pool = nav_pool(seed);
    let root = RunRng::new(seed);
    let mut samples = Vec::with_capacity(per_family * 3);
    let mut rng = root.stream("vqa-room", 0);
    for _ in 0..per_family {
        samples.push(room_sample(&v, &pool, &mut rng));
    }
    let mut rng = root.stream("vqa-plaus", 0);
    for i in 0..per_family {
        samples.push(plausibility_sample(&v, &pool, &mut rng, i, false));
    }
    let mut rng = root.stream("vqa-plaus-rat", 0);
    for i in 0..per_family {
        samples.push(plausibility_sample(&v, &pool, &mut rng, i, true));
    }
    Ok(VqaDataset { samples })
}
