//! Procedural 2-D glyph world: egocentric partially observed grid with moving
//! target entities, distractors, combat/milk/shear reward structures, and a
//! scripted expert. Terrain persists across fast resets; entities and the
//! agent respawn.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{RunRng, Stream};

pub const WORLD_SIZE: usize = 24;
pub const WINDOW: usize = 9;
pub const WINDOW_HALF: i32 = 4;
pub const NUM_ACTIONS: usize = 12;
pub const ACTION_ATTACK: usize = 10;
pub const ACTION_USE: usize = 11;
pub const AGGRO_RADIUS: i32 = 6;

// Terrain glyphs.
pub const GLYPH_EMPTY: u8 = 0;
pub const GLYPH_ROCK: u8 = 1;
pub const GLYPH_TREE: u8 = 2;
pub const GLYPH_BUSH: u8 = 3;
pub const GLYPH_AGENT: u8 = 4;
pub const GLYPH_VOID: u8 = 5;
// Entity glyphs. The two blob glyphs are shared between spider and pig
// depending on world style, so appearance alone underdetermines the kind.
pub const GLYPH_SPIDER: u8 = 10;
pub const GLYPH_DARK_BLOB: u8 = 11;
pub const GLYPH_LIGHT_BLOB: u8 = 12;
pub const GLYPH_COW: u8 = 13;
pub const GLYPH_PIG: u8 = 14;
pub const GLYPH_CHICKEN: u8 = 15;
pub const GLYPH_SHEEP: u8 = 16;
pub const GLYPH_ZOMBIE: u8 = 17;
pub const GLYPH_ENDERMAN: u8 = 18;
pub const GLYPH_PIGMAN: u8 = 19;

pub const NUM_GLYPHS: usize = 20;

/// Fraction of spiders/pigs that render as the style-dependent blob glyph.
pub const ALIAS_PROB: f64 = 0.7;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("unknown task kind: {0}")]
    UnknownTask(String),
    #[error("world has too few free cells for required placements")]
    Overfull,
    #[error("action index {0} out of range (0..{NUM_ACTIONS})")]
    BadAction(usize),
    #[error("step called on a finished episode")]
    EpisodeDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntityKind {
    Spider,
    Zombie,
    Enderman,
    Pigman,
    Cow,
    Pig,
    Chicken,
    Sheep,
}

impl EntityKind {
    pub fn hostile(self) -> bool {
        matches!(
            self,
            EntityKind::Spider | EntityKind::Zombie | EntityKind::Enderman | EntityKind::Pigman
        )
    }

    fn base_glyph(self) -> u8 {
        match self {
            EntityKind::Spider => GLYPH_SPIDER,
            EntityKind::Zombie => GLYPH_ZOMBIE,
            EntityKind::Enderman => GLYPH_ENDERMAN,
            EntityKind::Pigman => GLYPH_PIGMAN,
            EntityKind::Cow => GLYPH_COW,
            EntityKind::Pig => GLYPH_PIG,
            EntityKind::Chicken => GLYPH_CHICKEN,
            EntityKind::Sheep => GLYPH_SHEEP,
        }
    }
}

/// Global rendering style. Spiders render mostly as the dark blob in black
/// worlds and the light blob in white worlds; pigs take the opposite blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorldStyle {
    Black,
    White,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombatVariant {
    Spider,
    Zombie,
    Enderman,
    Pigman,
}

impl CombatVariant {
    pub fn target_kind(self) -> EntityKind {
        match self {
            CombatVariant::Spider => EntityKind::Spider,
            CombatVariant::Zombie => EntityKind::Zombie,
            CombatVariant::Enderman => EntityKind::Enderman,
            CombatVariant::Pigman => EntityKind::Pigman,
        }
    }

    pub fn hard(self) -> bool {
        matches!(self, CombatVariant::Enderman | CombatVariant::Pigman)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Combat(CombatVariant),
    Milk,
    Shear,
}

impl TaskKind {
    pub fn parse(name: &str) -> Result<TaskKind, GridError> {
        match name {
            "combat" | "combat_spider" => Ok(TaskKind::Combat(CombatVariant::Spider)),
            "combat_zombie" => Ok(TaskKind::Combat(CombatVariant::Zombie)),
            "combat_enderman" => Ok(TaskKind::Combat(CombatVariant::Enderman)),
            "combat_pigman" => Ok(TaskKind::Combat(CombatVariant::Pigman)),
            "milk" => Ok(TaskKind::Milk),
            "shear" => Ok(TaskKind::Shear),
            other => Err(GridError::UnknownTask(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Combat(CombatVariant::Spider) => "combat_spider",
            TaskKind::Combat(CombatVariant::Zombie) => "combat_zombie",
            TaskKind::Combat(CombatVariant::Enderman) => "combat_enderman",
            TaskKind::Combat(CombatVariant::Pigman) => "combat_pigman",
            TaskKind::Milk => "milk",
            TaskKind::Shear => "shear",
        }
    }

    pub fn target_kind(self) -> EntityKind {
        match self {
            TaskKind::Combat(v) => v.target_kind(),
            TaskKind::Milk => EntityKind::Cow,
            TaskKind::Shear => EntityKind::Sheep,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub world_size: usize,
    pub step_limit: u32,
    pub strike_reward: f64,
    pub defeat_reward: f64,
    pub use_reward: f64,
    pub shaping_coeff: f64,
    pub target_hp: u32,
    pub agent_hp: u32,
    pub spawn_radius: i32,
    pub style: WorldStyle,
    /// (kind, count) roster of non-target entities.
    pub distractors: Vec<(EntityKind, u32)>,
    /// Terrain density knobs; see create_world.
    pub rock_density: f64,
    pub tree_density: f64,
}

impl TaskSpec {
    pub fn combat(variant: CombatVariant) -> Self {
        TaskSpec {
            kind: TaskKind::Combat(variant),
            world_size: WORLD_SIZE,
            step_limit: if variant.hard() { 1000 } else { 500 },
            strike_reward: 1.0,
            defeat_reward: 10.0,
            use_reward: 10.0,
            shaping_coeff: 0.0,
            target_hp: if variant.hard() { 5 } else { 3 },
            agent_hp: 3,
            spawn_radius: 10,
            style: WorldStyle::Black,
            distractors: vec![
                (EntityKind::Cow, 1),
                (EntityKind::Pig, 2),
                (EntityKind::Chicken, 1),
                (EntityKind::Sheep, 1),
            ],
            rock_density: 0.06,
            tree_density: 0.05,
        }
    }

    pub fn milk() -> Self {
        TaskSpec {
            kind: TaskKind::Milk,
            shaping_coeff: 0.1,
            target_hp: 1,
            ..TaskSpec::combat(CombatVariant::Spider)
        }
    }

    pub fn shear() -> Self {
        TaskSpec {
            kind: TaskKind::Shear,
            shaping_coeff: 1.0,
            target_hp: 1,
            ..TaskSpec::combat(CombatVariant::Spider)
        }
    }

    pub fn by_name(name: &str) -> Result<TaskSpec, GridError> {
        Ok(match TaskKind::parse(name)? {
            TaskKind::Combat(v) => TaskSpec::combat(v),
            TaskKind::Milk => TaskSpec::milk(),
            TaskKind::Shear => TaskSpec::shear(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entity {
    pub kind: EntityKind,
    pub x: i32,
    pub y: i32,
    pub hp: u32,
    pub glyph: u8,
    pub usable: bool,
    pub is_target: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridWorldState {
    pub task: TaskSpec,
    pub seed: u64,
    pub terrain: Vec<u8>,
    pub agent_x: i32,
    pub agent_y: i32,
    pub heading: u8,
    pub agent_hp: u32,
    pub entities: Vec<Entity>,
    pub step_count: u32,
    pub episode: u32,
    pub min_observed_distance: Option<f64>,
    pub episode_return: f64,
    pub prev_action: usize,
    pub done: bool,
    pub strikes: u32,
    pub successes: u32,
    motion_rng: Stream,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridObservation {
    /// 9x9 glyph ids, row 0 farthest ahead, rotated to the agent heading.
    pub window: Vec<u8>,
    pub x: i32,
    pub y: i32,
    pub heading: u8,
    /// One-hot over the 12 actions; all zeros encodes "no previous action".
    pub prev_action: Vec<u8>,
}

impl GridObservation {
    /// Stable 64-bit content hash used as an embedding-cache key.
    pub fn hash64(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u64| {
            h ^= b;
            h = h.wrapping_mul(0x100000001b3);
        };
        for &g in &self.window {
            eat(g as u64);
        }
        eat(self.x as u64);
        eat(self.y as u64);
        eat(self.heading as u64);
        for &p in &self.prev_action {
            eat(p as u64);
        }
        h
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StepInfo {
    pub strikes: u32,
    pub successes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetPosition {
    Left,
    Middle,
    Right,
    Absent,
}

const HEADING_VECS: [(i32, i32); 8] = [
    (0, -1),  // N
    (1, -1),  // NE
    (1, 0),   // E
    (1, 1),   // SE
    (0, 1),   // S
    (-1, 1),  // SW
    (-1, 0),  // W
    (-1, -1), // NW
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Turn(i8), // -2..=2 heading increments; 0 is a no-op
    MoveForward,
    MoveBackward,
    MoveLeft,
    MoveRight,
    JumpForward,
    Attack,
    UseItem,
}

/// Fixed, ordered action set shared by every task.
pub const ACTIONS: [Action; NUM_ACTIONS] = [
    Action::Turn(-2),
    Action::Turn(-1),
    Action::Turn(0),
    Action::Turn(1),
    Action::Turn(2),
    Action::MoveForward,
    Action::MoveBackward,
    Action::MoveLeft,
    Action::MoveRight,
    Action::JumpForward,
    Action::Attack,
    Action::UseItem,
];

pub fn legal_actions(_task: &TaskSpec) -> &'static [Action; NUM_ACTIONS] {
    &ACTIONS
}

pub fn chebyshev(ax: i32, ay: i32, bx: i32, by: i32) -> i32 {
    (ax - bx).abs().max((ay - by).abs())
}

fn blocking(cell: u8) -> bool {
    cell == GLYPH_ROCK || cell == GLYPH_TREE
}

fn entity_glyph(kind: EntityKind, style: WorldStyle, rng: &mut Stream) -> u8 {
    match (kind, style) {
        (EntityKind::Spider, WorldStyle::Black) if rng.bernoulli(ALIAS_PROB) => GLYPH_DARK_BLOB,
        (EntityKind::Spider, WorldStyle::White) if rng.bernoulli(ALIAS_PROB) => GLYPH_LIGHT_BLOB,
        (EntityKind::Pig, WorldStyle::Black) if rng.bernoulli(ALIAS_PROB) => GLYPH_LIGHT_BLOB,
        (EntityKind::Pig, WorldStyle::White) if rng.bernoulli(ALIAS_PROB) => GLYPH_DARK_BLOB,
        _ => kind.base_glyph(),
    }
}

impl GridWorldState {
    pub fn in_bounds(&self, x: i32, y: i32) -> bool {
        let w = self.task.world_size as i32;
        x >= 0 && y >= 0 && x < w && y < w
    }

    pub fn terrain_at(&self, x: i32, y: i32) -> u8 {
        self.terrain[y as usize * self.task.world_size + x as usize]
    }

    pub fn entity_at(&self, x: i32, y: i32) -> Option<usize> {
        self.entities
            .iter()
            .position(|e| e.hp > 0 && e.x == x && e.y == y)
    }

    pub fn target_index(&self) -> Option<usize> {
        self.entities.iter().position(|e| e.is_target && e.hp > 0)
    }

    fn cell_free(&self, x: i32, y: i32) -> bool {
        self.in_bounds(x, y)
            && !blocking(self.terrain_at(x, y))
            && self.entity_at(x, y).is_none()
            && !(x == self.agent_x && y == self.agent_y)
    }

    fn faced_cell(&self) -> (i32, i32) {
        let (dx, dy) = HEADING_VECS[self.heading as usize];
        (self.agent_x + dx, self.agent_y + dy)
    }

    /// World coordinates of a rotated window cell. `f` is forward offset
    /// (positive ahead), `r` is rightward offset.
    fn window_to_world(&self, f: i32, r: i32) -> (i32, i32) {
        let (hx, hy) = HEADING_VECS[self.heading as usize];
        let (rx, ry) = HEADING_VECS[((self.heading + 2) % 8) as usize];
        (self.agent_x + f * hx + r * rx, self.agent_y + f * hy + r * ry)
    }

    /// Whether world cell (x, y) falls inside the current egocentric window,
    /// returning its (row, col) if so.
    fn window_coords_of(&self, x: i32, y: i32) -> Option<(usize, usize)> {
        // Invert the rotation: solve f, r from the offset.
        let (hx, hy) = HEADING_VECS[self.heading as usize];
        let (rx, ry) = HEADING_VECS[((self.heading + 2) % 8) as usize];
        let (ox, oy) = (x - self.agent_x, y - self.agent_y);
        // The basis (h, r) is orthogonal for cardinal headings and skewed for
        // diagonals; search the window directly to stay exact either way.
        for f in -WINDOW_HALF..=WINDOW_HALF {
            for r in -WINDOW_HALF..=WINDOW_HALF {
                if f * hx + r * rx == ox && f * hy + r * ry == oy {
                    return Some(((WINDOW_HALF - f) as usize, (WINDOW_HALF + r) as usize));
                }
            }
        }
        None
    }

    /// Whether any live entity of `kind` sits inside the current window,
    /// regardless of which glyph it renders as.
    pub fn kind_visible(&self, kind: EntityKind) -> bool {
        self.entities.iter().any(|e| {
            e.hp > 0 && e.kind == kind && self.window_coords_of(e.x, e.y).is_some()
        })
    }

    pub fn observe(&self) -> GridObservation {
        let mut window = vec![GLYPH_VOID; WINDOW * WINDOW];
        for f in -WINDOW_HALF..=WINDOW_HALF {
            for r in -WINDOW_HALF..=WINDOW_HALF {
                let (x, y) = self.window_to_world(f, r);
                let row = (WINDOW_HALF - f) as usize;
                let col = (WINDOW_HALF + r) as usize;
                let g = if !self.in_bounds(x, y) {
                    GLYPH_VOID
                } else if f == 0 && r == 0 {
                    GLYPH_AGENT
                } else if let Some(i) = self.entity_at(x, y) {
                    self.entities[i].glyph
                } else {
                    self.terrain_at(x, y)
                };
                window[row * WINDOW + col] = g;
            }
        }
        let mut prev = vec![0u8; NUM_ACTIONS];
        if self.prev_action < NUM_ACTIONS {
            prev[self.prev_action] = 1;
        }
        GridObservation {
            window,
            x: self.agent_x,
            y: self.agent_y,
            heading: self.heading,
            prev_action: prev,
        }
    }
}

pub fn create_world(task: &TaskSpec, seed: u64) -> Result<GridWorldState, GridError> {
    let root = RunRng::new(seed);
    let mut terrain_rng = root.stream("gridcraft-terrain", 0);
    let w = task.world_size;
    let mut terrain = vec![GLYPH_EMPTY; w * w];
    for cell in terrain.iter_mut() {
        let u = terrain_rng.uniform();
        *cell = if u < task.rock_density {
            GLYPH_ROCK
        } else if u < task.rock_density + task.tree_density {
            GLYPH_TREE
        } else if u < task.rock_density + task.tree_density + 0.03 {
            GLYPH_BUSH
        } else {
            GLYPH_EMPTY
        };
    }

    let mut state = GridWorldState {
        task: task.clone(),
        seed,
        terrain,
        agent_x: 0,
        agent_y: 0,
        heading: 0,
        agent_hp: task.agent_hp,
        entities: Vec::new(),
        step_count: 0,
        episode: 0,
        min_observed_distance: None,
        episode_return: 0.0,
        prev_action: NUM_ACTIONS, // sentinel: no previous action
        done: false,
        strikes: 0,
        successes: 0,
        motion_rng: root.stream("gridcraft-motion", 0),
    };
    spawn_episode(&mut state)?;
    Ok(state)
}

/// Respawn agent and entities on the persistent terrain and begin a new
/// episode. Deterministic per (seed, episode index).
pub fn fast_reset(state: &mut GridWorldState) -> Result<(), GridError> {
    state.episode += 1;
    spawn_episode(state)
}

fn spawn_episode(state: &mut GridWorldState) -> Result<(), GridError> {
    let root = RunRng::new(state.seed);
    let mut rng = root.stream("gridcraft-spawn", state.episode as u64);
    state.motion_rng = root.stream("gridcraft-motion", state.episode as u64);
    state.entities.clear();
    state.step_count = 0;
    state.agent_hp = state.task.agent_hp;
    state.min_observed_distance = None;
    state.episode_return = 0.0;
    state.prev_action = NUM_ACTIONS;
    state.done = false;
    state.strikes = 0;
    state.successes = 0;

    let w = state.task.world_size as i32;
    let free: Vec<(i32, i32)> = (0..w)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| !blocking(state.terrain[(y * w + x) as usize]))
        .collect();
    let needed = 2 + state
        .task
        .distractors
        .iter()
        .map(|&(_, c)| c as usize)
        .sum::<usize>();
    if free.len() < needed {
        return Err(GridError::Overfull);
    }

    let (ax, ay) = *rng.choice(&free);
    state.agent_x = ax;
    state.agent_y = ay;
    state.heading = rng.below(8) as u8;

    let style = state.task.style;
    let place = |state: &mut GridWorldState,
                     rng: &mut Stream,
                     kind: EntityKind,
                     is_target: bool|
     -> Result<(), GridError> {
        for _ in 0..4096 {
            let &(x, y) = rng.choice(&free);
            let near = chebyshev(x, y, state.agent_x, state.agent_y) <= state.task.spawn_radius;
            let far_enough = chebyshev(x, y, state.agent_x, state.agent_y) >= 2;
            if state.cell_free(x, y) && far_enough && (!is_target || near) {
                let glyph = entity_glyph(kind, style, rng);
                state.entities.push(Entity {
                    kind,
                    x,
                    y,
                    hp: if is_target { state.task.target_hp } else { 1 },
                    glyph,
                    usable: true,
                    is_target,
                });
                return Ok(());
            }
        }
        Err(GridError::Overfull)
    };

    let target_kind = state.task.kind.target_kind();
    place(state, &mut rng, target_kind, true)?;
    let roster = state.task.distractors.clone();
    for (kind, count) in roster {
        for _ in 0..count {
            place(state, &mut rng, kind, false)?;
        }
    }
    Ok(())
}

/// Advance one transition. Returns (observation, reward, done, info).
pub fn step(
    state: &mut GridWorldState,
    action: usize,
) -> Result<(GridObservation, f64, bool, StepInfo), GridError> {
    if state.done {
        return Err(GridError::EpisodeDone);
    }
    if action >= NUM_ACTIONS {
        return Err(GridError::BadAction(action));
    }
    let mut reward = 0.0;
    let is_combat = matches!(state.task.kind, TaskKind::Combat(_));

    match ACTIONS[action] {
        Action::Turn(d) => {
            state.heading = ((state.heading as i32 + d as i32).rem_euclid(8)) as u8;
        }
        Action::MoveForward => try_move(state, 0, 1),
        Action::MoveBackward => try_move(state, 4, 1),
        Action::MoveLeft => try_move(state, 6, 1),
        Action::MoveRight => try_move(state, 2, 1),
        Action::JumpForward => try_move(state, 0, 2),
        Action::Attack => {
            let (fx, fy) = state.faced_cell();
            if let Some(i) = state.entity_at(fx, fy) {
                reward += state.task.strike_reward;
                state.strikes += 1;
                state.entities[i].hp -= 1;
                if state.entities[i].hp == 0 {
                    if state.entities[i].is_target {
                        reward += state.task.defeat_reward;
                        if is_combat {
                            state.successes += 1;
                            state.done = true;
                        }
                    }
                    state.entities.retain(|e| e.hp > 0);
                }
            }
        }
        Action::UseItem => {
            if !is_combat {
                if let Some(i) = state.target_index() {
                    let e = &state.entities[i];
                    let adjacent =
                        chebyshev(e.x, e.y, state.agent_x, state.agent_y) <= 1 && e.usable;
                    if adjacent {
                        reward += state.task.use_reward;
                        state.successes += 1;
                        // Multi-success episodes: relocate the target so the
                        // interaction can repeat.
                        relocate_target(state, i);
                    }
                }
            }
        }
    }

    if !state.done {
        move_entities(state);
        if is_combat {
            hostile_attacks(state, &mut reward);
        }
        reward += shaping_reward(state);
    }

    state.step_count += 1;
    if state.step_count >= state.task.step_limit {
        state.done = true;
    }
    state.prev_action = action;
    state.episode_return += reward;
    let info = StepInfo {
        strikes: state.strikes,
        successes: state.successes,
    };
    Ok((state.observe(), reward, state.done, info))
}

fn try_move(state: &mut GridWorldState, heading_offset: u8, cells: i32) {
    let dir = ((state.heading + heading_offset) % 8) as usize;
    let (dx, dy) = HEADING_VECS[dir];
    let (nx, ny) = (state.agent_x + dx * cells, state.agent_y + dy * cells);
    // A jump may pass over one blocked cell; only the landing cell must be free.
    if state.cell_free(nx, ny) {
        state.agent_x = nx;
        state.agent_y = ny;
    }
}

fn relocate_target(state: &mut GridWorldState, i: usize) {
    let w = state.task.world_size as i32;
    for _ in 0..4096 {
        let x = state.motion_rng.below(w as usize) as i32;
        let y = state.motion_rng.below(w as usize) as i32;
        if state.cell_free(x, y) && chebyshev(x, y, state.agent_x, state.agent_y) >= 4 {
            state.entities[i].x = x;
            state.entities[i].y = y;
            return;
        }
    }
}

fn move_entities(state: &mut GridWorldState) {
    for i in 0..state.entities.len() {
        let e = state.entities[i].clone();
        if state.motion_rng.bernoulli(0.5) {
            continue;
        }
        let dist = chebyshev(e.x, e.y, state.agent_x, state.agent_y);
        let dir = if e.is_target && e.kind.hostile() && dist <= AGGRO_RADIUS {
            // Approach bias: step toward the agent.
            let dx = (state.agent_x - e.x).signum();
            let dy = (state.agent_y - e.y).signum();
            (dx, dy)
        } else {
            *state.motion_rng.choice(&HEADING_VECS)
        };
        let (nx, ny) = (e.x + dir.0, e.y + dir.1);
        if state.cell_free(nx, ny) {
            state.entities[i].x = nx;
            state.entities[i].y = ny;
        }
    }
}

fn hostile_attacks(state: &mut GridWorldState, reward: &mut f64) {
    let adjacent_hostile = state
        .entities
        .iter()
        .any(|e| e.is_target && e.kind.hostile() && chebyshev(e.x, e.y, state.agent_x, state.agent_y) <= 1);
    if adjacent_hostile && state.motion_rng.bernoulli(0.3) {
        state.agent_hp = state.agent_hp.saturating_sub(1);
        if state.agent_hp == 0 {
            state.done = true;
            let _ = reward; // defeat carries no explicit penalty
        }
    }
}

fn shaping_reward(state: &mut GridWorldState) -> f64 {
    if state.task.shaping_coeff == 0.0 {
        return 0.0;
    }
    let Some(t) = state.target_index() else {
        return 0.0;
    };
    let e = &state.entities[t];
    let visible = state.window_coords_of(e.x, e.y).is_some();
    if !visible {
        return 0.0;
    }
    let d = chebyshev(e.x, e.y, state.agent_x, state.agent_y) as f64;
    match state.min_observed_distance {
        None => {
            state.min_observed_distance = Some(d);
            0.0
        }
        Some(m) if d < m => {
            state.min_observed_distance = Some(d);
            state.task.shaping_coeff * (m - d)
        }
        _ => 0.0,
    }
}

/// Independent replay of the reward rule from a transition's endpoint states.
/// Used as the oracle against step's emitted reward.
pub fn compute_reward(prev: &GridWorldState, action: usize, next: &GridWorldState) -> f64 {
    let mut reward = 0.0;
    let task = &prev.task;
    let is_combat = matches!(task.kind, TaskKind::Combat(_));
    match ACTIONS[action] {
        Action::Attack => {
            let (dx, dy) = HEADING_VECS[prev.heading as usize];
            let (fx, fy) = (prev.agent_x + dx, prev.agent_y + dy);
            if let Some(i) = prev.entity_at(fx, fy) {
                reward += task.strike_reward;
                let e = &prev.entities[i];
                if e.hp == 1 && e.is_target {
                    reward += task.defeat_reward;
                }
            }
        }
        Action::UseItem if !is_combat => {
            if let Some(i) = prev.target_index() {
                let e = &prev.entities[i];
                if e.usable && chebyshev(e.x, e.y, prev.agent_x, prev.agent_y) <= 1 {
                    reward += task.use_reward;
                }
            }
        }
        _ => {}
    }
    // Shaping: read straight off the tracked minima.
    if task.shaping_coeff > 0.0 {
        if let (Some(m_prev), Some(m_next)) = (prev.min_observed_distance, next.min_observed_distance)
        {
            if m_next < m_prev {
                reward += task.shaping_coeff * (m_prev - m_next);
            }
        }
    }
    reward
}

/// Ground-truth target detector over the current egocentric window.
pub fn oracle_target_visible(state: &GridWorldState) -> (bool, TargetPosition) {
    let Some(t) = state.target_index() else {
        return (false, TargetPosition::Absent);
    };
    let e = &state.entities[t];
    match state.window_coords_of(e.x, e.y) {
        Some((_, col)) => {
            let pos = if col < WINDOW / 3 {
                TargetPosition::Left
            } else if col < 2 * WINDOW / 3 {
                TargetPosition::Middle
            } else {
                TargetPosition::Right
            };
            (true, pos)
        }
        None => (false, TargetPosition::Absent),
    }
}

/// Scripted reactive expert. Uses ground-truth target position (it is a data
/// generator, not a policy under evaluation).
pub fn expert_action(state: &GridWorldState) -> usize {
    let Some(t) = state.target_index() else {
        return 5; // forward: wander
    };
    let e = &state.entities[t];
    let (dx, dy) = (e.x - state.agent_x, e.y - state.agent_y);
    let dist = chebyshev(state.agent_x, state.agent_y, e.x, e.y);
    let desired = heading_toward(dx, dy);
    let diff = signed_heading_diff(state.heading, desired);
    if dist <= 1 {
        if diff != 0 {
            return turn_action(diff);
        }
        return match state.task.kind {
            TaskKind::Combat(_) => 10, // attack
            _ => 11,                   // use
        };
    }
    if diff != 0 {
        return turn_action(diff);
    }
    // Facing the target: advance, jumping the gap when it is far and clear.
    let (hx, hy) = HEADING_VECS[state.heading as usize];
    if dist > 3 && state.cell_free(state.agent_x + 2 * hx, state.agent_y + 2 * hy) {
        return 9; // jump-forward
    }
    if state.cell_free(state.agent_x + hx, state.agent_y + hy) {
        return 5; // forward
    }
    8 // sidestep right around obstacles
}

fn heading_toward(dx: i32, dy: i32) -> u8 {
    let (sx, sy) = (dx.signum(), dy.signum());
    HEADING_VECS
        .iter()
        .position(|&(hx, hy)| (hx, hy) == (sx, sy))
        .unwrap_or(0) as u8
}

fn signed_heading_diff(from: u8, to: u8) -> i32 {
    let mut d = to as i32 - from as i32;
    if d > 4 {
        d -= 8;
    }
    if d < -4 {
        d += 8;
    }
    d
}

fn turn_action(diff: i32) -> usize {
    // Actions 0..=4 are turns by -2..=2.
    (diff.clamp(-2, 2) + 2) as usize
}

/// One trajectory-log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub episode: u32,
    pub step: u32,
    pub obs: GridObservation,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}
