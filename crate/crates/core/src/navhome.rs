//! Procedural multi-room object-goal navigation: recursive-partition house
//! layouts, SPL-based stop reward, geodesic shaping, a greedy shortest-path
//! expert, and noisy offline dataset generation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{RunRng, Stream};

pub const NAV_WINDOW: usize = 16;
pub const NAV_ACTIONS: usize = 4; // turn-left, turn-right, forward, stop
pub const ACTION_TURN_LEFT: usize = 0;
pub const ACTION_TURN_RIGHT: usize = 1;
pub const ACTION_FORWARD: usize = 2;
pub const ACTION_STOP: usize = 3;
pub const STEP_LIMIT: u32 = 200;

// Glyphs (disjoint from gridcraft's so observation encodings never collide).
pub const NGLYPH_FLOOR: u8 = 40;
pub const NGLYPH_WALL: u8 = 41;
pub const NGLYPH_VOID: u8 = 42;
pub const NGLYPH_TOILET: u8 = 43;
pub const NGLYPH_BED: u8 = 44;
pub const NGLYPH_SOFA: u8 = 45;
pub const NGLYPH_TABLE: u8 = 46;

#[derive(Debug, Error)]
pub enum NavError {
    #[error("layout size {0} below minimum 16")]
    TooSmall(usize),
    #[error("could not generate a connected layout within the retry bound")]
    Disconnected,
    #[error("goal {0:?} unreachable from ({1}, {2})")]
    Unreachable(GoalClass, i32, i32),
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("action index {0} out of range (0..{NAV_ACTIONS})")]
    BadAction(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoomType {
    Bathroom,
    Bedroom,
    LivingRoom,
    Kitchen,
    Hallway,
}

impl RoomType {
    pub fn word(self) -> &'static str {
        match self {
            RoomType::Bathroom => "bathroom",
            RoomType::Bedroom => "bedroom",
            RoomType::LivingRoom => "living",
            RoomType::Kitchen => "kitchen",
            RoomType::Hallway => "hallway",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GoalClass {
    Toilet,
    Bed,
    Sofa,
}

pub const GOALS: [GoalClass; 3] = [GoalClass::Toilet, GoalClass::Bed, GoalClass::Sofa];

impl GoalClass {
    pub fn glyph(self) -> u8 {
        match self {
            GoalClass::Toilet => NGLYPH_TOILET,
            GoalClass::Bed => NGLYPH_BED,
            GoalClass::Sofa => NGLYPH_SOFA,
        }
    }

    pub fn index(self) -> usize {
        match self {
            GoalClass::Toilet => 0,
            GoalClass::Bed => 1,
            GoalClass::Sofa => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GoalClass::Toilet => "toilet",
            GoalClass::Bed => "bed",
            GoalClass::Sofa => "sofa",
        }
    }

    /// Room type this goal class is normally placed in.
    pub fn home_room(self) -> RoomType {
        match self {
            GoalClass::Toilet => RoomType::Bathroom,
            GoalClass::Bed => RoomType::Bedroom,
            GoalClass::Sofa => RoomType::LivingRoom,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FurnitureClass {
    Toilet,
    Bed,
    Sofa,
    Table,
}

impl FurnitureClass {
    fn glyph(self) -> u8 {
        match self {
            FurnitureClass::Toilet => NGLYPH_TOILET,
            FurnitureClass::Bed => NGLYPH_BED,
            FurnitureClass::Sofa => NGLYPH_SOFA,
            FurnitureClass::Table => NGLYPH_TABLE,
        }
    }

    pub fn goal(self) -> Option<GoalClass> {
        match self {
            FurnitureClass::Toilet => Some(GoalClass::Toilet),
            FurnitureClass::Bed => Some(GoalClass::Bed),
            FurnitureClass::Sofa => Some(GoalClass::Sofa),
            FurnitureClass::Table => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Furniture {
    pub class: FurnitureClass,
    pub x: i32,
    pub y: i32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HouseLayout {
    pub seed: u64,
    pub size: usize,
    /// true = wall.
    pub walls: Vec<bool>,
    /// Room id per cell; walls carry usize::MAX.
    pub room_of: Vec<usize>,
    pub room_types: Vec<RoomType>,
    pub furniture: Vec<Furniture>,
    /// Candidate start cells (floor, not furniture).
    pub start_cells: Vec<(i32, i32)>,
}

impl HouseLayout {
    pub fn in_bounds(&self, x: i32, y: i32) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.size && (y as usize) < self.size
    }

    pub fn is_wall(&self, x: i32, y: i32) -> bool {
        !self.in_bounds(x, y) || self.walls[y as usize * self.size + x as usize]
    }

    pub fn furniture_at(&self, x: i32, y: i32) -> Option<&Furniture> {
        self.furniture.iter().find(|f| f.x == x && f.y == y)
    }

    /// Traversable by the agent.
    pub fn is_floor(&self, x: i32, y: i32) -> bool {
        self.in_bounds(x, y) && !self.is_wall(x, y) && self.furniture_at(x, y).is_none()
    }

    pub fn glyph_at(&self, x: i32, y: i32) -> u8 {
        if !self.in_bounds(x, y) {
            NGLYPH_VOID
        } else if self.is_wall(x, y) {
            NGLYPH_WALL
        } else if let Some(f) = self.furniture_at(x, y) {
            f.class.glyph()
        } else {
            NGLYPH_FLOOR
        }
    }

    pub fn instances(&self, goal: GoalClass) -> Vec<(i32, i32)> {
        self.furniture
            .iter()
            .filter(|f| f.class.goal() == Some(goal))
            .map(|f| (f.x, f.y))
            .collect()
    }
}

const MAX_LAYOUT_RETRIES: usize = 64;

pub fn generate_layout(seed: u64, size: usize) -> Result<HouseLayout, NavError> {
    if size < 16 {
        return Err(NavError::TooSmall(size));
    }
    let root = RunRng::new(seed);
    for attempt in 0..MAX_LAYOUT_RETRIES {
        let mut rng = root.stream("navhome-layout", attempt as u64);
        if let Some(layout) = try_generate(seed, size, &mut rng) {
            return Ok(layout);
        }
    }
    Err(NavError::Disconnected)
}

fn try_generate(seed: u64, size: usize, rng: &mut Stream) -> Option<HouseLayout> {
    let mut walls = vec![false; size * size];
    for i in 0..size {
        walls[i] = true;
        walls[(size - 1) * size + i] = true;
        walls[i * size] = true;
        walls[i * size + size - 1] = true;
    }

    // Recursive partition of the interior into rooms, adding a doorway per
    // split so the partition tree stays connected.
    let mut rects = vec![(1usize, 1usize, size - 1, size - 1)]; // x0, y0, x1, y1 (exclusive)
    let mut rooms = Vec::new();
    while let Some((x0, y0, x1, y1)) = rects.pop() {
        let (w, h) = (x1 - x0, y1 - y0);
        let splittable_w = w >= 7;
        let splittable_h = h >= 7;
        if (!splittable_w && !splittable_h) || (w <= 8 && h <= 8 && rng.bernoulli(0.3)) {
            rooms.push((x0, y0, x1, y1));
            continue;
        }
        let vertical = if splittable_w && splittable_h {
            w >= h
        } else {
            splittable_w
        };
        if vertical {
            let cut = x0 + 3 + rng.below(w - 6);
            let door = y0 + rng.below(h);
            for y in y0..y1 {
                if y != door {
                    walls[y * size + cut] = true;
                }
            }
            rects.push((x0, y0, cut, y1));
            rects.push((cut + 1, y0, x1, y1));
        } else {
            let cut = y0 + 3 + rng.below(h - 6);
            let door = x0 + rng.below(w);
            for x in x0..x1 {
                if x != door {
                    walls[cut * size + x] = true;
                }
            }
            rects.push((x0, y0, x1, cut));
            rects.push((x0, cut + 1, x1, y1));
        }
    }
    if rooms.len() < 3 {
        return None;
    }

    // Room ids per cell.
    let mut room_of = vec![usize::MAX; size * size];
    for (id, &(x0, y0, x1, y1)) in rooms.iter().enumerate() {
        for y in y0..y1 {
            for x in x0..x1 {
                if !walls[y * size + x] {
                    room_of[y * size + x] = id;
                }
            }
        }
    }
    // Doorway cells sit on former split lines and belong to no rect; attach
    // them to an adjacent room for completeness.
    for y in 1..size - 1 {
        for x in 1..size - 1 {
            let i = y * size + x;
            if !walls[i] && room_of[i] == usize::MAX {
                for (dx, dy) in [(1i32, 0i32), (-1, 0), (0, 1), (0, -1)] {
                    let j = ((y as i32 + dy) as usize) * size + (x as i32 + dx) as usize;
                    if !walls[j] && room_of[j] != usize::MAX {
                        room_of[i] = room_of[j];
                        break;
                    }
                }
            }
        }
    }

    // Room types: guarantee one bathroom, bedroom, and living room.
    let mut order: Vec<usize> = (0..rooms.len()).collect();
    rng.shuffle(&mut order);
    let mut room_types = vec![RoomType::Hallway; rooms.len()];
    let all = [
        RoomType::Bathroom,
        RoomType::Bedroom,
        RoomType::LivingRoom,
        RoomType::Kitchen,
        RoomType::Hallway,
    ];
    for (rank, &rid) in order.iter().enumerate() {
        room_types[rid] = match rank {
            0 => RoomType::Bathroom,
            1 => RoomType::Bedroom,
            2 => RoomType::LivingRoom,
            _ => *rng.choice(&all),
        };
    }

    // Furniture. Toilets only in bathrooms; beds/sofas predominantly in their
    // home room type (90%), otherwise anywhere; kitchens get a table.
    let mut furniture: Vec<Furniture> = Vec::new();
    let mut room_cells: Vec<Vec<(i32, i32)>> = vec![Vec::new(); rooms.len()];
    for y in 1..size - 1 {
        for x in 1..size - 1 {
            let i = y * size + x;
            if !walls[i] && room_of[i] != usize::MAX {
                room_cells[room_of[i]].push((x as i32, y as i32));
            }
        }
    }
    let place = |class: FurnitureClass,
                     rooms_ok: &[usize],
                     rng: &mut Stream,
                     furniture: &mut Vec<Furniture>|
     -> bool {
        for _ in 0..256 {
            let &rid = rng.choice(rooms_ok);
            if room_cells[rid].is_empty() {
                continue;
            }
            let &(x, y) = rng.choice(&room_cells[rid]);
            if furniture.iter().any(|f| f.x == x && f.y == y) {
                continue;
            }
            furniture.push(Furniture { class, x, y });
            return true;
        }
        false
    };

    let rooms_of_type = |t: RoomType, room_types: &[RoomType]| -> Vec<usize> {
        (0..rooms.len()).filter(|&r| room_types[r] == t).collect()
    };
    let every_room: Vec<usize> = (0..rooms.len()).collect();

    for &rid in &rooms_of_type(RoomType::Bathroom, &room_types) {
        if !place(FurnitureClass::Toilet, &[rid], rng, &mut furniture) {
            return None;
        }
    }
    for class in [FurnitureClass::Bed, FurnitureClass::Sofa] {
        let home = match class {
            FurnitureClass::Bed => rooms_of_type(RoomType::Bedroom, &room_types),
            _ => rooms_of_type(RoomType::LivingRoom, &room_types),
        };
        let copies = home.len().max(1);
        for _ in 0..copies {
            let pool = if rng.bernoulli(0.9) { &home } else { &every_room };
            if !place(class, pool, rng, &mut furniture) {
                return None;
            }
        }
    }
    for &rid in &rooms_of_type(RoomType::Kitchen, &room_types) {
        // Tables are decor; failure to place one is not fatal.
        let _ = place(FurnitureClass::Table, &[rid], rng, &mut furniture);
    }

    let layout = HouseLayout {
        seed,
        size,
        walls,
        room_of,
        room_types,
        furniture,
        start_cells: Vec::new(),
    };

    // Connectivity: every floor cell reachable from the first one.
    let floors: Vec<(i32, i32)> = (0..size as i32)
        .flat_map(|y| (0..size as i32).map(move |x| (x, y)))
        .filter(|&(x, y)| layout.is_floor(x, y))
        .collect();
    if floors.is_empty() {
        return None;
    }
    let dist = bfs_from(&layout, &[floors[0]], false);
    if floors
        .iter()
        .any(|&(x, y)| dist[y as usize * size + x as usize] == u32::MAX)
    {
        return None;
    }
    // Every goal class must be present and reachable.
    for goal in GOALS {
        if layout.instances(goal).is_empty() {
            return None;
        }
        let field = geodesic_field(&layout, goal);
        if floors
            .iter()
            .any(|&(x, y)| field[y as usize * size + x as usize] == u32::MAX)
        {
            return None;
        }
    }

    Some(HouseLayout {
        start_cells: floors,
        ..layout
    })
}

/// Multi-source BFS over floor cells (4-connectivity). Sources get distance 0;
/// when `through_sources` is false the sources themselves are not traversed
/// (furniture blocks movement but seeds the field).
fn bfs_from(layout: &HouseLayout, sources: &[(i32, i32)], through_sources: bool) -> Vec<u32> {
    let size = layout.size;
    let mut dist = vec![u32::MAX; size * size];
    let mut queue = std::collections::VecDeque::new();
    for &(x, y) in sources {
        dist[y as usize * size + x as usize] = 0;
        queue.push_back((x, y));
    }
    while let Some((x, y)) = queue.pop_front() {
        let d = dist[y as usize * size + x as usize];
        if d > 0 && !through_sources && !layout.is_floor(x, y) {
            continue;
        }
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (x + dx, y + dy);
            if !layout.in_bounds(nx, ny) || layout.is_wall(nx, ny) {
                continue;
            }
            let i = ny as usize * size + nx as usize;
            if dist[i] == u32::MAX && (layout.is_floor(nx, ny) || sources.contains(&(nx, ny))) {
                dist[i] = d + 1;
                queue.push_back((nx, ny));
            }
        }
    }
    dist
}

/// Distance field to the nearest instance of a goal class (instance cell = 0,
/// orthogonal neighbors = 1).
pub fn geodesic_field(layout: &HouseLayout, goal: GoalClass) -> Vec<u32> {
    bfs_from(layout, &layout.instances(goal), false)
}

/// Distance field to the nearest success cell (floor cell within Chebyshev 1
/// of an instance). Used by the expert and for the shortest-path length l.
pub fn success_field(layout: &HouseLayout, goal: GoalClass) -> Vec<u32> {
    let mut cells = Vec::new();
    for &(gx, gy) in &layout.instances(goal) {
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (gx + dx, gy + dy);
                if layout.is_floor(x, y) && !cells.contains(&(x, y)) {
                    cells.push((x, y));
                }
            }
        }
    }
    bfs_from(layout, &cells, true)
}

/// Exact shortest-path distance (in cells) from `cell` to the nearest instance
/// of `goal_class`. None when unreachable.
pub fn geodesic_distance(layout: &HouseLayout, cell: (i32, i32), goal: GoalClass) -> Option<u32> {
    let field = geodesic_field(layout, goal);
    let d = field[cell.1 as usize * layout.size + cell.0 as usize];
    if d == u32::MAX {
        None
    } else {
        Some(d)
    }
}

pub fn spl(p: f64, l: f64) -> f64 {
    debug_assert!(l > 0.0 && p > 0.0);
    l / l.max(p)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NavObservation {
    /// 16x16 glyph ids, egocentric: row 15 is the agent's row, forward is up.
    pub window: Vec<u8>,
    pub x: i32,
    pub y: i32,
    pub heading: u8,
    pub prev_action: Vec<u8>,
    pub goal: Vec<u8>,
}

impl NavObservation {
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
        for &g in &self.goal {
            eat(g as u64);
        }
        h
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub path_length: f64,
    pub shortest_path: f64,
    pub spl: f64,
    pub episode_return: f64,
}

// Heading 0=N, 1=E, 2=S, 3=W.
const NAV_HEADINGS: [(i32, i32); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NavState {
    pub layout: HouseLayout,
    pub goal: GoalClass,
    pub x: i32,
    pub y: i32,
    pub heading: u8,
    pub steps: u32,
    /// Cells actually traversed.
    pub moved: u32,
    /// Shortest path to the nearest success cell from the start, floored at 1.
    pub shortest: u32,
    pub prev_action: usize,
    pub done: bool,
    pub success: bool,
    pub episode_return: f64,
    geodesic: Vec<u32>,
    success_dist: Vec<u32>,
}

impl NavState {
    pub fn new(layout: &HouseLayout, goal: GoalClass, start: (i32, i32), heading: u8) -> Self {
        let geodesic = geodesic_field(layout, goal);
        let success_dist = success_field(layout, goal);
        let shortest = success_dist[start.1 as usize * layout.size + start.0 as usize].max(1);
        NavState {
            layout: layout.clone(),
            goal,
            x: start.0,
            y: start.1,
            heading,
            steps: 0,
            moved: 0,
            shortest,
            prev_action: NAV_ACTIONS,
            done: false,
            success: false,
            episode_return: 0.0,
            geodesic,
            success_dist,
        }
    }

    pub fn in_success_cell(&self) -> bool {
        self.layout
            .instances(self.goal)
            .iter()
            .any(|&(gx, gy)| (gx - self.x).abs().max((gy - self.y).abs()) <= 1)
    }

    fn geo_here(&self) -> u32 {
        self.geodesic[self.y as usize * self.layout.size + self.x as usize]
    }

    pub fn observe(&self) -> NavObservation {
        let mut window = vec![NGLYPH_VOID; NAV_WINDOW * NAV_WINDOW];
        let (hx, hy) = NAV_HEADINGS[self.heading as usize];
        let (rx, ry) = NAV_HEADINGS[((self.heading + 1) % 4) as usize];
        for row in 0..NAV_WINDOW {
            let f = (NAV_WINDOW - 1 - row) as i32;
            for col in 0..NAV_WINDOW {
                let r = col as i32 - (NAV_WINDOW as i32 / 2 - 1);
                let (x, y) = (self.x + f * hx + r * rx, self.y + f * hy + r * ry);
                window[row * NAV_WINDOW + col] = self.layout.glyph_at(x, y);
            }
        }
        let mut prev = vec![0u8; NAV_ACTIONS];
        if self.prev_action < NAV_ACTIONS {
            prev[self.prev_action] = 1;
        }
        let mut goal = vec![0u8; 3];
        goal[self.goal.index()] = 1;
        NavObservation {
            window,
            x: self.x,
            y: self.y,
            heading: self.heading,
            prev_action: prev,
            goal,
        }
    }

    pub fn result(&self) -> EpisodeResult {
        let p = self.moved.max(1) as f64;
        let l = self.shortest as f64;
        EpisodeResult {
            success: self.success,
            path_length: p,
            shortest_path: l,
            spl: if self.success { spl(p, l) } else { 0.0 },
            episode_return: self.episode_return,
        }
    }
}

pub fn nav_step(
    state: &mut NavState,
    action: usize,
) -> Result<(NavObservation, f64, bool), NavError> {
    if state.done {
        return Err(NavError::EpisodeDone);
    }
    if action >= NAV_ACTIONS {
        return Err(NavError::BadAction(action));
    }
    let mut reward = 0.0;
    match action {
        ACTION_TURN_LEFT => state.heading = (state.heading + 3) % 4,
        ACTION_TURN_RIGHT => state.heading = (state.heading + 1) % 4,
        ACTION_FORWARD => {
            let before = state.geo_here();
            let (dx, dy) = NAV_HEADINGS[state.heading as usize];
            let (nx, ny) = (state.x + dx, state.y + dy);
            if state.layout.is_floor(nx, ny) {
                state.x = nx;
                state.y = ny;
                state.moved += 1;
            }
            let after = state.geo_here();
            // Shaping: negative change in geodesic distance, 0 on collision.
            reward += before as f64 - after as f64;
        }
        ACTION_STOP => {
            state.done = true;
            if state.in_success_cell() {
                state.success = true;
                let p = state.moved.max(1) as f64;
                reward += 10.0 * spl(p, state.shortest as f64);
            }
        }
        _ => unreachable!(),
    }
    state.steps += 1;
    if state.steps >= STEP_LIMIT {
        state.done = true;
    }
    state.prev_action = action;
    state.episode_return += reward;
    Ok((state.observe(), reward, state.done))
}

/// Greedy shortest-path follower over the success-cell distance field.
pub fn expert_action(state: &NavState) -> Result<usize, NavError> {
    if state.in_success_cell() {
        return Ok(ACTION_STOP);
    }
    let size = state.layout.size;
    let here = state.success_dist[state.y as usize * size + state.x as usize];
    if here == u32::MAX {
        return Err(NavError::Unreachable(state.goal, state.x, state.y));
    }
    // Best neighbor in fixed N, E, S, W order for determinism.
    let mut best: Option<(u8, u32)> = None;
    for (h, &(dx, dy)) in NAV_HEADINGS.iter().enumerate() {
        let (nx, ny) = (state.x + dx, state.y + dy);
        if !state.layout.is_floor(nx, ny) {
            continue;
        }
        let d = state.success_dist[ny as usize * size + nx as usize];
        if d != u32::MAX && best.map_or(true, |(_, bd)| d < bd) {
            best = Some((h as u8, d));
        }
    }
    let Some((desired, _)) = best else {
        return Err(NavError::Unreachable(state.goal, state.x, state.y));
    };
    if desired == state.heading {
        Ok(ACTION_FORWARD)
    } else {
        let diff = (desired + 4 - state.heading) % 4;
        Ok(if diff == 3 {
            ACTION_TURN_LEFT
        } else {
            ACTION_TURN_RIGHT
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NavTransition {
    pub obs: NavObservation,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    /// Whether the action came from the random branch of the noise scheme.
    pub noisy: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NavTrajectory {
    pub layout_seed: u64,
    pub goal: GoalClass,
    pub start: (i32, i32),
    pub start_heading: u8,
    /// Fraction of the expert trajectory length at which noise was injected,
    /// drawn uniform on [0, 0.9].
    pub inject_frac: f64,
    /// Per-step probability of taking the random branch after injection,
    /// drawn uniform on [0, 0.5].
    pub noise_prob: f64,
    pub transitions: Vec<NavTransition>,
    pub result: EpisodeResult,
}

/// Roll one episode, following the expert until the injection step, then
/// taking a random branch with probability `noise_prob`: stop 10%, the two
/// movement actions other than the expert's choice 45% each.
fn roll_noisy_episode(
    layout: &HouseLayout,
    goal: GoalClass,
    start: (i32, i32),
    heading: u8,
    inject_frac: f64,
    noise_prob: f64,
    rng: &mut Stream,
    branch_counts: Option<&mut [u64; NAV_ACTIONS]>,
) -> NavTrajectory {
    // Expert rollout length determines the injection step.
    let mut probe = NavState::new(layout, goal, start, heading);
    let mut expert_len = 0u32;
    while !probe.done {
        let a = expert_action(&probe).expect("generated layouts are connected");
        nav_step(&mut probe, a).unwrap();
        expert_len += 1;
    }
    let inject_at = (inject_frac * expert_len as f64).floor() as u32;

    let mut state = NavState::new(layout, goal, start, heading);
    let mut transitions = Vec::new();
    let mut counts_slot = branch_counts;
    while !state.done {
        let expert = expert_action(&state).expect("generated layouts are connected");
        let (action, noisy) = if state.steps >= inject_at && rng.bernoulli(noise_prob) {
            let a = random_branch(expert, rng);
            if let Some(counts) = counts_slot.as_deref_mut() {
                counts[a] += 1;
            }
            (a, true)
        } else {
            (expert, false)
        };
        let obs = state.observe();
        let (_, reward, done) = nav_step(&mut state, action).unwrap();
        transitions.push(NavTransition {
            obs,
            action,
            reward,
            done,
            noisy,
        });
    }
    NavTrajectory {
        layout_seed: layout.seed,
        goal,
        start,
        start_heading: heading,
        inject_frac,
        noise_prob,
        transitions,
        result: state.result(),
    }
}

/// Random branch: stop with probability 10%, otherwise one of the two
/// movement actions the expert did not choose, 45% each.
pub fn random_branch(expert: usize, rng: &mut Stream) -> usize {
    if rng.bernoulli(0.1) {
        return ACTION_STOP;
    }
    let movements: Vec<usize> = [ACTION_TURN_LEFT, ACTION_TURN_RIGHT, ACTION_FORWARD]
        .into_iter()
        .filter(|&a| a != expert)
        .collect();
    // When the expert chose stop all three movements remain; take two.
    if rng.bernoulli(0.5) {
        movements[0]
    } else {
        movements[1]
    }
}

#[derive(Debug, Default)]
pub struct DatasetStats {
    pub random_branch_counts: [u64; NAV_ACTIONS],
    pub inject_fracs: Vec<f64>,
}

/// Deterministic offline dataset: for each layout, goal class, and episode
/// index, one noisy trajectory per the quoted scheme (a drawn noise
/// probability of ~0 reduces to the pure expert trajectory).
pub fn generate_offline_dataset(
    layouts: &[HouseLayout],
    episodes_per_goal: usize,
    noise_seed: u64,
) -> (Vec<NavTrajectory>, DatasetStats) {
    let root = RunRng::new(noise_seed);
    let mut out = Vec::new();
    let mut stats = DatasetStats::default();
    for (li, layout) in layouts.iter().enumerate() {
        for goal in GOALS {
            for ep in 0..episodes_per_goal {
                let idx = ((li * 3 + goal.index()) * episodes_per_goal + ep) as u64;
                let mut rng = root.stream("navhome-dataset", idx);
                let &start = rng.choice(&layout.start_cells);
                let heading = rng.below(4) as u8;
                let inject_frac = rng.uniform_in(0.0, 0.9);
                let noise_prob = rng.uniform_in(0.0, 0.5);
                stats.inject_fracs.push(inject_frac);
                let traj = roll_noisy_episode(
                    layout,
                    goal,
                    start,
                    heading,
                    inject_frac,
                    noise_prob,
                    &mut rng,
                    Some(&mut stats.random_branch_counts),
                );
                out.push(traj);
            }
        }
    }
    (out, stats)
}
