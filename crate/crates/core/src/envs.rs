//! Planning tasks: random mazes, 2-link-arm configuration spaces, and
//! shortest-path supervision.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, FormatError, Result};
use crate::ops::NO_ACTION;
use crate::tensor::Tensor;

pub const MAX_RETRIES: usize = 100;

/// Row/column offsets for north, west, south, east.
pub const MOVES: [(isize, isize); 4] = [(-1, 0), (0, -1), (1, 0), (0, 1)];

pub const UNREACHABLE: u16 = u16::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    pub size: usize,
    /// Row-major, `true` marks an obstacle.
    pub cells: Vec<bool>,
    pub goal: (usize, usize),
}

impl OccupancyGrid {
    pub fn open(size: usize, goal: (usize, usize)) -> Self {
        Self {
            size,
            cells: vec![false; size * size],
            goal,
        }
    }

    pub fn idx(&self, r: usize, c: usize) -> usize {
        r * self.size + c
    }

    pub fn is_free(&self, r: usize, c: usize) -> bool {
        !self.cells[self.idx(r, c)]
    }

    pub fn free_count(&self) -> usize {
        self.cells.iter().filter(|&&b| !b).count()
    }

    /// Neighbour of `(r, c)` along action `a`, if it lies on the grid.
    pub fn step(&self, (r, c): (usize, usize), a: usize) -> Option<(usize, usize)> {
        let (dr, dc) = MOVES[a];
        let nr = r.checked_add_signed(dr)?;
        let nc = c.checked_add_signed(dc)?;
        (nr < self.size && nc < self.size).then_some((nr, nc))
    }

    /// Occupancy and goal-indicator channels as a `2×m×m` tensor.
    pub fn observation(&self) -> Tensor {
        let m = self.size;
        let mut data = vec![0.0; 2 * m * m];
        for (i, &blocked) in self.cells.iter().enumerate() {
            if blocked {
                data[i] = 1.0;
            }
        }
        data[m * m + self.idx(self.goal.0, self.goal.1)] = 1.0;
        Tensor::from_vec(&[2, m, m], data).expect("observation shape is consistent")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanningSample {
    pub grid: OccupancyGrid,
    /// Action codes 0..4, [`NO_ACTION`] on obstacles and the goal.
    pub expert_action: Vec<u8>,
    /// BFS hops to the goal, [`UNREACHABLE`] on obstacles.
    pub distance: Vec<u16>,
}

/// Connected free components under 4-connectivity, largest first; ties keep
/// scan order.
fn components(size: usize, cells: &[bool]) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; cells.len()];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for start in 0..cells.len() {
        if cells[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = vec![start];
        label[start] = id;
        let mut head = 0;
        while head < members.len() {
            let cur = members[head];
            head += 1;
            let (r, c) = (cur / size, cur % size);
            for (dr, dc) in MOVES {
                let (Some(nr), Some(nc)) = (r.checked_add_signed(dr), c.checked_add_signed(dc)) else {
                    continue;
                };
                if nr >= size || nc >= size {
                    continue;
                }
                let n = nr * size + nc;
                if !cells[n] && label[n] == usize::MAX {
                    label[n] = id;
                    members.push(n);
                }
            }
        }
        comps.push(members);
    }
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    comps
}

/// Keeps the largest free component, blocks everything else and samples a
/// goal from it. `None` if fewer than two free cells survive.
fn finalize_grid<R: Rng>(size: usize, mut cells: Vec<bool>, rng: &mut R) -> Option<OccupancyGrid> {
    let comps = components(size, &cells);
    let largest = comps.first().filter(|c| c.len() >= 2)?;
    let mut keep = vec![false; cells.len()];
    for &i in largest {
        keep[i] = true;
    }
    for (cell, k) in cells.iter_mut().zip(&keep) {
        if !k {
            *cell = true;
        }
    }
    let goal = *largest.choose(rng).expect("component is non-empty");
    Some(OccupancyGrid {
        size,
        cells,
        goal: (goal / size, goal % size),
    })
}

pub fn generate_maze(size: usize, seed: u64, density: f64) -> Result<OccupancyGrid> {
    if size < 3 {
        return Err(Error::Config(format!("maze size must be at least 3, got {size}")));
    }
    if !(0.0..1.0).contains(&density) {
        return Err(Error::Config(format!(
            "obstacle density must lie in [0, 1), got {density}"
        )));
    }
    for attempt in 0..MAX_RETRIES as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let cells: Vec<bool> = (0..size * size).map(|_| rng.gen::<f64>() < density).collect();
        if let Some(grid) = finalize_grid(size, cells, &mut rng) {
            return Ok(grid);
        }
    }
    Err(Error::Degenerate { retries: MAX_RETRIES })
}

/// Breadth-first search from the goal; expert actions step to a neighbour
/// one hop closer, preferring north, west, south, east in that order.
pub fn bfs_expert(grid: &OccupancyGrid) -> PlanningSample {
    let n = grid.size * grid.size;
    let mut distance = vec![UNREACHABLE; n];
    let goal = grid.idx(grid.goal.0, grid.goal.1);
    distance[goal] = 0;
    let mut queue = VecDeque::from([grid.goal]);
    while let Some(cell) = queue.pop_front() {
        let d = distance[grid.idx(cell.0, cell.1)];
        for a in 0..4 {
            if let Some(nb) = grid.step(cell, a) {
                let ni = grid.idx(nb.0, nb.1);
                if grid.is_free(nb.0, nb.1) && distance[ni] == UNREACHABLE {
                    distance[ni] = d + 1;
                    queue.push_back(nb);
                }
            }
        }
    }
    let mut expert_action = vec![NO_ACTION; n];
    for r in 0..grid.size {
        for c in 0..grid.size {
            let i = grid.idx(r, c);
            if distance[i] == UNREACHABLE || i == goal {
                continue;
            }
            expert_action[i] = (0..4)
                .find(|&a| {
                    grid.step((r, c), a)
                        .is_some_and(|nb| distance[grid.idx(nb.0, nb.1)] == distance[i] - 1)
                })
                .expect("a reachable cell has a closer neighbour") as u8;
        }
    }
    PlanningSample {
        grid: grid.clone(),
        expert_action,
        distance,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmTask {
    pub l1: f64,
    pub l2: f64,
    pub obstacles: Vec<Circle>,
    pub bins: usize,
}

pub const ARM_LINK: f64 = 0.35;
pub const LINK_SAMPLES: usize = 32;

impl ArmTask {
    /// 0–5 circular obstacles with radius in [0.05, 0.15] and centres in the
    /// unit workspace around the base.
    pub fn random(bins: usize, seed: u64) -> Result<Self> {
        if bins != 18 && bins != 36 {
            return Err(Error::Config(format!("C-space bins must be 18 or 36, got {bins}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.gen_range(0..=5);
        let obstacles = (0..count)
            .map(|_| Circle {
                center: (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
                radius: rng.gen_range(0.05..0.15),
            })
            .collect();
        Ok(Self {
            l1: ARM_LINK,
            l2: ARM_LINK,
            obstacles,
            bins,
        })
    }

    /// Centre angle of bin `i`, covering [-π, π).
    pub fn bin_angle(&self, i: usize) -> f64 {
        -PI + (i as f64 + 0.5) * 2.0 * PI / self.bins as f64
    }

    /// Whether the arm at joint angles `(q1, q2)` touches an obstacle, testing
    /// `samples` equally spaced points (endpoints included) on each link.
    pub fn collides(&self, q1: f64, q2: f64, samples: usize) -> bool {
        let elbow = (self.l1 * q1.cos(), self.l1 * q1.sin());
        let tip = (elbow.0 + self.l2 * (q1 + q2).cos(), elbow.1 + self.l2 * (q1 + q2).sin());
        let hit = |p: (f64, f64)| {
            self.obstacles.iter().any(|o| {
                let (dx, dy) = (p.0 - o.center.0, p.1 - o.center.1);
                dx * dx + dy * dy <= o.radius * o.radius
            })
        };
        let denom = (samples.max(2) - 1) as f64;
        (0..samples).any(|k| {
            let t = k as f64 / denom;
            hit((elbow.0 * t, elbow.1 * t)) || hit((elbow.0 + (tip.0 - elbow.0) * t, elbow.1 + (tip.1 - elbow.1) * t))
        })
    }

    /// Raw collision map over `bins × bins` joint-angle cells (row = first joint).
    pub fn collision_map(&self, samples: usize) -> Vec<bool> {
        let b = self.bins;
        let mut out = vec![false; b * b];
        for i in 0..b {
            for j in 0..b {
                out[i * b + j] = self.collides(self.bin_angle(i), self.bin_angle(j), samples);
            }
        }
        out
    }
}

/// C-space occupancy grid for one arm task; no angular wrap-around.
pub fn generate_cspace(task: &ArmTask, seed: u64) -> Result<OccupancyGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    finalize_grid(task.bins, task.collision_map(LINK_SAMPLES), &mut rng).ok_or(Error::Degenerate { retries: 1 })
}

/// Random arm task plus its C-space grid, resampling the task when the
/// configuration space is (almost) fully blocked.
pub fn generate_cspace_sample(bins: usize, seed: u64) -> Result<(ArmTask, OccupancyGrid)> {
    for attempt in 0..MAX_RETRIES as u64 {
        let s = seed.wrapping_add(attempt);
        let task = ArmTask::random(bins, s)?;
        if let Ok(grid) = generate_cspace(&task, s) {
            return Ok((task, grid));
        }
    }
    Err(Error::Degenerate { retries: MAX_RETRIES })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Maze = 0,
    CSpace = 1,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Maze => "maze",
            Self::CSpace => "cspace",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub map_size: usize,
    pub samples: Vec<PlanningSample>,
}

const DATASET_MAGIC: [u8; 4] = *b"IDPD";
const DATASET_VERSION: u32 = 1;

impl Dataset {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let m = self.map_size;
        if m > u16::MAX as usize {
            return Err(Error::Config(format!("map size {m} does not fit the dataset format")));
        }
        let mut out = Vec::with_capacity(15 + self.samples.len() * (4 + 4 * m * m));
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        out.extend_from_slice(&(m as u16).to_le_bytes());
        out.push(self.kind as u8);
        for s in &self.samples {
            if s.grid.size != m {
                return Err(Error::Config(format!(
                    "sample of size {} in a size-{m} dataset",
                    s.grid.size
                )));
            }
            out.extend(s.grid.cells.iter().map(|&b| b as u8));
            out.extend_from_slice(&(s.grid.goal.0 as u16).to_le_bytes());
            out.extend_from_slice(&(s.grid.goal.1 as u16).to_le_bytes());
            out.extend_from_slice(&s.expert_action);
            for d in &s.distance {
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        let magic = r.array4()?;
        if magic != DATASET_MAGIC {
            return Err(FormatError::BadMagic {
                expected: DATASET_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(FormatError::Version(version));
        }
        let count = r.u32()? as usize;
        let m = r.u16()? as usize;
        let kind = match r.u8()? {
            0 => TaskKind::Maze,
            1 => TaskKind::CSpace,
            k => return Err(FormatError::Invalid(format!("task kind {k}"))),
        };
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let cells = r
                .bytes(m * m)?
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    x => Err(FormatError::Invalid(format!("occupancy byte {x}"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let goal = (r.u16()? as usize, r.u16()? as usize);
            if goal.0 >= m || goal.1 >= m {
                return Err(FormatError::Invalid(format!("goal {goal:?} outside a {m}×{m} map")));
            }
            let expert_action = r.bytes(m * m)?.to_vec();
            let distance = (0..m * m).map(|_| r.u16()).collect::<Result<Vec<_>, _>>()?;
            samples.push(PlanningSample {
                grid: OccupancyGrid { size: m, cells, goal },
                expert_action,
                distance,
            });
        }
        if r.pos != bytes.len() {
            return Err(FormatError::Invalid(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            kind,
            map_size: m,
            samples,
        })
    }
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let bytes = dataset.encode()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    Dataset::decode(&bytes).map_err(|kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    })
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(FormatError::Truncated(self.buf.len()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn array4(&mut self) -> Result<[u8; 4], FormatError> {
        Ok(self.bytes(4)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().expect("length checked")))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("length checked")))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("length checked")))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("length checked")))
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Decorrelated per-sample seed for sample `index` of split `split`.
pub fn sample_seed(seed: u64, split: u64, index: u64) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    mix(mix(mix(seed) ^ split) ^ index)
}

/// `count` labelled samples. Mazes use `size` and `density`; C-space maps
/// use `size` as the number of angle bins.
pub fn generate_dataset(
    kind: TaskKind,
    size: usize,
    density: f64,
    count: usize,
    seed: u64,
    split: u64,
) -> Result<Dataset> {
    use rayon::prelude::*;
    let samples = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let s = sample_seed(seed, split, i);
            let grid = match kind {
                TaskKind::Maze => generate_maze(size, s, density)?,
                TaskKind::CSpace => generate_cspace_sample(size, s)?.1,
            };
            Ok(bfs_expert(&grid))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        kind,
        map_size: size,
        samples,
    })
}

/// Follows `actions` greedily from `start` for at most `horizon` steps.
/// Moves off the grid or into obstacles end the rollout in failure.
pub fn rollout_reaches_goal(
    grid: &OccupancyGrid,
    actions: &[u8],
    start: (usize, usize),
    horizon: usize,
) -> Option<usize> {
    let mut cur = start;
    for steps in 0..=horizon {
        if cur == grid.goal {
            return Some(steps);
        }
        if steps == horizon {
            break;
        }
        let a = actions[grid.idx(cur.0, cur.1)];
        if a as usize >= 4 {
            return None;
        }
        let next = grid.step(cur, a as usize)?;
        if !grid.is_free(next.0, next.1) {
            return None;
        }
        cur = next;
    }
    None
}

/// Counts free non-goal cells whose expert rollout does not reach the goal in
/// exactly `distance` steps, or that break the distance-decrease property.
pub fn expert_violations(sample: &PlanningSample) -> usize {
    let g = &sample.grid;
    let mut bad = 0;
    for r in 0..g.size {
        for c in 0..g.size {
            let i = g.idx(r, c);
            let is_goal = (r, c) == g.goal;
            if !g.is_free(r, c) {
                bad += usize::from(sample.expert_action[i] != NO_ACTION || sample.distance[i] != UNREACHABLE);
                continue;
            }
            if is_goal {
                bad += usize::from(sample.expert_action[i] != NO_ACTION || sample.distance[i] != 0);
                continue;
            }
            let a = sample.expert_action[i];
            let decreases = (a as usize) < 4
                && g.step((r, c), a as usize)
                    .is_some_and(|nb| sample.distance[g.idx(nb.0, nb.1)] + 1 == sample.distance[i]);
            let steps = rollout_reaches_goal(g, &sample.expert_action, (r, c), g.size * g.size);
            bad += usize::from(!decreases || steps != Some(sample.distance[i] as usize));
        }
    }
    bad
}
