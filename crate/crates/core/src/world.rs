//! Grid geometry, robot roster and the deterministic motion model.
//!
//! Positions are continuous metres with the origin at the lower-left corner
//! of cell `(0, 0)`. `+x` runs along the `i` index and `+y` (north) along `j`.

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensing::SensorSpec;

/// Slack used when testing positions against the outer grid boundary.
const BOUNDS_EPS: f64 = 1e-9;
/// Two crossing times closer than this are treated as a corner crossing.
const CORNER_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("position ({x:.3}, {y:.3}) lies outside the grid")]
    OutOfBounds { x: f64, y: f64 },
    #[error("motion ends in or crosses obstacle cell ({i}, {j})")]
    ObstacleCollision { i: usize, j: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid robot {id}: {reason}")]
    InvalidRobot { id: usize, reason: String },
    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("step {index} of the action sequence is invalid: {source}")]
pub struct RolloutError {
    pub index: usize,
    #[source]
    pub source: WorldError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub i: usize,
    pub j: usize,
}

impl Cell {
    pub const fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_x: usize,
    pub n_y: usize,
    /// Metres per cell edge.
    pub cell_size: f64,
}

impl GridSpec {
    pub fn new(n_x: usize, n_y: usize, cell_size: f64) -> Result<Self, WorldError> {
        let grid = Self { n_x, n_y, cell_size };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.n_x == 0 || self.n_y == 0 {
            return Err(WorldError::InvalidGrid(format!(
                "grid must have at least one cell, got {}x{}",
                self.n_x, self.n_y
            )));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(WorldError::InvalidGrid(format!(
                "cell_size must be positive, got {}",
                self.cell_size
            )));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn width(&self) -> f64 {
        self.n_x as f64 * self.cell_size
    }

    pub fn height(&self) -> f64 {
        self.n_y as f64 * self.cell_size
    }

    /// Dense index of a cell, row-major over the `(n_x, n_y)` shape.
    #[inline]
    pub fn index(&self, cell: Cell) -> usize {
        cell.i * self.n_y + cell.j
    }

    #[inline]
    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index / self.n_y, index % self.n_y)
    }

    pub fn is_valid_cell(&self, i: isize, j: isize) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.n_x && (j as usize) < self.n_y
    }

    pub fn in_bounds(&self, p: Point) -> bool {
        p.x.is_finite()
            && p.y.is_finite()
            && p.x >= -BOUNDS_EPS
            && p.y >= -BOUNDS_EPS
            && p.x <= self.width() + BOUNDS_EPS
            && p.y <= self.height() + BOUNDS_EPS
    }

    pub fn cell_center(&self, cell: Cell) -> Point {
        Point::new(
            (cell.i as f64 + 0.5) * self.cell_size,
            (cell.j as f64 + 0.5) * self.cell_size,
        )
    }

    /// Cell containing `p`. Interior boundaries belong to the higher-index
    /// cell; the outer boundary belongs to the last cell.
    pub fn cell_of(&self, p: Point) -> Result<Cell, WorldError> {
        if !self.in_bounds(p) {
            return Err(WorldError::OutOfBounds { x: p.x, y: p.y });
        }
        let i = ((p.x / self.cell_size).floor().max(0.0) as usize).min(self.n_x - 1);
        let j = ((p.y / self.cell_size).floor().max(0.0) as usize).min(self.n_y - 1);
        Ok(Cell::new(i, j))
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.n_x).flat_map(move |i| (0..self.n_y).map(move |j| Cell::new(i, j)))
    }
}

/// Dense per-cell values over a grid, row-major over `(n_x, n_y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMap<T> {
    n_x: usize,
    n_y: usize,
    data: Vec<T>,
}

impl<T: Clone> CellMap<T> {
    pub fn filled(grid: &GridSpec, value: T) -> Self {
        Self {
            n_x: grid.n_x,
            n_y: grid.n_y,
            data: vec![value; grid.num_cells()],
        }
    }
}

impl<T> CellMap<T> {
    pub fn from_vec(grid: &GridSpec, data: Vec<T>) -> Option<Self> {
        (data.len() == grid.num_cells()).then_some(Self {
            n_x: grid.n_x,
            n_y: grid.n_y,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_x, self.n_y)
    }

    pub fn matches(&self, grid: &GridSpec) -> bool {
        self.n_x == grid.n_x && self.n_y == grid.n_y
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = (Cell, &T)> + '_ {
        let n_y = self.n_y;
        self.data
            .iter()
            .enumerate()
            .map(move |(k, v)| (Cell::new(k / n_y, k % n_y), v))
    }
}

impl<T> std::ops::Index<Cell> for CellMap<T> {
    type Output = T;
    fn index(&self, cell: Cell) -> &T {
        &self.data[cell.i * self.n_y + cell.j]
    }
}

impl<T> std::ops::IndexMut<Cell> for CellMap<T> {
    fn index_mut(&mut self, cell: Cell) -> &mut T {
        &mut self.data[cell.i * self.n_y + cell.j]
    }
}

pub type ObstacleMap = CellMap<bool>;

impl CellMap<bool> {
    pub fn from_cells(grid: &GridSpec, cells: impl IntoIterator<Item = Cell>) -> Self {
        let mut map = Self::filled(grid, false);
        for c in cells {
            map[c] = true;
        }
        map
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn set_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.iter().filter(|(_, &b)| b).map(|(c, _)| c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub occupancy: CellMap<bool>,
    pub obstacles: ObstacleMap,
}

impl GroundTruth {
    pub fn new(occupancy: CellMap<bool>, obstacles: ObstacleMap) -> Result<Self, WorldError> {
        if occupancy.shape() != obstacles.shape() {
            return Err(WorldError::InvalidGroundTruth(
                "occupancy and obstacle maps differ in shape".into(),
            ));
        }
        if let Some((c, _)) = occupancy
            .iter()
            .find(|(c, &occ)| occ && obstacles[*c])
        {
            return Err(WorldError::InvalidGroundTruth(format!(
                "cell ({}, {}) is both target and obstacle",
                c.i, c.j
            )));
        }
        Ok(Self { occupancy, obstacles })
    }

    pub fn target_count(&self) -> usize {
        self.occupancy.count()
    }

    pub fn targets(&self) -> impl Iterator<Item = Cell> + '_ {
        self.occupancy.set_cells()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotPose {
    pub position: Point,
}

impl RobotPose {
    pub const fn new(x: f64, y: f64) -> Self {
        Self {
            position: Point::new(x, y),
        }
    }

    pub fn is_valid(&self, grid: &GridSpec, obstacles: &ObstacleMap) -> bool {
        grid.cell_of(self.position)
            .map(|c| !obstacles[c])
            .unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSpec {
    pub id: usize,
    pub scout_sensor: Option<SensorSpec>,
    pub task_sensor: Option<SensorSpec>,
    pub start_pose: RobotPose,
}

impl RobotSpec {
    pub fn is_scout(&self) -> bool {
        self.scout_sensor.is_some()
    }

    pub fn is_task(&self) -> bool {
        self.task_sensor.is_some()
    }

    pub fn is_scout_only(&self) -> bool {
        self.is_scout() && !self.is_task()
    }

    pub fn role_name(&self) -> &'static str {
        match (self.is_scout(), self.is_task()) {
            (true, true) => "scout-and-task",
            (true, false) => "scout",
            (false, true) => "task",
            (false, false) => "none",
        }
    }
}

/// Compass headings plus `Stay`, declared in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Heading {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
    Stay,
}

impl Heading {
    pub const ALL: [Heading; 9] = [
        Heading::N,
        Heading::NE,
        Heading::E,
        Heading::SE,
        Heading::S,
        Heading::SW,
        Heading::W,
        Heading::NW,
        Heading::Stay,
    ];

    /// Unit displacement; diagonals are normalised.
    pub fn unit(self) -> (f64, f64) {
        use std::f64::consts::FRAC_1_SQRT_2 as D;
        match self {
            Heading::N => (0.0, 1.0),
            Heading::NE => (D, D),
            Heading::E => (1.0, 0.0),
            Heading::SE => (D, -D),
            Heading::S => (0.0, -1.0),
            Heading::SW => (-D, -D),
            Heading::W => (-1.0, 0.0),
            Heading::NW => (-D, D),
            Heading::Stay => (0.0, 0.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Heading::N => "N",
            Heading::NE => "NE",
            Heading::E => "E",
            Heading::SE => "SE",
            Heading::S => "S",
            Heading::SW => "SW",
            Heading::W => "W",
            Heading::NW => "NW",
            Heading::Stay => "STAY",
        }
    }
}

impl std::fmt::Display for Heading {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionPrimitive {
    pub heading: Heading,
    pub step_length: f64,
}

impl MotionPrimitive {
    pub const fn new(heading: Heading, step_length: f64) -> Self {
        Self {
            heading,
            step_length,
        }
    }

    pub const fn stay() -> Self {
        Self::new(Heading::Stay, 0.0)
    }

    /// Distance travelled when executing this primitive.
    pub fn length(&self) -> f64 {
        if self.heading == Heading::Stay {
            0.0
        } else {
            self.step_length
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub robot_id: usize,
    pub primitives: Vec<MotionPrimitive>,
}

impl ActionSequence {
    pub fn new(robot_id: usize, primitives: Vec<MotionPrimitive>) -> Self {
        Self {
            robot_id,
            primitives,
        }
    }

    pub fn from_headings(robot_id: usize, headings: &[Heading], step_length: f64) -> Self {
        Self::new(
            robot_id,
            headings
                .iter()
                .map(|&h| MotionPrimitive::new(h, step_length))
                .collect(),
        )
    }

    pub fn stay(robot_id: usize, horizon: usize) -> Self {
        Self::new(robot_id, vec![MotionPrimitive::stay(); horizon])
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn headings(&self) -> Vec<Heading> {
        self.primitives.iter().map(|p| p.heading).collect()
    }

    pub fn describe(&self) -> String {
        let names: Vec<&str> = self.primitives.iter().map(|p| p.heading.as_str()).collect();
        names.join(" ")
    }
}

/// Visits every grid cell whose interior the segment `a -> b` passes through,
/// in order from `a`'s cell to `b`'s cell. A segment that passes exactly
/// through a cell corner steps diagonally and does not visit the two cells
/// that only touch it at that corner.
pub fn walk_segment<F>(grid: &GridSpec, a: Point, b: Point, mut visit: F)
where
    F: FnMut(Cell) -> ControlFlow<()>,
{
    let (Ok(start), Ok(end)) = (grid.cell_of(a), grid.cell_of(b)) else {
        return;
    };
    if visit(start).is_break() || start == end {
        return;
    }
    let cs = grid.cell_size;
    let (ax, ay) = (a.x / cs, a.y / cs);
    let (dx, dy) = ((b.x - a.x) / cs, (b.y - a.y) / cs);
    let (mut i, mut j) = (start.i as isize, start.j as isize);
    let step_i: isize = if dx > 0.0 { 1 } else if dx < 0.0 { -1 } else { 0 };
    let step_j: isize = if dy > 0.0 { 1 } else if dy < 0.0 { -1 } else { 0 };
    let next_boundary = |c: isize, origin: f64, d: f64| -> f64 {
        if d > 0.0 {
            ((c + 1) as f64 - origin) / d
        } else if d < 0.0 {
            (c as f64 - origin) / d
        } else {
            f64::INFINITY
        }
    };
    let mut t_x = next_boundary(i, ax, dx);
    let mut t_y = next_boundary(j, ay, dy);
    let dt_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
    let dt_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };

    let max_steps = grid.n_x + grid.n_y + 2;
    for _ in 0..max_steps {
        let t = t_x.min(t_y);
        if t > 1.0 + BOUNDS_EPS {
            break;
        }
        if (t_x - t_y).abs() < CORNER_EPS {
            i += step_i;
            j += step_j;
            t_x += dt_x;
            t_y += dt_y;
        } else if t_x < t_y {
            i += step_i;
            t_x += dt_x;
        } else {
            j += step_j;
            t_y += dt_y;
        }
        if !grid.is_valid_cell(i, j) {
            break;
        }
        let cell = Cell::new(i as usize, j as usize);
        if visit(cell).is_break() || cell == end {
            return;
        }
    }
    // Boundary rounding can stop the walk one crossing short of `b`'s cell.
    let _ = visit(end);
}

/// Applies one motion primitive. STAY always succeeds from a valid pose.
pub fn step(
    pose: RobotPose,
    action: MotionPrimitive,
    grid: &GridSpec,
    obstacles: &ObstacleMap,
) -> Result<RobotPose, WorldError> {
    if action.heading == Heading::Stay {
        return Ok(pose);
    }
    let (ux, uy) = action.heading.unit();
    let mut next = Point::new(
        pose.position.x + ux * action.step_length,
        pose.position.y + uy * action.step_length,
    );
    if !grid.in_bounds(next) {
        return Err(WorldError::OutOfBounds {
            x: next.x,
            y: next.y,
        });
    }
    next.x = next.x.clamp(0.0, grid.width());
    next.y = next.y.clamp(0.0, grid.height());

    let mut blocked = None;
    walk_segment(grid, pose.position, next, |c| {
        if obstacles[c] {
            blocked = Some(c);
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    });
    match blocked {
        Some(c) => Err(WorldError::ObstacleCollision { i: c.i, j: c.j }),
        None => Ok(RobotPose { position: next }),
    }
}

/// Poses after each primitive of `seq`; pose `k` follows the first `k + 1` primitives.
pub fn rollout_poses(
    start: RobotPose,
    seq: &ActionSequence,
    grid: &GridSpec,
    obstacles: &ObstacleMap,
) -> Result<Vec<RobotPose>, RolloutError> {
    let mut poses = Vec::with_capacity(seq.len());
    let mut pose = start;
    for (index, &action) in seq.primitives.iter().enumerate() {
        pose = step(pose, action, grid, obstacles).map_err(|source| RolloutError { index, source })?;
        poses.push(pose);
    }
    Ok(poses)
}

/// Immutable description of one episode's world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub grid: GridSpec,
    pub ground_truth: GroundTruth,
    pub robots: Vec<RobotSpec>,
    pub step_length: f64,
    /// Uniform prior occupancy probability of every free cell.
    pub prior: f64,
}

impl Scenario {
    pub fn obstacles(&self) -> &ObstacleMap {
        &self.ground_truth.obstacles
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.grid.cells().filter(move |&c| !self.ground_truth.obstacles[c])
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        self.grid.validate()?;
        if !self.ground_truth.occupancy.matches(&self.grid)
            || !self.ground_truth.obstacles.matches(&self.grid)
        {
            return Err(WorldError::InvalidGroundTruth(
                "maps do not match grid dimensions".into(),
            ));
        }
        GroundTruth::new(
            self.ground_truth.occupancy.clone(),
            self.ground_truth.obstacles.clone(),
        )?;
        if !(self.step_length > 0.0 && self.step_length.is_finite()) {
            return Err(WorldError::InvalidGrid(format!(
                "step_length must be positive, got {}",
                self.step_length
            )));
        }
        if !(0.0..=1.0).contains(&self.prior) {
            return Err(WorldError::InvalidGrid(format!(
                "prior must be a probability, got {}",
                self.prior
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.robots {
            let bad = |reason: &str| WorldError::InvalidRobot {
                id: r.id,
                reason: reason.to_string(),
            };
            if !seen.insert(r.id) {
                return Err(bad("duplicate robot id"));
            }
            if !r.is_scout() && !r.is_task() {
                return Err(bad("robot must carry a scout sensor, a task sensor, or both"));
            }
            for s in r.scout_sensor.iter().chain(r.task_sensor.iter()) {
                s.validate().map_err(|e| bad(&e.to_string()))?;
            }
            if !r.start_pose.is_valid(&self.grid, self.obstacles()) {
                return Err(bad("start pose is out of bounds or inside an obstacle"));
            }
        }
        Ok(())
    }

    pub fn robot(&self, id: usize) -> Option<&RobotSpec> {
        self.robots.iter().find(|r| r.id == id)
    }
}
