//! Grid road networks: lanes, movements and the fixed 4-phase signal scheme.
//!
//! Every directed road between two nodes (an intersection or the network
//! boundary) carries three lanes, one per turn. A lane is identified by the
//! side of its downstream node it arrives on (`approach_dir`) and the turn its
//! vehicles make there. Exit roads towards the boundary use the same three-lane
//! layout so every intersection has 12 incoming and 12 outgoing lanes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::NetworkError;

pub type IntersectionId = usize;
pub type LaneId = usize;
pub type PhaseId = usize;

/// Number of signal phases per intersection.
pub const NUM_PHASES: usize = 4;
/// Lanes per intersection in each direction (4 arms x 3 turns).
pub const LANES_PER_INTERSECTION: usize = 12;

const NETWORK_FILE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    N,
    E,
    S,
    W,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::N, Direction::E, Direction::S, Direction::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn opposite(self) -> Direction {
        Direction::ALL[(self.index() + 2) % 4]
    }

    /// The side of an intersection a vehicle leaves through after arriving on
    /// `self` and making `turn` (right-hand traffic).
    pub fn exit_side(self, turn: Turn) -> Direction {
        // heading is the opposite of the arrival side; the exit side is the
        // heading after the turn (left is one step counter-clockwise in N,E,S,W)
        let heading = self.opposite();
        match turn {
            Turn::Through => heading,
            Turn::Left => Direction::ALL[(heading.index() + 3) % 4],
            Turn::Right => Direction::ALL[(heading.index() + 1) % 4],
        }
    }

    fn is_north_south(self) -> bool {
        matches!(self, Direction::N | Direction::S)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Turn {
    Left,
    Through,
    Right,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Left, Turn::Through, Turn::Right];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endpoint {
    Intersection(IntersectionId),
    Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaneParams {
    pub length_m: f64,
    pub free_flow_steps: u32,
    pub capacity: u32,
    pub sat_flow: u32,
}

impl Default for LaneParams {
    fn default() -> Self {
        Self { length_m: 300.0, free_flow_steps: 11, capacity: 40, sat_flow: 2 }
    }
}

impl LaneParams {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |field: &'static str| Err(NetworkError::InvalidLaneParam { field });
        if !(self.length_m.is_finite() && self.length_m > 0.0) {
            return bad("length_m");
        }
        if self.free_flow_steps == 0 {
            return bad("free_flow_steps");
        }
        if self.capacity == 0 {
            return bad("capacity");
        }
        if self.sat_flow == 0 {
            return bad("sat_flow");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    pub from: Endpoint,
    pub to: Endpoint,
    pub length_m: f64,
    pub free_flow_steps: u32,
    pub capacity: u32,
    pub sat_flow: u32,
    pub approach_dir: Direction,
    pub turn: Turn,
}

impl Lane {
    pub fn is_entry(&self) -> bool {
        self.from == Endpoint::Boundary
    }

    pub fn is_exit(&self) -> bool {
        self.to == Endpoint::Boundary
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Movement {
    pub in_lane: LaneId,
    pub out_lane: LaneId,
}

/// A set of simultaneously green movements. `movements` index into the owning
/// intersection's movement list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub id: PhaseId,
    pub movements: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: IntersectionId,
    pub grid_pos: (usize, usize),
    /// Ordered `[N, E, S, W] x [Left, Through, Right]` by arrival side.
    pub incoming: [LaneId; LANES_PER_INTERSECTION],
    /// Ordered `[N, E, S, W] x [Left, Through, Right]` by exit side.
    pub outgoing: [LaneId; LANES_PER_INTERSECTION],
    pub movements: Vec<Movement>,
    pub phases: Vec<Phase>,
    /// Neighbor on each side, `[N, E, S, W]`.
    pub arms: [Option<IntersectionId>; 4],
}

impl Intersection {
    pub fn neighbors(&self) -> Vec<IntersectionId> {
        self.arms.iter().flatten().copied().collect()
    }

    /// Movement indices of `phase` whose in-lane is `in_lane`.
    pub fn phase_movements_from(&self, phase: PhaseId, in_lane: LaneId) -> impl Iterator<Item = &Movement> {
        self.phases[phase]
            .movements
            .iter()
            .map(move |&m| &self.movements[m])
            .filter(move |m| m.in_lane == in_lane)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub rows: usize,
    pub cols: usize,
    pub lane_params: LaneParams,
    pub intersections: Vec<Intersection>,
    pub lanes: Vec<Lane>,
    pub entry_lanes: Vec<LaneId>,
    pub exit_lanes: Vec<LaneId>,
}

/// Versioned on-disk description of a grid network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    pub lane_params: LaneParams,
}

impl RoadNetwork {
    pub fn num_intersections(&self) -> usize {
        self.intersections.len()
    }

    pub fn intersection(&self, id: IntersectionId) -> Result<&Intersection, NetworkError> {
        self.intersections.get(id).ok_or(NetworkError::UnknownIntersection(id))
    }

    pub fn lane(&self, id: LaneId) -> Result<&Lane, NetworkError> {
        self.lanes.get(id).ok_or(NetworkError::UnknownLane(id))
    }

    /// Grid-adjacent intersections in `[N, E, S, W]` order, absent arms omitted.
    pub fn neighbors(&self, k: IntersectionId) -> Result<Vec<IntersectionId>, NetworkError> {
        Ok(self.intersection(k)?.neighbors())
    }

    pub fn are_adjacent(&self, a: IntersectionId, b: IntersectionId) -> bool {
        self.intersections
            .get(a)
            .map(|i| i.arms.contains(&Some(b)))
            .unwrap_or(false)
    }

    pub fn id_at(&self, row: usize, col: usize) -> Option<IntersectionId> {
        (row < self.rows && col < self.cols).then_some(row * self.cols + col)
    }

    /// The movement `in_lane -> out_lane`, if one exists.
    pub fn movement_exists(&self, in_lane: LaneId, out_lane: LaneId) -> bool {
        match self.lanes.get(in_lane).map(|l| l.to) {
            Some(Endpoint::Intersection(i)) => self.intersections[i]
                .movements
                .iter()
                .any(|m| m.in_lane == in_lane && m.out_lane == out_lane),
            _ => false,
        }
    }

    /// The three lanes of the road leaving intersection `i` through `side`,
    /// ordered Left, Through, Right.
    pub fn outgoing_road(&self, i: IntersectionId, side: Direction) -> [LaneId; 3] {
        let out = &self.intersections[i].outgoing;
        let base = side.index() * 3;
        [out[base], out[base + 1], out[base + 2]]
    }

    pub fn to_file(&self) -> NetworkFile {
        NetworkFile { version: NETWORK_FILE_VERSION, rows: self.rows, cols: self.cols, lane_params: self.lane_params }
    }

    pub fn from_file(file: &NetworkFile) -> Result<Self, NetworkError> {
        if file.version != NETWORK_FILE_VERSION {
            return Err(NetworkError::UnsupportedVersion(file.version));
        }
        build_grid(file.rows, file.cols, file.lane_params)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        let text = toml::to_string(&self.to_file()).map_err(|e| NetworkError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let text = std::fs::read_to_string(path)?;
        let file: NetworkFile = toml::from_str(&text).map_err(|e| NetworkError::Format(e.to_string()))?;
        Self::from_file(&file)
    }

    fn validate(&self) -> Result<(), NetworkError> {
        for lane in &self.lanes {
            let boundary_ends = [lane.from, lane.to].iter().filter(|e| **e == Endpoint::Boundary).count();
            if boundary_ends > 1 {
                return Err(NetworkError::Invalid(format!("lane {} has two boundary ends", lane.id)));
            }
        }
        for inter in &self.intersections {
            for m in &inter.movements {
                let (a, b) = (self.lane(m.in_lane)?, self.lane(m.out_lane)?);
                if a.to != Endpoint::Intersection(inter.id) || b.from != Endpoint::Intersection(inter.id) {
                    return Err(NetworkError::Invalid(format!(
                        "movement {}->{} does not pass through intersection {}",
                        m.in_lane, m.out_lane, inter.id
                    )));
                }
            }
            for (p, phase) in inter.phases.iter().enumerate() {
                if phase.id != p {
                    return Err(NetworkError::Invalid(format!("phase ids of {} are not 0..P-1", inter.id)));
                }
            }
            for (side, arm) in Direction::ALL.iter().zip(inter.arms) {
                if let Some(j) = arm {
                    if self.intersections[j].arms[side.opposite().index()] != Some(inter.id) {
                        return Err(NetworkError::Invalid(format!("asymmetric neighbors {} / {}", inter.id, j)));
                    }
                }
            }
        }
        Ok(())
    }
}

fn phase_contains(phase: PhaseId, approach: Direction, turn: Turn) -> bool {
    match turn {
        Turn::Right => true,
        Turn::Through => (phase == 0 && approach.is_north_south()) || (phase == 1 && !approach.is_north_south()),
        Turn::Left => (phase == 2 && approach.is_north_south()) || (phase == 3 && !approach.is_north_south()),
    }
}

/// Human-readable phase names, indexed by phase id.
pub const PHASE_NAMES: [&str; NUM_PHASES] = ["NS-Through", "EW-Through", "NS-Left", "EW-Left"];

pub fn build_grid(rows: usize, cols: usize, lane_params: LaneParams) -> Result<RoadNetwork, NetworkError> {
    if rows == 0 {
        return Err(NetworkError::InvalidDimension { field: "rows" });
    }
    if cols == 0 {
        return Err(NetworkError::InvalidDimension { field: "cols" });
    }
    lane_params.validate()?;

    let n = rows * cols;
    let neighbor_of = |id: usize, side: Direction| -> Option<usize> {
        let (r, c) = (id / cols, id % cols);
        match side {
            Direction::N => r.checked_sub(1).map(|r| r * cols + c),
            Direction::S => (r + 1 < rows).then(|| (r + 1) * cols + c),
            Direction::W => c.checked_sub(1).map(|c| r * cols + c),
            Direction::E => (c + 1 < cols).then(|| r * cols + c + 1),
        }
    };

    let mut lanes: Vec<Lane> = Vec::new();
    let mut push_lane = |from: Endpoint, to: Endpoint, approach_dir: Direction, turn: Turn| -> LaneId {
        let id = lanes.len();
        lanes.push(Lane {
            id,
            from,
            to,
            length_m: lane_params.length_m,
            free_flow_steps: lane_params.free_flow_steps,
            capacity: lane_params.capacity,
            sat_flow: lane_params.sat_flow,
            approach_dir,
            turn,
        });
        id
    };

    // incoming[i][side*3 + turn]
    let mut incoming = vec![[usize::MAX; LANES_PER_INTERSECTION]; n];
    for (i, slots) in incoming.iter_mut().enumerate() {
        for side in Direction::ALL {
            let from = neighbor_of(i, side).map_or(Endpoint::Boundary, Endpoint::Intersection);
            for turn in Turn::ALL {
                slots[side.index() * 3 + turn.index()] = push_lane(from, Endpoint::Intersection(i), side, turn);
            }
        }
    }
    let mut exit_lanes = Vec::new();
    let mut outgoing = vec![[usize::MAX; LANES_PER_INTERSECTION]; n];
    for (i, slots) in outgoing.iter_mut().enumerate() {
        for side in Direction::ALL {
            for turn in Turn::ALL {
                let slot = side.index() * 3 + turn.index();
                slots[slot] = match neighbor_of(i, side) {
                    // the road into neighbor j arrives on j's opposite side
                    Some(j) => incoming[j][side.opposite().index() * 3 + turn.index()],
                    None => {
                        let id = push_lane(Endpoint::Intersection(i), Endpoint::Boundary, side.opposite(), turn);
                        exit_lanes.push(id);
                        id
                    }
                };
            }
        }
    }

    let mut intersections = Vec::with_capacity(n);
    for i in 0..n {
        let mut movements = Vec::with_capacity(36);
        let mut phases: Vec<Phase> = (0..NUM_PHASES).map(|id| Phase { id, movements: Vec::new() }).collect();
        for side in Direction::ALL {
            for turn in Turn::ALL {
                let in_lane = incoming[i][side.index() * 3 + turn.index()];
                let exit = side.exit_side(turn);
                for k in 0..3 {
                    let out_lane = outgoing[i][exit.index() * 3 + k];
                    let idx = movements.len();
                    movements.push(Movement { in_lane, out_lane });
                    for phase in phases.iter_mut() {
                        if phase_contains(phase.id, side, turn) {
                            phase.movements.push(idx);
                        }
                    }
                }
            }
        }
        let arms = Direction::ALL.map(|side| neighbor_of(i, side));
        intersections.push(Intersection {
            id: i,
            grid_pos: (i / cols, i % cols),
            incoming: incoming[i],
            outgoing: outgoing[i],
            movements,
            phases,
            arms,
        });
    }

    let entry_lanes = lanes.iter().filter(|l| l.is_entry()).map(|l| l.id).collect();
    let net = RoadNetwork { rows, cols, lane_params, intersections, lanes, entry_lanes, exit_lanes };
    net.validate()?;
    Ok(net)
}
