//! Vehicle demand: explicit arrival lists, the line-oriented flow file and the
//! synthetic Gaussian generator.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::road_network::{Direction, Endpoint, LaneId, RoadNetwork, Turn};

const FLOW_HEADER: &str = "# sigimpute flow v1";
const WINDOW_STEPS: u64 = 60;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrival {
    pub entry_step: u64,
    pub entry_lane: LaneId,
    /// Full lane sequence, starting with `entry_lane` and ending on a boundary exit lane.
    pub route: Vec<LaneId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub horizon: u64,
    pub arrivals: Vec<Arrival>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFlowParams {
    /// Vehicles per minute per boundary entry approach.
    pub mean_rate: f64,
    pub std_rate: f64,
    pub horizon: u64,
    /// Probabilities of (left, through, right) at each intersection.
    pub turn_probs: [f64; 3],
}

impl Default for GaussianFlowParams {
    fn default() -> Self {
        Self { mean_rate: 6.0, std_rate: 2.0, horizon: 600, turn_probs: [0.1, 0.8, 0.1] }
    }
}

impl GaussianFlowParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidParameter(msg.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if !(self.mean_rate.is_finite() && self.mean_rate > 0.0) {
            return bad("mean_rate must be positive");
        }
        if !(self.std_rate.is_finite() && self.std_rate >= 0.0) {
            return bad("std_rate must be non-negative");
        }
        if self.turn_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return bad("turn_probs must be non-negative");
        }
        if (self.turn_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("turn_probs must sum to 1");
        }
        Ok(())
    }
}

impl FlowSpec {
    pub fn empty(horizon: u64) -> Self {
        Self { horizon, arrivals: Vec::new() }
    }

    pub fn validate(&self, net: &RoadNetwork) -> Result<(), SimError> {
        let mut prev = 0;
        for (n, a) in self.arrivals.iter().enumerate() {
            let bad = |msg: String| Err(SimError::Integrity(format!("arrival {n}: {msg}")));
            if a.entry_step < prev {
                return bad("arrivals are not sorted by entry_step".into());
            }
            prev = a.entry_step;
            if !net.lane(a.entry_lane)?.is_entry() {
                return bad(format!("lane {} is not a boundary entry lane", a.entry_lane));
            }
            if a.route.first() != Some(&a.entry_lane) {
                return bad("route does not start at the entry lane".into());
            }
            for pair in a.route.windows(2) {
                if !net.movement_exists(pair[0], pair[1]) {
                    return bad(format!("no movement {} -> {}", pair[0], pair[1]));
                }
            }
            let last = *a.route.last().expect("route starts with the entry lane");
            if !net.lane(last)?.is_exit() {
                return bad(format!("route ends on lane {last}, not a boundary exit"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{FLOW_HEADER}\nhorizon {}\n", self.horizon);
        for a in &self.arrivals {
            let route: Vec<String> = a.route.iter().map(|l| l.to_string()).collect();
            let _ = writeln!(out, "{} {} {}", a.entry_step, a.entry_lane, route.join(","));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut horizon = None;
        let mut arrivals = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |msg: &str| SimError::FlowFormat { line: line_no, msg: msg.to_string() };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "horizon" {
                let h = fields.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| err("bad horizon"))?;
                horizon = Some(h);
                continue;
            }
            if fields.len() != 3 {
                return Err(err("expected `entry_step entry_lane route`"));
            }
            let entry_step = fields[0].parse().map_err(|_| err("bad entry_step"))?;
            let entry_lane = fields[1].parse().map_err(|_| err("bad entry_lane"))?;
            let route = fields[2]
                .split(',')
                .map(|v| v.parse::<LaneId>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| err("bad route lane id"))?;
            arrivals.push(Arrival { entry_step, entry_lane, route });
        }
        let horizon = horizon.ok_or(SimError::FlowFormat { line: 0, msg: "missing horizon line".into() })?;
        Ok(Self { horizon, arrivals })
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn sample_turn(rng: &mut ChaCha8Rng, probs: &[f64; 3]) -> Turn {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (turn, p) in Turn::ALL.iter().zip(probs) {
        acc += p;
        if u < acc {
            return *turn;
        }
    }
    // rounding slack: fall back to the last turn with non-zero mass
    Turn::ALL.into_iter().rev().find(|t| probs[t.index()] > 0.0).unwrap_or(Turn::Through)
}

/// Lane route for a vehicle entering intersection `start` from `side`.
fn build_route(net: &RoadNetwork, start: usize, side: Direction, probs: &[f64; 3], rng: &mut ChaCha8Rng) -> Vec<LaneId> {
    // a random walk can revisit intersections; past this length only straight
    // moves are drawn, which always reach the boundary
    let max_turning = 2 * (net.rows + net.cols);
    let mut route = Vec::new();
    let (mut at, mut from_side, mut turn) = (start, side, sample_turn(rng, probs));
    loop {
        route.push(net.intersections[at].incoming[from_side.index() * 3 + turn.index()]);
        let exit = from_side.exit_side(turn);
        match net.intersections[at].arms[exit.index()] {
            None => {
                let road = net.outgoing_road(at, exit);
                route.push(road[rng.random_range(0..3)]);
                return route;
            }
            Some(next) => {
                turn = if route.len() >= max_turning { Turn::Through } else { sample_turn(rng, probs) };
                at = next;
                from_side = exit.opposite();
            }
        }
    }
}

pub fn generate_gaussian_flow(net: &RoadNetwork, params: &GaussianFlowParams, seed: u64) -> Result<FlowSpec, SimError> {
    params.validate()?;
    let normal = Normal::new(params.mean_rate, params.std_rate)
        .map_err(|e| SimError::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // boundary approaches: (intersection, arrival side) pairs with no neighbor on that side
    let approaches: Vec<(usize, Direction)> = net
        .intersections
        .iter()
        .flat_map(|i| Direction::ALL.into_iter().filter(|d| i.arms[d.index()].is_none()).map(move |d| (i.id, d)))
        .collect();

    let mut arrivals = Vec::new();
    let mut window_start = 0;
    while window_start < params.horizon {
        let window_end = (window_start + WINDOW_STEPS).min(params.horizon);
        for &(at, side) in &approaches {
            let count = normal.sample(&mut rng).max(0.0).round() as usize;
            for _ in 0..count {
                let entry_step = rng.random_range(window_start..window_end);
                let route = build_route(net, at, side, &params.turn_probs, &mut rng);
                arrivals.push(Arrival { entry_step, entry_lane: route[0], route });
            }
        }
        window_start = window_end;
    }
    arrivals.sort_by_key(|a| (a.entry_step, a.entry_lane));
    debug_assert!(arrivals.iter().all(|a| net.lanes[a.entry_lane].from == Endpoint::Boundary));
    Ok(FlowSpec { horizon: params.horizon, arrivals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road_network::{build_grid, LaneParams};

    fn net4() -> RoadNetwork {
        build_grid(4, 4, LaneParams::default()).unwrap()
    }

    #[test]
    fn zero_std_injects_exact_counts() {
        let net = net4();
        let p = GaussianFlowParams { mean_rate: 6.4, std_rate: 0.0, horizon: 600, turn_probs: [0.2, 0.6, 0.2] };
        let flow = generate_gaussian_flow(&net, &p, 3).unwrap();
        // 16 boundary approaches on a 4x4 grid, 10 windows, round(6.4) = 6
        assert_eq!(flow.arrivals.len(), 16 * 10 * 6);
        for w in 0..10u64 {
            let in_window = flow.arrivals.iter().filter(|a| a.entry_step / 60 == w).count();
            assert_eq!(in_window, 16 * 6);
        }
    }

    #[test]
    fn through_only_routes_are_straight() {
        let net = net4();
        let p = GaussianFlowParams { turn_probs: [0.0, 1.0, 0.0], ..Default::default() };
        let flow = generate_gaussian_flow(&net, &p, 11).unwrap();
        assert!(!flow.arrivals.is_empty());
        for a in &flow.arrivals {
            // every non-exit lane is a through lane and the route crosses the grid
            for &l in &a.route[..a.route.len() - 1] {
                assert_eq!(net.lanes[l].turn, Turn::Through);
            }
            assert_eq!(a.route.len(), 5);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let net = net4();
        let p = GaussianFlowParams { mean_rate: 6.0, std_rate: 2.0, horizon: 600, turn_probs: [0.1, 0.8, 0.1] };
        let a = generate_gaussian_flow(&net, &p, 7).unwrap();
        let b = generate_gaussian_flow(&net, &p, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_gaussian_flow(&net, &p, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_flows_validate() {
        let net = build_grid(3, 2, LaneParams::default()).unwrap();
        let p = GaussianFlowParams { turn_probs: [0.3, 0.4, 0.3], ..Default::default() };
        let flow = generate_gaussian_flow(&net, &p, 1).unwrap();
        flow.validate(&net).unwrap();
    }

    #[test]
    fn parameter_errors() {
        let net = net4();
        let bad_h = GaussianFlowParams { horizon: 0, ..Default::default() };
        assert!(matches!(generate_gaussian_flow(&net, &bad_h, 0), Err(SimError::InvalidParameter(_))));
        let bad_p = GaussianFlowParams { turn_probs: [0.5, 0.6, 0.0], ..Default::default() };
        assert!(generate_gaussian_flow(&net, &bad_p, 0).is_err());
    }

    #[test]
    fn flow_text_round_trip() {
        let net = build_grid(2, 2, LaneParams::default()).unwrap();
        let flow = generate_gaussian_flow(&net, &GaussianFlowParams::default(), 5).unwrap();
        let parsed = FlowSpec::parse(&flow.to_text()).unwrap();
        assert_eq!(parsed, flow);
        assert!(matches!(FlowSpec::parse("horizon 10\n1 2\n"), Err(SimError::FlowFormat { line: 2, .. })));
    }

    #[test]
    fn validation_rejects_broken_routes() {
        let net = build_grid(1, 1, LaneParams::default()).unwrap();
        let entry = net.intersections[0].incoming[1]; // N, through
        let exit_wrong = net.outgoing_road(0, Direction::E)[0];
        let flow = FlowSpec { horizon: 10, arrivals: vec![Arrival { entry_step: 0, entry_lane: entry, route: vec![entry, exit_wrong] }] };
        assert!(flow.validate(&net).is_err());
        let exit = net.outgoing_road(0, Direction::S)[1];
        let ok = FlowSpec { horizon: 10, arrivals: vec![Arrival { entry_step: 0, entry_lane: entry, route: vec![entry, exit] }] };
        ok.validate(&net).unwrap();
    }
}
