//! Deterministic discrete-time point-queue simulator.
//!
//! Each lane holds a FIFO list of traveling vehicles (ordered by the step they
//! reach the stop line) and a FIFO queue at the stop line. One call to
//! [`SimState::advance`] is one second of simulated time.

mod flow;
mod metrics;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub use flow::{generate_gaussian_flow, Arrival, FlowSpec, GaussianFlowParams};
pub use metrics::{episode_metrics, Metrics};

use crate::error::SimError;
use crate::road_network::{
    Endpoint, IntersectionId, LaneId, PhaseId, RoadNetwork, LANES_PER_INTERSECTION, NUM_PHASES,
};

pub type VehicleId = usize;

/// Where a vehicle currently is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LanePhase {
    /// Scheduled but not yet admitted onto its (full) entry lane.
    Pending,
    /// Moving along the lane; reaches the stop line at `ready_step`.
    Traveling { ready_step: u64 },
    Queued,
    Completed,
}

#[derive(Clone, Debug)]
pub struct Vehicle {
    pub id: VehicleId,
    pub route: Vec<LaneId>,
    pub route_index: usize,
    pub entry_step: u64,
    pub exit_step: Option<u64>,
    pub lane_phase: LanePhase,
}

impl Vehicle {
    pub fn lane(&self) -> LaneId {
        self.route[self.route_index]
    }

    /// Steps left before reaching the stop line, when traveling at `now`.
    pub fn remaining_steps(&self, now: u64) -> Option<u64> {
        match self.lane_phase {
            LanePhase::Traveling { ready_step } => Some(ready_step.saturating_sub(now)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct LaneState {
    traveling: VecDeque<(VehicleId, u64)>,
    queue: VecDeque<VehicleId>,
}

impl LaneState {
    fn occupancy(&self) -> usize {
        self.traveling.len() + self.queue.len()
    }
}

/// Local observation of one intersection: vehicles per incoming lane, ordered
/// `[N, E, S, W] x [Left, Through, Right]`, plus the current phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub lane_counts: [f64; LANES_PER_INTERSECTION],
    pub phase: PhaseId,
}

impl StateVector {
    pub const DIM: usize = LANES_PER_INTERSECTION + NUM_PHASES;

    pub fn zeros(phase: PhaseId) -> Self {
        Self { lane_counts: [0.0; LANES_PER_INTERSECTION], phase }
    }

    pub fn phase_onehot(&self) -> [f64; NUM_PHASES] {
        let mut v = [0.0; NUM_PHASES];
        v[self.phase] = 1.0;
        v
    }

    /// The 16-dimensional feature vector: lane counts followed by the phase one-hot.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::DIM);
        self.write_features(&mut out);
        out
    }

    pub fn write_features(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.lane_counts);
        out.extend_from_slice(&self.phase_onehot());
    }
}

#[derive(Clone, Debug)]
pub struct SimState {
    pub step: u64,
    lanes: Vec<LaneState>,
    vehicles: Vec<Vehicle>,
    pending: Vec<VecDeque<VehicleId>>,
    next_arrival: usize,
    phases: Vec<PhaseId>,
    active: usize,
    completed: usize,
    // end-of-step sums of queued vehicles on each intersection's incoming lanes
    queue_accum: Vec<u64>,
    visits: Vec<u64>,
    queue_log: Vec<u64>,
    // green[intersection][phase][incoming slot]
    green: Vec<[[bool; LANES_PER_INTERSECTION]; NUM_PHASES]>,
}

impl SimState {
    pub fn new(net: &RoadNetwork) -> Self {
        let green = net
            .intersections
            .iter()
            .map(|inter| {
                let mut table = [[false; LANES_PER_INTERSECTION]; NUM_PHASES];
                for (p, phase) in inter.phases.iter().enumerate() {
                    for &m in &phase.movements {
                        let in_lane = inter.movements[m].in_lane;
                        let slot = inter.incoming.iter().position(|&l| l == in_lane).expect("movement in-lane is incoming");
                        table[p][slot] = true;
                    }
                }
                table
            })
            .collect();
        let n = net.num_intersections();
        Self {
            step: 0,
            lanes: vec![LaneState::default(); net.lanes.len()],
            vehicles: Vec::new(),
            pending: vec![VecDeque::new(); net.lanes.len()],
            next_arrival: 0,
            phases: vec![0; n],
            active: 0,
            completed: 0,
            queue_accum: vec![0; n],
            visits: vec![0; n],
            queue_log: Vec::new(),
            green,
        }
    }

    pub fn phase(&self, i: IntersectionId) -> PhaseId {
        self.phases[i]
    }

    pub fn phases(&self) -> &[PhaseId] {
        &self.phases
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    /// Vehicles on the network (traveling or queued).
    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn completed_count(&self) -> usize {
        self.completed
    }

    pub fn pending_count(&self) -> usize {
        self.pending.iter().map(VecDeque::len).sum()
    }

    /// Vehicles whose scheduled entry step has been reached.
    pub fn injected_count(&self) -> usize {
        self.vehicles.len()
    }

    pub fn lane_count(&self, lane: LaneId) -> usize {
        self.lanes[lane].occupancy()
    }

    pub fn lane_queue_len(&self, lane: LaneId) -> usize {
        self.lanes[lane].queue.len()
    }

    pub fn lane_queue(&self, lane: LaneId) -> impl Iterator<Item = VehicleId> + '_ {
        self.lanes[lane].queue.iter().copied()
    }

    pub fn lane_traveling(&self, lane: LaneId) -> impl Iterator<Item = VehicleId> + '_ {
        self.lanes[lane].traveling.iter().map(|(v, _)| *v)
    }

    pub(crate) fn queue_accum(&self) -> &[u64] {
        &self.queue_accum
    }

    pub(crate) fn visits(&self) -> &[u64] {
        &self.visits
    }

    pub(crate) fn queue_log(&self) -> &[u64] {
        &self.queue_log
    }

    /// Places a vehicle directly at the stop line of `route[0]`, bypassing the
    /// flow. Used to script scenarios.
    pub fn spawn_queued(&mut self, net: &RoadNetwork, route: Vec<LaneId>) -> Result<VehicleId, SimError> {
        self.spawn(net, route, true)
    }

    /// Places a vehicle at the upstream end of `route[0]`.
    pub fn spawn_traveling(&mut self, net: &RoadNetwork, route: Vec<LaneId>) -> Result<VehicleId, SimError> {
        self.spawn(net, route, false)
    }

    fn spawn(&mut self, net: &RoadNetwork, route: Vec<LaneId>, queued: bool) -> Result<VehicleId, SimError> {
        let lane = *route.first().ok_or_else(|| SimError::Integrity("empty route".into()))?;
        let l = net.lane(lane)?;
        if self.lanes[lane].occupancy() >= l.capacity as usize {
            return Err(SimError::Integrity(format!("lane {lane} is full")));
        }
        let id = self.vehicles.len();
        let lane_phase = if queued {
            self.lanes[lane].queue.push_back(id);
            LanePhase::Queued
        } else {
            let ready_step = self.step + l.free_flow_steps as u64;
            self.lanes[lane].traveling.push_back((id, ready_step));
            LanePhase::Traveling { ready_step }
        };
        if let Endpoint::Intersection(i) = l.to {
            self.visits[i] += 1;
        }
        self.vehicles.push(Vehicle { id, route, route_index: 0, entry_step: self.step, exit_step: None, lane_phase });
        self.active += 1;
        Ok(id)
    }

    /// One simulation tick under `signals` (one phase id per intersection).
    pub fn advance(&mut self, net: &RoadNetwork, flow: &FlowSpec, signals: &[PhaseId]) -> Result<(), SimError> {
        if signals.len() != net.num_intersections() {
            return Err(SimError::SignalCount { got: signals.len(), expected: net.num_intersections() });
        }
        for (i, &p) in signals.iter().enumerate() {
            if p >= net.intersections[i].phases.len() {
                return Err(SimError::UnknownPhase { intersection: i, phase: p });
            }
        }
        self.phases.copy_from_slice(signals);
        let now = self.step;

        // (1) arrivals due this step join their entry lane's pending list, then
        // pending vehicles are admitted while the lane has room
        while let Some(a) = flow.arrivals.get(self.next_arrival) {
            if a.entry_step > now {
                break;
            }
            let id = self.vehicles.len();
            self.vehicles.push(Vehicle {
                id,
                route: a.route.clone(),
                route_index: 0,
                entry_step: a.entry_step,
                exit_step: None,
                lane_phase: LanePhase::Pending,
            });
            self.pending[a.entry_lane].push_back(id);
            self.next_arrival += 1;
        }
        for &lane in &net.entry_lanes {
            let l = &net.lanes[lane];
            while !self.pending[lane].is_empty() && self.lanes[lane].occupancy() < l.capacity as usize {
                let v = self.pending[lane].pop_front().expect("non-empty");
                self.enter_lane(net, v, lane, now);
                self.active += 1;
            }
        }

        // (2) travelers reaching the stop line join the queue
        for lane in self.lanes.iter_mut() {
            while lane.traveling.front().is_some_and(|&(_, ready)| ready <= now) {
                let (v, _) = lane.traveling.pop_front().expect("non-empty");
                lane.queue.push_back(v);
                self.vehicles[v].lane_phase = LanePhase::Queued;
            }
        }

        // (3) discharge green movements, head of line first
        for inter in &net.intersections {
            let green = self.green[inter.id][signals[inter.id]];
            for (slot, &in_lane) in inter.incoming.iter().enumerate() {
                if !green[slot] {
                    continue;
                }
                let sat_flow = net.lanes[in_lane].sat_flow;
                for _ in 0..sat_flow {
                    let Some(&v) = self.lanes[in_lane].queue.front() else { break };
                    let veh = &self.vehicles[v];
                    let next = *veh.route.get(veh.route_index + 1).ok_or_else(|| {
                        SimError::Integrity(format!("vehicle {v} route ends on non-exit lane {in_lane}"))
                    })?;
                    if net.lanes[next].from != Endpoint::Intersection(inter.id) {
                        return Err(SimError::Integrity(format!("vehicle {v}: lane {in_lane} does not feed lane {next}")));
                    }
                    if self.lanes[next].occupancy() >= net.lanes[next].capacity as usize {
                        break;
                    }
                    self.lanes[in_lane].queue.pop_front();
                    self.vehicles[v].route_index += 1;
                    self.enter_lane(net, v, next, now);
                }
            }
        }

        // (4) boundary exits always discharge
        for &lane in &net.exit_lanes {
            for _ in 0..net.lanes[lane].sat_flow {
                let Some(v) = self.lanes[lane].queue.pop_front() else { break };
                let veh = &mut self.vehicles[v];
                veh.exit_step = Some(now + 1);
                veh.lane_phase = LanePhase::Completed;
                self.active -= 1;
                self.completed += 1;
            }
        }

        let mut total_queued = 0;
        for inter in &net.intersections {
            let q: u64 = inter.incoming.iter().map(|&l| self.lanes[l].queue.len() as u64).sum();
            self.queue_accum[inter.id] += q;
            total_queued += q;
        }
        self.queue_log.push(total_queued);

        // (5)
        self.step += 1;
        Ok(())
    }

    fn enter_lane(&mut self, net: &RoadNetwork, v: VehicleId, lane: LaneId, now: u64) {
        let l = &net.lanes[lane];
        let ready_step = now + l.free_flow_steps as u64;
        self.lanes[lane].traveling.push_back((v, ready_step));
        self.vehicles[v].lane_phase = LanePhase::Traveling { ready_step };
        if let Endpoint::Intersection(i) = l.to {
            self.visits[i] += 1;
        }
    }

    /// Lane counts (traveling + queued) on the incoming lanes of `i` and its current phase.
    pub fn local_state(&self, net: &RoadNetwork, i: IntersectionId) -> Result<StateVector, SimError> {
        let inter = net.intersection(i)?;
        let mut lane_counts = [0.0; LANES_PER_INTERSECTION];
        for (c, &l) in lane_counts.iter_mut().zip(&inter.incoming) {
            *c = self.lanes[l].occupancy() as f64;
        }
        Ok(StateVector { lane_counts, phase: self.phases[i] })
    }

    /// Negated number of queued vehicles on the incoming lanes of `i`.
    pub fn local_reward(&self, net: &RoadNetwork, i: IntersectionId) -> Result<f64, SimError> {
        let inter = net.intersection(i)?;
        let queued: usize = inter.incoming.iter().map(|&l| self.lanes[l].queue.len()).sum();
        Ok(-(queued as f64))
    }

    /// Checks conservation, capacity and lane-membership invariants by scanning
    /// every vehicle record.
    pub fn check_integrity(&self, net: &RoadNetwork) -> Result<(), String> {
        let mut seen = vec![0u8; self.vehicles.len()];
        for (lane_id, lane) in self.lanes.iter().enumerate() {
            if lane.occupancy() > net.lanes[lane_id].capacity as usize {
                return Err(format!("lane {lane_id} over capacity: {}", lane.occupancy()));
            }
            for &(v, _) in &lane.traveling {
                seen[v] += 1;
                if !matches!(self.vehicles[v].lane_phase, LanePhase::Traveling { .. }) || self.vehicles[v].lane() != lane_id {
                    return Err(format!("vehicle {v} record disagrees with lane {lane_id} traveling list"));
                }
            }
            for &v in &lane.queue {
                seen[v] += 1;
                if self.vehicles[v].lane_phase != LanePhase::Queued || self.vehicles[v].lane() != lane_id {
                    return Err(format!("vehicle {v} record disagrees with lane {lane_id} queue"));
                }
            }
        }
        let (mut active, mut completed, mut pending) = (0, 0, 0);
        for v in &self.vehicles {
            match v.lane_phase {
                LanePhase::Traveling { .. } | LanePhase::Queued => {
                    active += 1;
                    if seen[v.id] != 1 {
                        return Err(format!("active vehicle {} appears on {} lanes", v.id, seen[v.id]));
                    }
                }
                LanePhase::Completed => {
                    completed += 1;
                    if seen[v.id] != 0 || v.exit_step.is_none_or(|e| e < v.entry_step) {
                        return Err(format!("completed vehicle {} is inconsistent", v.id));
                    }
                }
                LanePhase::Pending => {
                    pending += 1;
                    if seen[v.id] != 0 {
                        return Err(format!("pending vehicle {} is on a lane", v.id));
                    }
                }
            }
        }
        if active != self.active || completed != self.completed || pending != self.pending_count() {
            return Err(format!(
                "counters disagree: active {active}/{}, completed {completed}/{}, pending {pending}/{}",
                self.active,
                self.completed,
                self.pending_count()
            ));
        }
        if self.injected_count() != active + completed + pending {
            return Err("conservation violated".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road_network::{build_grid, Direction, LaneParams};

    fn one() -> RoadNetwork {
        build_grid(1, 1, LaneParams::default()).unwrap()
    }

    fn ns_through_route(net: &RoadNetwork) -> Vec<LaneId> {
        vec![net.intersections[0].incoming[1], net.outgoing_road(0, Direction::S)[1]]
    }

    #[test]
    fn empty_network_only_advances_clock() {
        let net = build_grid(2, 2, LaneParams::default()).unwrap();
        let flow = FlowSpec::empty(10);
        let mut s = SimState::new(&net);
        s.advance(&net, &flow, &[0; 4]).unwrap();
        assert_eq!(s.step, 1);
        assert_eq!(s.injected_count(), 0);
        for i in 0..4 {
            assert_eq!(s.local_state(&net, i).unwrap(), StateVector::zeros(0));
        }
    }

    #[test]
    fn single_discharge() {
        let net = one();
        let mut s = SimState::new(&net);
        let route = ns_through_route(&net);
        let v = s.spawn_queued(&net, route.clone()).unwrap();
        s.advance(&net, &FlowSpec::empty(10), &[0]).unwrap();
        assert_eq!(s.lane_queue_len(route[0]), 0);
        assert_eq!(s.vehicles()[v].lane(), route[1]);
        assert!(matches!(s.vehicles()[v].lane_phase, LanePhase::Traveling { .. }));
    }

    #[test]
    fn saturation_flow_limits_discharge() {
        let net = one();
        let mut s = SimState::new(&net);
        let route = ns_through_route(&net);
        for _ in 0..5 {
            s.spawn_queued(&net, route.clone()).unwrap();
        }
        s.advance(&net, &FlowSpec::empty(10), &[0]).unwrap();
        assert_eq!(s.lane_queue_len(route[0]), 3);
    }

    #[test]
    fn red_holds_the_queue() {
        let net = one();
        let mut s = SimState::new(&net);
        let route = ns_through_route(&net);
        s.spawn_queued(&net, route.clone()).unwrap();
        s.advance(&net, &FlowSpec::empty(10), &[1]).unwrap();
        assert_eq!(s.lane_queue_len(route[0]), 1);
        assert_eq!(s.local_reward(&net, 0).unwrap(), -1.0);
    }

    #[test]
    fn head_of_line_blocking() {
        let net = one();
        let mut s = SimState::new(&net);
        // a left-turner on the through lane is impossible; use the N-left lane and an EW-through phase
        let left = net.intersections[0].incoming[0];
        let route = vec![left, net.outgoing_road(0, Direction::E)[0]];
        s.spawn_queued(&net, route.clone()).unwrap();
        s.advance(&net, &FlowSpec::empty(10), &[0]).unwrap();
        assert_eq!(s.lane_queue_len(left), 1);
        s.advance(&net, &FlowSpec::empty(10), &[2]).unwrap();
        assert_eq!(s.lane_queue_len(left), 0);
    }

    #[test]
    fn local_state_counts_scripted_injection() {
        let net = one();
        let entry = net.intersections[0].incoming[4]; // E, through
        let exit = net.outgoing_road(0, Direction::W)[1];
        let flow = FlowSpec {
            horizon: 10,
            arrivals: (0..3).map(|_| Arrival { entry_step: 0, entry_lane: entry, route: vec![entry, exit] }).collect(),
        };
        flow.validate(&net).unwrap();
        let mut s = SimState::new(&net);
        s.advance(&net, &flow, &[2]).unwrap();
        let st = s.local_state(&net, 0).unwrap();
        assert_eq!(st.lane_counts[4], 3.0);
        assert_eq!(st.lane_counts.iter().sum::<f64>(), 3.0);
        assert_eq!(st.phase_onehot(), [0.0, 0.0, 1.0, 0.0]);
        assert_eq!(s.local_state(&net, 0).unwrap(), st);
    }

    #[test]
    fn reward_sums_queues_only() {
        let net = one();
        let mut s = SimState::new(&net);
        let inc = net.intersections[0].incoming;
        let through_exit = |side: Direction| net.outgoing_road(0, side.opposite())[0];
        for _ in 0..3 {
            s.spawn_queued(&net, vec![inc[1], through_exit(Direction::N)]).unwrap();
        }
        s.spawn_queued(&net, vec![inc[4], through_exit(Direction::E)]).unwrap();
        for _ in 0..2 {
            s.spawn_queued(&net, vec![inc[7], through_exit(Direction::S)]).unwrap();
        }
        // traveling vehicles do not count
        s.spawn_traveling(&net, vec![inc[10], through_exit(Direction::W)]).unwrap();
        assert_eq!(s.local_reward(&net, 0).unwrap(), -6.0);
    }

    #[test]
    fn entry_blocking_retries() {
        let params = LaneParams { capacity: 2, ..LaneParams::default() };
        let net = build_grid(1, 1, params).unwrap();
        let route = ns_through_route(&net);
        let flow = FlowSpec {
            horizon: 50,
            arrivals: (0..3).map(|_| Arrival { entry_step: 0, entry_lane: route[0], route: route.clone() }).collect(),
        };
        let mut s = SimState::new(&net);
        s.advance(&net, &flow, &[1]).unwrap();
        assert_eq!(s.pending_count(), 1);
        assert_eq!(s.active_count(), 2);
        s.check_integrity(&net).unwrap();
        while s.pending_count() > 0 {
            s.advance(&net, &flow, &[0]).unwrap();
            s.check_integrity(&net).unwrap();
        }
        // the late vehicle still counts from its scheduled step
        assert_eq!(s.vehicles()[2].entry_step, 0);
    }
}
