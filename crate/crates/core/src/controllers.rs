//! Control strategies: bind a policy to every intersection, run training
//! and evaluation episodes, and implement the model-based imaginary rollout.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::agents::{argmax, fixed_time_act, max_pressure_act, DqnAgent, DqnConfig, EpsilonSchedule, Experience, FixedTimePlan, QNetwork, Source};
use crate::error::{ControlError, ImputeError};
use crate::imputation::{sfm_impute, RewardModel, RewardSample};
use crate::nn::{Mlp, MlpCheckpoint};
use crate::observation::{neighbor_concat_state, neighbor_reward_sum, ObservationMask, NEIGHBOR_CONCAT_DIM};
use crate::road_network::{Endpoint, IntersectionId, LaneId, PhaseId, RoadNetwork, LANES_PER_INTERSECTION, NUM_PHASES};
use crate::traffic_sim::{episode_metrics, FlowSpec, Metrics, SimState, StateVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyId {
    FixFix,
    IdqnFix,
    IdqnNeighboring,
    IdqnMaxp,
    SdqnTransferred,
    IdqnIdqn,
    SdqnAll,
    SdqnModelBased,
}

impl StrategyId {
    pub const ALL: [StrategyId; 8] = [
        StrategyId::FixFix,
        StrategyId::IdqnFix,
        StrategyId::IdqnNeighboring,
        StrategyId::IdqnMaxp,
        StrategyId::SdqnTransferred,
        StrategyId::IdqnIdqn,
        StrategyId::SdqnAll,
        StrategyId::SdqnModelBased,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyId::FixFix => "fix-fix",
            StrategyId::IdqnFix => "idqn-fix",
            StrategyId::IdqnNeighboring => "idqn-neighboring",
            StrategyId::IdqnMaxp => "idqn-maxp",
            StrategyId::SdqnTransferred => "sdqn-transferred",
            StrategyId::IdqnIdqn => "idqn-idqn",
            StrategyId::SdqnAll => "sdqn-all",
            StrategyId::SdqnModelBased => "sdqn-model-based",
        }
    }

    pub fn is_learning(self) -> bool {
        self != StrategyId::FixFix
    }

    /// Strategies that label imputed transitions with the reward model.
    pub fn needs_reward_model(self) -> bool {
        matches!(self, StrategyId::IdqnIdqn | StrategyId::SdqnAll | StrategyId::SdqnModelBased)
    }

    pub fn is_shared(self) -> bool {
        matches!(self, StrategyId::SdqnTransferred | StrategyId::SdqnAll | StrategyId::SdqnModelBased)
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyId {
    type Err = ControlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| ControlError::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Simulator steps between decisions; signals are held in between.
    pub decision_interval: u64,
    pub dqn: DqnConfig,
    pub epsilon: EpsilonSchedule,
    /// Multiplier applied to lane counts before they reach a Q-network.
    pub count_scale: f64,
    pub rollout_rounds: usize,
    pub rollout_batch: usize,
    /// Learning rate of the online reward-model update.
    pub reward_model_lr: f64,
    /// Ablation: use stored environment rewards inside the rollout.
    pub rollout_true_rewards: bool,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            decision_interval: 10,
            dqn: DqnConfig::default(),
            epsilon: EpsilonSchedule::default(),
            count_scale: 1.0,
            rollout_rounds: 5,
            rollout_batch: 32,
            reward_model_lr: 1e-3,
            rollout_true_rewards: false,
            seed: 0,
        }
    }
}

/// Independent, reproducible seed for sub-component `k`.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHARED_SEED_SLOT: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Fixed,
    MaxPressure,
    /// Index into the controller's agent list; shared strategies bind every
    /// intersection to agent 0.
    Agent(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum View {
    Local,
    Concat,
}

#[derive(Clone, Debug)]
struct Pending {
    input: Vec<f64>,
    action: PhaseId,
    state: StateVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Train,
    Eval,
}

/// Per-run controller state: policy bindings, learners, imputation memory
/// and the exploration schedule.
#[derive(Clone, Debug)]
pub struct Controller {
    strategy: StrategyId,
    config: ControllerConfig,
    plan: FixedTimePlan,
    bindings: Vec<Binding>,
    views: Vec<View>,
    agents: Vec<DqnAgent>,
    reward_model: Option<RewardModel>,
    observed: Vec<bool>,
    /// Downstream intersection and incoming slot of every lane.
    lane_slot: Vec<Option<(IntersectionId, usize)>>,
    prev_observed: Vec<Option<StateVector>>,
    prev_imputed: Vec<Option<StateVector>>,
    pending: Vec<Option<Pending>>,
    epsilon: EpsilonSchedule,
    episodes_done: u32,
    recorded: Option<Vec<RewardSample>>,
    trace: Option<Vec<Vec<PhaseId>>>,
}

impl Controller {
    pub fn new(
        strategy: StrategyId,
        net: &RoadNetwork,
        mask: &ObservationMask,
        plan: FixedTimePlan,
        reward_model: Option<RewardModel>,
        config: ControllerConfig,
    ) -> Result<Self, ControlError> {
        let n = net.num_intersections();
        if mask.len() != n {
            return Err(ControlError::Config(format!("mask covers {} intersections, network has {n}", mask.len())));
        }
        if config.decision_interval == 0 {
            return Err(ControlError::Config("decision_interval must be positive".into()));
        }
        if !(config.count_scale.is_finite() && config.count_scale > 0.0) {
            return Err(ControlError::Config("count_scale must be positive".into()));
        }
        plan.validate(NUM_PHASES).map_err(ControlError::Config)?;
        if strategy.needs_reward_model() && reward_model.is_none() {
            return Err(ControlError::Config(format!("strategy {strategy} needs a pretrained reward model")));
        }
        let observed: Vec<bool> = (0..n).map(|i| mask.is_observed(i)).collect();
        let mut bindings = vec![Binding::Fixed; n];
        let mut views = vec![View::Local; n];
        let mut agents = Vec::new();
        if strategy.is_shared() {
            agents.push(DqnAgent::new(StateVector::DIM, config.dqn.clone(), derive_seed(config.seed, SHARED_SEED_SLOT))?);
            bindings.fill(Binding::Agent(0));
        } else if strategy.is_learning() {
            for i in 0..n {
                let own = || -> Result<DqnAgent, ControlError> {
                    let dim = if !observed[i] && strategy == StrategyId::IdqnNeighboring { NEIGHBOR_CONCAT_DIM } else { StateVector::DIM };
                    Ok(DqnAgent::new(dim, config.dqn.clone(), derive_seed(config.seed, i as u64))?)
                };
                bindings[i] = match (strategy, observed[i]) {
                    (_, true) | (StrategyId::IdqnIdqn, false) | (StrategyId::IdqnNeighboring, false) => {
                        agents.push(own()?);
                        Binding::Agent(agents.len() - 1)
                    }
                    (StrategyId::IdqnMaxp, false) => Binding::MaxPressure,
                    _ => Binding::Fixed,
                };
                if !observed[i] && strategy == StrategyId::IdqnNeighboring {
                    views[i] = View::Concat;
                }
            }
        }
        let mut lane_slot = vec![None; net.lanes.len()];
        for inter in &net.intersections {
            for (slot, &l) in inter.incoming.iter().enumerate() {
                lane_slot[l] = Some((inter.id, slot));
            }
        }
        Ok(Self {
            strategy,
            epsilon: config.epsilon,
            config,
            plan,
            bindings,
            views,
            agents,
            reward_model,
            observed,
            lane_slot,
            prev_observed: vec![None; n],
            prev_imputed: vec![None; n],
            pending: vec![None; n],
            episodes_done: 0,
            recorded: None,
            trace: None,
        })
    }

    pub fn strategy(&self) -> StrategyId {
        self.strategy
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn bindings(&self) -> &[Binding] {
        &self.bindings
    }

    pub fn agents(&self) -> &[DqnAgent] {
        &self.agents
    }

    pub fn agents_mut(&mut self) -> &mut [DqnAgent] {
        &mut self.agents
    }

    pub fn reward_model(&self) -> Option<&RewardModel> {
        self.reward_model.as_ref()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.value()
    }

    pub fn episodes_done(&self) -> u32 {
        self.episodes_done
    }

    /// Start capturing `(s, a, r)` of observed intersections during training.
    pub fn start_recording(&mut self) {
        self.recorded = Some(Vec::new());
    }

    pub fn take_recorded(&mut self) -> Vec<RewardSample> {
        self.recorded.take().unwrap_or_default()
    }

    /// Start capturing every decision (all intersections) of later episodes.
    pub fn start_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<Vec<PhaseId>> {
        self.trace.take().unwrap_or_default()
    }

    fn reset_episode_memory(&mut self) {
        self.prev_observed.fill(None);
        self.prev_imputed.fill(None);
        self.pending.fill(None);
    }

    fn encode(&self, s: &StateVector, out: &mut Vec<f64>) {
        out.extend(s.lane_counts.iter().map(|c| c * self.config.count_scale));
        out.extend_from_slice(&s.phase_onehot());
    }

    fn decode(&self, features: &[f64]) -> StateVector {
        let mut lane_counts = [0.0; LANES_PER_INTERSECTION];
        for (c, f) in lane_counts.iter_mut().zip(features) {
            *c = f / self.config.count_scale;
        }
        StateVector { lane_counts, phase: argmax(&features[LANES_PER_INTERSECTION..StateVector::DIM]) }
    }

    /// States as seen by the controller at a decision boundary: the true
    /// local state on observed intersections, the neighbor-mean imputation
    /// (from the previous boundary) elsewhere. Updates the imputation memory.
    fn perceive(&mut self, net: &RoadNetwork, sim: &SimState) -> Result<Vec<StateVector>, ControlError> {
        let n = net.num_intersections();
        let mut states = Vec::with_capacity(n);
        for i in 0..n {
            let phase = sim.phase(i);
            if self.observed[i] {
                states.push(sim.local_state(net, i)?);
                continue;
            }
            let neighbors: Vec<StateVector> = net.intersections[i]
                .neighbors()
                .into_iter()
                .filter_map(|j| self.prev_observed[j].clone())
                .collect();
            let imputed = match sfm_impute(&neighbors, phase) {
                Ok(s) => s,
                Err(ImputeError::Unavailable) => match &self.prev_imputed[i] {
                    Some(prev) => StateVector { lane_counts: prev.lane_counts, phase },
                    None => {
                        debug!("no neighbor history for intersection {i} at step {}; imputing zeros", sim.step);
                        StateVector::zeros(phase)
                    }
                },
                Err(e) => return Err(e.into()),
            };
            self.prev_imputed[i] = Some(imputed.clone());
            states.push(imputed);
        }
        for ((prev, &obs), s) in self.prev_observed.iter_mut().zip(&self.observed).zip(&states) {
            *prev = obs.then(|| s.clone());
        }
        Ok(states)
    }

    fn agent_input(&self, net: &RoadNetwork, sim: &SimState, mask: &ObservationMask, i: IntersectionId, s: &StateVector) -> Result<Vec<f64>, ControlError> {
        match self.views[i] {
            View::Local => {
                let mut v = Vec::with_capacity(StateVector::DIM);
                self.encode(s, &mut v);
                Ok(v)
            }
            View::Concat => {
                let mut v = neighbor_concat_state(sim, net, mask, i)?;
                for arm in v.chunks_mut(StateVector::DIM) {
                    arm[..LANES_PER_INTERSECTION].iter_mut().for_each(|c| *c *= self.config.count_scale);
                }
                Ok(v)
            }
        }
    }

    fn max_pressure(&self, net: &RoadNetwork, sim: &SimState, states: &[StateVector], k: IntersectionId) -> PhaseId {
        let inter = &net.intersections[k];
        let slot_of = |l: LaneId| inter.incoming.iter().position(|&x| x == l).expect("movement starts at an incoming lane");
        let mut q_in = Vec::with_capacity(inter.movements.len());
        let mut q_out = Vec::with_capacity(inter.movements.len());
        for m in &inter.movements {
            q_in.push(states[k].lane_counts[slot_of(m.in_lane)].round() as i64);
            let out = match (net.lanes[m.out_lane].to, self.lane_slot[m.out_lane]) {
                (Endpoint::Intersection(j), Some(_)) if self.observed[j] => sim.lane_count(m.out_lane) as i64,
                (Endpoint::Intersection(j), Some((_, slot))) => states[j].lane_counts[slot].round() as i64,
                _ => 0,
            };
            q_out.push(out);
        }
        max_pressure_act(&q_in, &q_out, &inter.phases)
    }

    /// Picks every intersection's phase for the next decision interval.
    /// Greedy (no RNG draws) unless `explore`.
    pub fn control_step(&mut self, net: &RoadNetwork, sim: &SimState, mask: &ObservationMask, explore: bool) -> Result<Vec<PhaseId>, ControlError> {
        let states = self.perceive(net, sim)?;
        let inputs = self.inputs(net, sim, mask, &states)?;
        self.select(net, sim, &states, &inputs, explore)
    }

    fn inputs(&self, net: &RoadNetwork, sim: &SimState, mask: &ObservationMask, states: &[StateVector]) -> Result<Vec<Vec<f64>>, ControlError> {
        (0..states.len())
            .map(|i| match self.bindings[i] {
                Binding::Agent(_) => self.agent_input(net, sim, mask, i, &states[i]),
                _ => Ok(Vec::new()),
            })
            .collect()
    }

    fn select(&mut self, net: &RoadNetwork, sim: &SimState, states: &[StateVector], inputs: &[Vec<f64>], explore: bool) -> Result<Vec<PhaseId>, ControlError> {
        let decision_index = sim.step / self.config.decision_interval;
        let eps = self.epsilon.value();
        let mut actions = Vec::with_capacity(states.len());
        for (i, input) in inputs.iter().enumerate() {
            let a = match self.bindings[i] {
                Binding::Fixed => fixed_time_act(&self.plan, decision_index),
                Binding::MaxPressure => self.max_pressure(net, sim, states, i),
                Binding::Agent(k) if explore => self.agents[k].act(input, eps)?,
                Binding::Agent(k) => self.agents[k].greedy(input)?,
            };
            actions.push(a);
        }
        if let Some(trace) = self.trace.as_mut() {
            trace.push(actions.clone());
        }
        Ok(actions)
    }

    /// Closes the transitions opened at the previous boundary and stores
    /// them. Returns the observed `(s, a, r)` tuples of this boundary.
    fn store_transitions(
        &mut self,
        net: &RoadNetwork,
        sim: &SimState,
        mask: &ObservationMask,
        inputs: &[Vec<f64>],
    ) -> Result<Vec<RewardSample>, ControlError> {
        let mut observed_samples = Vec::new();
        for (i, next_input) in inputs.iter().enumerate() {
            let Some(p) = self.pending[i].take() else { continue };
            let Binding::Agent(k) = self.bindings[i] else { continue };
            let (reward, source) = if self.observed[i] {
                let r = sim.local_reward(net, i)?;
                observed_samples.push(RewardSample { id: 0, intersection: i, state: p.state.clone(), action: p.action, reward: r });
                (r, Source::Observed)
            } else {
                match self.strategy {
                    StrategyId::IdqnNeighboring => (neighbor_reward_sum(sim, net, mask, i)?, Source::Imputed),
                    s if s.needs_reward_model() => {
                        let model = self.reward_model.as_ref().expect("checked at construction");
                        (model.infer(&p.state, p.action)?, Source::Imputed)
                    }
                    _ => continue,
                }
            };
            self.agents[k].remember(Experience {
                state: p.input,
                action: p.action,
                reward,
                next_state: next_input.clone(),
                source,
                intersection: i,
            });
        }
        if let Some(rec) = self.recorded.as_mut() {
            for s in &observed_samples {
                rec.push(RewardSample { id: rec.len(), ..s.clone() });
            }
        }
        Ok(observed_samples)
    }

    fn learn(&mut self, observed_samples: &[RewardSample]) -> Result<(), ControlError> {
        for agent in &mut self.agents {
            agent.train_step()?;
        }
        let has_missing = self.observed.iter().any(|o| !o);
        if self.strategy == StrategyId::SdqnModelBased && has_missing {
            let lr = self.config.reward_model_lr;
            if let Some(model) = self.reward_model.as_mut() {
                model.update(observed_samples, lr)?;
            }
            self.imaginary_rollout(self.config.rollout_rounds, self.config.rollout_batch)?;
        }
        Ok(())
    }

    /// Extra Q-updates on replayed transitions whose rewards are re-inferred
    /// by the current reward model. Only the replay buffer and the reward
    /// model are read. Returns the mean loss, or `None` when skipped.
    pub fn imaginary_rollout(&mut self, rounds: usize, batch_size: usize) -> Result<Option<f64>, ControlError> {
        if rounds == 0 || batch_size == 0 {
            return Ok(None);
        }
        if !self.strategy.is_shared() || self.agents.is_empty() {
            return Err(ControlError::Config(format!("imaginary rollout needs a shared network, strategy is {}", self.strategy)));
        }
        let Some(model) = self.reward_model.as_ref() else {
            return Err(ControlError::Config("imaginary rollout needs a reward model".into()));
        };
        if self.agents[0].buffer.is_empty() {
            warn!("imaginary rollout skipped: empty replay buffer");
            return Ok(None);
        }
        let n_obs = self.agents[0].buffer.count(Source::Observed);
        let n_imp = self.agents[0].buffer.count(Source::Imputed);
        let half = if n_obs == 0 { 0 } else if n_imp == 0 { batch_size } else { batch_size / 2 };
        let mut total = 0.0;
        for _ in 0..rounds {
            let agent = &mut self.agents[0];
            let mut batch = Vec::with_capacity(batch_size);
            if half > 0 {
                batch.extend(agent.sample_replay(half, Some(Source::Observed))?);
            }
            if batch_size > half {
                batch.extend(agent.sample_replay(batch_size - half, Some(Source::Imputed))?);
            }
            let rewards = if self.config.rollout_true_rewards {
                batch.iter().map(|e| e.reward).collect::<Vec<_>>()
            } else {
                let mut r = Vec::with_capacity(batch.len());
                for e in &batch {
                    r.push(model.infer(&self.decode(&e.state), e.action)?);
                }
                r
            };
            total += self.agents[0].update_with_rewards(&batch, &rewards)?;
        }
        Ok(Some(total / rounds as f64))
    }

    /// Runs one exploring episode, storing experiences and updating the
    /// learners at every decision boundary.
    pub fn train_episode(&mut self, net: &RoadNetwork, flow: &FlowSpec, mask: &ObservationMask) -> Result<Metrics, ControlError> {
        self.run_episode(net, flow, mask, Mode::Train)
    }

    /// Greedy episode without learning or exploration draws.
    pub fn evaluate(&mut self, net: &RoadNetwork, flow: &FlowSpec, mask: &ObservationMask) -> Result<Metrics, ControlError> {
        self.run_episode(net, flow, mask, Mode::Eval)
    }

    fn run_episode(&mut self, net: &RoadNetwork, flow: &FlowSpec, mask: &ObservationMask, mode: Mode) -> Result<Metrics, ControlError> {
        if self.strategy.needs_reward_model() && self.reward_model.is_none() {
            return Err(ControlError::Config(format!("strategy {} needs a pretrained reward model", self.strategy)));
        }
        self.reset_episode_memory();
        let mut sim = SimState::new(net);
        let mut signals = vec![0; net.num_intersections()];
        let dt = self.config.decision_interval;
        for step in 0..flow.horizon {
            if step % dt == 0 {
                let states = self.perceive(net, &sim)?;
                let inputs = self.inputs(net, &sim, mask, &states)?;
                if mode == Mode::Train {
                    let samples = self.store_transitions(net, &sim, mask, &inputs)?;
                    if step > 0 {
                        self.learn(&samples)?;
                    }
                }
                signals = self.select(net, &sim, &states, &inputs, mode == Mode::Train)?;
                if mode == Mode::Train {
                    for i in 0..signals.len() {
                        if matches!(self.bindings[i], Binding::Agent(_)) {
                            self.pending[i] = Some(Pending { input: inputs[i].clone(), action: signals[i], state: states[i].clone() });
                        }
                    }
                }
            }
            sim.advance(net, flow, &signals)?;
        }
        if mode == Mode::Train {
            // the transition opened at the last boundary ends at the horizon
            let states = self.perceive(net, &sim)?;
            let inputs = self.inputs(net, &sim, mask, &states)?;
            let samples = self.store_transitions(net, &sim, mask, &inputs)?;
            self.learn(&samples)?;
            self.epsilon.end_episode();
            self.episodes_done += 1;
            for agent in &mut self.agents {
                agent.end_episode(self.episodes_done);
            }
        }
        Ok(episode_metrics(&sim, flow.horizon))
    }

    /// Writes one Q-network checkpoint per agent, plus the reward model.
    pub fn save_checkpoints(&self, dir: &Path) -> Result<(), ControlError> {
        std::fs::create_dir_all(dir).map_err(|e| ControlError::Config(format!("{}: {e}", dir.display())))?;
        for (k, agent) in self.agents.iter().enumerate() {
            let layout = if agent.q.mlp.input_dim() == NEIGHBOR_CONCAT_DIM { "neighbor_concat[N,E,S,W](64)" } else { "local_state(16)" };
            agent.q.mlp.to_checkpoint(layout).save(&dir.join(self.agent_file(k)))?;
        }
        if let Some(model) = &self.reward_model {
            model.save(&dir.join("reward_model.json"))?;
        }
        Ok(())
    }

    /// Restores Q-networks (and the target copies) written by
    /// [`Controller::save_checkpoints`] for the same strategy and mask.
    pub fn load_checkpoints(&mut self, dir: &Path) -> Result<(), ControlError> {
        for k in 0..self.agents.len() {
            let mlp = Mlp::from_checkpoint(&MlpCheckpoint::load(&dir.join(self.agent_file(k)))?)?;
            let agent = &mut self.agents[k];
            if mlp.layer_sizes() != agent.q.mlp.layer_sizes() {
                return Err(ControlError::Config(format!("checkpoint {} has layers {:?}", self.agent_file(k), mlp.layer_sizes())));
            }
            agent.q = QNetwork { mlp };
            agent.sync_target();
        }
        let rm = dir.join("reward_model.json");
        if self.strategy.needs_reward_model() && rm.exists() {
            self.reward_model = Some(RewardModel::load(&rm)?);
        }
        Ok(())
    }

    fn agent_file(&self, k: usize) -> String {
        if self.strategy.is_shared() {
            "q_shared.json".to_string()
        } else {
            let i = self.bindings.iter().position(|&b| b == Binding::Agent(k)).expect("every agent is bound");
            format!("q_intersection_{i}.json")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road_network::{build_grid, LaneParams};
    use crate::traffic_sim::{generate_gaussian_flow, GaussianFlowParams};

    fn setup(rows: usize, cols: usize, horizon: u64) -> (RoadNetwork, FlowSpec) {
        let net = build_grid(rows, cols, LaneParams::default()).unwrap();
        let params = GaussianFlowParams { horizon, ..Default::default() };
        let flow = generate_gaussian_flow(&net, &params, 3).unwrap();
        (net, flow)
    }

    fn quick() -> ControllerConfig {
        ControllerConfig { dqn: DqnConfig { warmup: 10, ..Default::default() }, seed: 11, ..Default::default() }
    }

    fn ctrl(s: StrategyId, net: &RoadNetwork, mask: &ObservationMask) -> Controller {
        let rm = s.needs_reward_model().then(|| RewardModel::constant(-1.0));
        Controller::new(s, net, mask, FixedTimePlan::uniform(NUM_PHASES, 1), rm, quick()).unwrap()
    }

    #[test]
    fn names_round_trip() {
        for s in StrategyId::ALL {
            assert_eq!(s.name().parse::<StrategyId>().unwrap(), s);
        }
        assert!("nope".parse::<StrategyId>().is_err());
    }

    #[test]
    fn fix_fix_is_open_loop() {
        let (net, flow) = setup(2, 2, 200);
        let mask = ObservationMask::all_observed(4);
        let mut c = ctrl(StrategyId::FixFix, &net, &mask);
        let empty = SimState::new(&net);
        let mut busy = SimState::new(&net);
        for _ in 0..50 {
            busy.advance(&net, &flow, &[0; 4]).unwrap();
        }
        busy.step = 0;
        assert_eq!(c.control_step(&net, &empty, &mask, true).unwrap(), c.control_step(&net, &busy, &mask, true).unwrap());
        c.train_episode(&net, &flow, &mask).unwrap();
        assert!(c.agents().is_empty());
    }

    #[test]
    fn missing_reward_model_is_rejected() {
        let (net, _) = setup(2, 2, 10);
        let mask = ObservationMask::from_unobserved(4, [0]).unwrap();
        for s in [StrategyId::IdqnIdqn, StrategyId::SdqnAll, StrategyId::SdqnModelBased] {
            let r = Controller::new(s, &net, &mask, FixedTimePlan::uniform(4, 1), None, quick());
            assert!(matches!(r, Err(ControlError::Config(_))));
        }
    }

    #[test]
    fn bindings_follow_strategy() {
        let (net, _) = setup(2, 2, 10);
        let mask = ObservationMask::from_unobserved(4, [3]).unwrap();
        let c = ctrl(StrategyId::IdqnFix, &net, &mask);
        assert_eq!(c.bindings()[3], Binding::Fixed);
        assert_eq!(c.agents().len(), 3);
        let c = ctrl(StrategyId::IdqnMaxp, &net, &mask);
        assert_eq!(c.bindings()[3], Binding::MaxPressure);
        let c = ctrl(StrategyId::IdqnNeighboring, &net, &mask);
        assert_eq!(c.agents()[3].q.mlp.input_dim(), NEIGHBOR_CONCAT_DIM);
        let c = ctrl(StrategyId::SdqnAll, &net, &mask);
        assert_eq!(c.agents().len(), 1);
        assert!(c.bindings().iter().all(|&b| b == Binding::Agent(0)));
    }

    fn one_episode_buffer(s: StrategyId) -> Vec<(Source, IntersectionId)> {
        let (net, flow) = setup(4, 4, 200);
        let mask = ObservationMask::from_unobserved(16, [5]).unwrap();
        let mut c = ctrl(s, &net, &mask);
        c.train_episode(&net, &flow, &mask).unwrap();
        c.agents().iter().flat_map(|a| a.buffer.iter().map(|e| (e.source, e.intersection))).collect()
    }

    #[test]
    fn buffer_provenance() {
        let transferred = one_episode_buffer(StrategyId::SdqnTransferred);
        assert_eq!(transferred.len(), 15 * 20);
        assert!(transferred.iter().all(|&(s, i)| s == Source::Observed && i != 5));

        let all = one_episode_buffer(StrategyId::SdqnAll);
        assert_eq!(all.len(), 16 * 20);
        assert!(all.iter().all(|&(s, i)| (s == Source::Imputed) == (i == 5)));
        assert_eq!(all.iter().filter(|(s, _)| *s == Source::Imputed).count(), 20);
    }

    #[test]
    fn idqn_idqn_unobserved_agent_sees_only_imputed() {
        let (net, flow) = setup(2, 2, 200);
        let mask = ObservationMask::from_unobserved(4, [2]).unwrap();
        let mut c = ctrl(StrategyId::IdqnIdqn, &net, &mask);
        c.train_episode(&net, &flow, &mask).unwrap();
        let Binding::Agent(k) = c.bindings()[2] else { panic!() };
        assert!(c.agents()[k].buffer.iter().all(|e| e.source == Source::Imputed && e.intersection == 2));
        assert!(c.agents()[k].buffer.iter().all(|e| e.reward == -1.0));
    }

    #[test]
    fn shared_network_gives_identical_actions_for_identical_states() {
        let (net, _) = setup(3, 3, 10);
        let mask = ObservationMask::from_unobserved(9, [4]).unwrap();
        let mut c = ctrl(StrategyId::SdqnAll, &net, &mask);
        let sim = SimState::new(&net);
        // empty network, all phases 0: observed states and the zero imputation coincide
        let a = c.control_step(&net, &sim, &mask, false).unwrap();
        assert!(a.iter().all(|&x| x == a[0]));
    }

    #[test]
    fn collapse_without_missing_intersections() {
        let (net, flow) = setup(2, 2, 150);
        let mask = ObservationMask::all_observed(4);
        let trace = |s: StrategyId| {
            let mut c = ctrl(s, &net, &mask);
            c.start_trace();
            for _ in 0..2 {
                c.train_episode(&net, &flow, &mask).unwrap();
            }
            c.evaluate(&net, &flow, &mask).unwrap();
            c.take_trace()
        };
        let idqn = trace(StrategyId::IdqnFix);
        for s in [StrategyId::IdqnNeighboring, StrategyId::IdqnMaxp, StrategyId::IdqnIdqn] {
            assert_eq!(trace(s), idqn, "{s}");
        }
        let sdqn = trace(StrategyId::SdqnTransferred);
        for s in [StrategyId::SdqnAll, StrategyId::SdqnModelBased] {
            assert_eq!(trace(s), sdqn, "{s}");
        }
        assert_ne!(idqn, sdqn);
        assert_ne!(trace(StrategyId::FixFix), idqn);
    }

    #[test]
    fn training_is_reproducible() {
        let (net, flow) = setup(2, 2, 200);
        let mask = ObservationMask::from_unobserved(4, [1]).unwrap();
        let run = || {
            let mut c = ctrl(StrategyId::SdqnModelBased, &net, &mask);
            (0..2).map(|_| c.train_episode(&net, &flow, &mask).unwrap().avg_travel_time).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rollout_behaviour() {
        let (net, flow) = setup(2, 2, 100);
        let mask = ObservationMask::from_unobserved(4, [1]).unwrap();
        let mut c = ctrl(StrategyId::SdqnModelBased, &net, &mask);
        assert_eq!(c.imaginary_rollout(5, 8).unwrap(), None);
        c.train_episode(&net, &flow, &mask).unwrap();
        let before = c.agents()[0].q.clone();
        c.imaginary_rollout(0, 8).unwrap();
        assert_eq!(c.agents()[0].q, before);

        // frozen constant reward model, myopic targets: Q(s, a) is pulled to c
        let mut c = Controller::new(
            StrategyId::SdqnModelBased,
            &net,
            &mask,
            FixedTimePlan::uniform(4, 1),
            Some(RewardModel::constant(2.5)),
            ControllerConfig { dqn: DqnConfig { gamma: 0.0, learning_rate: 1e-3, warmup: 10, ..Default::default() }, ..quick() },
        )
        .unwrap();
        c.train_episode(&net, &flow, &mask).unwrap();
        for _ in 0..1000 {
            c.imaginary_rollout(1, 32).unwrap();
        }
        let agent = &c.agents()[0];
        let mut worst: f64 = 0.0;
        for e in agent.buffer.iter().take(40) {
            worst = worst.max((agent.q.q_values(&e.state).unwrap()[e.action] - 2.5).abs());
        }
        assert!(worst < 0.25, "max deviation {worst}");
    }

    #[test]
    fn maxpressure_uses_imputed_and_observed_queues() {
        let (net, _) = setup(1, 3, 10);
        let mask = ObservationMask::from_unobserved(3, [1]).unwrap();
        let mut c = ctrl(StrategyId::IdqnMaxp, &net, &mask);
        let sim = SimState::new(&net);
        let mut states: Vec<StateVector> = (0..3).map(|_| StateVector::zeros(0)).collect();
        // imputed east-west through demand at the middle intersection
        states[1].lane_counts[4] = 6.0;
        states[1].lane_counts[10] = 6.0;
        assert_eq!(c.max_pressure(&net, &sim, &states, 1), 1);
        c.start_trace();
        assert_eq!(c.control_step(&net, &sim, &mask, false).unwrap()[1], 0);
    }

    #[test]
    fn checkpoints_round_trip() {
        let (net, flow) = setup(2, 2, 100);
        let mask = ObservationMask::from_unobserved(4, [0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for s in [StrategyId::IdqnNeighboring, StrategyId::SdqnAll] {
            let mut c = ctrl(s, &net, &mask);
            c.train_episode(&net, &flow, &mask).unwrap();
            let path = dir.path().join(s.name());
            c.save_checkpoints(&path).unwrap();
            let mut fresh = ctrl(s, &net, &mask);
            fresh.load_checkpoints(&path).unwrap();
            for (a, b) in c.agents().iter().zip(fresh.agents()) {
                assert_eq!(a.q, b.q);
            }
        }
    }

    #[test]
    fn pretrain_collection_counts() {
        let net = build_grid(1, 2, LaneParams::default()).unwrap();
        let flow = generate_gaussian_flow(&net, &GaussianFlowParams { horizon: 600, ..Default::default() }, 1).unwrap();
        let mask = ObservationMask::from_unobserved(2, [1]).unwrap();
        let plan = FixedTimePlan::uniform(4, 1);
        let data = crate::imputation::collect_pretrain_samples(&net, &flow, &mask, 1, &plan, &quick()).unwrap();
        assert_eq!(data.len(), 60);
        assert!(data.train.iter().chain(&data.test).all(|s| s.intersection == 0));
        let again = crate::imputation::collect_pretrain_samples(&net, &flow, &mask, 1, &plan, &quick()).unwrap();
        assert_eq!(data, again);
    }
}
