//! Per-intersection decision policies: fixed-time plans, MaxPressure, and DQN
//! acting/learning with replay memory and epsilon-greedy exploration.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AgentError, NnError};
use crate::nn::{Loss, Mlp, Optimizer, OptimizerConfig};
use crate::road_network::{IntersectionId, Phase, PhaseId, RoadNetwork, NUM_PHASES};
use crate::traffic_sim::{episode_metrics, FlowSpec, Metrics, SimState};

/// Cyclic plan; durations are counted in decision intervals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedTimePlan {
    pub phase_durations: Vec<(PhaseId, u32)>,
}

impl FixedTimePlan {
    pub fn uniform(num_phases: usize, duration: u32) -> Self {
        Self { phase_durations: (0..num_phases).map(|p| (p, duration)).collect() }
    }

    pub fn cycle_length(&self) -> u64 {
        self.phase_durations.iter().map(|&(_, d)| d as u64).sum()
    }

    pub fn validate(&self, num_phases: usize) -> Result<(), String> {
        if self.phase_durations.iter().any(|&(_, d)| d == 0) {
            return Err("fixed-time durations must be at least 1".into());
        }
        for p in 0..num_phases {
            if !self.phase_durations.iter().any(|&(q, _)| q == p) {
                return Err(format!("fixed-time plan never serves phase {p}"));
            }
        }
        if self.phase_durations.iter().any(|&(q, _)| q >= num_phases) {
            return Err("fixed-time plan references an unknown phase".into());
        }
        Ok(())
    }
}

/// Phase active at the `decision_index`-th decision of the repeating cycle.
pub fn fixed_time_act(plan: &FixedTimePlan, decision_index: u64) -> PhaseId {
    let mut t = decision_index % plan.cycle_length();
    for &(phase, d) in &plan.phase_durations {
        if t < d as u64 {
            return phase;
        }
        t -= d as u64;
    }
    unreachable!("index reduced modulo the cycle length")
}

/// Runs one episode with `plan` at every intersection.
pub fn evaluate_fixed_plan(net: &RoadNetwork, flow: &FlowSpec, plan: &FixedTimePlan, decision_interval: u64) -> Result<Metrics, AgentError> {
    let mut sim = SimState::new(net);
    let mut signals = vec![0; net.num_intersections()];
    for step in 0..flow.horizon {
        if step % decision_interval == 0 {
            signals.fill(fixed_time_act(plan, step / decision_interval));
        }
        sim.advance(net, flow, &signals)?;
    }
    Ok(episode_metrics(&sim, flow.horizon))
}

/// Grid search over uniform-duration plans; the lowest average travel time
/// wins and ties go to the shorter duration.
pub fn tune_fixed_plan(net: &RoadNetwork, flow: &FlowSpec, candidate_durations: &[u32], decision_interval: u64) -> Result<FixedTimePlan, AgentError> {
    if candidate_durations.is_empty() || candidate_durations.contains(&0) {
        return Err(AgentError::InvalidCandidates);
    }
    let mut sorted = candidate_durations.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(f64, FixedTimePlan)> = None;
    for d in sorted {
        let plan = FixedTimePlan::uniform(NUM_PHASES, d);
        let att = evaluate_fixed_plan(net, flow, &plan, decision_interval)?.avg_travel_time;
        if best.as_ref().is_none_or(|(b, _)| att < *b) {
            best = Some((att, plan));
        }
    }
    Ok(best.expect("non-empty candidates").1)
}

/// Phase maximizing the summed `in - out` queue difference over its movements.
/// `queues_in` / `queues_out` are indexed by movement; ties go to the lowest id.
pub fn max_pressure_act(queues_in: &[i64], queues_out: &[i64], phases: &[Phase]) -> PhaseId {
    let mut best = (0, i64::MIN);
    for phase in phases {
        let pressure: i64 = phase.movements.iter().map(|&m| queues_in[m] - queues_out[m]).sum();
        if pressure > best.1 {
            best = (phase.id, pressure);
        }
    }
    best.0
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    pub mlp: Mlp,
}

impl QNetwork {
    pub fn new(input_dim: usize, hidden: &[usize], num_actions: usize, seed: u64) -> Result<Self, NnError> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(num_actions);
        Ok(Self { mlp: Mlp::new(&sizes, seed)? })
    }

    pub fn num_actions(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>, NnError> {
        self.mlp.forward(state)
    }

    pub fn greedy(&self, state: &[f64]) -> Result<PhaseId, NnError> {
        Ok(argmax(&self.q_values(state)?))
    }
}

/// Epsilon after `n` completed episodes is `max(min, initial * decay^n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpsilonSchedule {
    pub initial: f64,
    pub min: f64,
    pub decay: f64,
    #[serde(default)]
    pub episodes: u32,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { initial: 0.1, min: 0.01, decay: 0.995, episodes: 0 }
    }
}

impl EpsilonSchedule {
    pub fn value(&self) -> f64 {
        (self.initial * self.decay.powi(self.episodes as i32)).max(self.min)
    }

    pub fn end_episode(&mut self) {
        self.episodes += 1;
    }
}

/// Epsilon-greedy action. One uniform draw decides exploration; a second
/// draw picks the random phase.
pub fn dqn_act(q: &QNetwork, state: &[f64], epsilon: f64, rng: &mut impl Rng) -> Result<PhaseId, NnError> {
    if rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..q.num_actions()));
    }
    q.greedy(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Observed,
    Imputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: PhaseId,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub source: Source,
    /// Intersection the transition was recorded at.
    pub intersection: IntersectionId,
}

/// FIFO ring buffer of experiences.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: VecDeque<Experience>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { items: VecDeque::with_capacity(capacity.min(1 << 16)), capacity }
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items.iter()
    }

    pub fn count(&self, source: Source) -> usize {
        self.items.iter().filter(|e| e.source == source).count()
    }

    /// Uniform sampling with replacement, optionally restricted to one source.
    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng, source: Option<Source>) -> Result<Vec<Experience>, AgentError> {
        if self.items.is_empty() {
            return Err(AgentError::EmptyBuffer);
        }
        match source {
            None => Ok((0..batch_size).map(|_| self.items[rng.random_range(0..self.items.len())].clone()).collect()),
            Some(src) => {
                let idx: Vec<usize> = (0..self.items.len()).filter(|&i| self.items[i].source == src).collect();
                if idx.is_empty() {
                    return Err(AgentError::NoMatchingSource);
                }
                Ok((0..batch_size).map(|_| self.items[idx[rng.random_range(0..idx.len())]].clone()).collect())
            }
        }
    }
}

/// One regression step of `Q(s, a)` towards `reward + gamma * max_a' target(s', a')`.
/// Returns the pre-step loss.
pub fn dqn_update(q: &mut QNetwork, target: &QNetwork, batch: &[Experience], gamma: f64, opt: &mut Optimizer) -> Result<f64, AgentError> {
    let rewards: Vec<f64> = batch.iter().map(|e| e.reward).collect();
    dqn_update_with_rewards(q, target, batch, &rewards, gamma, opt)
}

/// As [`dqn_update`], with the rewards supplied separately from the batch.
pub fn dqn_update_with_rewards(
    q: &mut QNetwork,
    target: &QNetwork,
    batch: &[Experience],
    rewards: &[f64],
    gamma: f64,
    opt: &mut Optimizer,
) -> Result<f64, AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    assert_eq!(batch.len(), rewards.len());
    let mut inputs = Vec::with_capacity(batch.len() * q.mlp.input_dim());
    let mut targets = Vec::with_capacity(batch.len());
    let mut actions = Vec::with_capacity(batch.len());
    for (e, &r) in batch.iter().zip(rewards) {
        let next_max = if gamma == 0.0 {
            0.0
        } else {
            target.q_values(&e.next_state)?.into_iter().fold(f64::NEG_INFINITY, f64::max)
        };
        let y = r + gamma * next_max;
        if !y.is_finite() {
            return Err(AgentError::Divergence);
        }
        inputs.extend_from_slice(&e.state);
        targets.push(y);
        actions.push(e.action);
    }
    let loss = q
        .mlp
        .train_step(&inputs, Loss::Selected { outputs: &actions, targets: &targets }, opt)
        .map_err(|e| match e {
            NnError::Divergence => AgentError::Divergence,
            other => AgentError::Nn(other),
        })?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Experiences required before updates start.
    pub warmup: usize,
    /// Copy the online network into the target every this many episodes;
    /// `None` bootstraps from the online network itself.
    pub target_sync_episodes: Option<u32>,
    /// Multiplier applied to rewards inside the Bellman target.
    pub reward_scale: f64,
    /// Gradient steps per decision step.
    pub updates_per_step: usize,
    pub clip_norm: Option<f64>,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            learning_rate: 1e-4,
            gamma: 0.95,
            batch_size: 32,
            buffer_capacity: 10_000,
            warmup: 100,
            target_sync_episodes: Some(5),
            reward_scale: 1.0,
            updates_per_step: 1,
            clip_norm: None,
        }
    }
}

/// A Q-network with its target copy, replay memory, optimizer and RNG stream.
#[derive(Clone, Debug)]
pub struct DqnAgent {
    pub q: QNetwork,
    pub target: QNetwork,
    pub buffer: ReplayBuffer,
    pub opt: Optimizer,
    pub config: DqnConfig,
    rng: ChaCha8Rng,
}

impl DqnAgent {
    pub fn new(input_dim: usize, config: DqnConfig, seed: u64) -> Result<Self, AgentError> {
        let q = QNetwork::new(input_dim, &config.hidden, NUM_PHASES, seed)?;
        let opt = Optimizer::new(OptimizerConfig { clip_norm: config.clip_norm, ..OptimizerConfig::adam(config.learning_rate) })?;
        Ok(Self {
            target: q.clone(),
            q,
            buffer: ReplayBuffer::new(config.buffer_capacity),
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x0005_eed0_fac7),
            config,
        })
    }

    pub fn act(&mut self, state: &[f64], epsilon: f64) -> Result<PhaseId, AgentError> {
        Ok(dqn_act(&self.q, state, epsilon, &mut self.rng)?)
    }

    pub fn greedy(&self, state: &[f64]) -> Result<PhaseId, AgentError> {
        Ok(self.q.greedy(state)?)
    }

    pub fn remember(&mut self, e: Experience) {
        self.buffer.push(e);
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Draws from the agent's own buffer with the agent's RNG stream.
    pub fn sample_replay(&mut self, batch_size: usize, source: Option<Source>) -> Result<Vec<Experience>, AgentError> {
        self.buffer.sample(batch_size, &mut self.rng, source)
    }

    /// Replay updates for one decision step; `None` while warming up.
    pub fn train_step(&mut self) -> Result<Option<f64>, AgentError> {
        if self.buffer.len() < self.config.warmup.max(1) {
            return Ok(None);
        }
        let mut total = 0.0;
        for _ in 0..self.config.updates_per_step {
            let batch = self.buffer.sample(self.config.batch_size, &mut self.rng, None)?;
            let rewards: Vec<f64> = batch.iter().map(|e| e.reward * self.config.reward_scale).collect();
            total += self.update_on(&batch, &rewards)?;
        }
        Ok(Some(total / self.config.updates_per_step.max(1) as f64))
    }

    /// One update on an explicit batch with explicit (unscaled) rewards.
    pub fn update_with_rewards(&mut self, batch: &[Experience], rewards: &[f64]) -> Result<f64, AgentError> {
        let scaled: Vec<f64> = rewards.iter().map(|r| r * self.config.reward_scale).collect();
        self.update_on(batch, &scaled)
    }

    fn update_on(&mut self, batch: &[Experience], rewards: &[f64]) -> Result<f64, AgentError> {
        let gamma = self.config.gamma;
        match self.config.target_sync_episodes {
            Some(_) => dqn_update_with_rewards(&mut self.q, &self.target, batch, rewards, gamma, &mut self.opt),
            None => {
                let frozen = self.q.clone();
                dqn_update_with_rewards(&mut self.q, &frozen, batch, rewards, gamma, &mut self.opt)
            }
        }
    }

    pub fn sync_target(&mut self) {
        self.target.mlp.copy_params_from(&self.q.mlp);
    }

    /// Called once per finished episode (1-based count).
    pub fn end_episode(&mut self, episodes_done: u32) {
        if let Some(every) = self.config.target_sync_episodes {
            if every > 0 && episodes_done.is_multiple_of(every) {
                self.sync_target();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road_network::{build_grid, Direction, LaneParams};
    use crate::traffic_sim::{generate_gaussian_flow, GaussianFlowParams};

    #[test]
    fn fixed_time_cycle() {
        let plan = FixedTimePlan::uniform(4, 2);
        let seq: Vec<_> = (0..8).map(|i| fixed_time_act(&plan, i)).collect();
        assert_eq!(seq, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(fixed_time_act(&plan, 8), 0);
        let single = FixedTimePlan { phase_durations: vec![(2, 3)] };
        assert!((0..20).all(|i| fixed_time_act(&single, i) == 2));
        assert!(plan.validate(4).is_ok());
        assert!(single.validate(4).is_err());
    }

    #[test]
    fn tuning_singleton_and_errors() {
        let net = build_grid(2, 2, LaneParams::default()).unwrap();
        let flow = generate_gaussian_flow(&net, &GaussianFlowParams { horizon: 120, ..Default::default() }, 1).unwrap();
        assert_eq!(tune_fixed_plan(&net, &flow, &[1], 10).unwrap(), FixedTimePlan::uniform(4, 1));
        assert!(matches!(tune_fixed_plan(&net, &flow, &[], 10), Err(AgentError::InvalidCandidates)));
    }

    #[test]
    fn tuning_picks_the_grid_minimum() {
        // a north-south corridor: only NS-through demand
        let net = build_grid(3, 1, LaneParams::default()).unwrap();
        let params = GaussianFlowParams { mean_rate: 10.0, std_rate: 3.0, horizon: 600, turn_probs: [0.0, 1.0, 0.0] };
        let mut flow = generate_gaussian_flow(&net, &params, 5).unwrap();
        flow.arrivals.retain(|a| matches!(net.lanes[a.entry_lane].approach_dir, Direction::N | Direction::S));
        let candidates = [1, 2, 3, 4, 6];
        let chosen = tune_fixed_plan(&net, &flow, &candidates, 10).unwrap();
        let chosen_att = evaluate_fixed_plan(&net, &flow, &chosen, 10).unwrap().avg_travel_time;
        for d in candidates {
            let att = evaluate_fixed_plan(&net, &flow, &FixedTimePlan::uniform(4, d), 10).unwrap().avg_travel_time;
            assert!(chosen_att <= att);
        }
        assert_eq!(chosen, tune_fixed_plan(&net, &flow, &candidates, 10).unwrap());
    }

    fn brute_pressures(qin: &[i64], qout: &[i64], phases: &[Phase]) -> Vec<i64> {
        phases.iter().map(|p| p.movements.iter().map(|&m| qin[m] - qout[m]).sum()).collect()
    }

    #[test]
    fn max_pressure_cases() {
        let net = build_grid(1, 1, LaneParams::default()).unwrap();
        let inter = &net.intersections[0];
        let n = inter.movements.len();
        assert_eq!(max_pressure_act(&vec![0; n], &vec![0; n], &inter.phases), 0);

        // NS-through in-lanes carry 5 each
        let mut qin = vec![0; n];
        let ns_through = [inter.incoming[1], inter.incoming[7]];
        for (m, mv) in inter.movements.iter().enumerate() {
            if ns_through.contains(&mv.in_lane) {
                qin[m] = 5;
            }
        }
        let pressures = brute_pressures(&qin, &vec![0; n], &inter.phases);
        assert_eq!(pressures, vec![30, 0, 0, 0]);
        assert_eq!(max_pressure_act(&qin, &vec![0; n], &inter.phases), 0);

        // shifting every count by a constant leaves the choice alone
        let shifted_in: Vec<i64> = qin.iter().map(|q| q + 7).collect();
        assert_eq!(max_pressure_act(&shifted_in, &vec![7; n], &inter.phases), 0);
    }

    #[test]
    fn greedy_action_and_determinism() {
        let mut q = QNetwork::new(3, &[4], 4, 0).unwrap();
        q.mlp.weights_mut(1).fill(0.0);
        q.mlp.biases_mut(1).copy_from_slice(&[0.0, 1.0, 5.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(dqn_act(&q, &[1.0, 2.0, 3.0], 0.0, &mut rng).unwrap(), 2);
        }
        // positive affine transforms keep the argmax
        let b = q.mlp.biases(1).to_vec();
        q.mlp.biases_mut(1).copy_from_slice(&b.iter().map(|v| 3.0 * v + 10.0).collect::<Vec<_>>());
        assert_eq!(q.greedy(&[0.0; 3]).unwrap(), 2);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let q = QNetwork::new(2, &[4], 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[dqn_act(&q, &[0.5, 0.5], 1.0, &mut rng).unwrap()] += 1;
        }
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn epsilon_schedule() {
        let mut e = EpsilonSchedule::default();
        assert_eq!(e.value(), 0.1);
        let mut last = e.value();
        for n in 1..=1000u32 {
            e.end_episode();
            let v = e.value();
            assert!(v <= last);
            assert_eq!(v, (0.1 * 0.995f64.powi(n as i32)).max(0.01));
            last = v;
        }
        assert_eq!(e.value(), 0.01);
    }

    fn exp(tag: usize, source: Source) -> Experience {
        Experience { state: vec![tag as f64], action: 0, reward: 0.0, next_state: vec![0.0], source, intersection: tag }
    }

    #[test]
    fn replay_eviction_keeps_latest() {
        let mut buf = ReplayBuffer::new(5);
        for i in 0..12 {
            buf.push(exp(i, Source::Observed));
        }
        assert_eq!(buf.len(), 5);
        let kept: Vec<_> = buf.iter().map(|e| e.intersection).collect();
        assert_eq!(kept, vec![7, 8, 9, 10, 11]);
    }

    #[test]
    fn replay_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut one = ReplayBuffer::new(10);
        assert!(matches!(one.sample(4, &mut rng, None), Err(AgentError::EmptyBuffer)));
        one.push(exp(1, Source::Observed));
        let s = one.sample(4, &mut rng, None).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|e| e.intersection == 1));
        assert!(matches!(one.sample(1, &mut rng, Some(Source::Imputed)), Err(AgentError::NoMatchingSource)));

        let mut mixed = ReplayBuffer::new(10);
        for i in 0..10 {
            mixed.push(exp(i, if i % 3 == 0 { Source::Imputed } else { Source::Observed }));
        }
        assert!(mixed.sample(50, &mut rng, Some(Source::Observed)).unwrap().iter().all(|e| e.source == Source::Observed));
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(10);
        for i in 0..10 {
            buf.push(exp(i, Source::Observed));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mut counts = [0f64; 10];
        for e in buf.sample(n, &mut rng, None).unwrap() {
            counts[e.intersection] += 1.0;
        }
        let expected = n as f64 / 10.0;
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 9 degrees of freedom, 99.9th percentile is 27.88
        assert!(chi2 < 27.88, "chi2 {chi2}");
        assert!(counts.iter().all(|c| (c - expected).abs() < 3.0 * sigma));
    }

    #[test]
    fn myopic_update_targets_rewards() {
        // with gamma 0 the Bellman target is the reward itself; the loss is the
        // squared residual of the selected output
        let mut q = QNetwork::new(2, &[3], 4, 2).unwrap();
        let target = q.clone();
        let e = Experience { state: vec![1.0, -1.0], action: 1, reward: 2.5, next_state: vec![9.0, 9.0], source: Source::Observed, intersection: 0 };
        let pred = q.q_values(&e.state).unwrap()[1];
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.0)).unwrap();
        let batch = vec![e.clone(); 4];
        let loss = dqn_update(&mut q, &target, &batch, 0.0, &mut opt).unwrap();
        assert!((loss - (pred - 2.5).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn divergent_target_is_reported() {
        let mut q = QNetwork::new(1, &[2], 4, 0).unwrap();
        let target = q.clone();
        let e = Experience { state: vec![0.0], action: 0, reward: f64::INFINITY, next_state: vec![0.0], source: Source::Observed, intersection: 0 };
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3)).unwrap();
        assert!(matches!(dqn_update(&mut q, &target, &[e], 0.9, &mut opt), Err(AgentError::Divergence)));
    }
}
