//! Experiment configuration, multi-seed orchestration, missing-rate sweeps
//! and CSV result emission.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{evaluate_fixed_plan, tune_fixed_plan, FixedTimePlan};
use crate::controllers::{derive_seed, Controller, ControllerConfig, StrategyId};
use crate::error::{ExperimentError, ObservationError};
use crate::imputation::{collect_pretrain_samples, pretrain_reward_model, PretrainConfig, RewardModel};
use crate::observation::{sample_mask, ObservationMask};
use crate::road_network::{build_grid, LaneParams, RoadNetwork, NUM_PHASES};
use crate::traffic_sim::{generate_gaussian_flow, FlowSpec, GaussianFlowParams};

const MASK_SLOT: u64 = 101;
/// Seed slot of the IDQN-Fix run that collects reward-model samples.
pub const PRETRAIN_SLOT: u64 = 102;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub rows: usize,
    pub cols: usize,
    pub lane_params: LaneParams,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self { rows: 4, cols: 4, lane_params: LaneParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Flow file; when set, the generator fields are ignored.
    pub file: Option<PathBuf>,
    pub mean_rate: f64,
    pub std_rate: f64,
    pub turn_probs: [f64; 3],
    /// The flow is a fixed dataset shared by every run seed.
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let g = GaussianFlowParams::default();
        Self { file: None, mean_rate: g.mean_rate, std_rate: g.std_rate, turn_probs: g.turn_probs, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub n_missing: usize,
    /// Explicit unobserved ids; overrides random sampling.
    pub unobserved: Option<Vec<usize>>,
    pub allow_adjacent: bool,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { n_missing: 1, unobserved: None, allow_adjacent: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPlanSpec {
    /// Explicit plan; otherwise the best uniform plan among `candidates`.
    pub plan: Option<FixedTimePlan>,
    pub candidates: Vec<u32>,
}

impl Default for FixedPlanSpec {
    fn default() -> Self {
        Self { plan: None, candidates: vec![1, 2, 3, 4] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardModelSpec {
    /// Checkpoint path; `{seed}` is replaced by the run seed.
    pub path: Option<String>,
    /// Pretrain from this many IDQN-Fix episodes when no path is given.
    pub pretrain_epochs: Option<usize>,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    pub flow: FlowConfig,
    pub strategy: StrategyId,
    pub mask: MaskSpec,
    pub episodes: u32,
    pub horizon: u64,
    pub seeds: Vec<u64>,
    pub controller: ControllerConfig,
    pub fixed_plan: FixedPlanSpec,
    pub reward_model: RewardModelSpec,
    pub output_dir: PathBuf,
    /// Run seeds on the thread pool.
    pub parallel: bool,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            network: NetworkSpec::default(),
            flow: FlowConfig::default(),
            strategy: StrategyId::IdqnFix,
            mask: MaskSpec::default(),
            episodes: 20,
            horizon: 600,
            seeds: vec![0, 1, 2],
            controller: ControllerConfig::default(),
            fixed_plan: FixedPlanSpec::default(),
            reward_model: RewardModelSpec::default(),
            output_dir: PathBuf::from("runs/default"),
            parallel: true,
            save_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    /// Full-scale profile: one-hour episodes, 100 episodes, five seeds.
    pub fn full_scale() -> Self {
        Self { episodes: 100, horizon: 3600, seeds: vec![0, 1, 2, 3, 4], ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Format(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        toml::to_string_pretty(self).map_err(|e| ExperimentError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn num_intersections(&self) -> usize {
        self.network.rows * self.network.cols
    }

    pub fn n_missing(&self) -> usize {
        self.mask.unobserved.as_ref().map_or(self.mask.n_missing, |ids| ids.len())
    }

    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let mut errs = Vec::new();
        let n = self.num_intersections();
        if self.network.rows == 0 || self.network.cols == 0 {
            errs.push("network.rows and network.cols must be at least 1".to_string());
        }
        if let Err(e) = self.network.lane_params.validate() {
            errs.push(format!("network.lane_params: {e}"));
        }
        if self.episodes == 0 {
            errs.push("episodes must be at least 1".into());
        }
        if self.horizon == 0 {
            errs.push("horizon must be at least 1".into());
        }
        if self.seeds.is_empty() {
            errs.push("seeds must not be empty".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            errs.push("seeds must be distinct".into());
        }
        if self.flow.file.is_none() {
            if let Err(e) = self.gaussian_params().validate() {
                errs.push(format!("flow: {e}"));
            }
        }
        match &self.mask.unobserved {
            Some(ids) => {
                if ids.iter().any(|&k| k >= n) {
                    errs.push(format!("mask.unobserved ids must be below {n}"));
                }
                if ids.len() >= n.max(1) {
                    errs.push("mask.unobserved must leave at least one observed intersection".into());
                }
            }
            None if self.mask.n_missing >= n.max(1) => errs.push(format!("mask.n_missing must be below {n}")),
            None => {}
        }
        let c = &self.controller;
        if c.decision_interval == 0 {
            errs.push("controller.decision_interval must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&c.dqn.gamma) {
            errs.push("controller.dqn.gamma must lie in [0, 1]".into());
        }
        if !(c.dqn.learning_rate.is_finite() && c.dqn.learning_rate >= 0.0) {
            errs.push("controller.dqn.learning_rate must be finite and non-negative".into());
        }
        if c.dqn.batch_size == 0 || c.dqn.buffer_capacity == 0 {
            errs.push("controller.dqn.batch_size and buffer_capacity must be positive".into());
        }
        if c.dqn.hidden.contains(&0) {
            errs.push("controller.dqn.hidden widths must be positive".into());
        }
        let e = &c.epsilon;
        if !(0.0 <= e.min && e.min <= e.initial && e.initial <= 1.0) || !(0.0..=1.0).contains(&e.decay) {
            errs.push("controller.epsilon needs 0 <= min <= initial <= 1 and decay in [0, 1]".into());
        }
        if !(c.count_scale.is_finite() && c.count_scale > 0.0) {
            errs.push("controller.count_scale must be positive".into());
        }
        match &self.fixed_plan.plan {
            Some(plan) => {
                if let Err(e) = plan.validate(NUM_PHASES) {
                    errs.push(format!("fixed_plan.plan: {e}"));
                }
            }
            None if self.fixed_plan.candidates.is_empty() || self.fixed_plan.candidates.contains(&0) => {
                errs.push("fixed_plan.candidates must be non-empty and positive".into())
            }
            None => {}
        }
        if self.strategy.needs_reward_model() && self.reward_model.path.is_none() && self.reward_model.pretrain_epochs.is_none() {
            errs.push(format!("strategy {} needs reward_model.path or reward_model.pretrain_epochs", self.strategy));
        }
        if self.reward_model.pretrain_epochs == Some(0) {
            errs.push("reward_model.pretrain_epochs must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ExperimentError::Validation(errs))
        }
    }

    fn gaussian_params(&self) -> GaussianFlowParams {
        GaussianFlowParams { mean_rate: self.flow.mean_rate, std_rate: self.flow.std_rate, horizon: self.horizon, turn_probs: self.flow.turn_probs }
    }

    pub fn build_network(&self) -> Result<RoadNetwork, ExperimentError> {
        Ok(build_grid(self.network.rows, self.network.cols, self.network.lane_params)?)
    }

    pub fn build_flow(&self, net: &RoadNetwork) -> Result<FlowSpec, ExperimentError> {
        let flow = match &self.flow.file {
            Some(path) => {
                let flow = FlowSpec::load(path)?;
                if flow.horizon != self.horizon {
                    return Err(ExperimentError::Validation(vec![format!(
                        "flow file horizon {} differs from horizon {}",
                        flow.horizon, self.horizon
                    )]));
                }
                flow
            }
            None => generate_gaussian_flow(net, &self.gaussian_params(), self.flow.seed)?,
        };
        flow.validate(net)?;
        Ok(flow)
    }

    /// The observation mask used by run `seed`.
    pub fn build_mask(&self, net: &RoadNetwork, seed: u64) -> Result<ObservationMask, ObservationError> {
        match &self.mask.unobserved {
            Some(ids) => ObservationMask::from_unobserved(net.num_intersections(), ids.iter().copied()),
            None => sample_mask(net, self.mask.n_missing, self.mask.allow_adjacent, derive_seed(seed, MASK_SLOT)),
        }
    }

    pub fn build_plan(&self, net: &RoadNetwork, flow: &FlowSpec) -> Result<FixedTimePlan, ExperimentError> {
        match &self.fixed_plan.plan {
            Some(plan) => Ok(plan.clone()),
            None => tune_fixed_plan(net, flow, &self.fixed_plan.candidates, self.controller.decision_interval)
                .map_err(|e| ExperimentError::Control(e.into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowKind {
    Train,
    Eval,
}

/// One episode of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: StrategyId,
    pub missing_rate_pct: f64,
    pub n_missing: usize,
    pub seed: u64,
    pub episode: u32,
    pub kind: RowKind,
    pub avg_travel_time: f64,
    pub throughput: usize,
    pub total_vehicles: usize,
    /// Exploration rate in effect during the episode (0 for greedy evaluation).
    pub epsilon: f64,
    pub fixfix_avg_travel_time: f64,
}

/// Mean, std and median over seeds of the final result of each seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: StrategyId,
    pub missing_rate_pct: f64,
    pub n_missing: usize,
    pub n_seeds: usize,
    pub mean_avg_travel_time: f64,
    /// Omitted with fewer than two seeds.
    pub std_avg_travel_time: Option<f64>,
    pub median_avg_travel_time: f64,
    pub fixfix_avg_travel_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayRow {
    pub seed: u64,
    pub intersection: usize,
    pub observed: bool,
    pub avg_queue: f64,
    pub visits: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRow {
    pub seed: u64,
    pub episode: u32,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOutcome {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub delays: Vec<DelayRow>,
    pub epsilon_log: Vec<EpsilonRow>,
}

impl RunOutcome {
    /// Final result per seed: the greedy evaluation when there is one,
    /// otherwise the last training episode.
    pub fn final_rows(&self) -> Vec<&ResultRow> {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
            .into_iter()
            .filter_map(|s| {
                let mut of_seed = self.rows.iter().filter(|r| r.seed == s);
                of_seed.clone().find(|r| r.kind == RowKind::Eval).or_else(|| of_seed.next_back())
            })
            .collect()
    }

    pub fn final_by_seed(&self) -> Vec<(u64, f64)> {
        self.final_rows().into_iter().map(|r| (r.seed, r.avg_travel_time)).collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

struct SeedOutcome {
    rows: Vec<ResultRow>,
    delays: Vec<DelayRow>,
    epsilon_log: Vec<EpsilonRow>,
}

struct Shared<'a> {
    cfg: &'a ExperimentConfig,
    net: &'a RoadNetwork,
    flow: &'a FlowSpec,
    plan: &'a FixedTimePlan,
    fixfix_att: f64,
}

fn reward_model_for(sh: &Shared<'_>, mask: &ObservationMask, seed: u64) -> Result<Option<RewardModel>, ExperimentError> {
    let cfg = sh.cfg;
    if !cfg.strategy.needs_reward_model() {
        return Ok(None);
    }
    if let Some(path) = &cfg.reward_model.path {
        let path = PathBuf::from(path.replace("{seed}", &seed.to_string()));
        return Ok(Some(RewardModel::load(&path)?));
    }
    let epochs = cfg.reward_model.pretrain_epochs.expect("validated");
    let pre_seed = derive_seed(seed, PRETRAIN_SLOT);
    let ctrl_cfg = ControllerConfig { seed: pre_seed, ..cfg.controller.clone() };
    let data = collect_pretrain_samples(sh.net, sh.flow, mask, epochs, sh.plan, &ctrl_cfg)?;
    let (model, report) = pretrain_reward_model(&data, &PretrainConfig { seed: pre_seed, ..cfg.reward_model.pretrain.clone() })?;
    info!(
        "seed {seed}: reward model pretrained on {} samples, test mse {:.4} vs variance {:.4}",
        data.len(),
        report.test_mse,
        report.test_variance
    );
    let dir = cfg.output_dir.join("reward_models");
    fs::create_dir_all(&dir)?;
    model.save(&dir.join(format!("seed_{seed}.json")))?;
    Ok(Some(model))
}

fn run_seed(sh: &Shared<'_>, seed: u64) -> Result<SeedOutcome, ExperimentError> {
    let cfg = sh.cfg;
    let mask = cfg.build_mask(sh.net, seed)?;
    let reward_model = reward_model_for(sh, &mask, seed)?;
    let ctrl_cfg = ControllerConfig { seed, ..cfg.controller.clone() };
    let mut ctrl = Controller::new(cfg.strategy, sh.net, &mask, sh.plan.clone(), reward_model, ctrl_cfg)?;
    let row = |episode, kind, epsilon, m: &crate::traffic_sim::Metrics| ResultRow {
        strategy: cfg.strategy,
        missing_rate_pct: mask.missing_rate() * 100.0,
        n_missing: mask.unobserved().len(),
        seed,
        episode,
        kind,
        avg_travel_time: m.avg_travel_time,
        throughput: m.throughput,
        total_vehicles: m.total_vehicles,
        epsilon,
        fixfix_avg_travel_time: sh.fixfix_att,
    };
    let mut out = SeedOutcome { rows: Vec::new(), delays: Vec::new(), epsilon_log: Vec::new() };
    let mut last = None;
    for episode in 1..=cfg.episodes {
        let eps = ctrl.epsilon();
        let m = ctrl.train_episode(sh.net, sh.flow, &mask)?;
        info!("{} seed {seed} episode {episode}: avg travel time {:.2}", cfg.strategy, m.avg_travel_time);
        let eps_used = if cfg.strategy.is_learning() { eps } else { 0.0 };
        out.rows.push(row(episode, RowKind::Train, eps_used, &m));
        out.epsilon_log.push(EpsilonRow { seed, episode, epsilon_start: eps, epsilon_end: ctrl.epsilon() });
        last = Some(m);
    }
    let final_metrics = if cfg.strategy.is_learning() {
        let m = ctrl.evaluate(sh.net, sh.flow, &mask)?;
        out.rows.push(row(cfg.episodes, RowKind::Eval, 0.0, &m));
        if cfg.save_checkpoints {
            ctrl.save_checkpoints(&cfg.output_dir.join("checkpoints").join(format!("seed_{seed}")))?;
        }
        m
    } else {
        last.expect("at least one episode")
    };
    for (i, (&q, &v)) in final_metrics.per_intersection_delay.iter().zip(&final_metrics.per_intersection_visits).enumerate() {
        out.delays.push(DelayRow { seed, intersection: i, observed: mask.is_observed(i), avg_queue: q, visits: v });
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn summarize(strategy: StrategyId, rows: &[&ResultRow]) -> Option<SummaryRow> {
    let first = rows.first()?;
    let atts: Vec<f64> = rows.iter().map(|r| r.avg_travel_time).collect();
    let (mean, std) = mean_std(&atts);
    Some(SummaryRow {
        strategy,
        missing_rate_pct: first.missing_rate_pct,
        n_missing: first.n_missing,
        n_seeds: rows.len(),
        mean_avg_travel_time: mean,
        std_avg_travel_time: std,
        median_avg_travel_time: median(&atts),
        fixfix_avg_travel_time: first.fixfix_avg_travel_time,
    })
}

/// Trains `cfg.strategy` for every seed and writes `results.csv`,
/// `summary.csv`, `delay_by_intersection.csv`, `epsilon_log.csv` and the
/// checkpoints into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    cfg.validate()?;
    let net = cfg.build_network()?;
    let flow = cfg.build_flow(&net)?;
    let plan = cfg.build_plan(&net, &flow)?;
    let fixfix_att = evaluate_fixed_plan(&net, &flow, &plan, cfg.controller.decision_interval)
        .map_err(|e| ExperimentError::Control(e.into()))?
        .avg_travel_time;
    fs::create_dir_all(&cfg.output_dir)?;
    let _ = fs::remove_file(cfg.output_dir.join("INCOMPLETE"));
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
    let shared = Shared { cfg, net: &net, flow: &flow, plan: &plan, fixfix_att };
    let results: Vec<Result<SeedOutcome, ExperimentError>> = if cfg.parallel {
        cfg.seeds.par_iter().map(|&s| run_seed(&shared, s)).collect()
    } else {
        cfg.seeds.iter().map(|&s| run_seed(&shared, s)).collect()
    };

    let mut outcome = RunOutcome::default();
    let mut failure = None;
    for (seed, r) in cfg.seeds.iter().zip(results) {
        match r {
            Ok(s) => {
                outcome.rows.extend(s.rows);
                outcome.delays.extend(s.delays);
                outcome.epsilon_log.extend(s.epsilon_log);
            }
            Err(e) => {
                warn!("seed {seed} failed: {e}");
                failure.get_or_insert(e);
            }
        }
    }
    outcome.summary = summarize(cfg.strategy, &outcome.final_rows()).into_iter().collect();
    write_csv(&cfg.output_dir.join("results.csv"), &outcome.rows)?;
    write_csv(&cfg.output_dir.join("summary.csv"), &outcome.summary)?;
    write_csv(&cfg.output_dir.join("delay_by_intersection.csv"), &outcome.delays)?;
    write_csv(&cfg.output_dir.join("epsilon_log.csv"), &outcome.epsilon_log)?;
    if let Some(e) = failure {
        fs::write(cfg.output_dir.join("INCOMPLETE"), format!("{e}\n"))?;
        return Err(e);
    }
    Ok(outcome)
}

/// Greedy evaluation of checkpoints written by a previous `run_experiment`
/// with the same configuration.
pub fn evaluate_checkpoints(cfg: &ExperimentConfig, checkpoint_root: &Path) -> Result<Vec<ResultRow>, ExperimentError> {
    cfg.validate()?;
    let net = cfg.build_network()?;
    let flow = cfg.build_flow(&net)?;
    let plan = cfg.build_plan(&net, &flow)?;
    let fixfix_att = evaluate_fixed_plan(&net, &flow, &plan, cfg.controller.decision_interval)
        .map_err(|e| ExperimentError::Control(e.into()))?
        .avg_travel_time;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mask = cfg.build_mask(&net, seed)?;
        let dir = checkpoint_root.join(format!("seed_{seed}"));
        let reward_model = if cfg.strategy.needs_reward_model() {
            Some(RewardModel::load(&dir.join("reward_model.json"))?)
        } else {
            None
        };
        let mut ctrl = Controller::new(cfg.strategy, &net, &mask, plan.clone(), reward_model, ControllerConfig { seed, ..cfg.controller.clone() })?;
        if cfg.strategy.is_learning() {
            ctrl.load_checkpoints(&dir)?;
        }
        let m = ctrl.evaluate(&net, &flow, &mask)?;
        rows.push(ResultRow {
            strategy: cfg.strategy,
            missing_rate_pct: mask.missing_rate() * 100.0,
            n_missing: mask.unobserved().len(),
            seed,
            episode: 0,
            kind: RowKind::Eval,
            avg_travel_time: m.avg_travel_time,
            throughput: m.throughput,
            total_vehicles: m.total_vehicles,
            epsilon: 0.0,
            fixfix_avg_travel_time: fixfix_att,
        });
    }
    Ok(rows)
}

/// `rate * n` when it is a whole number.
pub fn n_missing_for_rate(rate: f64, n: usize) -> Option<usize> {
    let x = rate * n as f64;
    let r = x.round();
    ((x - r).abs() < 1e-9 && r >= 0.0).then_some(r as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub missing_rate_pct: f64,
    pub n_missing: usize,
    pub adjacent: bool,
    pub strategy: StrategyId,
    pub seed: u64,
    pub avg_travel_time: f64,
    pub fixfix_avg_travel_time: f64,
    /// Percentage decrease relative to FixFix.
    pub decrease_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub missing_rate_pct: f64,
    pub n_missing: usize,
    pub adjacent: bool,
    pub strategy: StrategyId,
    /// `ok` or `unavailable: <reason>`.
    pub status: String,
    pub n_seeds: usize,
    pub mean_avg_travel_time: Option<f64>,
    pub std_avg_travel_time: Option<f64>,
    pub median_avg_travel_time: Option<f64>,
    pub mean_decrease_pct: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

fn decrease_pct(fixfix: f64, att: f64) -> f64 {
    if fixfix == att {
        0.0
    } else {
        (fixfix - att) / fixfix * 100.0
    }
}

/// Runs the Cartesian product of rates, adjacency modes and strategies over
/// `base.seeds`. Writes `table.csv` (one row per seed), `table_summary.csv`
/// (mean ± std per cell, infeasible cells marked) and `decrease.csv`.
pub fn sweep_missing_rates(base: &ExperimentConfig, rates: &[f64], adjacency_modes: &[bool], strategies: &[StrategyId]) -> Result<SweepTable, ExperimentError> {
    let n = base.num_intersections();
    let mut errs = Vec::new();
    let mut cells = Vec::new();
    for &rate in rates {
        match n_missing_for_rate(rate, n) {
            Some(k) if k < n => {
                for &adjacent in adjacency_modes {
                    for &strategy in strategies {
                        cells.push((rate, k, adjacent, strategy));
                    }
                }
            }
            _ => errs.push(format!("rate {rate} does not give a whole number of intersections below {n}")),
        }
    }
    if !errs.is_empty() {
        return Err(ExperimentError::Validation(errs));
    }
    let net = base.build_network()?;
    let results: Vec<Result<(Vec<SweepRow>, SweepCell), ExperimentError>> = cells
        .par_iter()
        .map(|&(rate, k, adjacent, strategy)| {
            let mut cfg = base.clone();
            cfg.strategy = strategy;
            cfg.mask = MaskSpec { n_missing: k, unobserved: None, allow_adjacent: adjacent };
            let tag = if adjacent { "adjacent" } else { "separate" };
            cfg.output_dir = base.output_dir.join("cells").join(format!("{strategy}_m{k}_{tag}"));
            let mut cell = SweepCell {
                missing_rate_pct: rate * 100.0,
                n_missing: k,
                adjacent,
                strategy,
                status: "ok".into(),
                n_seeds: 0,
                mean_avg_travel_time: None,
                std_avg_travel_time: None,
                median_avg_travel_time: None,
                mean_decrease_pct: None,
            };
            for &seed in &cfg.seeds {
                if let Err(e @ ObservationError::Infeasible { .. }) = cfg.build_mask(&net, seed) {
                    cell.status = format!("unavailable: {e}");
                    return Ok((Vec::new(), cell));
                }
            }
            let outcome = run_experiment(&cfg)?;
            let rows: Vec<SweepRow> = outcome
                .final_rows()
                .into_iter()
                .map(|r| SweepRow {
                    missing_rate_pct: rate * 100.0,
                    n_missing: k,
                    adjacent,
                    strategy,
                    seed: r.seed,
                    avg_travel_time: r.avg_travel_time,
                    fixfix_avg_travel_time: r.fixfix_avg_travel_time,
                    decrease_pct: decrease_pct(r.fixfix_avg_travel_time, r.avg_travel_time),
                })
                .collect();
            let atts: Vec<f64> = rows.iter().map(|r| r.avg_travel_time).collect();
            let (mean, std) = mean_std(&atts);
            cell.n_seeds = rows.len();
            cell.mean_avg_travel_time = Some(mean);
            cell.std_avg_travel_time = std;
            cell.median_avg_travel_time = Some(median(&atts));
            cell.mean_decrease_pct = Some(rows.iter().map(|r| r.decrease_pct).sum::<f64>() / rows.len() as f64);
            Ok((rows, cell))
        })
        .collect();
    let mut table = SweepTable::default();
    for r in results {
        let (rows, cell) = r?;
        table.rows.extend(rows);
        table.cells.push(cell);
    }
    let dir = base.output_dir.join("sweep");
    fs::create_dir_all(&dir)?;
    write_csv(&dir.join("table.csv"), &table.rows)?;
    write_csv(&dir.join("table_summary.csv"), &table.cells)?;
    #[derive(Serialize)]
    struct DecreaseRow {
        missing_rate_pct: f64,
        adjacent: bool,
        strategy: StrategyId,
        decrease_pct: Option<f64>,
    }
    let decrease: Vec<DecreaseRow> = table
        .cells
        .iter()
        .map(|c| DecreaseRow { missing_rate_pct: c.missing_rate_pct, adjacent: c.adjacent, strategy: c.strategy, decrease_pct: c.mean_decrease_pct })
        .collect();
    write_csv(&dir.join("decrease.csv"), &decrease)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            network: NetworkSpec { rows: 2, cols: 2, ..Default::default() },
            episodes: 2,
            horizon: 120,
            seeds: vec![0, 1],
            output_dir: dir.to_path_buf(),
            ..Default::default()
        }
    }

    #[test]
    fn validation_lists_every_violation() {
        let cfg = ExperimentConfig {
            episodes: 0,
            seeds: vec![],
            strategy: StrategyId::SdqnAll,
            mask: MaskSpec { n_missing: 16, ..Default::default() },
            ..Default::default()
        };
        let Err(ExperimentError::Validation(errs)) = cfg.validate() else { panic!() };
        assert_eq!(errs.len(), 4, "{errs:?}");
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("strategy = \"sdqn-all\"\nepisodes = 3\n[mask]\nn_missing = 2\n").unwrap();
        assert_eq!(partial.strategy, StrategyId::SdqnAll);
        assert_eq!(partial.mask.n_missing, 2);
        assert_eq!(partial.horizon, 600);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        let full = ExperimentConfig::full_scale();
        assert_eq!((full.horizon, full.episodes, full.seeds.len()), (3600, 100, 5));
    }

    #[test]
    fn fixfix_single_episode_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { strategy: StrategyId::FixFix, episodes: 1, ..small(dir.path()) };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert!(out.rows.iter().all(|r| r.avg_travel_time == r.fixfix_avg_travel_time));
        assert!(!dir.path().join("checkpoints").exists());
        assert_eq!(out.delays.len(), 2 * 4);
    }

    #[test]
    fn epsilon_log_follows_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { episodes: 3, seeds: vec![4], horizon: 30, ..small(dir.path()) };
        let out = run_experiment(&cfg).unwrap();
        let last = out.epsilon_log.last().unwrap();
        assert_eq!(last.episode, 3);
        assert!((last.epsilon_end - 0.1 * 0.995f64.powi(3)).abs() < 1e-15);
        assert_eq!(fs::read_dir(dir.path().join("checkpoints/seed_4")).unwrap().count(), 3);
        let text = fs::read_to_string(dir.path().join("epsilon_log.csv")).unwrap();
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn repeated_runs_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment(&small(a.path())).unwrap();
        run_experiment(&ExperimentConfig { parallel: false, ..small(b.path()) }).unwrap();
        for f in ["results.csv", "summary.csv", "delay_by_intersection.csv", "epsilon_log.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn eval_reloads_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let out = run_experiment(&cfg).unwrap();
        let rows = evaluate_checkpoints(&cfg, &dir.path().join("checkpoints")).unwrap();
        let trained: Vec<f64> = out.rows.iter().filter(|r| r.kind == RowKind::Eval).map(|r| r.avg_travel_time).collect();
        assert_eq!(rows.iter().map(|r| r.avg_travel_time).collect::<Vec<_>>(), trained);
    }

    #[test]
    fn rates_to_counts() {
        let counts: Vec<_> = [0.0625, 0.125, 0.1875, 0.25].iter().map(|&r| n_missing_for_rate(r, 16)).collect();
        assert_eq!(counts, vec![Some(1), Some(2), Some(3), Some(4)]);
        assert_eq!(n_missing_for_rate(0.25, 48), Some(12));
        assert_eq!(n_missing_for_rate(0.1, 16), None);
    }

    #[test]
    fn sweep_shape_and_self_difference() {
        let dir = tempfile::tempdir().unwrap();
        let base = ExperimentConfig { episodes: 1, horizon: 60, ..small(dir.path()) };
        let table = sweep_missing_rates(&base, &[0.25, 0.5], &[false, true], &[StrategyId::FixFix, StrategyId::IdqnFix]).unwrap();
        assert_eq!(table.cells.len(), 8);
        let ok = table.cells.iter().filter(|c| c.status == "ok").count();
        assert_eq!(table.rows.len(), ok * 2);
        assert!(table.rows.iter().filter(|r| r.strategy == StrategyId::FixFix).all(|r| r.decrease_pct == 0.0));
        assert!(dir.path().join("sweep/decrease.csv").exists());
        assert!(sweep_missing_rates(&base, &[0.3], &[false], &[StrategyId::FixFix]).is_err());
    }

    #[test]
    fn infeasible_cells_are_marked() {
        let dir = tempfile::tempdir().unwrap();
        let base = ExperimentConfig {
            network: NetworkSpec { rows: 1, cols: 3, ..Default::default() },
            episodes: 1,
            horizon: 30,
            seeds: vec![0],
            output_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        let rate = 2.0 / 3.0;
        let table = sweep_missing_rates(&base, &[rate], &[false], &[StrategyId::FixFix]);
        // 2 of 3 in a row: only {0, 2} is non-adjacent, so this cell is feasible
        assert_eq!(table.unwrap().cells[0].status, "ok");
        let base = ExperimentConfig { network: NetworkSpec { rows: 1, cols: 2, ..Default::default() }, ..base };
        let table = sweep_missing_rates(&base, &[0.5], &[true], &[StrategyId::FixFix]).unwrap();
        assert_eq!(table.cells[0].status, "ok");
        let base = ExperimentConfig { network: NetworkSpec { rows: 3, cols: 3, ..Default::default() }, ..base };
        let table = sweep_missing_rates(&base, &[6.0 / 9.0], &[false], &[StrategyId::FixFix]).unwrap();
        assert!(table.cells[0].status.starts_with("unavailable"));
        assert!(table.rows.is_empty());
    }
}
