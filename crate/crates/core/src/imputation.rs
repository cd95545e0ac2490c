//! State imputation for unobserved intersections (neighbor mean) and the
//! learned reward model used to label imputed transitions.

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::FixedTimePlan;
use crate::controllers::{Controller, ControllerConfig, StrategyId};
use crate::error::{ControlError, ImputeError, NnError};
use crate::nn::{Loss, Mlp, MlpCheckpoint, Optimizer, OptimizerConfig};
use crate::observation::ObservationMask;
use crate::road_network::{IntersectionId, PhaseId, RoadNetwork, LANES_PER_INTERSECTION, NUM_PHASES};
use crate::traffic_sim::{FlowSpec, StateVector};

/// Reward-model input: state features followed by the one-hot action.
pub const REWARD_INPUT_DIM: usize = StateVector::DIM + NUM_PHASES;
const REWARD_INPUT_LAYOUT: &str = "0.1*lane_counts[N,E,S,W x L,T,R](12) ++ phase_onehot(4) ++ action_onehot(4)";
/// Lane counts enter the reward network in tens of vehicles.
const REWARD_COUNT_SCALE: f64 = 0.1;

/// Fills in the state of an intersection without sensors.
pub trait StateImputer {
    /// `neighbor_states_prev` are the previous-interval states of the
    /// observed neighbors only.
    fn impute(&self, neighbor_states_prev: &[StateVector], own_phase: PhaseId) -> Result<StateVector, ImputeError>;
}

/// Store-and-forward rule: componentwise mean of the neighbors' lane counts.
/// The phase comes from the intersection itself and is never averaged.
#[derive(Clone, Copy, Debug, Default)]
pub struct SfmImputer;

impl StateImputer for SfmImputer {
    fn impute(&self, neighbor_states_prev: &[StateVector], own_phase: PhaseId) -> Result<StateVector, ImputeError> {
        sfm_impute(neighbor_states_prev, own_phase)
    }
}

pub fn sfm_impute(neighbor_states_prev: &[StateVector], own_phase: PhaseId) -> Result<StateVector, ImputeError> {
    if neighbor_states_prev.is_empty() {
        return Err(ImputeError::Unavailable);
    }
    let mut lane_counts = [0.0; LANES_PER_INTERSECTION];
    for s in neighbor_states_prev {
        for (acc, c) in lane_counts.iter_mut().zip(&s.lane_counts) {
            *acc += c;
        }
    }
    let n = neighbor_states_prev.len() as f64;
    lane_counts.iter_mut().for_each(|c| *c /= n);
    Ok(StateVector { lane_counts, phase: own_phase })
}

/// One `(state, action, observed reward)` record from an observed intersection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSample {
    pub id: usize,
    pub intersection: IntersectionId,
    pub state: StateVector,
    pub action: PhaseId,
    pub reward: f64,
}

fn reward_input(features: &[f64], action: PhaseId, out: &mut Vec<f64>) {
    let (counts, phase) = features.split_at(LANES_PER_INTERSECTION.min(features.len()));
    out.extend(counts.iter().map(|c| c * REWARD_COUNT_SCALE));
    out.extend_from_slice(phase);
    let mut onehot = [0.0; NUM_PHASES];
    onehot[action] = 1.0;
    out.extend_from_slice(&onehot);
}

/// Feed-forward regressor `g(state, action) -> reward`.
#[derive(Clone, Debug)]
pub struct RewardModel {
    mlp: Mlp,
    opt: Optimizer,
}

impl RewardModel {
    pub fn new(hidden: &[usize], seed: u64) -> Result<Self, ImputeError> {
        let mut sizes = vec![REWARD_INPUT_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self::from_mlp(Mlp::new(&sizes, seed)?)
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self, ImputeError> {
        if mlp.output_dim() != 1 {
            return Err(NnError::Dimension { expected: 1, got: mlp.output_dim() }.into());
        }
        let opt = Optimizer::new(OptimizerConfig::adam(1e-3))?;
        Ok(Self { mlp, opt })
    }

    /// A model that predicts `value` everywhere.
    pub fn constant(value: f64) -> Self {
        let mut mlp = Mlp::zeros(&[REWARD_INPUT_DIM, 1]).expect("valid sizes");
        mlp.biases_mut(0)[0] = value;
        Self::from_mlp(mlp).expect("scalar output")
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn infer(&self, state: &StateVector, action: PhaseId) -> Result<f64, ImputeError> {
        self.infer_features(&state.features(), action)
    }

    /// As [`RewardModel::infer`] on an already-encoded state feature vector.
    pub fn infer_features(&self, features: &[f64], action: PhaseId) -> Result<f64, ImputeError> {
        if action >= NUM_PHASES {
            return Err(NnError::Dimension { expected: NUM_PHASES, got: action + 1 }.into());
        }
        let mut x = Vec::with_capacity(REWARD_INPUT_DIM);
        reward_input(features, action, &mut x);
        let y = self.mlp.forward(&x)?[0];
        if !y.is_finite() {
            return Err(NnError::Divergence.into());
        }
        Ok(y)
    }

    /// Mean squared error over `samples` without updating.
    pub fn mse(&self, samples: &[RewardSample]) -> Result<f64, ImputeError> {
        if samples.is_empty() {
            return Err(ImputeError::EmptyDataset);
        }
        let mut total = 0.0;
        for s in samples {
            let r = self.infer(&s.state, s.action)? - s.reward;
            total += r * r;
        }
        Ok(total / samples.len() as f64)
    }

    /// One gradient step on the batch MSE. Returns the pre-step loss, or
    /// `None` (with a warning) for an empty batch.
    pub fn update(&mut self, batch: &[RewardSample], lr: f64) -> Result<Option<f64>, ImputeError> {
        if batch.is_empty() {
            warn!("reward model update skipped: empty batch");
            return Ok(None);
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(NnError::InvalidLearningRate.into());
        }
        self.opt.config.learning_rate = lr;
        let mut inputs = Vec::with_capacity(batch.len() * REWARD_INPUT_DIM);
        let mut targets = Vec::with_capacity(batch.len());
        for s in batch {
            reward_input(&s.state.features(), s.action, &mut inputs);
            targets.push(s.reward);
        }
        Ok(Some(self.mlp.train_step(&inputs, Loss::Mse { targets: &targets }, &mut self.opt)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), ImputeError> {
        Ok(self.mlp.to_checkpoint(REWARD_INPUT_LAYOUT).save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ImputeError> {
        let ckpt = MlpCheckpoint::load(path)?;
        let mlp = Mlp::from_checkpoint(&ckpt)?;
        if mlp.input_dim() != REWARD_INPUT_DIM {
            return Err(NnError::Dimension { expected: REWARD_INPUT_DIM, got: mlp.input_dim() }.into());
        }
        Self::from_mlp(mlp)
    }
}

/// Samples from observed intersections, split 80/20 into train and test.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PretrainDataset {
    pub train: Vec<RewardSample>,
    pub test: Vec<RewardSample>,
}

impl PretrainDataset {
    /// Seeded shuffle, then the first 80% train and the rest test.
    pub fn split(mut samples: Vec<RewardSample>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        samples.shuffle(&mut rng);
        let n_train = ((samples.len() as f64) * 0.8).round() as usize;
        let n_train = n_train.clamp(samples.len().min(1), samples.len());
        let test = samples.split_off(n_train);
        Self { train: samples, test }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat record file: one row per sample with its split.
    pub fn save(&self, path: &Path) -> Result<(), ImputeError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| ImputeError::DatasetFormat { line: 0, msg: e.to_string() })?;
        let mut header = vec!["id".to_string(), "split".into(), "intersection".into(), "action".into(), "reward".into(), "phase".into()];
        header.extend((0..LANES_PER_INTERSECTION).map(|i| format!("c{i}")));
        let to_err = |e: csv::Error| ImputeError::DatasetFormat { line: 0, msg: e.to_string() };
        w.write_record(&header).map_err(to_err)?;
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            for s in samples {
                let mut rec = vec![
                    s.id.to_string(),
                    split.to_string(),
                    s.intersection.to_string(),
                    s.action.to_string(),
                    s.reward.to_string(),
                    s.state.phase.to_string(),
                ];
                rec.extend(s.state.lane_counts.iter().map(|c| c.to_string()));
                w.write_record(&rec).map_err(to_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ImputeError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| ImputeError::DatasetFormat { line: 0, msg: e.to_string() })?;
        let mut out = Self::default();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let bad = |msg: &str| ImputeError::DatasetFormat { line, msg: msg.to_string() };
            let rec = rec.map_err(|e| bad(&e.to_string()))?;
            if rec.len() != 6 + LANES_PER_INTERSECTION {
                return Err(bad("wrong field count"));
            }
            let num = |k: usize| rec[k].parse::<f64>().map_err(|_| bad("bad number"));
            let int = |k: usize| rec[k].parse::<usize>().map_err(|_| bad("bad integer"));
            let mut lane_counts = [0.0; LANES_PER_INTERSECTION];
            for (c, k) in lane_counts.iter_mut().zip(6..) {
                *c = num(k)?;
            }
            let phase = int(5)?;
            let action = int(3)?;
            if phase >= NUM_PHASES || action >= NUM_PHASES {
                return Err(bad("phase out of range"));
            }
            let sample = RewardSample { id: int(0)?, intersection: int(2)?, state: StateVector { lane_counts, phase }, action, reward: num(4)? };
            match &rec[1] {
                "train" => out.train.push(sample),
                "test" => out.test.push(sample),
                _ => return Err(bad("split must be train or test")),
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_passes: usize,
    /// Stop after this many passes without a test-MSE improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64, 32], batch_size: 32, learning_rate: 1e-3, max_passes: 50, patience: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub test_mse: f64,
    /// Population variance of the test rewards (the predict-the-mean MSE).
    pub test_variance: f64,
    pub passes: usize,
    pub best_pass: usize,
}

impl PretrainReport {
    pub fn beats_mean_baseline(&self) -> bool {
        self.test_mse < self.test_variance
    }
}

/// `std * f(x) + mean` as a network of the same shape.
fn unstandardize(net: &Mlp, mean: f64, std: f64) -> Mlp {
    let mut out = net.clone();
    let last = out.layer_sizes().len() - 2;
    out.weights_mut(last).iter_mut().for_each(|w| *w *= std);
    out.biases_mut(last).iter_mut().for_each(|b| *b = *b * std + mean);
    out
}

fn variance(samples: &[RewardSample]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.reward).sum::<f64>() / n;
    samples.iter().map(|s| (s.reward - mean).powi(2)).sum::<f64>() / n
}

/// Minibatch Adam on the train split; the parameters with the best test MSE
/// are kept and training stops once the test MSE plateaus.
pub fn pretrain_reward_model(data: &PretrainDataset, config: &PretrainConfig) -> Result<(RewardModel, PretrainReport), ImputeError> {
    if data.train.is_empty() {
        return Err(ImputeError::EmptyDataset);
    }
    // with no held-out split, early stopping falls back to the train loss
    let held_out = if data.test.is_empty() { &data.train } else { &data.test };
    // targets are standardized for training; the scale is folded back into
    // the output layer so the stored network predicts raw rewards
    let n = data.train.len() as f64;
    let mean = data.train.iter().map(|s| s.reward).sum::<f64>() / n;
    let std = variance(&data.train).sqrt();
    let std = if std > 1e-8 { std } else { 1.0 };
    let mut net = RewardModel::new(&config.hidden, config.seed)?.mlp;
    let mut opt = Optimizer::new(OptimizerConfig::adam(config.learning_rate))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let eval = |net: &Mlp| -> Result<(f64, RewardModel), ImputeError> {
        let model = RewardModel::from_mlp(unstandardize(net, mean, std))?;
        Ok((model.mse(held_out)?, model))
    };
    let (mse0, model0) = eval(&net)?;
    let mut best = (mse0, model0, 0);
    let mut stale = 0;
    let mut passes = 0;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for pass in 1..=config.max_passes {
        passes = pass;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            inputs.clear();
            targets.clear();
            for &i in chunk {
                let s = &data.train[i];
                reward_input(&s.state.features(), s.action, &mut inputs);
                targets.push((s.reward - mean) / std);
            }
            net.train_step(&inputs, Loss::Mse { targets: &targets }, &mut opt).map_err(|e| match e {
                NnError::Divergence => ImputeError::Divergence { epoch: pass },
                other => other.into(),
            })?;
        }
        let (mse, model) = eval(&net).map_err(|_| ImputeError::Divergence { epoch: pass })?;
        if !mse.is_finite() {
            return Err(ImputeError::Divergence { epoch: pass });
        }
        if mse < best.0 {
            best = (mse, model, pass);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let model = best.1;
    let report = PretrainReport { test_mse: best.0, test_variance: variance(held_out), passes, best_pass: best.2 };
    if !report.beats_mean_baseline() {
        warn!("reward model test MSE {:.4} does not beat the mean baseline {:.4}", report.test_mse, report.test_variance);
    }
    Ok((model, report))
}

/// Runs IDQN at observed and fixed-time control at unobserved intersections
/// for `epochs` training episodes, recording `(s, a, r)` at every decision
/// step of every observed intersection.
pub fn collect_pretrain_samples(
    net: &RoadNetwork,
    flow: &FlowSpec,
    mask: &ObservationMask,
    epochs: usize,
    plan: &FixedTimePlan,
    config: &ControllerConfig,
) -> Result<PretrainDataset, ControlError> {
    if epochs == 0 {
        return Err(ControlError::Config("pretraining needs at least one epoch".into()));
    }
    let mut ctrl = Controller::new(StrategyId::IdqnFix, net, mask, plan.clone(), None, config.clone())?;
    ctrl.start_recording();
    for _ in 0..epochs {
        ctrl.train_episode(net, flow, mask)?;
    }
    Ok(PretrainDataset::split(ctrl.take_recorded(), config.seed))
}
