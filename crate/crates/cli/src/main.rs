use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use sigimpute::agents::FixedTimePlan;
use sigimpute::controllers::{derive_seed, ControllerConfig, StrategyId};
use sigimpute::experiment::{evaluate_checkpoints, run_experiment, sweep_missing_rates, ExperimentConfig, PRETRAIN_SLOT};
use sigimpute::imputation::{collect_pretrain_samples, pretrain_reward_model, PretrainConfig};
use sigimpute::road_network::{build_grid, LaneParams, RoadNetwork};
use sigimpute::traffic_sim::{generate_gaussian_flow, GaussianFlowParams};

#[derive(Parser)]
#[command(name = "sigimpute", version, about = "Traffic signal control with unobserved intersections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a grid network file.
    GenNet {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = LaneParams::default().length_m)]
        length: f64,
        #[arg(long, default_value_t = LaneParams::default().free_flow_steps)]
        free_flow_steps: u32,
        #[arg(long, default_value_t = LaneParams::default().capacity)]
        capacity: u32,
        #[arg(long, default_value_t = LaneParams::default().sat_flow)]
        sat_flow: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic Gaussian flow file for a network.
    GenFlow {
        #[arg(long)]
        net: PathBuf,
        #[arg(long, default_value_t = 600)]
        horizon: u64,
        #[arg(long, default_value_t = GaussianFlowParams::default().mean_rate)]
        mean_rate: f64,
        #[arg(long, default_value_t = GaussianFlowParams::default().std_rate)]
        std_rate: f64,
        /// Left, through and right probabilities.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = GaussianFlowParams::default().turn_probs)]
        turn_probs: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default experiment configuration.
    InitConfig {
        /// Full-scale profile instead of the desk-scale defaults.
        #[arg(long)]
        full_scale: bool,
    },
    /// Collect IDQN-Fix samples and pretrain the reward model.
    PretrainReward {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the collected dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train one strategy over every seed.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Greedy evaluation of saved checkpoints.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `<output_dir>/checkpoints`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Missing-rate by adjacency by strategy sweep.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0625, 0.125, 0.1875, 0.25])]
        rates: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![false])]
        adjacency: Vec<bool>,
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<StrategyId>,
    },
}

/// Config file plus the most common overrides.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<StrategyId>,
    #[arg(long)]
    episodes: Option<u32>,
    #[arg(long)]
    horizon: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    n_missing: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    unobserved: Option<Vec<usize>>,
    #[arg(long)]
    allow_adjacent: Option<bool>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    epsilon_min: Option<f64>,
    #[arg(long)]
    epsilon_decay: Option<f64>,
    #[arg(long)]
    reward_model: Option<String>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.strategy, self.strategy);
        set!(cfg.episodes, self.episodes);
        set!(cfg.horizon, self.horizon);
        set!(cfg.seeds, self.seeds);
        set!(cfg.mask.n_missing, self.n_missing);
        set!(cfg.mask.allow_adjacent, self.allow_adjacent);
        set!(cfg.network.rows, self.rows);
        set!(cfg.network.cols, self.cols);
        set!(cfg.controller.dqn.learning_rate, self.learning_rate);
        set!(cfg.controller.dqn.gamma, self.gamma);
        set!(cfg.controller.epsilon.initial, self.epsilon);
        set!(cfg.controller.epsilon.min, self.epsilon_min);
        set!(cfg.controller.epsilon.decay, self.epsilon_decay);
        set!(cfg.output_dir, self.output_dir);
        if self.unobserved.is_some() {
            cfg.mask.unobserved = self.unobserved.clone();
        }
        if self.flow.is_some() {
            cfg.flow.file = self.flow.clone();
        }
        if self.reward_model.is_some() {
            cfg.reward_model.path = self.reward_model.clone();
        }
        if self.pretrain_epochs.is_some() {
            cfg.reward_model.pretrain_epochs = self.pretrain_epochs;
        }
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenNet { rows, cols, length, free_flow_steps, capacity, sat_flow, out } => {
            let params = LaneParams { length_m: length, free_flow_steps, capacity, sat_flow };
            let net = build_grid(rows, cols, params)?;
            net.save(&out)?;
            info!("wrote {rows}x{cols} network to {}", out.display());
        }
        Command::GenFlow { net, horizon, mean_rate, std_rate, turn_probs, seed, out } => {
            let net = RoadNetwork::load(&net)?;
            let params = GaussianFlowParams { mean_rate, std_rate, horizon, turn_probs: [turn_probs[0], turn_probs[1], turn_probs[2]] };
            let flow = generate_gaussian_flow(&net, &params, seed)?;
            flow.save(&out)?;
            info!("wrote {} arrivals to {}", flow.arrivals.len(), out.display());
        }
        Command::InitConfig { full_scale } => {
            let cfg = if full_scale { ExperimentConfig::full_scale() } else { ExperimentConfig::default() };
            print!("{}", cfg.to_toml()?);
        }
        Command::PretrainReward { run, epochs, out, dataset } => {
            let cfg = run.resolve()?;
            cfg.validate()?;
            let Some(&seed) = cfg.seeds.first() else { bail!("no seed given") };
            let net = cfg.build_network()?;
            let flow = cfg.build_flow(&net)?;
            let mask = cfg.build_mask(&net, seed)?;
            let plan: FixedTimePlan = cfg.build_plan(&net, &flow)?;
            let ctrl = ControllerConfig { seed: derive_seed(seed, PRETRAIN_SLOT), ..cfg.controller.clone() };
            let data = collect_pretrain_samples(&net, &flow, &mask, epochs, &plan, &ctrl)?;
            if let Some(p) = dataset {
                data.save(&p)?;
            }
            let (model, report) = pretrain_reward_model(&data, &PretrainConfig { seed, ..cfg.reward_model.pretrain.clone() })?;
            model.save(&out)?;
            println!(
                "samples {} test_mse {:.6} test_variance {:.6} ratio {:.4} passes {}",
                data.len(),
                report.test_mse,
                report.test_variance,
                report.test_mse / report.test_variance,
                report.passes
            );
        }
        Command::Train { run } => {
            let cfg = run.resolve()?;
            let outcome = run_experiment(&cfg)?;
            for s in &outcome.summary {
                println!(
                    "{} missing {:.2}%: median avg travel time {:.2} over {} seeds (fix-fix {:.2})",
                    s.strategy, s.missing_rate_pct, s.median_avg_travel_time, s.n_seeds, s.fixfix_avg_travel_time
                );
            }
            println!("results in {}", cfg.output_dir.display());
        }
        Command::Eval { run, checkpoints } => {
            let cfg = run.resolve()?;
            let dir = checkpoints.unwrap_or_else(|| cfg.output_dir.join("checkpoints"));
            for r in evaluate_checkpoints(&cfg, &dir)? {
                println!("{} seed {}: avg travel time {:.2} (fix-fix {:.2})", r.strategy, r.seed, r.avg_travel_time, r.fixfix_avg_travel_time);
            }
        }
        Command::Sweep { run, rates, adjacency, strategies } => {
            let cfg = run.resolve()?;
            cfg.validate()?;
            let strategies = if strategies.is_empty() { StrategyId::ALL.to_vec() } else { strategies };
            let table = sweep_missing_rates(&cfg, &rates, &adjacency, &strategies)?;
            for c in &table.cells {
                match c.mean_avg_travel_time {
                    Some(m) => println!("{:>6.2}% adj={} {:<18} {:.2}", c.missing_rate_pct, c.adjacent, c.strategy.name(), m),
                    None => println!("{:>6.2}% adj={} {:<18} {}", c.missing_rate_pct, c.adjacent, c.strategy.name(), c.status),
                }
            }
            println!("tables in {}", cfg.output_dir.join("sweep").display());
        }
    }
    Ok(())
}
