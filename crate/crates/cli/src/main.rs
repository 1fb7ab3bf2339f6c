use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use spederlab::bc::{self, BcConfig};
use spederlab::diagnostics::{self, Suite};
use spederlab::io::{self, Sidecar};
use spederlab::learner::{self, LearnerConfig, LearnerMethod};
use spederlab::mdp::{self, LowRankMdp, Policy};
use spederlab::offline::{self, OfflineConfig};
use spederlab::online::{self, BonusConfig};
use spederlab::{Error, Result};

mod config;
mod report;

#[derive(Parser, Debug)]
#[command(name = "spederlab", version, about = "Spectral representation learning experiments on tabular low-rank MDPs")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a random low-rank MDP or a gridworld.
    GenMdp(GenMdpArgs),
    /// Sample a transition dataset from a policy's occupancy or from rollouts.
    GenDataset(GenDatasetArgs),
    /// Fit a feature model to a dataset.
    Learn(LearnArgs),
    /// Run the optimistic online explorer.
    Explore(ExploreArgs),
    /// Run the pessimistic offline optimizer.
    Offline(OfflineArgs),
    /// Two-phase latent behavior cloning.
    Bc(BcArgs),
    /// Run a numerical check suite.
    Verify(VerifyArgs),
    /// Summarize result files, or run the acceptance suite.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MdpKind {
    Random,
    Gridworld,
}

#[derive(Args, Debug, Serialize)]
struct GenMdpArgs {
    #[arg(long, value_enum, default_value = "random")]
    kind: MdpKind,
    #[arg(long, default_value_t = 20)]
    states: usize,
    #[arg(long, default_value_t = 4)]
    actions: usize,
    #[arg(long, default_value_t = 3)]
    rank: usize,
    /// Gridworld side length.
    #[arg(long, default_value_t = 8)]
    side: usize,
    #[arg(long, default_value_t = 0.0)]
    slip: f64,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PolicySource {
    Uniform,
    Optimal,
    EpsilonGreedy,
    File,
}

#[derive(Args, Debug, Serialize)]
struct GenDatasetArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long, value_enum, default_value = "uniform")]
    policy: PolicySource,
    /// Exploration rate of `epsilon-greedy`.
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    /// Policy JSON for `--policy file`.
    #[arg(long)]
    policy_file: Option<PathBuf>,
    /// Number of i.i.d. occupancy samples.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Sample this many rollouts from rho instead of occupancy samples.
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    /// Also write the sampling policy as JSON.
    #[arg(long)]
    policy_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum LearnerArg {
    Erm,
    Gradient,
    SvdOracle,
}

impl From<LearnerArg> for LearnerMethod {
    fn from(l: LearnerArg) -> Self {
        match l {
            LearnerArg::Erm => LearnerMethod::Erm,
            LearnerArg::Gradient => LearnerMethod::Gradient,
            LearnerArg::SvdOracle => LearnerMethod::SvdOracle,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct LearnerFlags {
    #[arg(long, value_enum, default_value = "erm")]
    learner: LearnerArg,
    /// Feature dimension (default: the MDP's rank).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    step_size: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_ortho: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_prob: f64,
    #[arg(long, default_value_t = 31)]
    num_decoys: usize,
}

impl LearnerFlags {
    fn config(&self, seed: u64) -> LearnerConfig {
        LearnerConfig {
            method: self.learner.into(),
            dim: self.dim,
            max_steps: self.steps,
            step_size: self.step_size,
            lambda_ortho: self.lambda_ortho,
            lambda_prob: self.lambda_prob,
            num_decoys: self.num_decoys,
            init_seed: seed,
            ..LearnerConfig::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct LearnArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    learner: LearnerFlags,
    /// Loss curve CSV of the gradient learner.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ExploreArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long, default_value_t = 400)]
    episodes: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_scale: f64,
    #[arg(long, default_value_t = 10)]
    refit_interval: usize,
    /// Use alpha-scale and lambda-scale as constants instead of scaling the theory schedule.
    #[arg(long)]
    constant_schedule: bool,
    #[command(flatten)]
    learner: LearnerFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct OfflineArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Behavior policy JSON.
    #[arg(long)]
    behavior: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    alpha_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_scale: f64,
    #[command(flatten)]
    learner: LearnerFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BcArgs {
    #[arg(long)]
    mdp: PathBuf,
    /// Expert dataset CSV.
    #[arg(long)]
    expert: PathBuf,
    /// Offline (pretraining) dataset CSV.
    #[arg(long)]
    offline: PathBuf,
    #[arg(long)]
    feature_model: PathBuf,
    /// Exploration rate of the expert whose return is reported.
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 50_000)]
    decoder_steps: usize,
    #[arg(long, default_value_t = 3.0)]
    decoder_step_size: f64,
    #[arg(long, default_value_t = 256)]
    z_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct VerifyArgs {
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'o', long = "out", default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    /// Run CSVs, check-report JSONs, offline records or BC metrics.
    files: Vec<PathBuf>,
    /// Run the acceptance suite instead of summarizing files.
    #[arg(long)]
    acceptance: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Summary CSV.
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let argv = match config::expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

/// Worker cap from `SPEDERLAB_THREADS`, defaulting to the available parallelism.
fn thread_count() -> Result<usize> {
    match std::env::var("SPEDERLAB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::ValidationFailure(format!("SPEDERLAB_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn sidecar<T: Serialize>(command: &str, seed: u64, args: &T, outputs: &[&Path]) -> Result<()> {
    let config = serde_json::to_value(args).map_err(|e| Error::ValidationFailure(e.to_string()))?;
    let outs = outputs.iter().map(|p| p.display().to_string()).collect();
    io::write_sidecar(outputs[0], &Sidecar::new(command, seed, config, outs))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenMdp(a) => gen_mdp(&a),
        Command::GenDataset(a) => gen_dataset(&a),
        Command::Learn(a) => learn(&a),
        Command::Explore(a) => explore(&a),
        Command::Offline(a) => offline_cmd(&a),
        Command::Bc(a) => bc_cmd(&a),
        Command::Verify(a) => verify(&a),
        Command::Report(a) => report::run(&a, thread_count()?),
    }
}

fn gen_mdp(a: &GenMdpArgs) -> Result<()> {
    let mdp = match a.kind {
        MdpKind::Random => mdp::generate_random_mdp(a.states, a.actions, a.rank, a.seed)?.with_gamma(a.gamma)?,
        MdpKind::Gridworld => mdp::gridworld(a.side, a.slip, a.gamma)?,
    };
    io::write_mdp(&a.out, &mdp)?;
    sidecar("gen-mdp", a.seed, a, &[&a.out])
}

fn policy_from_source(a: &GenDatasetArgs, m: &LowRankMdp) -> Result<Policy> {
    match a.policy {
        PolicySource::Uniform => Ok(Policy::uniform(m.num_states(), m.num_actions())),
        PolicySource::Optimal => Ok(m.solve()?.1),
        PolicySource::EpsilonGreedy => bc::expert_policy(m, a.epsilon),
        PolicySource::File => {
            let path = a
                .policy_file
                .as_ref()
                .ok_or_else(|| Error::ValidationFailure("--policy file needs --policy-file".into()))?;
            let p = io::read_policy(path)?;
            if p.num_states() != m.num_states() || p.num_actions() != m.num_actions() {
                return Err(Error::DimensionMismatch { expected: m.num_rows(), actual: p.num_states() * p.num_actions() });
            }
            Ok(p)
        }
    }
}

fn gen_dataset(a: &GenDatasetArgs) -> Result<()> {
    let m = io::read_mdp(&a.mdp)?;
    let policy = policy_from_source(a, &m)?;
    let data = match a.trajectories {
        Some(t) => {
            if t == 0 || a.horizon == 0 {
                return Err(Error::ValidationFailure("trajectories and horizon must be positive".into()));
            }
            mdp::sample_trajectories(&m, &policy, t, a.horizon, a.seed)
        }
        None => {
            if a.samples == 0 {
                return Err(Error::ValidationFailure("samples must be positive".into()));
            }
            mdp::sample_occupancy_dataset(&m, &policy, a.samples, a.seed)?
        }
    };
    io::write_dataset(&a.out, &data)?;
    let mut outs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.policy_out {
        io::write_policy(p, &policy)?;
        outs.push(p);
    }
    sidecar("gen-dataset", a.seed, a, &outs)
}

fn learn(a: &LearnArgs) -> Result<()> {
    let m = io::read_mdp(&a.mdp)?;
    let data = io::read_dataset(&a.dataset)?;
    data.validate(m.num_states(), m.num_actions())?;
    let config = a.learner.config(a.seed);
    let mut outs: Vec<&Path> = vec![&a.out];
    let model = match (config.method, &a.curve) {
        (LearnerMethod::Gradient, Some(curve)) => {
            config.validate()?;
            let dim = config.dim.unwrap_or(m.rank());
            let base: Vec<usize> = (0..m.num_states()).collect();
            let fit = learner::gradient_fit(&config, &data, &base, (m.num_states(), m.num_actions(), dim))?;
            io::write_loss_curve(curve, &fit.curve)?;
            outs.push(curve);
            fit.model
        }
        (_, Some(_)) => return Err(Error::ValidationFailure("--curve needs --learner gradient".into())),
        (_, None) => learner::Learner::new(&config, &m, a.seed)?.fit(&data)?,
    };
    io::write_feature_model(&a.out, &model)?;
    sidecar("learn", a.seed, a, &outs)
}

fn explore(a: &ExploreArgs) -> Result<()> {
    let m = io::read_mdp(&a.mdp)?;
    let config = BonusConfig {
        alpha_scale: a.alpha_scale,
        lambda_scale: a.lambda_scale,
        use_theory_schedule: !a.constant_schedule,
        refit_interval: a.refit_interval,
        ..BonusConfig::default()
    };
    let run = online::run_online(&m, &config, &a.learner.config(a.seed), a.episodes, a.seed)?;
    io::write_run_records(&a.out, &run.records)?;
    sidecar("explore", a.seed, a, &[&a.out])
}

fn offline_cmd(a: &OfflineArgs) -> Result<()> {
    let m = io::read_mdp(&a.mdp)?;
    let data = io::read_dataset(&a.dataset)?;
    let behavior = io::read_policy(&a.behavior)?;
    let config = OfflineConfig { alpha_scale: a.alpha_scale, lambda_scale: a.lambda_scale, ..OfflineConfig::for_behavior(&behavior) };
    let run = offline::run_offline(&m, &data, &behavior, &config, &a.learner.config(a.seed), a.seed)?;
    io::write_json(&a.out, &run.record)?;
    sidecar("offline", a.seed, a, &[&a.out])
}

fn bc_cmd(a: &BcArgs) -> Result<()> {
    let m = io::read_mdp(&a.mdp)?;
    let expert = io::read_dataset(&a.expert)?;
    let offline_data = io::read_dataset(&a.offline)?;
    let model = io::read_feature_model(&a.feature_model)?;
    let expert_pi = bc::expert_policy(&m, a.epsilon)?;
    let config = BcConfig {
        decoder_steps: a.decoder_steps,
        decoder_step_size: a.decoder_step_size,
        num_z_samples: a.z_samples,
        seed: a.seed,
    };
    let (metrics, _) = bc::run_latent_bc(&m, &model, &expert_pi, &expert, &offline_data, &config)?;
    io::write_json(&a.out, &metrics)?;
    sidecar("bc", a.seed, a, &[&a.out])
}

fn verify(a: &VerifyArgs) -> Result<()> {
    let suite: Suite = a.suite.parse()?;
    let mut output = diagnostics::run_suite(suite, a.seed)?;
    let mut outs: Vec<PathBuf> = vec![a.out.clone()];
    if let Some(sweep) = &output.sweep {
        let details = a.out.with_extension("sweep.csv");
        io::write_atomic(&details, io::records_to_csv(&sweep.points)?.as_bytes())?;
        for r in output.reports.iter_mut().filter(|r| r.name == "generalization_slope") {
            r.details_path = Some(details.display().to_string());
        }
        outs.push(details);
    }
    io::write_json(&a.out, &output.reports)?;
    for r in &output.reports {
        println!("{} {}: {} instances, {} violations", if r.passed() { "PASS" } else { "FAIL" }, r.name, r.instances_checked, r.violations);
    }
    let refs: Vec<&Path> = outs.iter().map(|p| p.as_path()).collect();
    sidecar("verify", a.seed, a, &refs)
}
