use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "trainmap", version, about = "Seed-stability analysis of pre-training checkpoints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the 14 parameter statistics for every checkpoint of one or more runs.
    Stats(StatsArgs),
    /// Fit a Gaussian HMM to a size's statistic series.
    HmmFit(HmmFitArgs),
    /// Choose the number of HMM states by BIC.
    HmmSelect(HmmSelectArgs),
    /// Decode training maps with a fitted model.
    Map(MapArgs),
    /// Features whose emission means change most across a state transition.
    Drivers(DriversArgs),
    /// Mean and spread of the step of each consecutive state transition.
    Transitions(TransitionsArgs),
    /// Regress seed-averaged z-scores on bag-of-states counts.
    Predict(PredictArgs),
    /// Decode one size's runs with a model fitted on another size.
    ZeroShot(ZeroShotArgs),
    /// Regression R^2 with maps truncated at increasing steps.
    Truncate(TruncateArgs),
    /// Inter-seed Cohen's kappa against a reference seed.
    Kappa(KappaArgs),
    /// Kappa of every checkpoint against the final checkpoint of the same run.
    SelfConsistency(LogsArgs),
    /// Accuracy of prediction logs.
    Accuracy(LogsArgs),
    /// Seeds whose z-score leaves the threshold band.
    Outliers(OutliersArgs),
    /// Preference proportions from paired sentence scores.
    Bias(BiasArgs),
    /// Train a description-length probe on a representation dump.
    ProbeTrain(ProbeTrainArgs),
    /// Principal subspace angles between two trained probes.
    Ssa(SsaArgs),
    /// Correlation of metric trajectories across model sizes.
    Correlate(CorrelateArgs),
    /// Generate synthetic data with known ground truth.
    Synth(SynthArgs),
    /// Render CSV tables as SVG line charts.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    PerCheckpoint,
    Pooled,
}

#[derive(Debug, Args)]
pub struct StandardizeArgs {
    /// How features are standardized before fitting or decoding.
    #[arg(long, value_enum, default_value = "per-checkpoint")]
    pub mode: ModeArg,
    /// Features with std below this map to 0.
    #[arg(long, default_value_t = 1e-12)]
    pub epsilon: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub variance_floor: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Run manifests.
    #[arg(long = "manifest", required = true, num_args = 1..)]
    pub manifests: Vec<PathBuf>,
    /// Glob patterns selecting tensors by name.
    #[arg(long, default_values_t = vec!["*".to_string()])]
    pub include: Vec<String>,
    #[arg(long)]
    pub exclude: Vec<String>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct HmmFitArgs {
    #[arg(long)]
    pub stats: PathBuf,
    /// Model size to fit; required when the statistics hold several sizes.
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub states: usize,
    /// Only use checkpoints up to this step.
    #[arg(long)]
    pub max_step: Option<u64>,
    #[command(flatten)]
    pub standardize: StandardizeArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Model JSON; the fit report goes next to it as `<output>.fit.json`.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct HmmSelectArgs {
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub min_states: usize,
    #[arg(long, default_value_t = 8)]
    pub max_states: usize,
    #[command(flatten)]
    pub standardize: StandardizeArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// CSV `k,log_likelihood,bic,chosen`.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub size: Option<String>,
    #[command(flatten)]
    pub standardize: StandardizeArgs,
    /// CSV `size,seed,step,state,is_fork`.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DriversArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub from: usize,
    #[arg(long)]
    pub to: usize,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransitionsArgs {
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long)]
    pub states: usize,
    /// Wide CSV `size,group,mean_0_1,std_0_1,...` with groups `all`, `fork`, `no_fork`.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub maps: PathBuf,
    /// Accuracy CSV (`size,seed,task,accuracy`, optional `step`; the last step is used).
    #[arg(long)]
    pub accuracy: PathBuf,
    #[arg(long)]
    pub states: usize,
    /// Per-seed CSV `size,seed,z,fitted,residual,count_0,...`; the summary goes to `<output>.summary.csv`.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ZeroShotArgs {
    /// Model fitted on another size.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub size: Option<String>,
    #[command(flatten)]
    pub standardize: StandardizeArgs,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TruncateArgs {
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long)]
    pub accuracy: PathBuf,
    #[arg(long)]
    pub states: usize,
    /// Truncation steps; defaults to every step of the maps.
    #[arg(long, value_delimiter = ',')]
    pub steps: Vec<u64>,
    /// CSV `size,step,r2`.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct LogsArgs {
    /// Prediction logs (JSON Lines with a header line).
    #[arg(long = "logs", required = true, num_args = 1..)]
    pub logs: Vec<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct KappaArgs {
    #[command(flatten)]
    pub logs: LogsArgs,
    #[arg(long, default_value_t = 0)]
    pub reference_seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RuleArg {
    AnyTask,
    Majority,
}

#[derive(Debug, Args)]
pub struct OutliersArgs {
    #[arg(long)]
    pub accuracy: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value = "any-task")]
    pub rule: RuleArg,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    /// CSV `task,size,seed,step,stereotypical,anti_stereotypical` of per-pair scores.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PriorArg {
    LogUniform,
    StandardNormal,
}

#[derive(Debug, Args)]
pub struct ProbeTrainArgs {
    /// Representation dump to probe.
    #[arg(long)]
    pub dump: PathBuf,
    /// Dump of step-0 representations; enables the codelength ratio.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "log-uniform")]
    pub prior: PriorArg,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub heldout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probe JSON with its codelength report.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SsaArgs {
    /// Probe JSON written by `probe-train`.
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// CSV `index,angle_deg` followed by a `mean` row.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// Long CSV `size,task,step,value`.
    #[arg(long)]
    pub input: PathBuf,
    /// CSV `size_a,size_b,r,p_value`; the Fisher average goes to `<output>.summary.json`.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SynthKind {
    Series,
    Checkpoints,
    Logs,
    Probe,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of runs (series and checkpoints) or raters (logs).
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value = "synth")]
    pub size: String,
    /// Number of scripted regimes, evenly spaced over the schedule.
    #[arg(long, default_value_t = 3)]
    pub regimes: usize,
    /// Regime mean separation in noise std units.
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    /// Multiplier on every regime std.
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    /// Per-run jitter of the last regime switch, in checkpoints.
    #[arg(long, default_value_t = 0)]
    pub jitter: usize,
    /// Runs that get a spike into the last regime followed by a return to the first.
    #[arg(long, value_delimiter = ',')]
    pub anomaly_seeds: Vec<u64>,
    /// Std of the noise added to the synthetic performance scores.
    #[arg(long, default_value_t = 0.05)]
    pub score_noise: f64,
    #[arg(long, default_value_t = 10_000)]
    pub items: usize,
    #[arg(long, default_value_t = 4)]
    pub options: usize,
    #[arg(long, default_value_t = 0.5)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0.3)]
    pub accuracy: f64,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 250)]
    pub tokens_per_class: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Figure {
    Downstream,
    Maps,
    Truncation,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, value_enum)]
    pub figure: Figure,
    #[arg(long)]
    pub input: PathBuf,
    /// Mean and one std instead of median and interquartile range.
    #[arg(long)]
    pub mean_std: bool,
    #[arg(short, long)]
    pub output: PathBuf,
}
