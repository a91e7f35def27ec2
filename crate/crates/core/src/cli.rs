//! Command-line entry point.
//!
//! Every subcommand reads its flags, optionally merged with a JSON config
//! file (`--config`); flags given on the command line win. `--print-config`
//! dumps the merged values and exits.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adapt::{align_set, calibrate, fit_reference, AdaptMode, AlignMethod, AlignmentReference};
use crate::data::{
    bandpass, band_power_oracle, generate_synth_cohort, resample, write_cohort, Cohort, CohortSource, FileCohort,
    Role, SynthConfig, TrialSet,
};
use crate::eval::{binomial_test_greater, eds_with, evaluate, paired_ttest_onesided, predict_set, EvalReport};
use crate::linalg::Matrix;
use crate::mdm::{mdm_fit, par_update, MdmDomain, MdmModel, DEFAULT_PAR_BLEND};
use crate::model::checkpoint::read_container;
use crate::model::{ModelConfig, ModelState, PaddingMode};
use crate::rap::{computational_gain, plan_rap, windows_per_trial, OnlineTaskSpec};
use crate::stream::{
    events_to_predictions, hooks_for_mode, measure_latency, write_events, Decoder, Hook, SessionConfig, Stall,
    StreamEvent, StreamSession,
};
use crate::train::{bench_joint_vs_individual, run_training_with, training_subjects, write_log, Split, TrainConfig, TrainError};

/// Environment variable naming the default output directory.
pub const CACHE_DIR_ENV: &str = "RAPSTREAM_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "rapstream", version, about = "Real-time adaptive pooling EEG decoding")]
pub struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Print the merged subcommand configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    /// JSON object of subcommand options; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for per-seed and per-subject parallelism.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Exit 1 when a paced stream misses a deadline.
    #[arg(long, global = true)]
    pub strict: bool,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pooling layout for an online task.
    PlanRap(PlanRapArgs),
    /// Theoretical joint-decoding gain.
    Gain(GainArgs),
    /// Write a synthetic cohort with a manifest.
    Synth(SynthArgs),
    /// Train decoders for one target subject.
    Train(TrainArgs),
    /// Adapt a checkpoint to the target and score its online trials.
    Adapt(AdaptArgs),
    /// Replay the target's online trials window by window.
    Stream(StreamArgs),
    /// Aggregate stream event logs into a report.
    Eval(EvalArgs),
    /// Electrode drop scores.
    Eds(EdsArgs),
    /// One-sided paired t-test of two per-subject metric files.
    Ttest(TtestArgs),
    /// Measured joint versus per-window training step time.
    BenchGain(BenchGainArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PlanRapArgs {
    #[arg(long, default_value_t = 256.0)]
    pub fs: f64,
    /// Downsampling kernels, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [8])]
    pub down: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub window_len: f64,
    #[arg(long, default_value_t = 16.0)]
    pub update_freq: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GainArgs {
    #[arg(long, default_value_t = 4.75)]
    pub trial_len: f64,
    #[arg(long, default_value_t = 1.0)]
    pub window_len: f64,
    #[arg(long, default_value_t = 16.0)]
    pub update_freq: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Output directory; defaults to `$RAPSTREAM_CACHE_DIR/synth`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub subjects: usize,
    #[arg(long, default_value_t = 60)]
    pub trials: usize,
    #[arg(long, default_value_t = 1.0)]
    pub separability: f64,
    #[arg(long, default_value_t = 0.0)]
    pub subject_shift: f64,
    #[arg(long, default_value_t = 0.0)]
    pub session_shift: f64,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 128.0)]
    pub fs: f64,
    #[arg(long, default_value_t = 4.75)]
    pub trial_len: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    WithinSubject,
    CrossSubjectLoso,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignArg {
    None,
    Euclidean,
    Riemannian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetArg {
    Default,
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingArg {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderArg {
    Model,
    Mdm,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub target: String,
    #[arg(long, value_enum, default_value_t = SplitArg::CrossSubjectLoso)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Defaults to a fifth of the epochs.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Model seeds; defaults to five consecutive seeds starting at `--seed`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Source alignment applied per training subject.
    #[arg(long, value_enum, default_value_t = AlignArg::None)]
    pub align: AlignArg,
    /// Downsampling kernels; defaults to one kernel of fs/32.
    #[arg(long, value_delimiter = ',')]
    pub down: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub window_len: f64,
    #[arg(long, default_value_t = 16.0)]
    pub update_freq: f64,
    #[arg(long, value_enum, default_value_t = PresetArg::Default)]
    pub preset: PresetArg,
    #[arg(long, value_enum, default_value_t = PaddingArg::Valid)]
    pub padding: PaddingArg,
    #[arg(long, value_enum, default_value_t = DecoderArg::Model)]
    pub decoder: DecoderArg,
    /// Band-pass edges in Hz, `LOW,HIGH`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub bandpass: Vec<f64>,
    /// Resample to this rate before training.
    #[arg(long)]
    pub resample: Option<f64>,
    /// Output directory; defaults to `$RAPSTREAM_CACHE_DIR/train`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeArg {
    Calibration,
    Online,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TargetArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub target: String,
    /// Model checkpoints: none|ft|ea|ra|adabn|ea+adabn|ra+adabn|ft+ea|ft+ra.
    /// MDM checkpoints: none|ra|par|gr.
    #[arg(long, default_value = "none")]
    pub mode: String,
    #[arg(long, value_enum, default_value_t = RegimeArg::Online)]
    pub regime: RegimeArg,
    #[arg(long, default_value_t = 20)]
    pub finetune_epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub finetune_lr: f64,
    /// Pseudo-count of the source reference in online MDM recentering.
    #[arg(long, default_value_t = 1)]
    pub gr_prior: usize,
    #[arg(long, default_value_t = DEFAULT_PAR_BLEND)]
    pub par_blend: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AdaptArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub target: TargetArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct StreamArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub target: TargetArgs,
    /// Emit each window when its last sample would have arrived.
    #[arg(long)]
    pub paced: bool,
    /// JSON-lines event log.
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub reset_per_trial: bool,
    #[arg(long)]
    pub stall_tick: Option<u64>,
    #[arg(long, default_value_t = 0.0)]
    pub stall_ms: f64,
    #[arg(long)]
    pub max_events: Option<usize>,
    #[arg(long)]
    pub max_trials: Option<usize>,
    /// Extra single-window latency measurements after the replay.
    #[arg(long, default_value_t = 0)]
    pub latency_reps: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// `SUBJECT=events.jsonl`, repeatable.
    #[arg(long = "run", value_name = "SUBJECT=FILE", required = true)]
    pub runs: Vec<String>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "none")]
    pub method: String,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EdsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub target: String,
    #[arg(long, value_enum, default_value_t = RoleArg::Online)]
    pub role: RoleArg,
    /// Restrict to trials of this class.
    #[arg(long)]
    pub class: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleArg {
    Offline,
    Online,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TtestArgs {
    /// Numbers as a JSON array or whitespace-separated.
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchGainArgs {
    #[arg(long, default_value_t = 256.0)]
    pub fs: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [8])]
    pub down: Vec<usize>,
    #[arg(long, default_value_t = 27)]
    pub channels: usize,
    #[arg(long, default_value_t = 4.75)]
    pub trial_len: f64,
    #[arg(long, default_value_t = 1.0)]
    pub window_len: f64,
    #[arg(long, default_value_t = 16.0)]
    pub update_freq: f64,
    #[arg(long, default_value_t = 8)]
    pub trials: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, value_enum, default_value_t = PresetArg::Default)]
    pub preset: PresetArg,
}

/// Usage errors exit 2, everything else 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Domain(m) => f.write_str(m),
        }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

fn domain(msg: impl Into<String>) -> CliError {
    CliError::Domain(msg.into())
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli, &matches, &mut out) {
        Ok(code) => code,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, matches: &ArgMatches, out: &mut dyn Write) -> Result<i32, CliError> {
    let (_, sub) = matches
        .subcommand()
        .ok_or_else(|| CliError::Usage("missing subcommand".into()))?;
    let config = match &cli.config {
        Some(path) => Some(read_config(path)?),
        None => None,
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ctx = Context {
        json: cli.json,
        strict: cli.strict,
        seed: cli.seed,
        print_config: cli.print_config,
    };
    macro_rules! go {
        ($args:expr, $f:ident) => {{
            let args = merge_config($args, sub, config.as_ref())?;
            if ctx.print_config {
                writeln!(out, "{}", serde_json::to_string_pretty(&args).expect("serializable"))?;
                return Ok(0);
            }
            $f(&ctx, &args, out)
        }};
    }
    match cli.command {
        Command::PlanRap(a) => go!(a, cmd_plan_rap),
        Command::Gain(a) => go!(a, cmd_gain),
        Command::Synth(a) => go!(a, cmd_synth),
        Command::Train(a) => go!(a, cmd_train),
        Command::Adapt(a) => go!(a, cmd_adapt),
        Command::Stream(a) => go!(a, cmd_stream),
        Command::Eval(a) => go!(a, cmd_eval),
        Command::Eds(a) => go!(a, cmd_eds),
        Command::Ttest(a) => go!(a, cmd_ttest),
        Command::BenchGain(a) => go!(a, cmd_bench_gain),
    }
}

struct Context {
    json: bool,
    strict: bool,
    seed: u64,
    #[allow(dead_code)]
    print_config: bool,
}

fn read_config(path: &Path) -> Result<serde_json::Map<String, Value>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::Usage(format!("{}: config must be a JSON object", path.display()))),
        Err(e) => Err(CliError::Usage(format!("{}: {e}", path.display()))),
    }
}

/// Overlays config values on every option not given on the command line.
fn merge_config<T: Serialize + DeserializeOwned>(
    args: T,
    sub: &ArgMatches,
    config: Option<&serde_json::Map<String, Value>>,
) -> Result<T, CliError> {
    let Some(config) = config else {
        return Ok(args);
    };
    let Value::Object(mut current) = serde_json::to_value(&args).expect("serializable") else {
        unreachable!("argument structs serialize to objects")
    };
    for (key, value) in config {
        if !current.contains_key(key) {
            return Err(CliError::Usage(format!("unknown config key {key:?}")));
        }
        let from_flag = sub
            .try_get_raw(key)
            .ok()
            .and_then(|_| sub.value_source(key))
            .is_some_and(|s| s == ValueSource::CommandLine);
        if !from_flag {
            current.insert(key.clone(), value.clone());
        }
    }
    serde_json::from_value(Value::Object(current)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn cache_dir(sub: &str) -> PathBuf {
    let base = std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("rapstream-cache"));
    base.join(sub)
}

fn emit(out: &mut dyn Write, value: &Value) -> Result<(), CliError> {
    writeln!(out, "{}", serde_json::to_string(value).expect("serializable"))?;
    Ok(())
}

fn cmd_plan_rap(_: &Context, a: &PlanRapArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let task = OnlineTaskSpec::new(a.window_len, a.update_freq, None)?;
    let plan = plan_rap(a.fs, &a.down, &task)?;
    emit(out, &plan.summary_json())?;
    Ok(0)
}

fn cmd_gain(ctx: &Context, a: &GainArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let task = OnlineTaskSpec::new(a.window_len, a.update_freq, Some(a.trial_len))?;
    let gain = computational_gain(&task)?;
    if ctx.json {
        emit(out, &json!({"gain": gain, "windows_per_trial": windows_per_trial(&task)?}))?;
    } else {
        writeln!(out, "{gain:.4}")?;
    }
    Ok(0)
}

fn cmd_synth(ctx: &Context, a: &SynthArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = SynthConfig {
        subject_count: a.subjects,
        trials_per_subject: a.trials,
        class_separability: a.separability,
        subject_shift_scale: a.subject_shift,
        session_shift_scale: a.session_shift,
        rng_seed: ctx.seed,
        channel_count: a.channels,
        sampling_frequency: a.fs,
        trial_length: a.trial_len,
        ..SynthConfig::default()
    };
    let subjects = generate_synth_cohort(&cfg)?;
    let dir = a.out.clone().unwrap_or_else(|| cache_dir("synth"));
    let manifest = write_cohort(&dir, &Cohort::from(subjects.as_slice()))?;
    let oracle: Vec<f64> = subjects
        .iter()
        .map(|s| band_power_oracle(&s.offline))
        .collect::<Result<_, _>>()?;
    let mean_oracle = oracle.iter().sum::<f64>() / oracle.len() as f64;
    if ctx.json {
        emit(
            out,
            &json!({"manifest": manifest, "subjects": subjects.len(), "band_power_oracle": mean_oracle}),
        )?;
    } else {
        writeln!(out, "{} ({} subjects, band-power oracle {:.3})", manifest.display(), subjects.len(), mean_oracle)?;
    }
    Ok(0)
}

/// Written beside each checkpoint as `<stem>.json`; later commands prepare
/// target data the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub target: String,
    pub split: Split,
    pub seed: u64,
    pub source_align: Option<AlignMethod>,
    pub bandpass: Option<(f64, f64)>,
    pub resample: Option<f64>,
    pub window_len: f64,
    pub update_freq: f64,
}

impl RunInfo {
    pub fn path_for(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("json")
    }

    fn load(checkpoint: &Path) -> Result<Option<Self>, CliError> {
        let path = Self::path_for(checkpoint);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| domain(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| domain(format!("{}: {e}", path.display())))
    }

    /// Band-pass then resample, as at training time.
    pub fn prepare(&self, set: TrialSet) -> Result<TrialSet, CliError> {
        let mut set = set;
        if let Some((lo, hi)) = self.bandpass {
            let fs = set.spec.sampling_frequency;
            set = set.map_data(|x| bandpass(x, fs, lo, hi))?;
        }
        if let Some(to) = self.resample {
            let from = set.spec.sampling_frequency;
            set = set.map_data(|x| resample(x, from, to))?;
            set.spec.sampling_frequency = to;
        }
        Ok(set)
    }
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::WithinSubject => Split::WithinSubject,
        SplitArg::CrossSubjectLoso => Split::CrossSubjectLoso,
    }
}

fn align_of(a: AlignArg) -> Option<AlignMethod> {
    match a {
        AlignArg::None => None,
        AlignArg::Euclidean => Some(AlignMethod::Euclidean),
        AlignArg::Riemannian => Some(AlignMethod::Riemannian),
    }
}

/// Non-overlapping windows of `len` samples cut from every trial.
fn tile_windows(set: &TrialSet, len: usize) -> Result<(Vec<Matrix>, Vec<usize>), CliError> {
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    for t in &set.trials {
        for k in 0..t.n_samples() / len {
            windows.push(t.data.columns(k * len, (k + 1) * len)?);
            labels.push(t.label);
        }
    }
    if windows.is_empty() {
        return Err(domain(format!("subject {}: trials shorter than one window", set.subject_id)));
    }
    Ok((windows, labels))
}

fn cmd_train(ctx: &Context, a: &TrainArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cohort = FileCohort::open(&a.manifest)?;
    let classes = cohort.manifest.task.len();
    let bandpass = match a.bandpass.as_slice() {
        [] => None,
        [lo, hi] => Some((*lo, *hi)),
        _ => return Err(CliError::Usage("--bandpass takes LOW,HIGH".into())),
    };
    let seeds = if a.seeds.is_empty() {
        (ctx.seed..ctx.seed + 5).collect()
    } else {
        a.seeds.clone()
    };
    let mut info = RunInfo {
        target: a.target.clone(),
        split: split_of(a.split),
        seed: seeds[0],
        source_align: align_of(a.align),
        bandpass,
        resample: a.resample,
        window_len: a.window_len,
        update_freq: a.update_freq,
    };
    let dir = a.out.clone().unwrap_or_else(|| cache_dir("train"));
    fs::create_dir_all(&dir).map_err(|e| domain(format!("{}: {e}", dir.display())))?;
    let write_info = |info: &RunInfo, ckpt: &Path| -> Result<(), CliError> {
        let path = RunInfo::path_for(ckpt);
        fs::write(&path, serde_json::to_string_pretty(info).expect("serializable"))
            .map_err(|e| domain(format!("{}: {e}", path.display())))
    };

    let subjects = training_subjects(&cohort, &a.target, info.split)?;
    let first = info.prepare(cohort.load(&subjects[0], Role::Offline)?)?;
    let fs_hz = first.spec.sampling_frequency;
    let channels = first.spec.channel_count();

    if a.decoder == DecoderArg::Mdm {
        let len = (a.window_len * fs_hz).round() as usize;
        let mut domains = Vec::with_capacity(subjects.len());
        for s in &subjects {
            let set = info.prepare(cohort.load(s, Role::Offline)?)?;
            let (w, l) = tile_windows(&set, len)?;
            domains.push(MdmDomain::from_windows(&w, &l)?);
        }
        let model = mdm_fit(&domains, classes)?;
        let ckpt = dir.join(format!("{}_mdm.rapc", a.target));
        model.save(&ckpt)?;
        write_info(&info, &ckpt)?;
        if ctx.json {
            emit(out, &json!({"target": a.target, "training_subjects": subjects, "checkpoints": [ckpt]}))?;
        } else {
            writeln!(out, "{}", ckpt.display())?;
        }
        return Ok(0);
    }

    let down = if a.down.is_empty() {
        vec![((fs_hz / 32.0).round() as usize).max(1)]
    } else {
        a.down.clone()
    };
    let plan = plan_rap(fs_hz, &down, &OnlineTaskSpec::new(a.window_len, a.update_freq, None)?)?;
    let mut model_cfg = match a.preset {
        PresetArg::Default => ModelConfig::with_plan(channels, plan),
        PresetArg::Compact => ModelConfig::compact(channels, plan),
    };
    model_cfg.class_count = classes;
    model_cfg.padding_mode = match a.padding {
        PaddingArg::Valid => PaddingMode::Valid,
        PaddingArg::Same => PaddingMode::Same,
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        warmup_epochs: a.warmup.unwrap_or(a.epochs / 5),
        batch_size: a.batch_size,
        seeds,
        split: info.split,
        ..TrainConfig::default()
    };
    let prep = info.clone();
    let prepare = move |set: TrialSet| -> Result<TrialSet, TrainError> {
        let set = prep.prepare(set).map_err(|e| TrainError::Prepare(e.to_string()))?;
        match prep.source_align {
            Some(m) => Ok(align_set(&set, m).map_err(|e| TrainError::Prepare(e.to_string()))?.0),
            None => Ok(set),
        }
    };
    let outcomes = run_training_with(&cohort, &a.target, &model_cfg, &cfg, &prepare)?;
    let mut rows = Vec::new();
    for o in &outcomes {
        let ckpt = dir.join(format!("{}_seed{}.rapc", a.target, o.seed));
        o.model.save(&ckpt)?;
        info.seed = o.seed;
        write_info(&info, &ckpt)?;
        let log_path = ckpt.with_extension("log.jsonl");
        let mut f = BufWriter::new(fs::File::create(&log_path).map_err(|e| domain(format!("{}: {e}", log_path.display())))?);
        write_log(&mut f, &o.log)?;
        f.flush()?;
        let first = o.log.first().map_or(f64::NAN, |l| l.loss);
        let last = o.log.last().map_or(f64::NAN, |l| l.loss);
        rows.push(json!({"seed": o.seed, "checkpoint": ckpt, "first_loss": first, "final_loss": last}));
        if !ctx.json {
            writeln!(out, "seed {}: loss {first:.4} -> {last:.4}  {}", o.seed, ckpt.display())?;
        }
    }
    if ctx.json {
        emit(out, &json!({"target": a.target, "training_subjects": subjects, "runs": rows}))?;
    }
    Ok(0)
}

enum Checkpoint {
    Model(ModelState<f32>),
    Mdm(MdmModel),
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let c = read_container(path)?;
    match c.kind.as_str() {
        "model" => Ok(Checkpoint::Model(ModelState::from_container(&c)?)),
        "mdm" => Ok(Checkpoint::Mdm(MdmModel::from_container(&c)?)),
        k => Err(domain(format!("{}: unknown checkpoint kind {k:?}", path.display()))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MdmMode {
    None,
    Ra,
    Par,
    Gr,
}

/// Decoder, online hooks and the target's online trials, ready to stream.
#[derive(Clone)]
struct TargetPipeline {
    decoder: Decoder,
    hooks: Vec<Hook>,
    online: TrialSet,
    task: OnlineTaskSpec,
    method: String,
}

impl TargetPipeline {
    fn session(&self, config: SessionConfig) -> Result<StreamSession, CliError> {
        Ok(StreamSession::new(
            self.task,
            self.online.spec.sampling_frequency,
            self.online.spec.channel_count(),
            self.decoder.clone(),
            self.hooks.clone(),
            config,
        )?)
    }
}

fn build_pipeline(a: &TargetArgs, seed: u64) -> Result<TargetPipeline, CliError> {
    let cohort = FileCohort::open(&a.manifest)?;
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let info = RunInfo::load(&a.checkpoint)?;
    let prepare = |set: TrialSet| match &info {
        Some(i) => i.prepare(set),
        None => Ok(set),
    };
    let mut online = prepare(cohort.load(&a.target, Role::Online)?)?;
    let trial_length = online
        .trials
        .first()
        .map(|t| t.trial_length)
        .ok_or_else(|| domain(format!("subject {} has no online trials", a.target)))?;
    let calibration = || -> Result<TrialSet, CliError> { prepare(cohort.load(&a.target, Role::Offline)?) };
    match checkpoint {
        Checkpoint::Model(model) => {
            let mode: AdaptMode = a.mode.parse().map_err(|e: crate::adapt::AdaptError| CliError::Usage(e.to_string()))?;
            let task = model.config().rap_plan.task(Some(trial_length));
            match a.regime {
                RegimeArg::Online => {
                    if mode.finetune {
                        return Err(CliError::Usage(format!("mode {mode} needs --regime calibration")));
                    }
                    let hooks = hooks_for_mode(mode, &model)?;
                    Ok(TargetPipeline {
                        decoder: Decoder::Model(Box::new(model)),
                        hooks,
                        online,
                        task,
                        method: format!("{mode}/online"),
                    })
                }
                RegimeArg::Calibration => {
                    let ft = TrainConfig {
                        learning_rate: a.finetune_lr,
                        epochs: a.finetune_epochs,
                        seeds: vec![seed],
                        ..TrainConfig::finetune()
                    };
                    let cal = calibrate(&model, &calibration()?, mode, &ft)?;
                    if let Some(r) = &cal.reference {
                        online = online.map_data(|x| r.align(x).map_err(|e| crate::data::DataError::Config(e.to_string())))?;
                    }
                    Ok(TargetPipeline {
                        decoder: Decoder::Model(Box::new(cal.model)),
                        hooks: Vec::new(),
                        online,
                        task,
                        method: format!("{mode}/calibration"),
                    })
                }
            }
        }
        Checkpoint::Mdm(model) => {
            let mode = match a.mode.as_str() {
                "none" => MdmMode::None,
                "ra" => MdmMode::Ra,
                "par" => MdmMode::Par,
                "gr" => MdmMode::Gr,
                m => return Err(CliError::Usage(format!("MDM mode must be none|ra|par|gr, got {m:?}"))),
            };
            let info = info.as_ref().ok_or_else(|| {
                domain(format!(
                    "{}: missing {}",
                    a.checkpoint.display(),
                    RunInfo::path_for(&a.checkpoint).display()
                ))
            })?;
            let task = OnlineTaskSpec::new(info.window_len, info.update_freq, Some(trial_length))?;
            let len = (info.window_len * online.spec.sampling_frequency).round() as usize;
            let source = AlignmentReference::from_mean(AlignMethod::Riemannian, model.source_reference.clone(), 1)?;
            let (decoder, hooks) = match mode {
                MdmMode::None => (
                    Decoder::Mdm {
                        model,
                        reference: Some(source),
                    },
                    Vec::new(),
                ),
                MdmMode::Gr => {
                    let r = model.gr_reference(a.gr_prior)?;
                    (Decoder::Mdm { model, reference: None }, vec![Hook::Recenter(r)])
                }
                MdmMode::Ra => {
                    let (w, _) = tile_windows(&calibration()?, len)?;
                    let r = fit_reference(&w, AlignMethod::Riemannian)?;
                    (
                        Decoder::Mdm {
                            model,
                            reference: Some(r),
                        },
                        Vec::new(),
                    )
                }
                MdmMode::Par => {
                    let (w, l) = tile_windows(&calibration()?, len)?;
                    let outcome = par_update(&model, &MdmDomain::from_windows(&w, &l)?, a.par_blend)?;
                    for w in &outcome.warnings {
                        eprintln!("warning: {w}");
                    }
                    (
                        Decoder::Mdm {
                            model: outcome.model,
                            reference: Some(outcome.reference),
                        },
                        Vec::new(),
                    )
                }
            };
            if a.regime == RegimeArg::Online && matches!(mode, MdmMode::Ra | MdmMode::Par) {
                return Err(CliError::Usage(format!("MDM mode {} needs --regime calibration", a.mode)));
            }
            Ok(TargetPipeline {
                decoder,
                hooks,
                online,
                task,
                method: format!("mdm:{}", a.mode),
            })
        }
    }
}

fn cmd_adapt(ctx: &Context, a: &AdaptArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let p = build_pipeline(&a.target, ctx.seed)?;
    let preds = match (&p.decoder, p.hooks.is_empty()) {
        (Decoder::Model(m), true) => predict_set(m, &p.online)?,
        _ => {
            let (events, _) = p.session(SessionConfig::default())?.run(&p.online)?;
            events_to_predictions(&events, &p.online)?
        }
    };
    let report = evaluate(&preds)?;
    let correct = (report.tacc * report.n_trials as f64).round() as u64;
    let p_chance = binomial_test_greater(correct, report.n_trials as u64, 1.0 / p.online_classes())?;
    if ctx.json {
        emit(
            out,
            &json!({"target": a.target.target, "method": p.method, "report": report, "p_above_chance": p_chance}),
        )?;
    } else {
        writeln!(
            out,
            "{} {}: tacc {:.3} utacc(majority) {:.3} wacc {:.3} (p above chance {:.2e})",
            a.target.target, p.method, report.tacc, report.utacc, report.wacc, p_chance
        )?;
    }
    Ok(0)
}

impl TargetPipeline {
    fn online_classes(&self) -> f64 {
        match &self.decoder {
            Decoder::Model(m) => m.config().class_count as f64,
            Decoder::Mdm { model, .. } => model.classes() as f64,
            Decoder::Constant(r) => r.len() as f64,
        }
    }
}

fn cmd_stream(ctx: &Context, a: &StreamArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut p = build_pipeline(&a.target, ctx.seed)?;
    if let Some(n) = a.max_trials {
        p.online.trials.truncate(n);
    }
    let config = SessionConfig {
        reset_per_trial: a.reset_per_trial,
        real_time: a.paced,
        max_events: a.max_events,
        stall: a.stall_tick.map(|tick| Stall { tick, ms: a.stall_ms }),
    };
    let (events, summary) = p.session(config)?.run(&p.online)?;
    if let Some(path) = &a.events {
        let mut f = BufWriter::new(fs::File::create(path).map_err(|e| domain(format!("{}: {e}", path.display())))?);
        write_events(&mut f, &events)?;
        f.flush()?;
    }
    let latency = if a.latency_reps > 0 {
        Some(measure_latency(&mut p.session(SessionConfig::default())?, &p.online, a.latency_reps, 10)?)
    } else {
        None
    };
    let report = evaluate(&events_to_predictions(&events, &p.online)?).ok();
    if ctx.json {
        emit(
            out,
            &json!({"target": a.target.target, "method": p.method, "summary": summary, "latency": latency, "report": report}),
        )?;
    } else {
        writeln!(
            out,
            "{} events, {} trials, latency mean {:.3} ms p95 {:.3} ms max {:.3} ms, {} deadline misses ({} ms)",
            summary.events,
            summary.trials,
            summary.latency.mean,
            summary.latency.p95,
            summary.latency.max,
            summary.deadline_misses,
            summary.deadline_ms
        )?;
        if let Some(l) = latency {
            writeln!(out, "single-window decode: mean {:.3} ms p95 {:.3} ms over {}", l.mean, l.p95, l.count)?;
        }
        if let Some(r) = report {
            writeln!(out, "tacc {:.3} utacc(majority) {:.3} wacc {:.3}", r.tacc, r.utacc, r.wacc)?;
        }
    }
    if ctx.strict && a.paced && summary.deadline_misses > 0 {
        return Err(domain(format!("{} deadline misses in paced mode", summary.deadline_misses)));
    }
    Ok(0)
}

fn read_events(path: &Path) -> Result<Vec<StreamEvent>, CliError> {
    let f = fs::File::open(path).map_err(|e| domain(format!("{}: {e}", path.display())))?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line).map_err(|e| domain(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(events)
}

fn cmd_eval(ctx: &Context, a: &EvalArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cohort = FileCohort::open(&a.manifest)?;
    let mut subjects = Vec::new();
    for run in &a.runs {
        let (id, path) = run
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--run expects SUBJECT=FILE, got {run:?}")))?;
        let set = cohort.load(id, Role::Online)?;
        let preds = events_to_predictions(&read_events(Path::new(path))?, &set)?;
        subjects.push((id.to_string(), evaluate(&preds)?));
    }
    let report = EvalReport::from_subjects(&a.method, &subjects)?;
    if let Some(path) = &a.csv {
        fs::write(path, report.to_csv()).map_err(|e| domain(format!("{}: {e}", path.display())))?;
    }
    if ctx.json {
        emit(out, &serde_json::to_value(&report).expect("serializable"))?;
    } else {
        write!(out, "{}", report.to_csv())?;
    }
    Ok(0)
}

fn cmd_eds(ctx: &Context, a: &EdsArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let Checkpoint::Model(model) = load_checkpoint(&a.checkpoint)? else {
        return Err(domain("electrode drop scores need a model checkpoint"));
    };
    let info = RunInfo::load(&a.checkpoint)?;
    let cohort = FileCohort::open(&a.manifest)?;
    let role = match a.role {
        RoleArg::Offline => Role::Offline,
        RoleArg::Online => Role::Online,
    };
    let mut set = cohort.load(&a.target, role)?;
    if let Some(i) = &info {
        set = i.prepare(set)?;
        if let Some(m) = i.source_align {
            set = align_set(&set, m)?.0;
        }
    }
    let decode = |x: &Matrix| Ok(model.predict(x)?);
    let scores: Vec<f64> = (0..set.spec.channel_count())
        .map(|c| eds_with(&decode, &set, c, a.class))
        .collect::<Result<_, _>>()?;
    if ctx.json {
        emit(out, &json!({"target": a.target, "class": a.class, "channels": set.spec.channel_names, "eds": scores}))?;
    } else {
        for (name, s) in set.spec.channel_names.iter().zip(&scores) {
            writeln!(out, "{name}\t{s:.4}")?;
        }
    }
    Ok(0)
}

fn read_numbers(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| domain(format!("{}: {e}", path.display())))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| domain(format!("{}: {e}", path.display())));
    }
    text.split_whitespace()
        .map(|t| t.parse().map_err(|_| domain(format!("{}: not a number: {t:?}", path.display()))))
        .collect()
}

fn cmd_ttest(ctx: &Context, a: &TtestArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let t = paired_ttest_onesided(&read_numbers(&a.a)?, &read_numbers(&a.b)?)?;
    if ctx.json {
        emit(out, &serde_json::to_value(t).expect("serializable"))?;
    } else {
        writeln!(out, "t={:.4} df={} p={:.4}", t.t, t.df, t.p)?;
    }
    Ok(0)
}

fn cmd_bench_gain(ctx: &Context, a: &BenchGainArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let plan = plan_rap(a.fs, &a.down, &OnlineTaskSpec::new(a.window_len, a.update_freq, None)?)?;
    let cfg = match a.preset {
        PresetArg::Default => ModelConfig::with_plan(a.channels, plan),
        PresetArg::Compact => ModelConfig::compact(a.channels, plan),
    };
    let b = bench_joint_vs_individual(&cfg, a.trial_len, a.trials, a.reps, ctx.seed)?;
    if ctx.json {
        emit(out, &serde_json::to_value(&b).expect("serializable"))?;
    } else {
        writeln!(
            out,
            "joint {:.1} ms, individual {:.1} ms, measured gain {:.2} (theoretical {:.4})",
            b.joint_ms, b.individual_ms, b.measured_gain, b.theoretical_gain
        )?;
    }
    Ok(0)
}

/// Settings of [`run_harness`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Empty means every subject in the manifest.
    pub targets: Vec<String>,
    pub modes: Vec<AdaptMode>,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub compact: bool,
    pub bandpass: Option<(f64, f64)>,
    pub resample: Option<f64>,
    pub window_len: f64,
    pub update_freq: f64,
    /// Downsampling kernels; empty means one kernel of fs/32.
    pub down: Vec<usize>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            targets: Vec::new(),
            modes: AdaptMode::all(),
            train: TrainConfig::default(),
            finetune: TrainConfig::finetune(),
            compact: false,
            bandpass: None,
            resample: None,
            window_len: 1.0,
            update_freq: 16.0,
            down: Vec::new(),
        }
    }
}

/// One report per adaptation mode plus a one-sided paired t-test of its
/// per-subject TAcc against `none`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessReport {
    pub reports: Vec<EvalReport>,
    pub versus_none: Vec<Option<crate::eval::TTest>>,
}

impl HarnessReport {
    /// All modes in one table.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.reports.iter().enumerate() {
            let csv = r.to_csv();
            out += if i == 0 { &csv } else { csv.split_once('\n').map_or("", |(_, rest)| rest) };
        }
        out
    }
}

/// LOSO train → adapt → stream → eval over the manifest's subjects.
///
/// Modes with fine-tuning run in the calibration regime, all others online.
/// Source models are trained with the alignment of the mode that uses them.
/// Per-subject metrics are averaged over training seeds.
pub fn run_harness(manifest: &Path, cfg: &HarnessConfig) -> Result<HarnessReport, CliError> {
    let cohort = FileCohort::open(manifest)?;
    let classes = cohort.manifest.task.len();
    let targets = if cfg.targets.is_empty() { cohort.subjects() } else { cfg.targets.clone() };
    if cfg.modes.is_empty() || targets.is_empty() {
        return Err(domain("harness needs at least one mode and one target"));
    }
    let info = RunInfo {
        target: String::new(),
        split: cfg.train.split,
        seed: 0,
        source_align: None,
        bandpass: cfg.bandpass,
        resample: cfg.resample,
        window_len: cfg.window_len,
        update_freq: cfg.update_freq,
    };
    let mut per_mode: Vec<Vec<(String, crate::eval::MetricReport)>> = vec![Vec::new(); cfg.modes.len()];
    for target in &targets {
        let online = info.prepare(cohort.load(target, Role::Online)?)?;
        let offline = info.prepare(cohort.load(target, Role::Offline)?)?;
        let fs_hz = online.spec.sampling_frequency;
        let down = if cfg.down.is_empty() {
            vec![((fs_hz / 32.0).round() as usize).max(1)]
        } else {
            cfg.down.clone()
        };
        let plan = plan_rap(fs_hz, &down, &OnlineTaskSpec::new(cfg.window_len, cfg.update_freq, None)?)?;
        let channels = online.spec.channel_count();
        let mut model_cfg = if cfg.compact {
            ModelConfig::compact(channels, plan)
        } else {
            ModelConfig::with_plan(channels, plan)
        };
        model_cfg.class_count = classes;
        let trial_length = online.trials.first().map_or(cfg.window_len, |t| t.trial_length);
        let task = model_cfg.rap_plan.task(Some(trial_length));

        let mut sources: Vec<(Option<AlignMethod>, Vec<ModelState<f32>>)> = Vec::new();
        for mode in &cfg.modes {
            if sources.iter().any(|(a, _)| *a == mode.align) {
                continue;
            }
            let align = mode.align;
            let prep = info.clone();
            let prepare = move |set: TrialSet| -> Result<TrialSet, TrainError> {
                let set = prep.prepare(set).map_err(|e| TrainError::Prepare(e.to_string()))?;
                match align {
                    Some(m) => Ok(align_set(&set, m).map_err(|e| TrainError::Prepare(e.to_string()))?.0),
                    None => Ok(set),
                }
            };
            let models = run_training_with(&cohort, target, &model_cfg, &cfg.train, &prepare)?
                .into_iter()
                .map(|o| o.model)
                .collect();
            sources.push((align, models));
        }

        for (mi, mode) in cfg.modes.iter().enumerate() {
            let models = &sources.iter().find(|(a, _)| *a == mode.align).expect("trained above").1;
            let mut reports = Vec::with_capacity(models.len());
            for model in models {
                let preds = if mode.finetune {
                    let cal = calibrate(model, &offline, *mode, &cfg.finetune)?;
                    let set = match &cal.reference {
                        Some(r) => online.map_data(|x| {
                            r.align(x).map_err(|e| crate::data::DataError::Config(e.to_string()))
                        })?,
                        None => online.clone(),
                    };
                    predict_set(&cal.model, &set)?
                } else {
                    let hooks = hooks_for_mode(*mode, model)?;
                    let mut session = StreamSession::new(
                        task,
                        fs_hz,
                        channels,
                        Decoder::Model(Box::new(model.clone())),
                        hooks,
                        SessionConfig::default(),
                    )?;
                    let (events, _) = session.run(&online)?;
                    events_to_predictions(&events, &online)?
                };
                reports.push(evaluate(&preds)?);
            }
            per_mode[mi].push((target.clone(), average_reports(&reports)));
        }
    }
    let reports: Vec<EvalReport> = cfg
        .modes
        .iter()
        .zip(&per_mode)
        .map(|(m, rows)| EvalReport::from_subjects(&m.to_string(), rows))
        .collect::<Result<_, _>>()?;
    let none = cfg.modes.iter().position(|m| *m == AdaptMode::NONE);
    let versus_none = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let base = none.filter(|&n| n != i && r.per_subject.len() > 1)?;
            let a: Vec<f64> = r.per_subject.iter().map(|s| s.tacc).collect();
            let b: Vec<f64> = reports[base].per_subject.iter().map(|s| s.tacc).collect();
            paired_ttest_onesided(&a, &b).ok()
        })
        .collect();
    Ok(HarnessReport { reports, versus_none })
}

fn average_reports(reports: &[crate::eval::MetricReport]) -> crate::eval::MetricReport {
    let n = reports.len() as f64;
    let mean = |f: fn(&crate::eval::MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let curve = reports[0].per_window_accuracy.as_ref().map(|c0| {
        (0..c0.len())
            .map(|j| {
                reports
                    .iter()
                    .map(|r| r.per_window_accuracy.as_ref().map_or(f64::NAN, |c| c.get(j).copied().unwrap_or(f64::NAN)))
                    .sum::<f64>()
                    / n
            })
            .collect()
    });
    crate::eval::MetricReport {
        tacc: mean(|r| r.tacc),
        utacc: mean(|r| r.utacc),
        wacc: mean(|r| r.wacc),
        per_window_accuracy: curve,
        n_trials: reports[0].n_trials,
        n_windows: reports[0].n_windows,
    }
}
