//! Command-line entry point.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use smoothdit_core::schedule::{alpha_for_cached_count, alpha_for_cached_fraction, schedule_stats};
use smoothdit_core::toy::{train, Optimizer, ToyTaskConfig};
use smoothdit_core::{
    apply_strategy, dten, CalibrationConfig, CaptureBranch, Dit, ModelConfig, SamplerConfig, Strategy,
};

use crate::bench::{bench_sweep, compare_cache_vs_reduced, SweepConfig, Threshold};
use crate::checkpoint::{self, TrainingRecord};
use crate::formats::{
    schedule_fingerprint, DivergenceJson, ProfileFile, Provenance, SamplerJson, ScheduleFile, StatsFile,
};
use crate::fsio::{read, sha256_hex, to_json_bytes, write_atomic, write_json};
use crate::runs::{self, calibrate_parallel, eval_inputs, with_threads};

#[derive(Debug, Parser)]
#[command(name = "smoothdit", version, about = "Diffusion-transformer sampling with calibrated layer caching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy flow-matching model and write a checkpoint.
    TrainToy(TrainArgs),
    /// Measure per-layer step-to-step errors and write an error profile.
    Calibrate(CalibrateArgs),
    /// Turn an error profile into a cache schedule.
    Schedule(ScheduleArgs),
    /// Sample once, optionally under a cache schedule.
    Infer(InferArgs),
    /// Threshold sweep against uncached baselines.
    Bench(BenchArgs),
    /// Cached sampling against uncached sampling with the cached steps removed.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CaptureArg {
    Cond,
    Uncond,
    Both,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = ModelConfig::default().depth)]
    pub depth: usize,
    #[arg(long, default_value_t = ModelConfig::default().width)]
    pub width: usize,
    #[arg(long, default_value_t = ModelConfig::default().heads)]
    pub heads: usize,
    #[arg(long, default_value_t = ModelConfig::default().ffn_mult)]
    pub ffn_mult: usize,
    #[arg(long, default_value_t = ModelConfig::default().seq_len)]
    pub seq_len: usize,
    #[arg(long, default_value_t = ModelConfig::default().in_dim)]
    pub in_dim: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Weight initialisation seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = ToyTaskConfig::default().data_seed)]
    pub data_seed: u64,
    #[arg(long, default_value_t = ToyTaskConfig::default().train_steps)]
    pub steps: usize,
    #[arg(long, default_value_t = ToyTaskConfig::default().batch)]
    pub batch: usize,
    #[arg(long, default_value_t = ToyTaskConfig::default().lr)]
    pub lr: f32,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    /// Probability of training a step on the unconditional branch.
    #[arg(long, default_value_t = ToyTaskConfig::default().cond_drop)]
    pub cond_drop: f32,
    #[arg(long, default_value_t = ToyTaskConfig::default().eval_every)]
    pub eval_every: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = SamplerConfig::default().nfe)]
    pub nfe: usize,
    /// Guidance strength.
    #[arg(long = "cfg", default_value_t = SamplerConfig::default().cfg_strength, allow_hyphen_values = true)]
    pub cfg_strength: f32,
    /// Sway coefficient in [-1, 1].
    #[arg(long = "sway", default_value_t = SamplerConfig::default().sway_coeff, allow_hyphen_values = true)]
    pub sway_coeff: f32,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Checkpoint manifest or its directory.
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value_t = CalibrationConfig::default().sample_count)]
    pub samples: usize,
    /// Seed of the calibration inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "cond")]
    pub capture: CaptureArg,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("threshold").required(true).args(["alpha", "target_fraction", "cached_count"])))]
pub struct ScheduleArgs {
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Choose the threshold whose schedule caches closest to this fraction.
    #[arg(long)]
    pub target_fraction: Option<f64>,
    /// Choose the smallest threshold caching exactly this many steps in every layer.
    #[arg(long)]
    pub cached_count: Option<usize>,
    #[arg(long, default_value = "unified-attn")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = smoothdit_core::schedule::DEFAULT_MAX_CONSECUTIVE)]
    pub cap: usize,
    /// Average each layer kind's errors over blocks first, giving every block the same mask.
    #[arg(long)]
    pub pool_blocks: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Seed of the noise and conditioning.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Which input of the seed's stream to use.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Conditioning tensor (DTEN) replacing the generated one.
    #[arg(long)]
    pub cond: Option<PathBuf>,
    /// Also run uncached and record the divergence in the stats.
    #[arg(long)]
    pub divergence: bool,
    /// Final state as DTEN; provenance goes next to it as `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "cfg", default_value_t = SamplerConfig::default().cfg_strength, allow_hyphen_values = true)]
    pub cfg_strength: f32,
    #[arg(long = "sway", default_value_t = SamplerConfig::default().sway_coeff, allow_hyphen_values = true)]
    pub sway_coeff: f32,
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
    #[arg(long, default_value_t = 32)]
    pub eval_count: usize,
    /// Timed runs per arm, after one warm-up run each.
    #[arg(long, default_value_t = 16)]
    pub timing_runs: usize,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("threshold").required(true).multiple(true).args(["alpha", "target_fraction"])))]
pub struct BenchArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Error profiles; each is used for the nfe it was calibrated at.
    #[arg(long, required = true, num_args = 1..)]
    pub profile: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub nfe: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub target_fraction: Vec<f64>,
    #[arg(long, default_value = "unified-attn")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = smoothdit_core::schedule::DEFAULT_MAX_CONSECUTIVE)]
    pub cap: usize,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Human-readable table; printed to stdout either way.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Schedule with the same cached count in every layer.
    #[arg(long)]
    pub schedule: PathBuf,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn load_weights(path: &Path) -> Result<(checkpoint::Loaded, Provenance)> {
    let loaded = checkpoint::load(path)?;
    let mut prov = Provenance::new();
    prov.inputs.insert(display(&loaded.manifest_path), loaded.manifest_sha256.clone());
    prov.model_checksum = Some(loaded.manifest.model_checksum.clone());
    Ok((loaded, prov))
}

fn sampler_config(s: &SamplerArgs, seed: u64) -> Result<SamplerConfig> {
    let c = SamplerConfig {
        nfe: s.nfe,
        cfg_strength: s.cfg_strength,
        sway_coeff: s.sway_coeff,
        seed,
    };
    c.validate()?;
    Ok(c)
}

fn train_toy(args: &TrainArgs) -> Result<()> {
    let config = ModelConfig {
        depth: args.model.depth,
        width: args.model.width,
        heads: args.model.heads,
        ffn_mult: args.model.ffn_mult,
        seq_len: args.model.seq_len,
        in_dim: args.model.in_dim,
    };
    let task = ToyTaskConfig {
        train_steps: args.steps,
        batch: args.batch,
        lr: args.lr,
        optimizer: match args.optimizer {
            OptimizerArg::Adam => Optimizer::adam(),
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        data_seed: args.data_seed,
        cond_drop: args.cond_drop,
        eval_every: args.eval_every,
        ..ToyTaskConfig::default()
    };
    task.validate()?;
    let model = Dit::init(config, args.seed)?;
    eprintln!("model: {config:?}, {} parameters", model.param_count());
    eprintln!("task: {task:?}");
    let result = train(&model, &task, |p| {
        if let Some(h) = p.heldout_loss {
            eprintln!("step {:>5}  train {:.5}  heldout {:.5}", p.step + 1, p.train_loss, h);
        }
    });
    let (model, curve, record, failure) = match result {
        Ok(t) => {
            let record = TrainingRecord {
                init_seed: args.seed,
                data_seed: args.data_seed,
                train_steps: args.steps,
                batch: args.batch,
                lr: args.lr,
                optimizer: format!("{:?}", task.optimizer),
                cond_drop: args.cond_drop,
                initial_heldout_loss: t.initial_heldout,
                final_heldout_loss: t.final_heldout,
                loss_curve: "loss_curve.csv".into(),
            };
            eprintln!(
                "held-out loss {:.5} -> {:.5} ({:.1}% lower)",
                t.initial_heldout,
                t.final_heldout,
                100.0 * (1.0 - t.final_heldout / t.initial_heldout)
            );
            (t.model, t.curve, Some(record), None)
        }
        Err(d) => (d.last_good, d.curve, None, Some(d.error)),
    };
    let mut csv = String::new();
    let _ = writeln!(csv, "# tool_version: {}", crate::formats::TOOL_VERSION);
    let _ = writeln!(csv, "# init_seed: {}, data_seed: {}", args.seed, args.data_seed);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "train_loss", "heldout_loss"])?;
    for p in &curve {
        w.write_record([
            (p.step + 1).to_string(),
            p.train_loss.to_string(),
            p.heldout_loss.map(|h| h.to_string()).unwrap_or_default(),
        ])?;
    }
    csv.push_str(&String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?);
    write_atomic(&args.out.join("loss_curve.csv"), csv.as_bytes())?;
    checkpoint::save(&args.out, &model, args.data_seed, record)?;
    if let Some(e) = failure {
        bail!("training stopped: {e}; last good weights written to {}", display(&args.out));
    }
    eprintln!("wrote {}", display(&args.out.join(checkpoint::MANIFEST_NAME)));
    Ok(())
}

fn calibrate_cmd(args: &CalibrateArgs) -> Result<()> {
    let (loaded, mut prov) = load_weights(&args.weights)?;
    let sampler = sampler_config(&args.sampler, args.seed)?;
    let config = CalibrationConfig {
        sample_count: args.samples,
        sampler,
        capture_branch: match args.capture {
            CaptureArg::Cond => CaptureBranch::Cond,
            CaptureArg::Uncond => CaptureBranch::Uncond,
            CaptureArg::Both => CaptureBranch::Both,
        },
    };
    if config.sample_count == 0 {
        bail!("--samples must be at least 1");
    }
    let inputs = runs::calibration_inputs(&loaded.model, args.seed, args.samples);
    let profile = with_threads(args.threads, || calibrate_parallel(&loaded.model, &inputs, &config))??;
    prov.sampler = Some(SamplerJson::from(&sampler));
    prov.seeds = runs::seed_labels(args.seed, "calibration", args.samples);
    write_json(&args.out, &ProfileFile::new(&profile, Some(prov)))?;
    eprintln!("wrote {}", display(&args.out));
    Ok(())
}

fn schedule_cmd(args: &ScheduleArgs) -> Result<()> {
    let bytes = read(&args.profile)?;
    let file: ProfileFile =
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", display(&args.profile)))?;
    let mut profile = file.profile()?;
    if args.pool_blocks {
        profile = profile.pooled_by_kind();
    }
    let alpha = match (args.alpha, args.target_fraction, args.cached_count) {
        (Some(a), _, _) => a,
        (_, Some(f), _) => alpha_for_cached_fraction(&profile, f, args.cap, args.strategy)?,
        (_, _, Some(c)) => alpha_for_cached_count(&profile, c, args.cap, args.strategy)?,
        _ => unreachable!("clap requires one threshold"),
    };
    let schedule = apply_strategy(&profile, alpha, args.cap, args.strategy)?;
    let stats = schedule_stats(&schedule);
    eprintln!(
        "alpha {alpha}: cached fraction {:.3}, cached steps per layer {:?}",
        stats.cached_fraction(),
        stats.cached_per_layer
    );
    let mut prov = Provenance::new().input(display(&args.profile), &bytes);
    prov.model_checksum = file.provenance.and_then(|p| p.model_checksum);
    write_json(&args.out, &ScheduleFile::new(&schedule, Some(prov)))?;
    eprintln!("wrote {}", display(&args.out));
    Ok(())
}

fn read_schedule(path: &Path) -> Result<(smoothdit_core::CacheSchedule, Vec<u8>)> {
    let bytes = read(path)?;
    let file: ScheduleFile = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", display(path)))?;
    Ok((file.schedule()?, bytes))
}

fn infer_cmd(args: &InferArgs) -> Result<()> {
    let (loaded, mut prov) = load_weights(&args.weights)?;
    let model = &loaded.model;
    let sampler = sampler_config(&args.sampler, args.seed)?;
    let schedule = match &args.schedule {
        Some(p) => {
            let (s, bytes) = read_schedule(p)?;
            prov.inputs.insert(display(p), sha256_hex(&bytes));
            Some(s)
        }
        None => None,
    };
    let (noise, mut cond) = eval_inputs(model, args.seed, args.sample + 1).swap_remove(args.sample);
    prov.seeds = vec![format!("{}:bench:{}", args.seed, args.sample)];
    if let Some(p) = &args.cond {
        let bytes = read(p)?;
        cond = dten::decode(&bytes).with_context(|| format!("decoding {}", display(p)))?;
        prov.inputs.insert(display(p), sha256_hex(&bytes));
    }
    prov.sampler = Some(SamplerJson::from(&sampler));
    let input = (noise, cond);
    let (x, mut stats) = runs::timed_run(model, &input, &sampler, schedule.as_ref())?;
    stats.schedule_fingerprint = schedule.as_ref().map(schedule_fingerprint);
    let out_bytes = dten::encode(&x);
    write_atomic(&args.out, &out_bytes)?;
    let mut sidecar = prov.clone();
    sidecar.inputs.insert("output".into(), sha256_hex(&out_bytes));
    write_json(&sidecar_path(&args.out), &sidecar)?;
    eprintln!(
        "{} sublayer computes, {} cache hits, {:.3} ms",
        stats.sublayer_computes, stats.cache_hits, stats.wall_ms
    );
    if let Some(path) = &args.stats {
        let mut file = StatsFile::new(&stats, prov);
        if args.divergence {
            let (reference, _) = runs::timed_run(model, &input, &sampler, None)?;
            let d = smoothdit_core::divergence(&x, &reference)?;
            file.divergence_vs_uncached = Some(DivergenceJson::from(d));
        }
        write_json(path, &file)?;
    }
    eprintln!("wrote {}", display(&args.out));
    Ok(())
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn bench_cmd(args: &BenchArgs) -> Result<()> {
    let (loaded, prov) = load_weights(&args.weights)?;
    let mut header_inputs = prov.inputs.clone();
    let mut profiles = BTreeMap::new();
    for p in &args.profile {
        let bytes = read(p)?;
        let file: ProfileFile = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", display(p)))?;
        let profile = file.profile()?;
        if profiles.insert(profile.nfe, profile).is_some() {
            bail!("two profiles for the same nfe");
        }
        header_inputs.insert(display(p), sha256_hex(&bytes));
    }
    let mut thresholds: Vec<Threshold> = args.alpha.iter().map(|&a| Threshold::Alpha(a)).collect();
    thresholds.extend(args.target_fraction.iter().map(|&f| Threshold::CachedFraction(f)));
    let config = SweepConfig {
        nfe_list: args.nfe.clone(),
        thresholds,
        strategy: args.strategy,
        max_consecutive: args.cap,
        cfg_strength: args.eval.cfg_strength,
        sway_coeff: args.eval.sway_coeff,
        eval_seed: args.eval.eval_seed,
        eval_count: args.eval.eval_count,
        timing_runs: args.eval.timing_runs,
    };
    let eval = eval_inputs(&loaded.model, args.eval.eval_seed, args.eval.eval_count);
    let mut report = with_threads(args.eval.threads, || bench_sweep(&loaded.model, &eval, &profiles, &config))??;
    report.header.insert("tool_version".into(), crate::formats::TOOL_VERSION.into());
    report.header.insert("inputs".into(), serde_json::to_string(&header_inputs)?);
    report.header.insert("model_checksum".into(), loaded.manifest.model_checksum.clone());
    let table = report.to_table();
    print!("{table}");
    write_atomic(&args.out, report.to_csv()?.as_bytes())?;
    if let Some(t) = &args.table {
        write_atomic(t, table.as_bytes())?;
    }
    eprintln!("wrote {}", display(&args.out));
    Ok(())
}

fn compare_cmd(args: &CompareArgs) -> Result<()> {
    let (loaded, prov) = load_weights(&args.weights)?;
    let (schedule, bytes) = read_schedule(&args.schedule)?;
    let mut inputs = prov.inputs.clone();
    inputs.insert(display(&args.schedule), sha256_hex(&bytes));
    let eval = eval_inputs(&loaded.model, args.eval.eval_seed, args.eval.eval_count);
    let e = &args.eval;
    let mut report = with_threads(e.threads, || {
        compare_cache_vs_reduced(
            &loaded.model,
            &eval,
            e.cfg_strength,
            e.sway_coeff,
            e.eval_seed,
            &schedule,
            e.timing_runs,
        )
    })??;
    report.header.insert("tool_version".into(), crate::formats::TOOL_VERSION.into());
    report.header.insert("inputs".into(), serde_json::to_string(&inputs)?);
    report.header.insert("model_checksum".into(), loaded.manifest.model_checksum.clone());
    print!("{}", report.to_table());
    write_atomic(&args.out, report.to_csv()?.as_bytes())?;
    if let Some(j) = &args.json {
        write_atomic(j, &to_json_bytes(&report)?)?;
    }
    if !report.compute_parity {
        bail!("arms computed different numbers of sublayers");
    }
    eprintln!("wrote {}", display(&args.out));
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    eprintln!("{}: {:#?}", crate::formats::TOOL_VERSION, cli.command);
    match &cli.command {
        Command::TrainToy(a) => train_toy(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Schedule(a) => schedule_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Compare(a) => compare_cmd(a),
    }
}

/// Parses `args`, runs the subcommand and maps the outcome to an exit
/// code: 0 success, 1 failure while running, 2 bad usage.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

