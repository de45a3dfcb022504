//! The `aft` command line: synthetic data, training, ablations, sweeps,
//! probes and reports.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{
    ExperimentConfig, RegularizerSection, SweepExperimentConfig, SyntheticSection, TrainSection,
};
use config::{read_toml, resolve};

use crate::error::{Error, Result};
use crate::eval::{
    aggregate_normalized_error, linear_probe, mu_distribution_report, noise_robustness_sweep,
    run_method, weighted_probe_comparison, ErrorRecord, Method, ProbeConfig, SweepBase,
    SweepConfig,
};
use crate::featurestore::{
    read_features, read_labels, synth_dataset, Dataset, Splits, SyntheticSpec,
    DEFAULT_TEST_FRACTION,
};
use crate::models::Checkpoint;
use crate::regularizers::MuWeights;
use crate::trainer::RunRecord;

pub const THREADS_ENV: &str = "AFT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "aft", version, about = "Adaptive feature transfer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic transfer task and write it as a dataset.
    Synth(SynthArgs),
    /// Train one method from a config file.
    Train(TrainArgs),
    /// Train one AFT ablation variant from a config file.
    Ablate(AblateArgs),
    /// Run the noise-robustness sweep from a config file.
    Sweep(SweepArgs),
    /// Fit a linear probe on frozen features.
    Probe(ProbeArgs),
    /// Aggregate metrics files into a normalized-error table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of examples.
    #[arg(long)]
    pub n: usize,
    /// Label-relevant pre-trained feature columns.
    #[arg(long, default_value_t = 8)]
    pub d_signal: usize,
    /// Label-irrelevant columns that are also mixed into the inputs
    /// (defaults to --d-signal).
    #[arg(long)]
    pub d_distractor: Option<usize>,
    /// Pure-noise pre-trained feature columns.
    #[arg(long, default_value_t = 0)]
    pub d_noise: usize,
    /// Number of classes.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Softmax temperature of the label model.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Experiment config (TOML); its `method` is replaced by the variant.
    #[arg(long)]
    pub config: PathBuf,
    /// One of: no-kernel, identity-mu, dense-mu, rbf, bilevel.
    #[arg(long)]
    pub variant: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep config (TOML).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Dataset manifest; probes its pre-trained features with its splits.
    #[arg(long, conflicts_with_all = ["features", "labels"])]
    pub manifest: Option<PathBuf>,
    /// Probe the manifest's downstream inputs instead of its pre-trained features.
    #[arg(long, requires = "manifest")]
    pub inputs: bool,
    /// Feature file to probe (with --labels).
    #[arg(long, requires = "labels")]
    pub features: Option<PathBuf>,
    /// Label file matching --features.
    #[arg(long, requires = "features")]
    pub labels: Option<PathBuf>,
    /// Seed of the split used with --features/--labels.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Checkpoint holding a learned μ; also probes μ-weighted features.
    #[arg(long)]
    pub mu: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory containing `*.metrics` files.
    #[arg(long)]
    pub dir: PathBuf,
    /// Write the table here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status for an error: 2 for usage and config problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

/// Worker threads from `AFT_THREADS` (default 1).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a.config, None, out),
        Command::Ablate(a) => {
            let variant = Method::parse_ablation(&a.variant)?;
            cmd_train(&a.config, Some(variant), out)
        }
        Command::Sweep(a) => cmd_sweep(&a, out),
        Command::Probe(a) => cmd_probe(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let spec = SyntheticSpec {
        n_examples: a.n,
        d_signal: a.d_signal,
        d_distractor: a.d_distractor.unwrap_or(a.d_signal),
        d_noise: a.d_noise,
        n_classes: a.classes,
        label_temperature: a.temperature,
        seed: a.seed,
    };
    let data = synth_dataset(&spec)?;
    create_dir(&a.out)?;
    let written = data.write(&a.out)?;
    for (path, sum) in &written.files {
        say(out, format!("{sum}  {}", path.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<run-id>.metrics`, `<run-id>.ckpt` (plus tensor files) and a copy
/// of the config as `<run-id>.toml`. Refuses non-finite metrics.
fn write_run(
    dir: &Path,
    run_id: &str,
    record: &RunRecord,
    ckpt: &Checkpoint,
    config_text: &str,
) -> Result<Vec<PathBuf>> {
    let finite = record.steps.iter().all(|s| s.loss.is_finite() && s.reg.is_finite())
        && record.evals.iter().all(|e| e.accuracy.is_finite());
    if !finite {
        return Err(Error::State(format!("run {run_id} produced non-finite metrics")));
    }
    create_dir(dir)?;
    let metrics = dir.join(format!("{run_id}.metrics"));
    record.write(&metrics)?;
    let config_copy = dir.join(format!("{run_id}.toml"));
    write_text(&config_copy, config_text)?;
    let mut files = vec![metrics, config_copy];
    files.extend(ckpt.write(dir.join(format!("{run_id}.ckpt")))?);
    Ok(files)
}

pub fn cmd_train(config_path: &Path, variant: Option<Method>, out: &mut dyn Write) -> Result<()> {
    let (cfg, text): (ExperimentConfig, String) = read_toml(config_path)?;
    let base_dir = config_path.parent().unwrap_or(Path::new("."));
    let method = match variant {
        Some(v) => v,
        None => cfg.method()?,
    };
    let train = cfg.train.to_train_config(method, &cfg.regularizer);
    let data = Dataset::load(resolve(base_dir, &cfg.manifest))?;
    let init = cfg
        .init_checkpoint
        .as_ref()
        .map(|p| Checkpoint::read(resolve(base_dir, p)))
        .transpose()?;

    let grid = match (cfg.beta, &cfg.beta_grid) {
        (Some(b), _) => Some(vec![b]),
        (None, Some(g)) => Some(g.clone()),
        (None, None) => None,
    };
    let mut run = run_method(method, &train, &data, grid.as_deref(), init.as_ref())?;
    run.outcome.record.header.dataset = cfg.manifest.display().to_string();

    let run_id = cfg
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{}-s{}", method.name(), train.seed));
    let dir = resolve(base_dir, &cfg.out);
    let files = write_run(&dir, &run_id, &run.outcome.record, &run.outcome.checkpoint(), &text)?;
    say(
        out,
        format!(
            "{run_id}: method {} beta {} test_error {:.6}",
            method.name(),
            run.beta,
            run.test_error()
        ),
    )?;
    for (b, acc) in &run.holdout {
        say(out, format!("  holdout beta {b}: accuracy {acc:.6}"))?;
    }
    for f in files {
        say(out, format!("wrote {}", f.display()))?;
    }
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, text): (SweepExperimentConfig, String) = read_toml(&a.config)?;
    let base_dir = a.config.parent().unwrap_or(Path::new("."));
    let methods = cfg
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<Result<Vec<_>>>()?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }

    let mut signal_dims = None;
    let bases = match (&cfg.manifest, &cfg.synthetic) {
        (Some(m), None) => {
            let data = Dataset::load(resolve(base_dir, m))?;
            cfg.seeds
                .iter()
                .map(|&seed| SweepBase {
                    name: format!("data-s{seed}"),
                    seed,
                    dataset: data.clone(),
                })
                .collect::<Vec<_>>()
        }
        (None, Some(s)) => {
            signal_dims = Some(s.d_signal);
            cfg.seeds
                .iter()
                .map(|&seed| {
                    Ok(SweepBase {
                        name: format!("synth-s{seed}"),
                        seed,
                        dataset: synth_dataset(&SyntheticSpec {
                            n_examples: s.n_examples,
                            d_signal: s.d_signal,
                            d_distractor: s.d_distractor,
                            d_noise: 0,
                            n_classes: s.n_classes,
                            label_temperature: s.label_temperature,
                            seed,
                        })?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => {
            return Err(Error::Config(
                "sweep config needs exactly one of `manifest` and `[synthetic]`".into(),
            ))
        }
    };

    let sweep_cfg = SweepConfig {
        train: cfg.train.to_train_config(Method::Stl, &RegularizerSection::default()),
        threads: threads_from_env()?,
    };
    let outcome = noise_robustness_sweep(&bases, &cfg.d_noise, &methods, &sweep_cfg)?;

    let dir = resolve(base_dir, &cfg.out);
    create_dir(&dir)?;
    let mut report = outcome.report.to_table();
    report.push_str("\n# runs\nmethod\tdataset\tseed\tbeta\n");
    for r in &outcome.runs {
        report.push_str(&format!("{}\t{}\t{}\t{}\n", r.method, r.dataset_name(), r.seed, r.beta));
        let run_id = format!("{}-{}-{}", cfg.sweep_id, r.dataset_name(), r.method);
        write_run(&dir, &run_id, &r.outcome.record, &r.outcome.checkpoint(), &text)?;
    }
    if let Some(d_signal) = signal_dims {
        report.push_str("\n# mu\ndataset\tseed\tsignal_median\tnoise_median\n");
        for r in &outcome.runs {
            let Some(mu) = r.mu.as_ref().filter(|m| m.mode() == crate::regularizers::MuMode::Diagonal)
            else {
                continue;
            };
            if r.d_noise == 0 || r.method != Method::Aft {
                continue;
            }
            let d_psi = mu.d_psi();
            let noise: Vec<usize> = (d_psi - r.d_noise..d_psi).collect();
            let signal: Vec<usize> = (0..d_signal).collect();
            let s = mu_distribution_report(mu, &signal, &noise)?;
            report.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\n",
                r.dataset_name(),
                r.seed,
                s.signal.median,
                s.noise.median
            ));
        }
    }
    let path = dir.join(format!("{}.report", cfg.sweep_id));
    write_text(&path, &report)?;
    say(out, &report)?;
    say(out, format!("wrote {}", path.display()))
}

pub fn cmd_probe(a: &ProbeArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = ProbeConfig {
        l2_penalty: a.l2,
        max_iters: a.max_iters,
        tol: a.tol,
        init_seed: None,
    };
    let (features, labels, splits) = match (&a.manifest, &a.features, &a.labels) {
        (Some(m), _, _) => {
            let data = Dataset::load(m)?;
            let x = if a.inputs { data.inputs } else { data.psi };
            (x, data.labels, data.splits)
        }
        (None, Some(f), Some(l)) => {
            let x = read_features(f)?;
            let labels = read_labels(l)?;
            let splits = Splits::protocol(x.rows(), DEFAULT_TEST_FRACTION, a.split_seed);
            (x, labels, splits)
        }
        _ => {
            return Err(Error::Usage(
                "probe needs --manifest or both --features and --labels".into(),
            ))
        }
    };
    let result = linear_probe(&features, &labels, &splits, &cfg)?;
    say(out, format!("train_accuracy {:.6}", result.train_accuracy))?;
    say(out, format!("test_accuracy {:.6}", result.test_accuracy))?;
    say(out, format!("loss {:.9} iterations {}", result.loss, result.iterations))?;
    if let Some(path) = &a.mu {
        let ckpt = Checkpoint::read(path)?;
        let mu = if let Some(s) = ckpt.get(MuWeights::LOGITS) {
            MuWeights::from_logits(s.data())
        } else if let Some(m) = ckpt.get(MuWeights::DENSE) {
            MuWeights::from_dense(m.clone())
        } else {
            return Err(Error::Input(format!("{} holds no μ tensor", path.display())));
        };
        let (raw, weighted) = weighted_probe_comparison(&features, &labels, &mu, &splits, &cfg)?;
        say(out, format!("err_raw {raw:.6}"))?;
        say(out, format!("err_weighted {weighted:.6}"))?;
    }
    Ok(())
}

pub fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.dir)
        .map_err(|e| Error::io(&a.dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "metrics"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no .metrics files in {}", a.dir.display())));
    }
    let mut records = Vec::with_capacity(paths.len());
    for p in &paths {
        let r = RunRecord::read(p)?;
        let acc = r.final_accuracy("test").ok_or_else(|| {
            Error::Input(format!("{} has no test evaluation", p.display()))
        })?;
        records.push(ErrorRecord {
            method: r.header.method.clone(),
            dataset: r.header.dataset.clone(),
            seed: r.header.seed,
            error: 1.0 - acc,
        });
    }
    let table = aggregate_normalized_error(&records)?.to_table();
    if let Some(path) = &a.out {
        write_text(path, &table)?;
    }
    say(out, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn synth_rejects_zero_rows() {
        let cli = Cli::try_parse_from(["aft", "synth", "--n", "0", "--out", "/nonexistent"]).unwrap();
        let err = run(cli, &mut Vec::new()).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }
}
