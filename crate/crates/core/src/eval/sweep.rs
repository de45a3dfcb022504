//! Method catalogue, μ diagnostics, and the noise-robustness sweep.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::probe::{linear_probe, ProbeConfig};
use super::report::{aggregate_normalized_error, AggregateReport, ErrorRecord};
use crate::error::{Error, Result};
use crate::featurestore::{append_noise_features, Dataset, Labels, Splits};
use crate::models::Checkpoint;
use crate::numerics::Matrix;
use crate::regularizers::{Kernel, MuMode, MuWeights, RegularizerKind, RegularizerSpec};
use crate::trainer::{default_beta_grid, run_training, select_beta_with_init, RunOutcome, TrainConfig};

/// A training recipe: plain training, a transfer regularizer, or one of the
/// AFT ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Stl,
    Aft,
    Kd,
    Rkd,
    Ft,
    NoKernel,
    IdentityMu,
    DenseMu,
    Rbf,
    Bilevel,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Stl,
        Method::Aft,
        Method::Kd,
        Method::Rkd,
        Method::Ft,
        Method::NoKernel,
        Method::IdentityMu,
        Method::DenseMu,
        Method::Rbf,
        Method::Bilevel,
    ];

    pub const ABLATIONS: [Method; 5] = [
        Method::NoKernel,
        Method::IdentityMu,
        Method::DenseMu,
        Method::Rbf,
        Method::Bilevel,
    ];

    pub const BILEVEL_INNER_STEPS: usize = 5;

    pub fn name(self) -> &'static str {
        match self {
            Method::Stl => "stl",
            Method::Aft => "aft",
            Method::Kd => "kd",
            Method::Rkd => "rkd",
            Method::Ft => "ft",
            Method::NoKernel => "no-kernel",
            Method::IdentityMu => "identity-mu",
            Method::DenseMu => "dense-mu",
            Method::Rbf => "rbf",
            Method::Bilevel => "bilevel",
        }
    }

    pub fn is_ablation(self) -> bool {
        Self::ABLATIONS.contains(&self)
    }

    fn valid_names(list: &[Method]) -> String {
        list.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    }

    pub fn parse_ablation(s: &str) -> Result<Self> {
        match s.parse::<Method>() {
            Ok(m) if m.is_ablation() => Ok(m),
            _ => Err(Error::Usage(format!(
                "unknown ablation variant `{s}`; valid variants: {}",
                Self::valid_names(&Self::ABLATIONS)
            ))),
        }
    }

    pub fn regularizer_kind(self) -> Option<RegularizerKind> {
        match self {
            Method::Stl => None,
            Method::Kd => Some(RegularizerKind::Kd),
            Method::Rkd => Some(RegularizerKind::Rkd),
            Method::Ft => Some(RegularizerKind::Ft),
            Method::NoKernel => Some(RegularizerKind::L2),
            _ => Some(RegularizerKind::Aft),
        }
    }

    /// `base` with this method's regularizer and overrides applied. The
    /// regularizer's β is the first grid point; keeps `base`'s ε settings.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.bilevel_inner_steps = 0;
        let Some(kind) = self.regularizer_kind() else {
            c.regularizer = None;
            return c;
        };
        let eps = base.regularizer.as_ref().map(|r| r.eps).unwrap_or_default();
        let mut spec = RegularizerSpec::of_kind(kind, self.beta_grid()[0]);
        spec.eps = eps;
        match self {
            Method::IdentityMu => spec.mu_mode = MuMode::Identity,
            Method::DenseMu => spec.mu_mode = MuMode::Dense,
            Method::Rbf => spec.kernel = Kernel::Rbf,
            Method::Bilevel => c.bilevel_inner_steps = Self::BILEVEL_INNER_STEPS,
            _ => {}
        }
        c.regularizer = Some(spec);
        c
    }

    pub fn beta_grid(self) -> Vec<f64> {
        self.regularizer_kind()
            .map(default_beta_grid)
            .unwrap_or_else(|| vec![0.0])
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown method `{s}`; valid methods: {}",
                    Self::valid_names(&Self::ALL)
                ))
            })
    }
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub beta: f64,
    pub holdout: Vec<(f64, f64)>,
    pub outcome: RunOutcome,
}

impl MethodRun {
    pub fn test_error(&self) -> f64 {
        self.outcome.test_error().expect("test split evaluated")
    }

    pub fn mu(&self) -> Option<&MuWeights> {
        self.outcome.state.regularizer.as_ref().and_then(|r| r.mu())
    }
}

/// Runs `config` (already set up for `method`, see [`Method::configure`])
/// on `data`: plain training for STL, otherwise β selection over `grid`
/// (the method's default grid when `None`) followed by a retrain on train
/// plus holdout.
pub fn run_method(
    method: Method,
    config: &TrainConfig,
    data: &Dataset,
    grid: Option<&[f64]>,
    init: Option<&Checkpoint>,
) -> Result<MethodRun> {
    if method == Method::Stl {
        let outcome = match init {
            None => run_training(config, data)?,
            Some(ckpt) => crate::trainer::train_on(
                config,
                data,
                &data.splits.train_full(),
                &[("test", &data.splits.test)],
                Some(ckpt),
            )?,
        };
        return Ok(MethodRun {
            method,
            beta: 0.0,
            holdout: Vec::new(),
            outcome,
        });
    }
    let default_grid = method.beta_grid();
    let grid = grid.unwrap_or(&default_grid);
    let mut sel = select_beta_with_init(config, data, grid, init)?;
    sel.outcome.record.header.method = method.name().to_string();
    Ok(MethodRun {
        method,
        beta: sel.beta,
        holdout: sel.holdout,
        outcome: sel.outcome,
    })
}

/// Test errors of a probe on raw `psi` and on μ-weighted `psi`, fitted
/// with identical settings.
pub fn weighted_probe_comparison(
    psi: &Matrix,
    labels: &Labels,
    mu: &MuWeights,
    splits: &Splits,
    cfg: &ProbeConfig,
) -> Result<(f64, f64)> {
    let raw = linear_probe(psi, labels, splits, cfg)?;
    let weighted = linear_probe(&mu.scale_features(psi)?, labels, splits, cfg)?;
    Ok((raw.test_error(), weighted.test_error()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl GroupStats {
    /// Quartiles by linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            if v.is_empty() {
                return f64::NAN;
            }
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            count: v.len(),
            mean: if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 },
            median: q(0.5),
            q1: q(0.25),
            q3: q(0.75),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuSummary {
    pub signal: GroupStats,
    pub noise: GroupStats,
}

/// Summary of the diagonal weights `σ(sᵢ)` over two groups of feature
/// columns.
pub fn mu_distribution_report(
    mu: &MuWeights,
    signal_dims: &[usize],
    noise_dims: &[usize],
) -> Result<MuSummary> {
    if mu.mode() != MuMode::Diagonal {
        return Err(Error::Usage(format!(
            "μ distribution needs diagonal μ, got {:?}",
            mu.mode()
        )));
    }
    let w = mu.diagonal_weights()?;
    let pick = |dims: &[usize]| -> Result<Vec<f64>> {
        dims.iter()
            .map(|&i| {
                w.get(i).copied().ok_or_else(|| {
                    Error::Usage(format!("feature index {i} out of range for {} weights", w.len()))
                })
            })
            .collect()
    };
    Ok(MuSummary {
        signal: GroupStats::of(&pick(signal_dims)?),
        noise: GroupStats::of(&pick(noise_dims)?),
    })
}

/// One dataset (and seed) the sweep adds noise to.
#[derive(Debug, Clone)]
pub struct SweepBase {
    pub name: String,
    pub seed: u64,
    pub dataset: Dataset,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub train: TrainConfig,
    /// Worker threads; 0 and 1 both run cells sequentially.
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub base: String,
    pub seed: u64,
    pub d_noise: usize,
    pub method: Method,
    pub beta: f64,
    pub error: f64,
    pub mu: Option<MuWeights>,
    pub outcome: RunOutcome,
}

impl SweepRun {
    pub fn dataset_name(&self) -> String {
        noise_dataset_name(&self.base, self.d_noise)
    }
}

pub fn noise_dataset_name(base: &str, d_noise: usize) -> String {
    format!("{base}+noise{d_noise}")
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub report: AggregateReport,
    pub runs: Vec<SweepRun>,
}

impl SweepOutcome {
    pub fn run(&self, base: &str, d_noise: usize, method: Method) -> Option<&SweepRun> {
        self.runs
            .iter()
            .find(|r| r.base == base && r.d_noise == d_noise && r.method == method)
    }

    /// Mean test error of `method` at `d_noise` over all bases.
    pub fn mean_error(&self, d_noise: usize, method: Method) -> f64 {
        let errs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.d_noise == d_noise && r.method == method)
            .map(|r| r.error)
            .collect();
        errs.iter().sum::<f64>() / errs.len() as f64
    }
}

/// Appends `d_noise` noise columns (seeded by the base's seed) to each base
/// dataset and runs every method on it with the base's seed.
pub fn noise_robustness_sweep(
    bases: &[SweepBase],
    d_noise_list: &[usize],
    methods: &[Method],
    cfg: &SweepConfig,
) -> Result<SweepOutcome> {
    if d_noise_list.first() != Some(&0) || d_noise_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage(format!(
            "d_noise list must be strictly ascending and start at 0, got {d_noise_list:?}"
        )));
    }
    if bases.is_empty() || methods.is_empty() {
        return Err(Error::Usage("sweep needs at least one dataset and one method".into()));
    }

    let mut jobs = Vec::new();
    for (b, _) in bases.iter().enumerate() {
        for &d in d_noise_list {
            for &m in methods {
                jobs.push((b, d, m));
            }
        }
    }

    let run_job = |&(b, d_noise, method): &(usize, usize, Method)| -> Result<SweepRun> {
        let base = &bases[b];
        let psi = append_noise_features(&base.dataset.psi, d_noise, base.seed);
        let mut dims = base.dataset.source_dims.clone();
        if d_noise > 0 {
            dims.push(d_noise);
        }
        let data = base.dataset.with_psi(psi, dims)?;
        let train = method.configure(&TrainConfig {
            seed: base.seed,
            ..cfg.train.clone()
        });
        let mut run = run_method(method, &train, &data, None, None)?;
        run.outcome.record.header.dataset = noise_dataset_name(&base.name, d_noise);
        Ok(SweepRun {
            base: base.name.clone(),
            seed: base.seed,
            d_noise,
            method,
            beta: run.beta,
            error: run.test_error(),
            mu: run.mu().cloned(),
            outcome: run.outcome,
        })
    };

    let runs = parallel_map(&jobs, cfg.threads, run_job)?;
    let records: Vec<ErrorRecord> = runs
        .iter()
        .map(|r| ErrorRecord {
            method: r.method.name().to_string(),
            dataset: r.dataset_name(),
            seed: r.seed,
            error: r.error,
        })
        .collect();
    let report = aggregate_normalized_error(&records)?;
    Ok(SweepOutcome { report, runs })
}

/// Applies `f` to every item on up to `threads` scoped workers and returns
/// results in input order. The first error (in input order) wins.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> =
        Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}
