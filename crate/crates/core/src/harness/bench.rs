//! Repeated fresh-draw benchmarks of DRL against the baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{icpw_weights, msm_fit, naive_net, NaiveConfig};
use crate::dataset::Dataset;
use crate::drl::{train_with_validation, DrlConfig};
use crate::error::{Error, Result};
use crate::harness::split::{split, SplitIndices, SplitMode, SplitSpec};
use crate::metrics::{
    eps_mtef, mcc_with, mtef_grid, mtef_pred, weighted_pcc, MccMode, MccOptions, OutcomeModel, GRID_LEVELS,
};
use crate::rng::seeded;
use crate::synthgen::{make_scenario, true_mtef_curve, GroundTruth, Scenario, ScenarioSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Drl,
    /// Unweighted marginal structural model.
    Msm,
    /// Marginal structural model under ICPW weights.
    Icpw,
    /// Outcome network on raw covariates.
    Naive,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Drl, Method::Msm, Method::Icpw, Method::Naive];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Drl => "drl",
            Method::Msm => "msm",
            Method::Icpw => "icpw",
            Method::Naive => "naive",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "drl" => Ok(Method::Drl),
            "msm" => Ok(Method::Msm),
            "icpw" => Ok(Method::Icpw),
            "naive" => Ok(Method::Naive),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected drl, msm, icpw or naive)"
            ))),
        }
    }
}

/// Correlation diagnostics and MTEF errors for one fitted method.
///
/// "Before" figures describe raw covariates on the training rows. "After"
/// figures describe what the method hands to its outcome model: DRL's
/// representations, or the ICPW-weighted covariates. Methods that do no
/// de-confounding leave them empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pcc_before: f64,
    pub mcc_line_before: f64,
    pub mcc_nonl_before: f64,
    pub pcc_after: Option<f64>,
    pub mcc_line_after: Option<f64>,
    pub mcc_nonl_after: Option<f64>,
    pub eps_mtef_train: f64,
    pub eps_mtef_test: f64,
    /// Mean discriminator output on virtual and generated features (DRL only).
    pub d_real: Option<f64>,
    pub d_fake: Option<f64>,
}

impl MetricsReport {
    /// Named values, skipping the ones not defined for this method.
    pub fn named_values(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("pcc_before", self.pcc_before),
            ("mcc_line_before", self.mcc_line_before),
            ("mcc_nonl_before", self.mcc_nonl_before),
        ];
        let opt = [
            ("pcc_after", self.pcc_after),
            ("mcc_line_after", self.mcc_line_after),
            ("mcc_nonl_after", self.mcc_nonl_after),
        ];
        out.extend(opt.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        out.push(("eps_mtef_train", self.eps_mtef_train));
        out.push(("eps_mtef_test", self.eps_mtef_test));
        let d = [("d_real", self.d_real), ("d_fake", self.d_fake)];
        out.extend(d.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub n: usize,
    pub d: usize,
    pub split: SplitMode,
    /// Seed is overwritten per repeat.
    pub drl: DrlConfig,
    /// Derived from `drl` when absent.
    pub naive: Option<NaiveConfig>,
    pub mcc: MccSettings,
    /// Worker threads for independent repeats; 1 runs inline.
    pub threads: usize,
}

/// Tree and holdout settings shared by every MCC in a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccSettings {
    pub fit_fraction: Option<f64>,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for MccSettings {
    fn default() -> Self {
        let o = MccOptions::new(MccMode::Line);
        Self {
            fit_fraction: o.fit_fraction,
            max_depth: o.max_depth,
            min_leaf: o.min_leaf,
        }
    }
}

impl MccSettings {
    fn options(&self, mode: MccMode, seed: u64) -> MccOptions {
        MccOptions {
            mode,
            fit_fraction: self.fit_fraction,
            seed,
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
        }
    }
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            n: 4000,
            d: 10,
            split: SplitMode::Quantile80Ood,
            drl: DrlConfig::default(),
            naive: None,
            mcc: MccSettings::default(),
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub scenario: Scenario,
    pub method: Method,
    pub repeat: usize,
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(count)`; zero for one value.
    pub std_error: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let k = values.len();
        if k == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / k as f64;
        let std_error = if k > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std_error, count: k })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub scenario: Scenario,
    pub method: Method,
    pub succeeded: usize,
    pub failed: usize,
    pub metrics: BTreeMap<String, Summary>,
}

/// What a repeat was run on: enough to regenerate and re-score it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scenario: Scenario,
    pub repeat: usize,
    pub seed: u64,
    pub spec: ScenarioSpec,
    pub split: SplitSpec,
    pub split_sizes: [usize; 3],
    pub ground_truth: Option<GroundTruth>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Method>,
    pub repeats: usize,
    pub base_seed: u64,
    pub options: BenchOptions,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<CellAggregate>,
    pub provenance: Vec<Provenance>,
}

impl BenchmarkReport {
    pub fn cell(&self, scenario: Scenario, method: Method) -> Option<&CellAggregate> {
        self.aggregates
            .iter()
            .find(|c| c.scenario == scenario && c.method == method)
    }

    /// Per-repeat values of one metric in one cell, in repeat order.
    pub fn values(&self, scenario: Scenario, method: Method, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.scenario == scenario && r.method == method)
            .filter_map(|r| r.metrics.as_ref())
            .filter_map(|m| m.named_values().into_iter().find(|(k, _)| *k == metric).map(|(_, v)| v))
            .collect()
    }
}

/// Rebuilds the per-cell aggregates from rows.
pub fn aggregate(scenarios: &[Scenario], methods: &[Method], rows: &[RunRow]) -> Vec<CellAggregate> {
    let mut out = Vec::new();
    for &s in scenarios {
        for &m in methods {
            let cell: Vec<&RunRow> = rows.iter().filter(|r| r.scenario == s && r.method == m).collect();
            let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in cell.iter().filter_map(|r| r.metrics.as_ref()) {
                for (k, v) in r.named_values() {
                    by_metric.entry(k.to_string()).or_default().push(v);
                }
            }
            let succeeded = cell.iter().filter(|r| r.metrics.is_some()).count();
            out.push(CellAggregate {
                scenario: s,
                method: m,
                succeeded,
                failed: cell.len() - succeeded,
                metrics: by_metric
                    .into_iter()
                    .filter_map(|(k, v)| Summary::of(&v).map(|s| (k, s)))
                    .collect(),
            });
        }
    }
    out
}

/// Everything a method needs for one repeat.
pub struct RepeatContext<'a> {
    pub data: &'a Dataset,
    pub gt: &'a GroundTruth,
    pub parts: &'a SplitIndices,
    pub seed: u64,
}

struct Fitted {
    model: Box<dyn OutcomeModel>,
    after: Option<(Tensor, Option<Vec<f64>>)>,
    d_means: Option<(f64, f64)>,
}

fn fit_method(method: Method, ctx: &RepeatContext<'_>, opts: &BenchOptions) -> Result<Fitted> {
    let train = ctx.data.subset(&ctx.parts.train);
    let val = ctx.data.subset(&ctx.parts.val);
    Ok(match method {
        Method::Drl => {
            let cfg = DrlConfig {
                seed: ctx.seed,
                ..opts.drl.clone()
            };
            let (model, _) = train_with_validation(&train, Some(&val), &cfg)?;
            let rep = model.representations(&train.x)?;
            let d = model.discriminator_means(&train.x, &train.t, &mut seeded(ctx.seed, 40))?;
            Fitted {
                model: Box::new(model),
                after: Some((rep, None)),
                d_means: Some(d),
            }
        }
        Method::Msm => Fitted {
            model: Box::new(msm_fit(&train.t, &train.y, &vec![1.0; train.len()])?),
            after: None,
            d_means: None,
        },
        Method::Icpw => {
            let w = icpw_weights(&train.x, &train.t)?;
            Fitted {
                model: Box::new(msm_fit(&train.t, &train.y, &w.weights)?),
                after: Some((train.x.clone(), Some(w.weights))),
                d_means: None,
            }
        }
        Method::Naive => {
            let mut cfg = opts.naive.clone().unwrap_or_else(|| NaiveConfig::matching(&opts.drl));
            cfg.seed = ctx.seed;
            cfg.outcome_kind = train.outcome_kind;
            let (net, _) = naive_net(&train, Some(&val), &cfg)?;
            Fitted {
                model: Box::new(net),
                after: None,
                d_means: None,
            }
        }
    })
}

/// Correlation of covariates (optionally weighted) with treatment.
pub fn correlation_triplet(
    m: &Tensor,
    t: &[f64],
    weights: Option<&[f64]>,
    settings: &MccSettings,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let pcc = weighted_pcc(m, t, weights)?.value;
    let line = mcc_with(m, t, weights, &settings.options(MccMode::Line, seed))?;
    let nonl = mcc_with(m, t, weights, &settings.options(MccMode::NonL, seed))?;
    Ok((pcc, line, nonl))
}

/// Test-grid error of any outcome model against the oracle on the rows of `part`.
pub fn eps_on(model: &dyn OutcomeModel, data: &Dataset, gt: &GroundTruth) -> Result<f64> {
    let grid = mtef_grid(&data.t, GRID_LEVELS)?;
    let truth = true_mtef_curve(gt, &grid.t_levels, grid.dt)?;
    let pred = mtef_pred(model, &data.x, &grid.t_levels, grid.dt)?;
    eps_mtef(&truth, &pred)
}

/// Fits and scores one method on one prepared repeat.
pub fn evaluate_method(method: Method, ctx: &RepeatContext<'_>, opts: &BenchOptions) -> Result<MetricsReport> {
    let train = ctx.data.subset(&ctx.parts.train);
    let test = ctx.data.subset(&ctx.parts.test);
    let mcc_seed = ctx.seed ^ 0x5eed;
    let (pcc_before, mcc_line_before, mcc_nonl_before) =
        correlation_triplet(&train.x, &train.t, None, &opts.mcc, mcc_seed)?;
    let fitted = fit_method(method, ctx, opts)?;
    let after = match &fitted.after {
        Some((m, w)) => Some(correlation_triplet(m, &train.t, w.as_deref(), &opts.mcc, mcc_seed)?),
        None => None,
    };
    Ok(MetricsReport {
        pcc_before,
        mcc_line_before,
        mcc_nonl_before,
        pcc_after: after.map(|a| a.0),
        mcc_line_after: after.map(|a| a.1),
        mcc_nonl_after: after.map(|a| a.2),
        eps_mtef_train: eps_on(fitted.model.as_ref(), &train, ctx.gt)?,
        eps_mtef_test: eps_on(fitted.model.as_ref(), &test, ctx.gt)?,
        d_real: fitted.d_means.map(|d| d.0),
        d_fake: fitted.d_means.map(|d| d.1),
    })
}

fn run_repeat(
    scenario: Scenario,
    repeat: usize,
    base_seed: u64,
    methods: &[Method],
    opts: &BenchOptions,
) -> (Provenance, Vec<RunRow>) {
    let seed = base_seed.wrapping_add(repeat as u64);
    let spec = ScenarioSpec::new(scenario, opts.n, seed).with_dim(opts.d);
    let split_spec = SplitSpec::new(opts.split, seed);
    let prepared = make_scenario(&spec).and_then(|(data, gt)| {
        let parts = split(&data, &split_spec)?;
        Ok((data, gt, parts))
    });
    let mut prov = Provenance {
        scenario,
        repeat,
        seed,
        spec,
        split: split_spec,
        split_sizes: [0; 3],
        ground_truth: None,
        error: None,
    };
    let row = |method, res: Result<MetricsReport>| match res {
        Ok(m) => RunRow { scenario, method, repeat, seed, metrics: Some(m), error: None },
        Err(e) => RunRow {
            scenario,
            method,
            repeat,
            seed,
            metrics: None,
            error: Some(format!("{}: {e}", e.category())),
        },
    };
    match prepared {
        Err(e) => {
            prov.error = Some(format!("{}: {e}", e.category()));
            let rows = methods
                .iter()
                .map(|&m| row(m, Err(Error::Contract(format!("repeat setup failed: {e}")))))
                .collect();
            (prov, rows)
        }
        Ok((data, gt, parts)) => {
            prov.split_sizes = [parts.train.len(), parts.val.len(), parts.test.len()];
            let ctx = RepeatContext { data: &data, gt: &gt, parts: &parts, seed };
            let rows = methods.iter().map(|&m| row(m, evaluate_method(m, &ctx, opts))).collect();
            prov.ground_truth = Some(gt);
            (prov, rows)
        }
    }
}

/// Runs every (scenario, repeat) on a fresh draw with `seed = base_seed + repeat`.
/// Individual failures are recorded in their cell, not propagated.
pub fn run_benchmark(
    scenarios: &[Scenario],
    methods: &[Method],
    repeats: usize,
    base_seed: u64,
    opts: &BenchOptions,
) -> Result<BenchmarkReport> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    if scenarios.is_empty() || methods.is_empty() {
        return Err(Error::Config("need at least one scenario and one method".into()));
    }
    opts.drl.validate()?;
    let jobs: Vec<(Scenario, usize)> = scenarios
        .iter()
        .flat_map(|&s| (0..repeats).map(move |r| (s, r)))
        .collect();
    let results: Vec<(Provenance, Vec<RunRow>)> = if opts.threads <= 1 {
        jobs.iter()
            .map(|&(s, r)| run_repeat(s, r, base_seed, methods, opts))
            .collect()
    } else {
        let chunk = jobs.len().div_ceil(opts.threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|&(s, r)| run_repeat(s, r, base_seed, methods, opts))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("benchmark worker panicked"))
                .collect()
        })
    };
    let mut provenance = Vec::with_capacity(results.len());
    let mut rows = Vec::new();
    for (p, r) in results {
        provenance.push(p);
        rows.extend(r);
    }
    Ok(BenchmarkReport {
        scenarios: scenarios.to_vec(),
        methods: methods.to_vec(),
        repeats,
        base_seed,
        options: opts.clone(),
        aggregates: aggregate(scenarios, methods, &rows),
        rows,
        provenance,
    })
}

/// A small, fast configuration for smoke runs and tests.
pub fn smoke_options(n: usize, epochs: usize) -> BenchOptions {
    let mut drl = DrlConfig {
        epochs,
        batch_size: 128,
        ..DrlConfig::default()
    };
    drl.architecture.generator.hidden = vec![16];
    drl.architecture.correlation.hidden = vec![16];
    drl.architecture.discriminator.hidden = vec![8];
    drl.architecture.counterfactual.hidden = vec![16];
    BenchOptions {
        n,
        drl,
        ..BenchOptions::default()
    }
}
