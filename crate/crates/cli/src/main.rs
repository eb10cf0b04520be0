use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use drl_core::drl::{evaluate_loss, train_with_validation, DrlConfig, DrlModel};
use drl_core::harness::bench::{correlation_triplet, eps_on, MccSettings};
use drl_core::harness::gridsearch::{apply_overrides, grid_search, SearchSpace};
use drl_core::harness::io::{
    fmt_real, load_checkpoint, read_dataset_csv, read_text, read_truth, save_checkpoint, write_atomic, write_dataset_csv,
    write_report, write_truth,
};
use drl_core::harness::{run_benchmark, split, BenchOptions, Method, SplitMode, SplitSpec};
use drl_core::metrics::{mtef_grid, mtef_pred, GRID_LEVELS};
use drl_core::rng::seeded;
use drl_core::synthgen::{make_scenario, true_mtef_curve, Scenario, ScenarioSpec};
use drl_core::{Dataset, Error, Result};

#[derive(Parser)]
#[command(name = "drl", version, about = "De-confounding representation learning for continuous treatments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic scenario; writes the CSV and a `.truth.json` sidecar.
    Generate {
        #[arg(long)]
        scenario: Scenario,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        d: usize,
    },
    /// Train a DRL model and save a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: ConfigArgs,
        /// Rows held out for model selection; `none` trains on everything.
        #[arg(long, default_value = "random")]
        split: SplitChoice,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Defaults to the split recorded at training time.
        #[arg(long)]
        split: Option<SplitChoice>,
    },
    /// Repeated fresh-draw comparison of methods across scenarios.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "A,B,C,D")]
        scenarios: Vec<Scenario>,
        #[arg(long, value_delimiter = ',', default_value = "drl,msm,icpw,naive")]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4000)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value = "quantile80")]
        split: SplitMode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Exhaustive hyperparameter search, selecting by validation loss.
    Gridsearch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Predicted (and, with a sidecar, true) MTEF curve as CSV.
    Mtef {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON document with any subset of the config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    wc: Option<f64>,
    #[arg(long)]
    rep_dim: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
enum SplitChoice {
    None,
    Mode(SplitMode),
}

impl std::str::FromStr for SplitChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            Ok(SplitChoice::None)
        } else {
            s.parse().map(SplitChoice::Mode)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<DrlConfig> {
    let base = DrlConfig::default();
    let Some(path) = path else { return Ok(base) };
    let v: serde_json::Value = serde_json::from_str(&read_text(path)?)?;
    let obj = v
        .as_object()
        .ok_or_else(|| Error::Config(format!("{} must hold a JSON object", path.display())))?;
    apply_overrides(&base, obj)
}

impl ConfigArgs {
    fn resolve(&self) -> Result<DrlConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(w) = self.wc {
            cfg.w_c = w;
        }
        if let Some(r) = self.rep_dim {
            cfg.rep_dim = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct PartEval {
    rows: usize,
    l_c: f64,
    pcc_before: f64,
    mcc_line_before: f64,
    mcc_nonl_before: f64,
    pcc_after: f64,
    mcc_line_after: f64,
    mcc_nonl_after: f64,
    d_real: f64,
    d_fake: f64,
    /// Only with a ground-truth sidecar.
    eps_mtef: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    config: DrlConfig,
    split: Option<SplitSpec>,
    parts: BTreeMap<String, PartEval>,
}

fn eval_part(model: &DrlModel, part: &Dataset, truth: Option<&drl_core::synthgen::GroundTruth>) -> Result<PartEval> {
    let settings = MccSettings::default();
    let seed = model.config.seed ^ 0x5eed;
    let before = correlation_triplet(&part.x, &part.t, None, &settings, seed)?;
    let rep = model.representations(&part.x)?;
    let after = correlation_triplet(&rep, &part.t, None, &settings, seed)?;
    let (d_real, d_fake) = model.discriminator_means(&part.x, &part.t, &mut seeded(model.config.seed, 40))?;
    Ok(PartEval {
        rows: part.len(),
        l_c: evaluate_loss(model, part)?,
        pcc_before: before.0,
        mcc_line_before: before.1,
        mcc_nonl_before: before.2,
        pcc_after: after.0,
        mcc_line_after: after.1,
        mcc_nonl_after: after.2,
        d_real,
        d_fake,
        eps_mtef: truth.map(|gt| eps_on(model, part, gt)).transpose()?,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { scenario, n, seed, out, d } => {
            let spec = ScenarioSpec::new(scenario, n, seed).with_dim(d);
            let (data, gt) = make_scenario(&spec)?;
            write_dataset_csv(&out, &data)?;
            write_truth(&out, &spec, &gt)?;
            println!("wrote {} rows of scenario {scenario} to {}", data.len(), out.display());
        }
        Command::Train { data, out, overrides, split: how } => {
            let cfg = overrides.resolve()?;
            let data = read_dataset_csv(&data, cfg.outcome_kind)?;
            let (model, hist, spec) = match how {
                SplitChoice::None => {
                    let (m, h) = train_with_validation(&data, None, &cfg)?;
                    (m, h, None)
                }
                SplitChoice::Mode(mode) => {
                    let spec = SplitSpec::new(mode, cfg.seed);
                    let parts = split(&data, &spec)?.apply(&data);
                    let (m, h) = train_with_validation(&parts.train, Some(&parts.val), &cfg)?;
                    (m, h, Some(spec))
                }
            };
            save_checkpoint(&out, &model, spec)?;
            if let Some(last) = hist.epochs.last() {
                eprintln!(
                    "trained {} epochs (kept {:?}): l_c {:.5}, D real/fake {:.3}/{:.3}",
                    hist.epochs.len(),
                    hist.best_epoch,
                    last.l_c,
                    last.d_real,
                    last.d_fake
                );
            }
            println!("wrote checkpoint {}", out.display());
        }
        Command::Eval { ckpt, data, report, split: how } => {
            let (model, ck) = load_checkpoint(&ckpt)?;
            let truth = read_truth(&data)?.map(|t| t.ground_truth);
            let data = read_dataset_csv(&data, model.config.outcome_kind)?;
            if data.dim() != model.input_dim() {
                return Err(Error::Dimension(format!(
                    "checkpoint expects {} covariates, data has {}",
                    model.input_dim(),
                    data.dim()
                )));
            }
            let spec = match how {
                Some(SplitChoice::None) => None,
                Some(SplitChoice::Mode(mode)) => Some(SplitSpec::new(mode, ck.seed)),
                None => ck.split,
            };
            let mut parts = BTreeMap::new();
            match spec {
                None => {
                    parts.insert("all".to_string(), eval_part(&model, &data, truth.as_ref())?);
                }
                Some(s) => {
                    let p = split(&data, &s)?.apply(&data);
                    for (name, part) in [("train", &p.train), ("val", &p.val), ("test", &p.test)] {
                        parts.insert(name.to_string(), eval_part(&model, part, truth.as_ref())?);
                    }
                }
            }
            let body = EvalReport {
                config: model.config.clone(),
                split: spec,
                parts,
            };
            write_report(&report, "eval", &body)?;
            for (name, p) in &body.parts {
                println!(
                    "{name}: mcc line {:.3} -> {:.3}, nonL {:.3} -> {:.3}, eps_mtef {}",
                    p.mcc_line_before,
                    p.mcc_line_after,
                    p.mcc_nonl_before,
                    p.mcc_nonl_after,
                    p.eps_mtef.map_or("n/a".into(), |e| format!("{e:.4}"))
                );
            }
        }
        Command::Bench {
            scenarios,
            methods,
            repeats,
            seed,
            out,
            n,
            d,
            split,
            config,
            epochs,
            threads,
        } => {
            let mut drl = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                drl.epochs = e;
            }
            let opts = BenchOptions {
                n,
                d,
                split,
                drl,
                threads,
                ..BenchOptions::default()
            };
            let rep = run_benchmark(&scenarios, &methods, repeats, seed, &opts)?;
            write_report(&out, "benchmark", &rep)?;
            println!("scenario method  ok/failed  eps_mtef_test (mean ± se)");
            for c in &rep.aggregates {
                let eps = c
                    .metrics
                    .get("eps_mtef_test")
                    .map_or("n/a".into(), |s| format!("{:.4} ± {:.4}", s.mean, s.std_error));
                println!("{:<8} {:<7} {}/{}  {eps}", c.scenario, c.method, c.succeeded, c.failed);
            }
        }
        Command::Gridsearch { data, space, out, config, seed } => {
            let mut base = load_config(config.as_deref())?;
            base.seed = seed;
            let space = SearchSpace::from_json(&read_text(&space)?)?;
            let data = read_dataset_csv(&data, base.outcome_kind)?;
            let p = split(&data, &SplitSpec::new(SplitMode::Random602020, seed))?.apply(&data);
            let rep = grid_search(&space, &base, &p.train, &p.val)?;
            write_report(&out, "gridsearch", &rep)?;
            println!(
                "best {} (validation l_c {:.6}) of {} candidates",
                serde_json::Value::Object(rep.best_overrides.clone()),
                rep.best_val_l_c,
                rep.trials.len()
            );
        }
        Command::Mtef { ckpt, data, out } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let truth = read_truth(&data)?.map(|t| t.ground_truth);
            let data = read_dataset_csv(&data, model.config.outcome_kind)?;
            let grid = mtef_grid(&data.t, GRID_LEVELS)?;
            let pred = mtef_pred(&model, &data.x, &grid.t_levels, grid.dt)?;
            let true_curve = truth
                .map(|gt| true_mtef_curve(&gt, &grid.t_levels, grid.dt))
                .transpose()?;
            let mut text = String::from(if true_curve.is_some() {
                "t_level,dt,mtef_pred,mtef_true\n"
            } else {
                "t_level,dt,mtef_pred\n"
            });
            for (i, &t) in grid.t_levels.iter().enumerate() {
                text.push_str(&format!("{},{},{}", fmt_real(t), fmt_real(grid.dt), fmt_real(pred.values[i])));
                if let Some(c) = &true_curve {
                    text.push_str(&format!(",{}", fmt_real(c.values[i])));
                }
                text.push('\n');
            }
            write_atomic(&out, text.as_bytes())?;
            println!("wrote {} grid points to {}", grid.t_levels.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let mut lines = rendered.lines();
            let first = lines.next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            for l in lines.filter(|l| !l.trim().is_empty()) {
                eprintln!("{l}");
            }
            if !rendered.contains("Usage:") {
                eprintln!("{}", Cli::command().render_usage());
            }
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
