//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria whose outcome depends on a stochastic training run report
//! honestly and do not abort the suite; set `ACCEPTANCE_STRICT=1` to make any
//! FAIL a non-zero exit. `ACCEPTANCE_SEEDS` overrides the number of training
//! seeds (default 5).

use std::time::Instant;

use drl_core::autodiff::{grad_check, Tape};
use drl_core::baselines::{icpw_weights, msm_fit};
use drl_core::drl::*;
use drl_core::harness::bench::smoke_options;
use drl_core::harness::io::{
    dataset_csv_string, load_checkpoint, parse_dataset_csv, report_json, report_without_metadata,
    save_checkpoint, write_atomic,
};
use drl_core::harness::{run_benchmark, BenchOptions, BenchmarkReport, Method, SplitMode};
use drl_core::metrics::{eps_mtef, mcc, mtef_pred, quantile, FnModel, MccMode, MtefCurve};
use drl_core::nn::Activation;
use drl_core::rng::seeded;
use drl_core::synthgen::*;
use drl_core::{Dataset, OutcomeKind, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5).unwrap_or(f64::NAN)
}

fn fmt_list(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", items.join(", "))
}

fn tiny_config() -> DrlConfig {
    DrlConfig {
        rep_dim: 3,
        batch_size: 8,
        architecture: Architecture {
            generator: NetSpec::new(&[4], Activation::Tanh),
            correlation: NetSpec::new(&[4], Activation::Tanh),
            correlation_dim: 2,
            discriminator: NetSpec::new(&[3], Activation::Tanh),
            counterfactual: NetSpec::new(&[4], Activation::Tanh),
        },
        ..DrlConfig::default()
    }
}

fn gradients() -> Outcome {
    let mut errs = Vec::new();
    for loss in [GeneratorLoss::Minimax, GeneratorLoss::NonSaturating] {
        let cfg = DrlConfig { generator_loss: loss, ..tiny_config() };
        let m = DrlModel::new(4, cfg).unwrap();
        let x = sample_virtual(8, 4, &mut seeded(1, 0));
        let t: Vec<f64> = (0..8).map(|i| x.get(i, 0) - 0.5 * x.get(i, 1)).collect();
        let y = Tensor::vector((0..8).map(|i| 2.0 * t[i] + x.get(i, 2)).collect());
        let tcol = Tensor::vector(t.clone()).as_column();
        let xr = sample_virtual(8, 3, &mut seeded(2, 0));
        let xg = m.representations(&x).unwrap();
        let nc = m.c.params().len();

        let cd: Vec<Tensor> = m.c.params().into_iter().chain(m.d.params()).cloned().collect();
        errs.push(
            grad_check(&cd, 1e-5, |tape, p| {
                let terms = discriminator_objective(
                    &m,
                    &p[..nc],
                    &p[nc..],
                    tape.constant(xr.clone()),
                    tape.constant(xg.clone()),
                    tape.constant(tcol.clone()),
                )?;
                Ok(terms.objective)
            })
            .unwrap(),
        );
        let gp: Vec<Tensor> = m.g.params().into_iter().cloned().collect();
        errs.push(
            grad_check(&gp, 1e-5, |tape: &Tape, p| {
                let (c, d, f) = (m.c.bind_frozen(tape), m.d.bind_frozen(tape), m.f.bind_frozen(tape));
                let (xv, tv) = (tape.constant(x.clone()), tape.constant(tcol.clone()));
                generator_objective(tape, &m, p, &c, &d, &f, xv, tv, &y)
            })
            .unwrap(),
        );
        let fp: Vec<Tensor> = m.f.params().into_iter().cloned().collect();
        errs.push(
            grad_check(&fp, 1e-5, |tape: &Tape, p| {
                let g = m.g.bind_frozen(tape);
                let (xv, tv) = (tape.constant(x.clone()), tape.constant(tcol.clone()));
                counterfactual_objective(tape, &m, &g, p, xv, tv, &y)
            })
            .unwrap(),
        );
    }
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    outcome(worst < 1e-4, format!("max rel. error {worst:.2e} over D/G/F objectives (both generator losses)"))
}

fn generator_fidelity() -> Outcome {
    let spec = ScenarioSpec::new(Scenario::A, 50_000, 0);
    let (data, gt) = make_scenario(&spec).unwrap();
    let (n, d) = (data.len(), data.dim());
    let means: Vec<f64> = (0..d).map(|j| data.x.column(j).iter().sum::<f64>() / n as f64).collect();
    let mut frob = 0.0;
    for a in 0..d {
        for b in 0..d {
            let s = (0..n)
                .map(|i| (data.x.get(i, a) - means[a]) * (data.x.get(i, b) - means[b]))
                .sum::<f64>()
                / (n - 1) as f64;
            frob += (s - gt.covariance.get(a, b)).powi(2);
        }
    }
    let frob = frob.sqrt();
    let (again, _) = make_scenario(&spec).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let same = bits(&data.t) == bits(&again.t) && bits(&data.y) == bits(&again.y);
    outcome(
        frob < 0.1 && same,
        format!("Frobenius distance {frob:.4} at n=50000; t,y bit-identical on regeneration: {same}"),
    )
}

fn metric_oracles() -> Outcome {
    let (data, gt) = make_scenario(&ScenarioSpec::new(Scenario::A, 5000, 0)).unwrap();
    let t_clean = gen_treatment(&data.x, &gt, &mut seeded(0, 2), 0.0).unwrap();
    let line = mcc(&data.x, &t_clean, MccMode::Line).unwrap();

    let mut worst_indep = f64::NEG_INFINITY;
    for seed in 0..20 {
        let x = sample_virtual(5000, 10, &mut seeded(seed, 50));
        let t: Vec<f64> = sample_virtual(5000, 1, &mut seeded(seed, 51)).into_data();
        for mode in [MccMode::Line, MccMode::NonL] {
            worst_indep = worst_indep.max(mcc(&x, &t, mode).unwrap());
        }
    }

    let g = vec![0.0, 1.0];
    let eps = eps_mtef(
        &MtefCurve::new(g.clone(), 0.1, vec![5.0, 5.0]).unwrap(),
        &MtefCurve::new(g, 0.1, vec![4.0, 7.0]).unwrap(),
    )
    .unwrap();

    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let grid: Vec<f64> = (0..20).map(|i| -1.0 + 0.1 * i as f64).collect();
    let dt = 0.07;
    let pred = mtef_pred(&FnModel(|_: &[f64], t: f64| sig(5.0 * t)), &data.x, &grid, dt).unwrap();
    let closed_err = grid
        .iter()
        .zip(&pred.values)
        .map(|(t, v)| (v - (sig(5.0 * t) - sig(5.0 * (t - dt))) / dt).abs())
        .fold(0.0, f64::max);

    let pass = line >= 0.999 && worst_indep <= 0.1 && eps == 2.5f64.sqrt() && closed_err < 1e-10;
    outcome(
        pass,
        format!(
            "noise-free line {line:.5}; independent max {worst_indep:.4} (20 seeds, both modes); \
             eps exact {}; sigmoid closed-form err {closed_err:.1e}",
            eps == 2.5f64.sqrt()
        ),
    )
}

fn desk_options(split: SplitMode) -> BenchOptions {
    BenchOptions {
        n: 4000,
        split,
        ..BenchOptions::default()
    }
}

fn deconfounding(rep: &BenchmarkReport) -> Outcome {
    let v = |k| rep.values(Scenario::A, Method::Drl, k);
    let (lb, la, nb, na) = (
        v("mcc_line_before"),
        v("mcc_line_after"),
        v("mcc_nonl_before"),
        v("mcc_nonl_after"),
    );
    if la.is_empty() {
        return outcome(false, "no DRL run succeeded");
    }
    let (line_ok, nonl_ok) = (median(&la) < 0.5 * median(&lb), median(&na) < 0.5 * median(&nb));
    outcome(
        line_ok && nonl_ok,
        format!(
            "median line {:.3} -> {:.3} {}, nonL {:.3} -> {:.3} {}",
            median(&lb),
            median(&la),
            fmt_list(&la),
            median(&nb),
            median(&na),
            fmt_list(&na)
        ),
    )
}

fn equilibrium(rep: &BenchmarkReport) -> Outcome {
    let fake = rep.values(Scenario::A, Method::Drl, "d_fake");
    let real = rep.values(Scenario::A, Method::Drl, "d_real");
    if fake.is_empty() {
        return outcome(false, "no DRL run succeeded");
    }
    let mean = fake.iter().sum::<f64>() / fake.len() as f64;
    outcome(
        (0.35..=0.65).contains(&mean),
        format!("mean D on fake {mean:.3} per seed {} (real {})", fmt_list(&fake), fmt_list(&real)),
    )
}

fn linear_accuracy(rep: &BenchmarkReport) -> Outcome {
    let drl = rep.values(Scenario::A, Method::Drl, "eps_mtef_test");
    let msm = rep.values(Scenario::A, Method::Msm, "eps_mtef_test");
    if drl.is_empty() || msm.is_empty() {
        return outcome(false, "missing runs");
    }
    let (d, m) = (median(&drl), median(&msm));
    let worst = drl.iter().cloned().fold(0.0, f64::max);
    outcome(
        d < m && worst < 1.0,
        format!("test eps DRL median {d:.3} {} vs MSM median {m:.3} {}", fmt_list(&drl), fmt_list(&msm)),
    )
}

fn nonlinear_ood(rep: &BenchmarkReport) -> Outcome {
    let get = |m| rep.values(Scenario::D, m, "eps_mtef_test");
    let (drl, msm, naive) = (get(Method::Drl), get(Method::Msm), get(Method::Naive));
    if drl.is_empty() || msm.is_empty() || naive.is_empty() {
        return outcome(false, "missing runs");
    }
    let (d, m, n) = (median(&drl), median(&msm), median(&naive));
    outcome(
        d < m && d < n,
        format!(
            "OOD test eps medians DRL {d:.3} {} / MSM {m:.3} {} / naive {n:.3} {}",
            fmt_list(&drl),
            fmt_list(&msm),
            fmt_list(&naive)
        ),
    )
}

fn icpw_sanity() -> Outcome {
    let mut alphas = Vec::new();
    for seed in 0..5 {
        let (data, _) = make_scenario(&ScenarioSpec::new(Scenario::A, 5000, seed)).unwrap();
        let w = icpw_weights(&data.x, &data.t).unwrap();
        alphas.push(msm_fit(&data.t, &data.y, &w.weights).unwrap().alpha1);
    }
    let a0 = alphas[0];
    outcome(
        (4.5..=5.5).contains(&a0),
        format!("alpha1 {a0:.3} at seed 0 (seeds 0-4: {})", fmt_list(&alphas)),
    )
}

fn engineering() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();

    let (data, _) = make_scenario(&ScenarioSpec::new(Scenario::B, 300, 7)).unwrap();
    let cfg = DrlConfig { epochs: 2, ..tiny_config() };
    let (model, _) = train(&data, &cfg).unwrap();
    let ck = dir.path().join("m.ckpt");
    save_checkpoint(&ck, &model, None).unwrap();
    let (loaded, _) = load_checkpoint(&ck).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let ckpt_ok = bits(model.predict(&data.x, &data.t).unwrap()) == bits(loaded.predict(&data.x, &data.t).unwrap());
    notes.push(format!("checkpoint {ckpt_ok}"));

    let opts = smoke_options(200, 2);
    let body = |r: BenchmarkReport| report_without_metadata(&report_json("bench", &r).unwrap()).unwrap().to_string();
    let a = body(run_benchmark(&[Scenario::A, Scenario::D], &Method::ALL, 2, 3, &opts).unwrap());
    let b = body(run_benchmark(&[Scenario::A, Scenario::D], &Method::ALL, 2, 3, &opts).unwrap());
    let report_ok = a == b;
    notes.push(format!("report {report_ok}"));

    let mut rng = seeded(11, 0);
    let awkward = [0.1, 1.0 / 3.0, -2.2250738585072014e-308, 1e300, f64::MIN_POSITIVE, 123456789.0123456789];
    let mut x = sample_virtual(50, 3, &mut rng);
    for (i, v) in awkward.iter().enumerate() {
        x.data_mut()[i] = *v;
    }
    let t: Vec<f64> = sample_virtual(50, 1, &mut rng).into_data();
    let y: Vec<f64> = t.iter().map(|v| v * std::f64::consts::PI).collect();
    let ds = Dataset::new(x, t, y, OutcomeKind::Continuous).unwrap();
    let back = parse_dataset_csv(&dataset_csv_string(&ds).unwrap(), OutcomeKind::Continuous).unwrap();
    let csv_ok = bits(ds.x.data().to_vec()) == bits(back.x.data().to_vec())
        && bits(ds.t.clone()) == bits(back.t.clone())
        && bits(ds.y.clone()) == bits(back.y.clone());
    notes.push(format!("csv {csv_ok}"));

    // A failed write (here: the rename cannot replace a non-empty directory)
    // must leave the target as it was and no stray temp file behind.
    let target = dir.path().join("busy");
    std::fs::create_dir(&target).unwrap();
    std::fs::write(target.join("keep"), "old").unwrap();
    let failed = write_atomic(&target, b"new").is_err();
    let intact = std::fs::read_to_string(target.join("keep")).map(|s| s == "old").unwrap_or(false);
    let good = dir.path().join("report.json");
    std::fs::write(&good, "old").unwrap();
    write_atomic(&good, b"new").unwrap();
    let replaced = std::fs::read_to_string(&good).unwrap() == "new";
    let strays = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp-"))
        .count();
    let atomic_ok = failed && intact && replaced && strays == 0;
    notes.push(format!("atomic writes {atomic_ok}"));

    outcome(ckpt_ok && report_ok && csv_ok && atomic_ok, notes.join(", "))
}

fn main() {
    let seeds: usize = std::env::var("ACCEPTANCE_SEEDS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let started = Instant::now();

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o: Outcome| {
        println!("criterion {id} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    record(1, "gradient correctness", gradients());
    record(2, "generator fidelity", generator_fidelity());
    record(3, "metric oracles", metric_oracles());

    let a = run_benchmark(&[Scenario::A], &[Method::Drl, Method::Msm], seeds, 0, &desk_options(SplitMode::Random602020))
        .unwrap();
    record(4, "de-confounding", deconfounding(&a));
    record(5, "equilibrium indicator", equilibrium(&a));
    record(6, "linear-outcome accuracy", linear_accuracy(&a));

    let d = run_benchmark(
        &[Scenario::D],
        &[Method::Drl, Method::Msm, Method::Naive],
        seeds,
        0,
        &desk_options(SplitMode::Quantile80Ood),
    )
    .unwrap();
    record(7, "nonlinear out-of-domain accuracy", nonlinear_ood(&d));
    record(8, "ICPW baseline sanity", icpw_sanity());
    record(9, "engineering invariants", engineering());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s{}",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failing {failed:?}") }
    );
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
