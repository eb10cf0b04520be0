//! Browser bindings for the interactive demo in `www/`.
//!
//! Every export takes plain numbers/strings and returns a JSON document, so
//! the page needs no generated TypeScript types. The same functions are
//! callable natively, which is how they are tested.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use drl_core::baselines::{icpw_weights, msm_fit};
use drl_core::drl::{train_with_validation, DrlConfig};
use drl_core::harness::bench::eps_on;
use drl_core::harness::{split, SplitMode, SplitSpec};
use drl_core::metrics::{mcc, mtef_grid, mtef_pred, pcc, quantile, MccMode, OutcomeModel, GRID_LEVELS};
use drl_core::synthgen::{make_scenario, true_mtef_curve, GroundTruth, Scenario, ScenarioSpec};
use drl_core::{Dataset, Result};

/// Points sent to the page for scatter plots.
const SCATTER_POINTS: usize = 400;

fn draw(scenario: &str, n: usize, seed: u64, d: usize) -> Result<(Dataset, GroundTruth)> {
    let scenario: Scenario = scenario.parse()?;
    make_scenario(&ScenarioSpec::new(scenario, n, seed).with_dim(d))
}

fn scatter(data: &Dataset) -> Value {
    let step = (data.len() / SCATTER_POINTS).max(1);
    let idx: Vec<usize> = (0..data.len()).step_by(step).collect();
    json!({
        "t": idx.iter().map(|&i| data.t[i]).collect::<Vec<_>>(),
        "y": idx.iter().map(|&i| data.y[i]).collect::<Vec<_>>(),
    })
}

fn curve_json(levels: &[f64], values: &[f64]) -> Value {
    json!({ "t_levels": levels, "values": values })
}

/// Draws a scenario and describes it: confounding strength, hidden weights
/// and the true MTEF curve.
pub fn explore(scenario: &str, n: usize, seed: u64, d: usize) -> Result<Value> {
    let (data, gt) = draw(scenario, n, seed, d)?;
    let grid = mtef_grid(&data.t, GRID_LEVELS)?;
    let truth = true_mtef_curve(&gt, &grid.t_levels, grid.dt)?;
    let naive = msm_fit(&data.t, &data.y, &vec![1.0; data.len()])?;
    Ok(json!({
        "scenario": scenario,
        "n": n,
        "d": d,
        "t_range": [quantile(&data.t, 0.0)?, quantile(&data.t, 1.0)?],
        "pcc": pcc(&data.x, &data.t)?.value,
        "mcc_line": mcc(&data.x, &data.t, MccMode::Line)?,
        "mcc_nonl": mcc(&data.x, &data.t, MccMode::NonL)?,
        "w_xt": gt.w_xt,
        "w_xy": gt.w_xy,
        "w_ty": gt.w_ty,
        "unadjusted_slope": naive.alpha1,
        "true_mtef": curve_json(&truth.t_levels, &truth.values),
        "scatter": scatter(&data),
    }))
}

fn curves_on(models: &[(&str, &dyn OutcomeModel)], part: &Dataset, gt: &GroundTruth) -> Result<Value> {
    let grid = mtef_grid(&part.t, GRID_LEVELS)?;
    let truth = true_mtef_curve(gt, &grid.t_levels, grid.dt)?;
    let mut out = serde_json::Map::new();
    out.insert("truth".into(), curve_json(&truth.t_levels, &truth.values));
    let mut eps = serde_json::Map::new();
    for (name, m) in models {
        let c = mtef_pred(*m, &part.x, &grid.t_levels, grid.dt)?;
        out.insert((*name).into(), curve_json(&c.t_levels, &c.values));
        eps.insert((*name).into(), eps_on(*m, part, gt)?.into());
    }
    out.insert("eps_mtef".into(), Value::Object(eps));
    Ok(Value::Object(out))
}

/// Trains a DRL model on one split and compares its MTEF curves with the
/// unweighted and ICPW-weighted marginal structural models.
pub fn train_compare(
    scenario: &str,
    n: usize,
    seed: u64,
    epochs: usize,
    w_c: f64,
    split_mode: &str,
) -> Result<Value> {
    let (data, gt) = draw(scenario, n, seed, 10)?;
    let mode: SplitMode = split_mode.parse()?;
    let parts = split(&data, &SplitSpec::new(mode, seed))?.apply(&data);
    let cfg = DrlConfig {
        epochs,
        w_c,
        seed,
        ..DrlConfig::default()
    };
    let (model, hist) = train_with_validation(&parts.train, Some(&parts.val), &cfg)?;
    let tr = &parts.train;
    let msm = msm_fit(&tr.t, &tr.y, &vec![1.0; tr.len()])?;
    let icpw = msm_fit(&tr.t, &tr.y, &icpw_weights(&tr.x, &tr.t)?.weights)?;
    let rep = model.representations(&tr.x)?;
    let models: [(&str, &dyn OutcomeModel); 3] = [("drl", &model), ("msm", &msm), ("icpw", &icpw)];
    Ok(json!({
        "split": mode.to_string(),
        "mcc": {
            "line_before": mcc(&tr.x, &tr.t, MccMode::Line)?,
            "line_after": mcc(&rep, &tr.t, MccMode::Line)?,
            "nonl_before": mcc(&tr.x, &tr.t, MccMode::NonL)?,
            "nonl_after": mcc(&rep, &tr.t, MccMode::NonL)?,
        },
        "history": {
            "l_c": hist.epochs.iter().map(|e| e.l_c).collect::<Vec<_>>(),
            "d_real": hist.epochs.iter().map(|e| e.d_real).collect::<Vec<_>>(),
            "d_fake": hist.epochs.iter().map(|e| e.d_fake).collect::<Vec<_>>(),
            "best_epoch": hist.best_epoch,
        },
        "train": curves_on(&models, tr, &gt)?,
        "test": curves_on(&models, &parts.test, &gt)?,
    }))
}

/// ICPW weights on a scenario: spread, effective sample size and the
/// weighted vs unweighted treatment slope.
pub fn icpw_diagnostics(scenario: &str, n: usize, seed: u64) -> Result<Value> {
    let (data, gt) = draw(scenario, n, seed, 10)?;
    let w = icpw_weights(&data.x, &data.t)?;
    let sum: f64 = w.weights.iter().sum();
    let ess = sum * sum / w.weights.iter().map(|v| v * v).sum::<f64>();
    let weighted = msm_fit(&data.t, &data.y, &w.weights)?;
    let plain = msm_fit(&data.t, &data.y, &vec![1.0; data.len()])?;
    let logw: Vec<f64> = w.weights.iter().map(|v| v.log10()).collect();
    let (lo, hi) = (quantile(&logw, 0.0)?, quantile(&logw, 1.0)?);
    let bins = 30;
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let mut counts = vec![0usize; bins];
    for v in &logw {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    Ok(json!({
        "true_slope": gt.w_ty,
        "unweighted_slope": plain.alpha1,
        "weighted_slope": weighted.alpha1,
        "effective_sample_size": ess,
        "n": n,
        "treatment_r2": 1.0 - w.conditional_var / w.marginal_var,
        "log10_weight_histogram": { "lo": lo, "width": width, "counts": counts },
    }))
}

fn to_js(r: Result<Value>) -> Result<String, JsValue> {
    r.map(|v| v.to_string())
        .map_err(|e| JsValue::from_str(&format!("error[{}]: {e}", e.category())))
}

#[wasm_bindgen(js_name = exploreScenario)]
pub fn explore_scenario_js(scenario: &str, n: u32, seed: u32, d: u32) -> Result<String, JsValue> {
    to_js(explore(scenario, n as usize, seed as u64, d as usize))
}

#[wasm_bindgen(js_name = trainCompare)]
pub fn train_compare_js(
    scenario: &str,
    n: u32,
    seed: u32,
    epochs: u32,
    w_c: f64,
    split_mode: &str,
) -> Result<String, JsValue> {
    to_js(train_compare(scenario, n as usize, seed as u64, epochs as usize, w_c, split_mode))
}

#[wasm_bindgen(js_name = icpwDiagnostics)]
pub fn icpw_diagnostics_js(scenario: &str, n: u32, seed: u32) -> Result<String, JsValue> {
    to_js(icpw_diagnostics(scenario, n as usize, seed as u64))
}
