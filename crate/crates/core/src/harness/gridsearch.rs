//! Exhaustive hyperparameter search over [`DrlConfig`] overrides.
//!
//! A space is a JSON object mapping top-level config keys to candidate
//! lists, e.g. `{"w_c": [0.1, 1, 10], "lr_g": [1e-3, 1e-2]}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataset::Dataset;
use crate::drl::{train_with_validation, DrlConfig};
use crate::error::{Error, Result};

/// Guard against accidentally enormous products.
pub const MAX_CANDIDATES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace(pub BTreeMap<String, Vec<Value>>);

impl SearchSpace {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Parse("search space must be a JSON object".into()))?;
        let mut out = BTreeMap::new();
        for (k, vals) in obj {
            let list = vals
                .as_array()
                .ok_or_else(|| Error::Parse(format!("search key {k:?} must map to a list")))?;
            out.insert(k.clone(), list.clone());
        }
        Ok(Self(out))
    }

    /// Every combination, in lexical order of the serialized override.
    pub fn candidates(&self) -> Result<Vec<Map<String, Value>>> {
        if self.0.is_empty() {
            return Err(Error::Config("search space is empty".into()));
        }
        let mut total: usize = 1;
        for (k, v) in &self.0 {
            if v.is_empty() {
                return Err(Error::Config(format!("search key {k:?} has no candidates")));
            }
            total = total.saturating_mul(v.len());
        }
        if total > MAX_CANDIDATES {
            return Err(Error::Config(format!("search space has {total} candidates (max {MAX_CANDIDATES})")));
        }
        let mut combos = vec![Map::new()];
        for (k, vals) in &self.0 {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    vals.iter().map(move |v| {
                        let mut c = c.clone();
                        c.insert(k.clone(), v.clone());
                        c
                    })
                })
                .collect();
        }
        combos.sort_by_cached_key(|c| Value::Object(c.clone()).to_string());
        Ok(combos)
    }
}

/// Applies top-level overrides; unknown keys and ill-typed values are config errors.
pub fn apply_overrides(base: &DrlConfig, overrides: &Map<String, Value>) -> Result<DrlConfig> {
    let mut v = serde_json::to_value(base)?;
    let obj = v.as_object_mut().expect("config serializes to an object");
    for (k, val) in overrides {
        if !obj.contains_key(k) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        obj.insert(k.clone(), val.clone());
    }
    let cfg: DrlConfig =
        serde_json::from_value(v).map_err(|e| Error::Config(format!("override {overrides:?}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub overrides: Map<String, Value>,
    /// Best validation outcome loss over training.
    pub val_l_c: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub best: DrlConfig,
    pub best_overrides: Map<String, Value>,
    pub best_val_l_c: f64,
    pub trials: Vec<Trial>,
}

/// Trains every candidate on `train`, scores on `val`, keeps the lowest
/// validation loss. Ties go to the candidate earliest in lexical order.
pub fn grid_search(space: &SearchSpace, base: &DrlConfig, train: &Dataset, val: &Dataset) -> Result<SearchReport> {
    let mut trials = Vec::new();
    let mut best: Option<(f64, usize, DrlConfig)> = None;
    for (i, ov) in space.candidates()?.into_iter().enumerate() {
        let outcome = apply_overrides(base, &ov).and_then(|cfg| {
            let (_, hist) = train_with_validation(train, Some(val), &cfg)?;
            let score = hist
                .epochs
                .iter()
                .filter_map(|e| e.val_l_c)
                .fold(f64::INFINITY, f64::min);
            if !score.is_finite() {
                return Err(Error::Numeric(format!("validation loss never finite ({score})")));
            }
            Ok((score, hist.best_epoch, cfg))
        });
        match outcome {
            Ok((score, epoch, cfg)) => {
                if best.as_ref().map_or(true, |(b, _, _)| score < *b) {
                    best = Some((score, i, cfg));
                }
                trials.push(Trial { overrides: ov, val_l_c: Some(score), best_epoch: epoch, error: None });
            }
            Err(e) => trials.push(Trial {
                overrides: ov,
                val_l_c: None,
                best_epoch: None,
                error: Some(format!("{}: {e}", e.category())),
            }),
        }
    }
    match best {
        Some((score, i, cfg)) => Ok(SearchReport {
            best: cfg,
            best_overrides: trials[i].overrides.clone(),
            best_val_l_c: score,
            trials,
        }),
        None => {
            let diag: Vec<String> = trials
                .iter()
                .map(|t| format!("{} -> {}", Value::Object(t.overrides.clone()), t.error.as_deref().unwrap_or("?")))
                .collect();
            Err(Error::Search(format!("all {} candidates failed: {}", trials.len(), diag.join("; "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::bench::smoke_options;
    use crate::harness::split::{split, SplitMode, SplitSpec};
    use crate::synthgen::{make_scenario, Scenario, ScenarioSpec};

    fn parts() -> (Dataset, Dataset) {
        let (data, _) = make_scenario(&ScenarioSpec::new(Scenario::A, 300, 2).with_dim(4)).unwrap();
        let s = split(&data, &SplitSpec::new(SplitMode::Random602020, 2)).unwrap();
        (data.subset(&s.train), data.subset(&s.val))
    }

    fn base() -> DrlConfig {
        DrlConfig {
            epochs: 3,
            ..smoke_options(0, 3).drl
        }
    }

    #[test]
    fn candidates_are_the_cartesian_product_in_lexical_order() {
        let space = SearchSpace::from_json(r#"{"w_c":[10,1,0.1],"rep_dim":[4,2]}"#).unwrap();
        let c = space.candidates().unwrap();
        assert_eq!(c.len(), 6);
        let keys: Vec<String> = c.iter().map(|m| Value::Object(m.clone()).to_string()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn malformed_spaces() {
        assert!(SearchSpace::from_json("[1,2]").is_err());
        assert!(SearchSpace::from_json(r#"{"w_c": 1}"#).is_err());
        assert!(SearchSpace::from_json("{}").unwrap().candidates().is_err());
        assert!(SearchSpace::from_json(r#"{"w_c": []}"#).unwrap().candidates().is_err());
    }

    #[test]
    fn overrides_are_checked() {
        let mut ov = Map::new();
        ov.insert("w_c".into(), 2.5.into());
        assert_eq!(apply_overrides(&base(), &ov).unwrap().w_c, 2.5);
        ov.insert("bogus".into(), 1.into());
        assert!(matches!(apply_overrides(&base(), &ov), Err(Error::Config(_))));
        let mut ov = Map::new();
        ov.insert("rep_dim".into(), "wide".into());
        assert!(matches!(apply_overrides(&base(), &ov), Err(Error::Config(_))));
    }

    #[test]
    fn singleton_space_returns_its_element() {
        let (tr, va) = parts();
        let space = SearchSpace::from_json(r#"{"w_c":[0.5]}"#).unwrap();
        let rep = grid_search(&space, &base(), &tr, &va).unwrap();
        assert_eq!(rep.best.w_c, 0.5);
        assert_eq!(rep.trials.len(), 1);
    }

    #[test]
    fn winner_is_a_member_and_has_the_lowest_score() {
        let (tr, va) = parts();
        let space = SearchSpace::from_json(r#"{"w_c":[0.1,1,10]}"#).unwrap();
        let rep = grid_search(&space, &base(), &tr, &va).unwrap();
        assert!([0.1, 1.0, 10.0].contains(&rep.best.w_c));
        let min = rep.trials.iter().filter_map(|t| t.val_l_c).fold(f64::INFINITY, f64::min);
        assert_eq!(rep.best_val_l_c, min);
    }

    #[test]
    fn invalid_candidates_are_skipped_and_all_bad_is_an_error() {
        let (tr, va) = parts();
        let space = SearchSpace::from_json(r#"{"lr_g":[-1.0, 0.001]}"#).unwrap();
        let rep = grid_search(&space, &base(), &tr, &va).unwrap();
        assert_eq!(rep.best.lr_g, 0.001);
        assert!(rep.trials.iter().any(|t| t.error.is_some()));
        let space = SearchSpace::from_json(r#"{"lr_g":[-1.0, 0.0]}"#).unwrap();
        let err = grid_search(&space, &base(), &tr, &va).unwrap_err();
        assert!(matches!(err, Error::Search(_)), "{err}");
    }
}
