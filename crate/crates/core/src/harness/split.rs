use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::quantile;
use crate::rng::seeded;

pub const MIN_SPLIT_ROWS: usize = 10;
/// Share of treatments kept in-domain by the out-of-domain split.
pub const OOD_QUANTILE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Shuffled 60/20/20.
    #[serde(alias = "random")]
    Random602020,
    /// Test is every row with `t` above the 80th percentile; the rest goes 75/25.
    #[default]
    #[serde(alias = "quantile80")]
    Quantile80Ood,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Random602020 => "random",
            SplitMode::Quantile80Ood => "quantile80",
        })
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" | "random_602020" => Ok(SplitMode::Random602020),
            "quantile80" | "quantile80_ood" | "ood" => Ok(SplitMode::Quantile80Ood),
            other => Err(Error::Config(format!(
                "unknown split mode {other:?} (expected random or quantile80)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(mode: SplitMode, seed: u64) -> Self {
        Self { mode, seed }
    }
}

/// Row indices of each part, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// The three parts materialized.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SplitIndices {
    pub fn apply(&self, data: &Dataset) -> SplitData {
        SplitData {
            train: data.subset(&self.train),
            val: data.subset(&self.val),
            test: data.subset(&self.test),
        }
    }
}

pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<SplitIndices> {
    split_treatments(&data.t, spec)
}

/// Splitting only looks at the treatments.
pub fn split_treatments(t: &[f64], spec: &SplitSpec) -> Result<SplitIndices> {
    let n = t.len();
    if n < MIN_SPLIT_ROWS {
        return Err(Error::Split(format!("need at least {MIN_SPLIT_ROWS} rows, got {n}")));
    }
    let mut rng = seeded(spec.seed, 30);
    let (mut train, mut val, mut test) = match spec.mode {
        SplitMode::Random602020 => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let n_train = n * 6 / 10;
            let n_val = n * 2 / 10;
            let test = idx.split_off(n_train + n_val);
            let val = idx.split_off(n_train);
            (idx, val, test)
        }
        SplitMode::Quantile80Ood => {
            let threshold = quantile(t, OOD_QUANTILE)?;
            let (test, mut rest): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| t[i] > threshold);
            rest.shuffle(&mut rng);
            let val = rest.split_off(rest.len() * 3 / 4);
            (rest, val, test)
        }
    };
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        if part.is_empty() {
            return Err(Error::Split(format!("{} split of {n} rows left {name} empty", spec.mode)));
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % n) as f64).collect()
    }

    #[test]
    fn random_sizes() {
        let s = split_treatments(&ramp(1000), &SplitSpec::new(SplitMode::Random602020, 3)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (600, 200, 200));
    }

    #[test]
    fn quantile_test_is_upper_tail() {
        let t = ramp(1000);
        let s = split_treatments(&t, &SplitSpec::new(SplitMode::Quantile80Ood, 3)).unwrap();
        let thr = quantile(&t, 0.8).unwrap();
        let min_test = s.test.iter().map(|&i| t[i]).fold(f64::INFINITY, f64::min);
        let max_rest = s.train.iter().chain(&s.val).map(|&i| t[i]).fold(f64::NEG_INFINITY, f64::max);
        assert!(min_test > thr && max_rest <= thr);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (600, 200, 200));
    }

    #[test]
    fn too_few_rows() {
        let err = split_treatments(&ramp(9), &SplitSpec::new(SplitMode::Random602020, 0)).unwrap_err();
        assert!(matches!(err, Error::Split(_)));
    }

    #[test]
    fn constant_treatment_leaves_empty_ood_test() {
        let err = split_treatments(&[1.0; 50], &SplitSpec::new(SplitMode::Quantile80Ood, 0)).unwrap_err();
        assert!(matches!(err, Error::Split(_)), "{err}");
    }

    #[test]
    fn mode_names() {
        for m in [SplitMode::Random602020, SplitMode::Quantile80Ood] {
            assert_eq!(m.to_string().parse::<SplitMode>().unwrap(), m);
        }
        assert!("halves".parse::<SplitMode>().is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_complete_and_seeded(
            t in prop::collection::vec(-100.0f64..100.0, 10..300),
            seed in 0u64..1000,
            random in any::<bool>(),
        ) {
            let mode = if random { SplitMode::Random602020 } else { SplitMode::Quantile80Ood };
            let spec = SplitSpec::new(mode, seed);
            if let Ok(s) = split_treatments(&t, &spec) {
                let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..t.len()).collect::<Vec<_>>());
                prop_assert_eq!(split_treatments(&t, &spec).unwrap(), s);
            } else {
                prop_assert!(!random);
            }
        }
    }
}
