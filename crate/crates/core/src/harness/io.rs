//! On-disk formats: dataset CSV, ground-truth sidecar, JSON checkpoints and
//! reports. Every writer goes through [`write_atomic`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{Dataset, OutcomeKind, Standardizer};
use crate::drl::{DrlConfig, DrlModel};
use crate::error::{Error, Result};
use crate::harness::split::SplitSpec;
use crate::nn::{Mlp, MlpConfig};
use crate::synthgen::{GroundTruth, ScenarioSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const TRUTH_VERSION: u32 = 1;

/// Writes to a sibling temp file, syncs, then renames over `path`, so
/// readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let res = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

/// Reads a whole file, naming it in the error.
pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// 17 significant digits: enough to round-trip any `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn dataset_csv_string(data: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let d = data.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("t".into());
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|&v| fmt_real(v)).collect();
        rec.push(fmt_real(data.t[i]));
        rec.push(fmt_real(data.y[i]));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    write_atomic(path, dataset_csv_string(data)?.as_bytes())
}

pub fn parse_dataset_csv(text: &str, kind: OutcomeKind) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    let cols = header.len();
    let expected: Vec<String> = (0..cols.saturating_sub(2))
        .map(|j| format!("x{j}"))
        .chain(["t".to_string(), "y".to_string()])
        .collect();
    if cols < 3 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse(format!(
            "dataset header must be x0,...,x{{d-1}},t,y; got {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let d = cols - 2;
    let (mut x, mut t, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let mut vals = Vec::with_capacity(cols);
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Parse(format!("row {}: column {} is not a number: {field:?}", line + 1, &header[j]))
            })?;
            vals.push(v);
        }
        y.push(vals[d + 1]);
        t.push(vals[d]);
        x.extend_from_slice(&vals[..d]);
    }
    if t.is_empty() {
        return Err(Error::Parse("dataset has no rows".into()));
    }
    Dataset::new(Tensor::matrix(t.len(), d, x)?, t, y, kind)
}

pub fn read_dataset_csv(path: &Path, kind: OutcomeKind) -> Result<Dataset> {
    parse_dataset_csv(&read_text(path)?, kind)
}

/// Sidecar next to a generated CSV: `data.csv` → `data.csv.truth.json`.
pub fn truth_path(data_path: &Path) -> PathBuf {
    let mut s = data_path.as_os_str().to_owned();
    s.push(".truth.json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDocument {
    pub format_version: u32,
    pub spec: ScenarioSpec,
    pub ground_truth: GroundTruth,
}

pub fn write_truth(data_path: &Path, spec: &ScenarioSpec, gt: &GroundTruth) -> Result<()> {
    let doc = TruthDocument {
        format_version: TRUTH_VERSION,
        spec: spec.clone(),
        ground_truth: gt.clone(),
    };
    write_atomic(&truth_path(data_path), serde_json::to_string_pretty(&doc)?.as_bytes())
}

/// `Ok(None)` when the dataset has no sidecar.
pub fn read_truth(data_path: &Path) -> Result<Option<TruthDocument>> {
    let p = truth_path(data_path);
    if !p.exists() {
        return Ok(None);
    }
    let doc: TruthDocument = serde_json::from_str(&read_text(&p)?)?;
    if doc.format_version != TRUTH_VERSION {
        return Err(Error::Parse(format!("unknown ground-truth version {}", doc.format_version)));
    }
    let gt = &doc.ground_truth;
    let d = gt.dim();
    if gt.w_xy.len() != d || gt.covariance.shape() != [d, d] || gt.covariance.len() != d * d {
        return Err(Error::Parse(format!("ground truth in {} has inconsistent shapes", p.display())));
    }
    Ok(Some(doc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `fan_in` rows of `fan_out` values.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub config: MlpConfig,
    pub layers: Vec<LayerParams>,
}

impl NetParams {
    pub fn from_mlp(m: &Mlp) -> Self {
        let layers = m
            .weights
            .iter()
            .zip(&m.biases)
            .map(|(w, b)| LayerParams {
                weight: (0..w.rows()).map(|i| w.row(i).to_vec()).collect(),
                bias: b.data().to_vec(),
            })
            .collect();
        Self {
            config: m.config.clone(),
            layers,
        }
    }

    pub fn to_mlp(&self, name: &str) -> Result<Mlp> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let w = Tensor::from_rows(&l.weight)
                .map_err(|e| Error::Parse(format!("network {name}, layer {i}: {e}")))?;
            weights.push(w);
            biases.push(Tensor::vector(l.bias.clone()));
        }
        Mlp::from_parts(self.config.clone(), weights, biases)
            .map_err(|e| Error::Parse(format!("network {name}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Networks {
    pub g: NetParams,
    pub c: NetParams,
    pub d: NetParams,
    pub f: NetParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub config: DrlConfig,
    /// How the training rows were carved out of the dataset, if they were.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    pub scaler: Standardizer,
    pub networks: Networks,
}

impl Checkpoint {
    pub fn from_model(model: &DrlModel, split: Option<SplitSpec>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            seed: model.config.seed,
            config: model.config.clone(),
            split,
            scaler: model.scaler.clone(),
            networks: Networks {
                g: NetParams::from_mlp(&model.g),
                c: NetParams::from_mlp(&model.c),
                d: NetParams::from_mlp(&model.d),
                f: NetParams::from_mlp(&model.f),
            },
        }
    }

    pub fn to_model(&self) -> Result<DrlModel> {
        let n = &self.networks;
        let model = DrlModel {
            g: n.g.to_mlp("g")?,
            c: n.c.to_mlp("c")?,
            d: n.d.to_mlp("d")?,
            f: n.f.to_mlp("f")?,
            config: self.config.clone(),
            scaler: self.scaler.clone(),
        };
        let s = &self.scaler;
        if s.x_scale.len() != s.x_mean.len() {
            return Err(Error::Parse("checkpoint scaler has mismatched columns".into()));
        }
        model
            .check_wiring()
            .map_err(|e| Error::Parse(format!("checkpoint networks: {e}")))?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks the version before anything else so old or foreign files get
    /// a clear message instead of a field-level complaint.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        match v.get("format_version").and_then(Value::as_u64) {
            Some(x) if x == CHECKPOINT_VERSION as u64 => {}
            Some(x) => return Err(Error::Parse(format!("unknown checkpoint version {x}"))),
            None => return Err(Error::Parse("checkpoint has no format_version".into())),
        }
        Ok(serde_json::from_value(v)?)
    }
}

pub fn save_checkpoint(path: &Path, model: &DrlModel, split: Option<SplitSpec>) -> Result<()> {
    write_atomic(path, Checkpoint::from_model(model, split).to_json()?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(DrlModel, Checkpoint)> {
    let ck = Checkpoint::from_json(&read_text(path)?)?;
    Ok((ck.to_model()?, ck))
}

/// Wraps a report body as `{"metadata": {...}, "report": body}`. Only
/// `metadata` varies between identical runs.
pub fn report_json<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let doc = serde_json::json!({
        "metadata": {
            "created_unix": created,
            "generator": concat!("drl-core ", env!("CARGO_PKG_VERSION")),
        },
        "kind": kind,
        "report": body,
    });
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn write_report<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    write_atomic(path, report_json(kind, body)?.as_bytes())
}

/// A report with its metadata stripped, for comparing runs.
pub fn report_without_metadata(text: &str) -> Result<Value> {
    let mut v: Value = serde_json::from_str(text)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("metadata");
    }
    Ok(v)
}
