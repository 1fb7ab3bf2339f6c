//! File formats and atomic output.
//!
//! Matrices are stored as `{"rows", "cols", "data"}` with `data` row-major.
//! Floats are written in shortest round-trip form, so every format parses
//! back to bit-identical values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::learner::CurvePoint;
use crate::linalg::{Matrix, Vector};
use crate::mdp::{LowRankMdp, Policy, Transition, TransitionDataset};
use crate::objective::FeatureModel;
use crate::online::RunRecord;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Column header of dataset files.
pub const DATASET_COLUMNS: [&str; 5] = ["s", "a", "s_next", "a_next", "s_tilde"];

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, line: usize, message: impl ToString) -> Error {
    Error::Parse { path: path.display().to_string(), line, message: message.to_string() }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::validation(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| parse_err(path, e.line(), e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_json(&read_text(path)?, path)
}

/// Serde adapter for floats that may be infinite or NaN: finite values stay
/// numbers, the others become the strings `"inf"`, `"-inf"` and `"nan"`.
pub mod extended_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

// ── matrices ──

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Matrix> for MatrixJson {
    fn from(m: &Matrix) -> Self {
        let data = m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }
}

impl MatrixJson {
    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::DimensionMismatch { expected: self.rows * self.cols, actual: self.data.len() });
        }
        Ok(Matrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

fn vec_of(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

// ── MDPs ──

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpJson {
    pub num_states: usize,
    pub num_actions: usize,
    pub rank: usize,
    pub gamma: f64,
    pub rho: Vec<f64>,
    pub phi_star: MatrixJson,
    pub mu_star: MatrixJson,
    pub theta_r: Vec<f64>,
}

impl From<&LowRankMdp> for MdpJson {
    fn from(m: &LowRankMdp) -> Self {
        Self {
            num_states: m.num_states(),
            num_actions: m.num_actions(),
            rank: m.rank(),
            gamma: m.gamma(),
            rho: vec_of(m.rho()),
            phi_star: m.phi_star().into(),
            mu_star: m.mu_star().into(),
            theta_r: vec_of(m.theta_r()),
        }
    }
}

impl MdpJson {
    pub fn to_mdp(&self) -> Result<LowRankMdp> {
        let mdp = LowRankMdp::new(
            self.phi_star.to_matrix()?,
            self.mu_star.to_matrix()?,
            Vector::from_vec(self.theta_r.clone()),
            Vector::from_vec(self.rho.clone()),
            self.gamma,
            self.num_actions,
        )?;
        if mdp.num_states() != self.num_states || mdp.rank() != self.rank {
            return Err(Error::validation("declared dimensions disagree with the stored matrices"));
        }
        Ok(mdp)
    }
}

pub fn mdp_to_json(mdp: &LowRankMdp) -> Result<String> {
    to_json(&MdpJson::from(mdp))
}

pub fn write_mdp(path: &Path, mdp: &LowRankMdp) -> Result<()> {
    write_atomic(path, mdp_to_json(mdp)?.as_bytes())
}

pub fn read_mdp(path: &Path) -> Result<LowRankMdp> {
    read_json::<MdpJson>(path)?.to_mdp()
}

// ── feature models ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_states: usize,
    pub num_actions: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureModelJson {
    pub dims: ModelDims,
    pub phi_hat: MatrixJson,
    pub mu_prime_hat: MatrixJson,
    pub base_measure_p: Vec<f64>,
}

impl From<&FeatureModel> for FeatureModelJson {
    fn from(m: &FeatureModel) -> Self {
        Self {
            dims: ModelDims { num_states: m.num_states(), num_actions: m.num_actions(), dim: m.dim() },
            phi_hat: m.phi_hat().into(),
            mu_prime_hat: m.mu_prime_hat().into(),
            base_measure_p: m.base_measure_p().iter().copied().collect(),
        }
    }
}

impl FeatureModelJson {
    pub fn to_model(&self) -> Result<FeatureModel> {
        let m = FeatureModel::new(
            self.phi_hat.to_matrix()?,
            self.mu_prime_hat.to_matrix()?,
            Vector::from_vec(self.base_measure_p.clone()),
            self.dims.num_actions,
        )?;
        if m.num_states() != self.dims.num_states || m.dim() != self.dims.dim {
            return Err(Error::validation("declared dimensions disagree with the stored matrices"));
        }
        Ok(m)
    }
}

pub fn write_feature_model(path: &Path, model: &FeatureModel) -> Result<()> {
    write_json(path, &FeatureModelJson::from(model))
}

pub fn read_feature_model(path: &Path) -> Result<FeatureModel> {
    read_json::<FeatureModelJson>(path)?.to_model()
}

// ── policies ──

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyJson {
    pub num_states: usize,
    pub num_actions: usize,
    pub probs: MatrixJson,
}

impl From<&Policy> for PolicyJson {
    fn from(p: &Policy) -> Self {
        Self { num_states: p.num_states(), num_actions: p.num_actions(), probs: p.probs().into() }
    }
}

impl PolicyJson {
    pub fn to_policy(&self) -> Result<Policy> {
        if self.probs.rows != self.num_states || self.probs.cols != self.num_actions {
            return Err(Error::validation("declared dimensions disagree with the stored matrix"));
        }
        Policy::new(self.probs.to_matrix()?)
    }
}

pub fn write_policy(path: &Path, policy: &Policy) -> Result<()> {
    write_json(path, &PolicyJson::from(policy))
}

pub fn read_policy(path: &Path) -> Result<Policy> {
    read_json::<PolicyJson>(path)?.to_policy()
}

// ── datasets ──

/// CSV with header `s,a,s_next,a_next,s_tilde`; the last two columns are
/// empty for offline triples.
pub fn dataset_to_csv(data: &TransitionDataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::validation(e.to_string());
    w.write_record(DATASET_COLUMNS).map_err(csv_err)?;
    for (i, t) in data.primary.iter().enumerate() {
        let (a_next, s_tilde) = match data.secondary.get(i) {
            Some(q) => (q.a.to_string(), q.s_next.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([t.s.to_string(), t.a.to_string(), t.s_next.to_string(), a_next, s_tilde]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn dataset_from_csv(text: &str, path: &Path) -> Result<TransitionDataset> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| parse_err(path, 1, e))?.clone();
    if header.iter().ne(DATASET_COLUMNS) {
        return Err(parse_err(path, 1, format!("expected header {}", DATASET_COLUMNS.join(","))));
    }
    let (mut primary, mut secondary) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e))?;
        let field = |k: usize| -> Result<Option<usize>> {
            let f = rec.get(k).unwrap_or("").trim();
            if f.is_empty() {
                return Ok(None);
            }
            f.parse().map(Some).map_err(|e| parse_err(path, line, format!("column {}: {e}", DATASET_COLUMNS[k])))
        };
        let need = |k: usize| -> Result<usize> {
            field(k)?.ok_or_else(|| parse_err(path, line, format!("column {} is empty", DATASET_COLUMNS[k])))
        };
        let t = Transition { s: need(0)?, a: need(1)?, s_next: need(2)? };
        match (field(3)?, field(4)?) {
            (Some(a_next), Some(s_tilde)) => secondary.push(Transition { s: t.s_next, a: a_next, s_next: s_tilde }),
            (None, None) => {}
            _ => return Err(parse_err(path, line, "a_next and s_tilde must both be set or both be empty")),
        }
        primary.push(t);
    }
    if !secondary.is_empty() && secondary.len() != primary.len() {
        return Err(parse_err(path, 0, "either every row or no row may carry a secondary triple"));
    }
    TransitionDataset::new(primary, secondary)
}

pub fn write_dataset(path: &Path, data: &TransitionDataset) -> Result<()> {
    write_atomic(path, dataset_to_csv(data)?.as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<TransitionDataset> {
    dataset_from_csv(&read_text(path)?, path)
}

// ── tabular records ──

/// Serializes rows with the csv crate; the header comes from the field names.
pub fn records_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::validation(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn records_from_csv<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| parse_err(path, i + 2, e)))
        .collect()
}

pub fn write_run_records(path: &Path, rows: &[RunRecord]) -> Result<()> {
    write_atomic(path, records_to_csv(rows)?.as_bytes())
}

pub fn read_run_records(path: &Path) -> Result<Vec<RunRecord>> {
    records_from_csv(&read_text(path)?, path)
}

pub fn write_loss_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    write_atomic(path, records_to_csv(curve)?.as_bytes())
}

// ── sidecars ──

/// `<out>.meta.json`
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    out.with_file_name(name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    pub unix_time: u64,
}

impl Sidecar {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, outputs: Vec<String>) -> Self {
        let unix_time =
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { command: command.to_string(), version: VERSION.to_string(), seed, config, outputs, unix_time }
    }
}

pub fn write_sidecar(out: &Path, sidecar: &Sidecar) -> Result<()> {
    write_json(&sidecar_path(out), sidecar)
}
