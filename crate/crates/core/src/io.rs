//! Synthetic labeling tasks, JSON artifacts, CSV exports and accuracy.
//!
//! Every JSON artifact is an object with `schema_version` (currently 1)
//! and a `kind` discriminator next to its payload:
//!
//! ```json
//! {"schema_version": 1, "kind": "crf_model", "model": {...}}
//! {"schema_version": 1, "kind": "crf_gat_model", "model": {...}}
//! {"schema_version": 1, "kind": "dataset", "dataset": {...}}
//! {"schema_version": 1, "kind": "predictions", "labelings": [[1, 2], ...]}
//! ```
//!
//! Reals are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle reproduces every `f64` bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CrfError, Result};
use crate::gat::CrfGatModel;
use crate::model::{CrfModel, LabelSpace, Labeling, MarginalField, ObservedSequence};
use crate::table::Table;
use crate::training::{GridShape, LabeledDataset, LabeledItem};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Topology {
    Chain { length: usize },
    Grid { width: usize, height: usize },
}

impl Topology {
    pub fn nodes(&self) -> usize {
        match *self {
            Topology::Chain { length } => length,
            Topology::Grid { width, height } => width * height,
        }
    }

    /// Chain index, or (row, col) with node = row * width + col.
    fn coordinates(&self, node: usize) -> Vec<f64> {
        match *self {
            Topology::Chain { .. } => vec![node as f64],
            Topology::Grid { width, .. } => vec![(node / width) as f64, (node % width) as f64],
        }
    }
}

fn default_items() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub topology: Topology,
    pub labels: usize,
    pub noise_sigma: f64,
    pub blob_count: usize,
    pub seed: u64,
    /// Independent items drawn from one generator stream.
    #[serde(default = "default_items")]
    pub items: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.topology.nodes();
        let dims_ok = match self.topology {
            Topology::Chain { length } => length >= 1,
            Topology::Grid { width, height } => width >= 1 && height >= 1,
        };
        if !dims_ok {
            return Err(CrfError::invalid("topology dimensions must be >= 1"));
        }
        LabelSpace::new(self.labels)?;
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(CrfError::invalid(format!(
                "noise_sigma must be finite and > 0, got {}",
                self.noise_sigma
            )));
        }
        if self.blob_count == 0 {
            return Err(CrfError::invalid("blob_count must be >= 1"));
        }
        if self.blob_count > n {
            return Err(CrfError::invalid(format!(
                "blob_count {} exceeds node count {n}",
                self.blob_count
            )));
        }
        if self.items == 0 {
            return Err(CrfError::invalid("items must be >= 1"));
        }
        Ok(())
    }
}

/// Blob seeds are distinct random nodes; blob b carries label b mod K and
/// every node takes the label of its nearest seed (ties to the lower blob).
/// Observations are one-hot(label) plus N(0, noise_sigma²) per coordinate.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let n = spec.topology.nodes();
    let k = spec.labels;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| CrfError::invalid(format!("noise_sigma: {e}")))?;
    let coords: Vec<Vec<f64>> = (0..n).map(|i| spec.topology.coordinates(i)).collect();
    let grid = match spec.topology {
        Topology::Grid { width, height } => Some(GridShape { width, height }),
        Topology::Chain { .. } => None,
    };

    let mut items = Vec::with_capacity(spec.items);
    for _ in 0..spec.items {
        let seeds = sample(&mut rng, n, spec.blob_count).into_vec();
        let gold: Vec<usize> = coords
            .iter()
            .map(|c| {
                let mut best = (f64::INFINITY, 0);
                for (b, &s) in seeds.iter().enumerate() {
                    let d = crate::kernels::squared_distance(c, &coords[s]);
                    if d < best.0 {
                        best = (d, b);
                    }
                }
                best.1 % k
            })
            .collect();
        let positions = Table::from_fn(n, coords[0].len(), |i, d| coords[i][d]);
        let observations = Table::from_fn(n, k, |i, l| {
            let hot = if gold[i] == l { 1.0 } else { 0.0 };
            hot + noise.sample(&mut rng)
        });
        items.push(LabeledItem {
            sequence: ObservedSequence::new(positions, observations)?,
            gold: Labeling::from_zero_based(gold),
            grid,
        });
    }
    LabeledDataset::new(LabelSpace::new(k)?, items)
}

/// Fraction of positions where `pred` equals `gold`.
pub fn accuracy(pred: &Labeling, gold: &Labeling) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(CrfError::shape(format!(
            "{} predicted labels for {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(CrfError::invalid("accuracy of empty labelings is undefined"));
    }
    let hits = pred
        .as_slice()
        .iter()
        .zip(gold.as_slice())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Accuracy pooled over all nodes of all items.
pub fn pooled_accuracy(pred: &[Labeling], gold: &[Labeling]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(CrfError::shape(format!(
            "{} predicted items for {} gold items",
            pred.len(),
            gold.len()
        )));
    }
    let mut hits = 0.0;
    let mut total = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        hits += accuracy(p, g)? * g.len() as f64;
        total += g.len();
    }
    if total == 0 {
        return Err(CrfError::invalid("accuracy of empty labelings is undefined"));
    }
    Ok(hits / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Artifact {
    CrfModel { model: CrfModel },
    CrfGatModel { model: CrfGatModel },
    Dataset { dataset: LabeledDataset },
    Predictions {
        labelings: Vec<Labeling>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        marginals: Option<Vec<MarginalField>>,
    },
}

impl Artifact {
    pub fn kind(&self) -> &'static str {
        match self {
            Artifact::CrfModel { .. } => "crf_model",
            Artifact::CrfGatModel { .. } => "crf_gat_model",
            Artifact::Dataset { .. } => "dataset",
            Artifact::Predictions { .. } => "predictions",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    schema_version: u32,
    #[serde(flatten)]
    artifact: Artifact,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<serde_json::Value>,
}

fn io_err(path: &Path, source: std::io::Error) -> CrfError {
    CrfError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, e: serde_json::Error) -> CrfError {
    CrfError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn to_json_string(artifact: &Artifact) -> Result<String> {
    #[derive(Serialize)]
    struct EnvelopeRef<'a> {
        schema_version: u32,
        #[serde(flatten)]
        artifact: &'a Artifact,
    }
    serde_json::to_string_pretty(&EnvelopeRef {
        schema_version: SCHEMA_VERSION,
        artifact,
    })
    .map_err(|e| CrfError::invalid(format!("serialization failed: {e}")))
}

/// Parses an artifact; `path` is only used in error messages.
pub fn from_json_str(text: &str, path: &Path) -> Result<Artifact> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| parse_err(path, e))?;
    match probe.schema_version {
        Some(serde_json::Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION as u64) => {}
        found => {
            return Err(CrfError::SchemaVersion {
                path: path.to_path_buf(),
                found: found.map_or_else(|| "missing".to_string(), |v| v.to_string()),
                expected: SCHEMA_VERSION,
            })
        }
    }
    let env: Envelope = serde_json::from_str(text).map_err(|e| parse_err(path, e))?;
    Ok(env.artifact)
}

pub fn save_artifact(path: impl AsRef<Path>, artifact: &Artifact) -> Result<()> {
    let path = path.as_ref();
    let mut text = to_json_string(artifact)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn load_artifact(path: impl AsRef<Path>) -> Result<Artifact> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    from_json_str(&text, path)
}

fn wrong_kind(path: &Path, wanted: &str, got: &Artifact) -> CrfError {
    CrfError::Parse {
        path: path.to_path_buf(),
        line: 1,
        column: 1,
        message: format!("expected a {wanted} artifact, found {}", got.kind()),
    }
}

/// Either model kind, as stored in a model file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Crf(CrfModel),
    Gat(CrfGatModel),
}

impl From<AnyModel> for Artifact {
    fn from(m: AnyModel) -> Self {
        match m {
            AnyModel::Crf(model) => Artifact::CrfModel { model },
            AnyModel::Gat(model) => Artifact::CrfGatModel { model },
        }
    }
}

pub fn save_model(path: impl AsRef<Path>, model: &AnyModel) -> Result<()> {
    save_artifact(path, &model.clone().into())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AnyModel> {
    let path = path.as_ref();
    match load_artifact(path)? {
        Artifact::CrfModel { model } => Ok(AnyModel::Crf(model)),
        Artifact::CrfGatModel { model } => Ok(AnyModel::Gat(model)),
        other => Err(wrong_kind(path, "model", &other)),
    }
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &LabeledDataset) -> Result<()> {
    save_artifact(
        path,
        &Artifact::Dataset {
            dataset: dataset.clone(),
        },
    )
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    match load_artifact(path)? {
        Artifact::Dataset { dataset } => Ok(dataset),
        other => Err(wrong_kind(path, "dataset", &other)),
    }
}

pub fn save_predictions(
    path: impl AsRef<Path>,
    labelings: &[Labeling],
    marginals: Option<&[MarginalField]>,
) -> Result<()> {
    save_artifact(
        path,
        &Artifact::Predictions {
            labelings: labelings.to_vec(),
            marginals: marginals.map(<[MarginalField]>::to_vec),
        },
    )
}

/// Labelings from a predictions file, or the gold labels of a dataset file.
pub fn load_labelings(path: impl AsRef<Path>) -> Result<Vec<Labeling>> {
    let path = path.as_ref();
    match load_artifact(path)? {
        Artifact::Predictions { labelings, .. } => Ok(labelings),
        Artifact::Dataset { dataset } => Ok(dataset.items().iter().map(|it| it.gold.clone()).collect()),
        other => Err(wrong_kind(path, "predictions or dataset", &other)),
    }
}

/// `step,value` CSV, one row per entry, steps numbered from `first_step`.
pub fn write_trace_csv(path: impl AsRef<Path>, values: &[f64], first_step: usize) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,value\n");
    for (idx, v) in values.iter().enumerate() {
        out.push_str(&format!("{},{}\n", first_step + idx, v));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// One CSV row per grid row, 1-based labels, no header.
pub fn grid_csv(labeling: &Labeling, grid: GridShape) -> Result<String> {
    if grid.width * grid.height != labeling.len() {
        return Err(CrfError::shape(format!(
            "grid {}x{} does not cover {} labels",
            grid.width,
            grid.height,
            labeling.len()
        )));
    }
    let one = labeling.to_one_based();
    let mut out = String::new();
    for row in one.chunks(grid.width) {
        let cells: Vec<String> = row.iter().map(|l| l.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_grid_csv(path: impl AsRef<Path>, labeling: &Labeling, grid: GridShape) -> Result<()> {
    let path = path.as_ref();
    let text = grid_csv(labeling, grid)?;
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}
