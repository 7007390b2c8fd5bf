//! Versioned JSON checkpoints. Floats are written in shortest round-trip form
//! and parsed exactly, so save→load→save is a byte-level fixed point.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::experts::LossLog;
use crate::linalg::Matrix;
use crate::net::{LinearLayer, LoraAdapter, MlpDenoiser};

use super::write_atomic;

pub const CHECKPOINT_MAGIC: &str = "HERS-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Linear β schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// A base model, any number of labeled adapter sets, and training logs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub schedule: ScheduleSpec,
    /// Adapter-free base denoiser.
    pub base: MlpDenoiser,
    /// Keyed by domain label or `"merged"`.
    pub adapters: BTreeMap<String, Vec<LoraAdapter>>,
    pub loss_logs: BTreeMap<String, LossLog>,
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>, schedule: ScheduleSpec, base: &MlpDenoiser) -> Self {
        Self { config_hash: config_hash.into(), schedule, base: base.base(), adapters: BTreeMap::new(), loss_logs: BTreeMap::new() }
    }

    /// Base with the `label` adapters attached.
    pub fn model(&self, label: &str) -> Result<MlpDenoiser> {
        let ads = self.adapters.get(label).ok_or_else(|| Error::invalid(format!("checkpoint has no adapters labeled `{label}`")))?;
        self.base.with_adapters(ads)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    version: u32,
    config_hash: String,
}

#[derive(Deserialize)]
struct HeaderOnly {
    header: Header,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterRecord {
    layer: String,
    rank: usize,
    a: MatrixRecord,
    b: MatrixRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    header: Header,
    schedule: ScheduleSpec,
    data_dim: usize,
    cond_dim: usize,
    layers: Vec<LayerRecord>,
    adapters: BTreeMap<String, Vec<AdapterRecord>>,
    loss_logs: BTreeMap<String, LossLog>,
}

fn matrix_record(m: &Matrix) -> MatrixRecord {
    MatrixRecord { rows: m.rows(), cols: m.cols(), data: m.data().to_vec() }
}

fn to_file(ckpt: &Checkpoint) -> CheckpointFile {
    CheckpointFile {
        header: Header { magic: CHECKPOINT_MAGIC.to_string(), version: CHECKPOINT_VERSION, config_hash: ckpt.config_hash.clone() },
        schedule: ckpt.schedule,
        data_dim: ckpt.base.data_dim(),
        cond_dim: ckpt.base.cond_dim(),
        layers: ckpt
            .base
            .layers()
            .iter()
            .map(|l| LayerRecord { name: l.name().to_string(), rows: l.d_out(), cols: l.d_in(), data: l.w0().data().to_vec(), bias: l.bias().to_vec() })
            .collect(),
        adapters: ckpt
            .adapters
            .iter()
            .map(|(label, ads)| {
                let recs = ads
                    .iter()
                    .map(|a| AdapterRecord { layer: a.layer_name().to_string(), rank: a.rank(), a: matrix_record(a.a()), b: matrix_record(a.b()) })
                    .collect();
                (label.clone(), recs)
            })
            .collect(),
        loss_logs: ckpt.loss_logs.clone(),
    }
}

fn from_file(file: CheckpointFile) -> Result<Checkpoint> {
    let layers = file.layers.into_iter().map(|l| LinearLayer::new(l.name, Matrix::new(l.rows, l.cols, l.data)?, l.bias)).collect::<Result<Vec<_>>>()?;
    let base = MlpDenoiser::from_layers(file.data_dim, file.cond_dim, layers)?;
    let mut adapters = BTreeMap::new();
    for (label, recs) in file.adapters {
        let ads = recs
            .into_iter()
            .map(|r| {
                let a = Matrix::new(r.a.rows, r.a.cols, r.a.data)?;
                let b = Matrix::new(r.b.rows, r.b.cols, r.b.data)?;
                if a.rows() != r.rank {
                    return Err(Error::invalid(format!("adapter on `{}` declares rank {} but A has {} rows", r.layer, r.rank, a.rows())));
                }
                LoraAdapter::from_factors(r.layer, label.clone(), a, b)
            })
            .collect::<Result<Vec<_>>>()?;
        // Attaching validates every adapter against its layer.
        base.with_adapters(&ads)?;
        adapters.insert(label, ads);
    }
    file.schedule.build()?;
    Ok(Checkpoint { config_hash: file.header.config_hash, schedule: file.schedule, base, adapters, loss_logs: file.loss_logs })
}

/// Serialized checkpoint text (single line plus trailing newline).
pub fn checkpoint_to_string(ckpt: &Checkpoint) -> Result<String> {
    let mut s = serde_json::to_string(&to_file(ckpt))?;
    s.push('\n');
    Ok(s)
}

pub fn checkpoint_from_str(text: &str, path: &Path) -> Result<Checkpoint> {
    let fail = |detail: String| Error::Checkpoint { path: path.to_path_buf(), detail };
    let head: HeaderOnly = serde_json::from_str(text).map_err(|e| fail(format!("unreadable header: {e}")))?;
    if head.header.magic != CHECKPOINT_MAGIC {
        return Err(fail(format!("bad magic `{}`", head.header.magic)));
    }
    if head.header.version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {} (expected {CHECKPOINT_VERSION})", head.header.version)));
    }
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| fail(format!("malformed body: {e}")))?;
    from_file(file).map_err(|e| fail(e.to_string()))
}

/// Atomically writes `ckpt` to `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, checkpoint_to_string(ckpt)?.as_bytes())
}

/// Loads a checkpoint; when `expected_hash` is given and differs, logs a
/// warning and proceeds.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt = checkpoint_from_str(&text, path)?;
    if let Some(expected) = expected_hash {
        if expected != ckpt.config_hash {
            log::warn!("{}: config hash {} does not match current config {}", path.display(), ckpt.config_hash, expected);
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;
    use crate::rng::SeededRng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = SeededRng::new(11);
        let base = MlpDenoiser::new(3, 3, &[6, 5, 6], &mut rng).unwrap();
        let schedule = ScheduleSpec { steps: 10, beta_start: 1e-4, beta_end: 0.02 };
        let mut ckpt = Checkpoint::new("abc123", schedule, &base);
        for d in Domain::ALL {
            let ads: Vec<_> = base
                .hidden_layer_names()
                .iter()
                .map(|name| {
                    let layer = base.layer(name).unwrap();
                    LoraAdapter::from_factors(
                        name.clone(),
                        d.label(),
                        Matrix::random_normal(2, layer.d_in(), 1.0, &mut rng),
                        Matrix::random_normal(layer.d_out(), 2, 1e-3, &mut rng),
                    )
                    .unwrap()
                })
                .collect();
            ckpt.adapters.insert(d.to_string(), ads);
            ckpt.loss_logs.insert(d.to_string(), vec![(1, 0.1 + rng.uniform()), (2, 1.0 / 3.0)]);
        }
        ckpt
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample_checkpoint();
        let text = checkpoint_to_string(&ckpt).unwrap();
        let back = checkpoint_from_str(&text, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.adapters.len(), 3);
        assert_eq!(checkpoint_to_string(&back).unwrap(), text);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        let ckpt = sample_checkpoint();
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1, Some("different")).unwrap();
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert!(!dir.path().join("a.json.partial").exists());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let text = checkpoint_to_string(&sample_checkpoint()).unwrap();
        let p = Path::new("mem");
        let truncated = &text[..text.len() / 2];
        assert!(matches!(checkpoint_from_str(truncated, p), Err(Error::Checkpoint { .. })));
        let magic = text.replacen(CHECKPOINT_MAGIC, "NOPE", 1);
        let err = checkpoint_from_str(&magic, p).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        let version = text.replacen("\"version\":1", "\"version\":2", 1);
        let err = checkpoint_from_str(&version, p).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
        let shape = text.replacen("\"rows\":6", "\"rows\":7", 1);
        assert!(checkpoint_from_str(&shape, p).is_err());
    }

    #[test]
    fn model_attaches_labeled_adapters() {
        let ckpt = sample_checkpoint();
        let m = ckpt.model("implausible").unwrap();
        assert_eq!(m.adapters(), ckpt.adapters["implausible"]);
        assert!(ckpt.model("merged").is_err());
    }
}
