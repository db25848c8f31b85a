//! Dataset (JSON lines) and checkpoint (JSON) files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UolError};
use crate::networks::{Mlp, UolModel};
use crate::synth::RatedInstance;
use crate::trainer::{EpochTrace, TrainConfig};

pub const FORMAT_VERSION: u64 = 1;

/// Reads one instance per non-blank line. Every instance is validated and the
/// feature width must agree across the file.
pub fn read_dataset(path: &Path) -> Result<Vec<RatedInstance>> {
    let file = fs::File::open(path)?;
    parse_dataset(BufReader::new(file))
}

pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<RatedInstance>> {
    let mut out: Vec<RatedInstance> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let inst: RatedInstance = serde_json::from_str(&line)
            .map_err(|e| UolError::Parse { line: lineno, message: e.to_string() })?;
        let expected = out.first().map(|d| d.features.len());
        inst.validate(expected).map_err(|message| UolError::Validation { line: lineno, message })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, instances: &[RatedInstance]) -> Result<()> {
    write_atomic(path, |w| {
        for inst in instances {
            serde_json::to_writer(&mut *w, inst).map_err(json_err)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

fn json_err(e: serde_json::Error) -> UolError {
    UolError::Io(std::io::Error::other(e))
}

/// Writes through a sibling temp file and renames it into place, so readers
/// never see a half-written file.
fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| UolError::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        body(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Shape of one dense layer as recorded in a checkpoint header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub network: String,
    pub inputs: usize,
    pub outputs: usize,
}

fn manifest_of(model: &UolModel) -> Vec<LayerManifest> {
    let mut out = Vec::new();
    let mut push = |network: &str, net: &Mlp| {
        for l in net.layers() {
            out.push(LayerManifest { network: network.to_string(), inputs: l.inputs, outputs: l.outputs });
        }
    };
    push("trunk", &model.encoder.trunk);
    push("head", &model.encoder.head);
    push("comparator", &model.comparator.net);
    if let Some(r) = &model.regression_head {
        push("regression_head", r);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u64,
    pub manifest: Vec<LayerManifest>,
    pub config: TrainConfig,
    pub seed: u64,
    pub model: UolModel,
}

impl ModelCheckpoint {
    pub fn new(model: UolModel, config: TrainConfig) -> Self {
        Self { format_version: FORMAT_VERSION, manifest: manifest_of(&model), seed: config.seed, config, model }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| {
            serde_json::to_writer(&mut *w, self).map_err(json_err)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Checks the format version before anything else, then that the stored
    /// manifest describes the stored weights.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| UolError::Checkpoint(format!("not JSON: {e}")))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| UolError::Checkpoint("missing format_version".into()))?;
        if found != FORMAT_VERSION {
            return Err(UolError::UnsupportedVersion { found, supported: FORMAT_VERSION });
        }
        let ckpt: ModelCheckpoint =
            serde_json::from_value(value).map_err(|e| UolError::Checkpoint(e.to_string()))?;
        if ckpt.manifest != manifest_of(&ckpt.model) {
            return Err(UolError::Checkpoint("manifest does not match the stored layers".into()));
        }
        UolModel::from_parts(ckpt.model.encoder.clone(), ckpt.model.comparator.clone(), ckpt.model.regression_head.clone())
            .map_err(|e| UolError::Checkpoint(e.to_string()))?;
        Ok(ckpt)
    }
}

pub fn write_trace_csv(path: &Path, trace: &[EpochTrace]) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "epoch,lr,ce,hinge,kl,total")?;
        for t in trace {
            writeln!(w, "{},{:e},{:e},{:e},{:e},{:e}", t.epoch, t.lr, t.ce, t.hinge, t.kl, t.total)?;
        }
        Ok(())
    })
}
