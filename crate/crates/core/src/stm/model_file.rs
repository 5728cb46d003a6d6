//! Binary model container.
//!
//! Layout (little endian): 8-byte magic, `u32` format version, `u8` kind tag,
//! `u32` manifest length and a JSON manifest describing the covariate schema,
//! then a `u64` payload length and the bincode-encoded model. Floating point
//! values are stored bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::PMModel;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PMSPACE\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    TwoStage = 1,
    Ratio = 2,
}

impl ModelKind {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(ModelKind::TwoStage),
            2 => Ok(ModelKind::Ratio),
            t => Err(Error::ModelFile(format!("unknown model kind tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TwoStage => "two_stage",
            ModelKind::Ratio => "ratio",
        }
    }
}

/// A model that can live in the container.
pub trait ModelPayload: Serialize + DeserializeOwned {
    const KIND: ModelKind;
    /// Human-readable schema stored alongside the payload.
    fn manifest(&self) -> serde_json::Value;
}

impl ModelPayload for PMModel {
    const KIND: ModelKind = ModelKind::TwoStage;

    fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": Self::KIND.name(),
            "format_version": MODEL_FORMAT_VERSION,
            "transform": self.transform().name(),
            "time_varying": self.stage1.tv_names,
            "time_invariant": self.stage2.ti_names,
            "first_month": self.stage1.first_month().to_string(),
            "last_month": self.stage1.last_month().to_string(),
            "sites": self.stage1.site_effects.len(),
            "domain": self.projection.domain,
        })
    }
}

pub fn write_model<T: ModelPayload, W: Write>(mut writer: W, model: &T) -> Result<()> {
    let manifest = serde_json::to_vec(&model.manifest())
        .map_err(|e| Error::ModelFile(format!("manifest encoding: {e}")))?;
    let payload =
        bincode::serialize(model).map_err(|e| Error::ModelFile(format!("payload encoding: {e}")))?;
    writer.write_all(MAGIC)?;
    writer.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
    writer.write_all(&[T::KIND as u8])?;
    writer.write_all(&(manifest.len() as u32).to_le_bytes())?;
    writer.write_all(&manifest)?;
    writer.write_all(&(payload.len() as u64).to_le_bytes())?;
    writer.write_all(&payload)?;
    Ok(())
}

fn read_exact<R: Read>(reader: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::ModelFile(format!("truncated file while reading {what}")))?;
    Ok(buf)
}

/// Reads the header and manifest without decoding the payload.
pub fn read_manifest<R: Read>(reader: &mut R) -> Result<(ModelKind, serde_json::Value)> {
    let magic = read_exact(reader, 8, "magic")?;
    if magic != MAGIC {
        return Err(Error::ModelFile("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(reader, 4, "version")?.try_into().unwrap());
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFile(format!(
            "unsupported format version {version} (expected {MODEL_FORMAT_VERSION})"
        )));
    }
    let kind = ModelKind::from_tag(read_exact(reader, 1, "kind")?[0])?;
    let mlen = u32::from_le_bytes(read_exact(reader, 4, "manifest length")?.try_into().unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&read_exact(reader, mlen as usize, "manifest")?)
        .map_err(|e| Error::ModelFile(format!("manifest: {e}")))?;
    Ok((kind, manifest))
}

pub fn read_model<T: ModelPayload, R: Read>(mut reader: R) -> Result<T> {
    let (kind, manifest) = read_manifest(&mut reader)?;
    if kind != T::KIND {
        return Err(Error::ModelFile(format!(
            "file holds a {} model, expected {}",
            kind.name(),
            T::KIND.name()
        )));
    }
    let plen = u64::from_le_bytes(read_exact(&mut reader, 8, "payload length")?.try_into().unwrap());
    let payload = read_exact(&mut reader, plen as usize, "payload")?;
    let model: T =
        bincode::deserialize(&payload).map_err(|e| Error::ModelFile(format!("payload: {e}")))?;
    if model.manifest() != manifest {
        return Err(Error::ModelFile("manifest does not match payload".into()));
    }
    Ok(model)
}

pub fn save_model<T: ModelPayload>(path: &Path, model: &T) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::ModelFile(format!("cannot create {}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model<T: ModelPayload>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::ModelFile(format!("cannot open {}: {e}", path.display())))?;
    read_model(std::io::BufReader::new(file))
}
