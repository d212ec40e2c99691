//! Portable single-file checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "NOODCKPT"
//! version    u32      1
//! header_len u64
//! header     header_len bytes of UTF-8 JSON (see `Header`)
//! n_tensors  u32
//! per tensor, in name order:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims u64 × ndim
//!   data     f64 × prod(dims), row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{BackboneSpec, Model, ParamSet, SubspaceLayout, TrainingStage};
use crate::data::LabelSpace;
use crate::detector::DetectorState;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NOODCKPT";
pub const VERSION: u32 = 1;

/// Provenance stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub init_seed: u64,
    pub training_seed: Option<u64>,
    pub subject_id: Option<String>,
    pub fold_index: Option<usize>,
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    backbone: BackboneSpec,
    layout: SubspaceLayout,
    labels: LabelSpace,
    stage: TrainingStage,
    detector: Option<DetectorState>,
    meta: CheckpointMeta,
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, model, meta).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file)).map_err(|e| match e {
        ReadError::Io(e) => Error::io(path, e),
        ReadError::Format(m) => Error::format(path, m),
    })
}

pub fn write_checkpoint(w: &mut impl Write, model: &Model, meta: &CheckpointMeta) -> std::io::Result<()> {
    let header = Header {
        backbone: model.spec.clone(),
        layout: model.layout,
        labels: model.labels.clone(),
        stage: model.stage,
        detector: model.detector.clone(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        for d in [t.nrows(), t.ncols()] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Debug)]
pub enum ReadError {
    Io(std::io::Error),
    Format(String),
}

impl From<std::io::Error> for ReadError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ReadError::Format("truncated file".into())
        } else {
            ReadError::Io(e)
        }
    }
}

fn bad(msg: impl Into<String>) -> ReadError {
    ReadError::Format(msg.into())
}

fn read_u32(r: &mut impl Read) -> std::result::Result<u32, ReadError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::result::Result<u64, ReadError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

const MAX_HEADER: u64 = 1 << 24;
const MAX_ELEMS: u64 = 1 << 28;

pub fn read_checkpoint(r: &mut impl Read) -> std::result::Result<(Model, CheckpointMeta), ReadError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let header_len = read_u64(r)?;
    if header_len > MAX_HEADER {
        return Err(bad("header too large"));
    }
    let mut json = vec![0u8; header_len as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;

    let mut params = ParamSet::default();
    let n = read_u32(r)?;
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(bad("tensor name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let ndim = read_u32(r)?;
        if ndim != 2 {
            return Err(bad(format!("tensor {name}: expected 2 dims, found {ndim}")));
        }
        let (rows, cols) = (read_u64(r)?, read_u64(r)?);
        if rows.saturating_mul(cols) > MAX_ELEMS {
            return Err(bad(format!("tensor {name}: too large")));
        }
        let mut data = Vec::with_capacity((rows * cols) as usize);
        for _ in 0..rows * cols {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Array2::from_shape_vec((rows as usize, cols as usize), data).expect("length matches dims");
        params.insert(name, t);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after tensors"));
    }

    let expected = Model::new(header.backbone.clone(), header.layout, header.labels.clone(), 0)
        .map_err(|e| bad(format!("header: {e}")))?;
    for (name, t) in expected.params.iter() {
        match params.get(name) {
            Some(p) if p.dim() == t.dim() => {}
            Some(p) => {
                return Err(bad(format!(
                    "tensor {name}: shape {:?}, backbone expects {:?}",
                    p.dim(),
                    t.dim()
                )))
            }
            None => return Err(bad(format!("missing tensor {name}"))),
        }
    }
    if params.len() != expected.params.len() {
        return Err(bad("unexpected extra tensors"));
    }
    if let Some(d) = &header.detector {
        if d.reference_centroid.len() != header.layout.detector_dim {
            return Err(bad("detector centroid width differs from detector_dim"));
        }
    }
    Ok((
        Model {
            spec: header.backbone,
            layout: header.layout,
            labels: header.labels,
            params,
            detector: header.detector,
            stage: header.stage,
        },
        header.meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneKind;

    fn model() -> Model {
        let spec = BackboneSpec::new(
            BackboneKind::TransformerEnc { d_model: 4, n_heads: 2, n_layers: 1, ff_dim: 8 },
            3,
            5,
            6,
        );
        let layout = SubspaceLayout::new(3, 3).unwrap();
        let mut m = Model::new(spec, layout, LabelSpace::new(["x", "y"]).unwrap(), 7).unwrap();
        m.detector = Some(DetectorState {
            reference_centroid: vec![1.0, 0.0, 0.0],
            threshold: 0.25,
            calibration_percentile: 5.0,
            n_calibration: 40,
        });
        m.stage = TrainingStage::Stage2;
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let meta = CheckpointMeta {
            init_seed: 7,
            subject_id: Some("s01".into()),
            fold_index: Some(2),
            ..Default::default()
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, &meta).unwrap();
        let (back, meta2) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
    }

    #[test]
    fn rejects_corruption() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, &CheckpointMeta::default()).unwrap();
        let msg = |r: std::result::Result<_, ReadError>| match r {
            Err(ReadError::Format(m)) => m,
            _ => panic!("expected format error"),
        };
        assert!(msg(read_checkpoint(&mut &buf[..buf.len() - 3])).contains("truncated"));
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(msg(read_checkpoint(&mut bad_magic.as_slice())).contains("magic"));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(msg(read_checkpoint(&mut extra.as_slice())).contains("trailing"));
    }
}
