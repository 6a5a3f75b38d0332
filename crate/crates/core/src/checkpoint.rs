//! Versioned checkpoint container shared by model weights and codebooks.
//!
//! Layout: magic `S2CK`, u32 version (1), u64 header length, JSON header
//! (kind, dtype, metadata, optional vocab hash, array index with names,
//! shapes and offsets), then the payload: all arrays as little-endian f64
//! in index order. f32 values widen losslessly, so save/load round-trips
//! are exact for both scalar types; the dtype tag is enforced on load.

use crate::kmeans::KmeansCodebook;
use crate::mat::Mat;
use crate::nn::{collect_params, collect_params_mut, Params};
use crate::Scalar;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"S2CK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("kind mismatch: file is `{found}`, expected `{expected}`")]
    KindMismatch { expected: String, found: String },
    #[error("dtype mismatch: file is {found}, runtime scalar is {expected}")]
    DtypeMismatch { expected: String, found: String },
    #[error("array `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("vocab hash mismatch: checkpoint {found:#x}, runtime {expected:#x}")]
    VocabHashMismatch { expected: u64, found: u64 },
    #[error("array `{0}` missing from checkpoint")]
    MissingArray(String),
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in scalars.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    dtype: String,
    vocab_hash: Option<u64>,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

/// In-memory checkpoint: named f64 arrays plus metadata.
pub struct Checkpoint {
    pub kind: String,
    pub dtype: String,
    pub vocab_hash: Option<u64>,
    pub meta: Value,
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Result<&(String, Vec<usize>, Vec<f64>), CheckpointError> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| CheckpointError::MissingArray(name.into()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |e: std::io::Error| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0usize;
        for (name, shape, data) in &self.arrays {
            debug_assert_eq!(shape.iter().product::<usize>(), data.len());
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += data.len();
        }
        let header = Header {
            kind: self.kind.clone(),
            dtype: self.dtype.clone(),
            vocab_hash: self.vocab_hash,
            meta: self.meta.clone(),
            arrays: entries,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        out.write_all(MAGIC).map_err(io_err)?;
        out.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        out.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        out.write_all(&header_json).map_err(io_err)?;
        for (_, _, data) in &self.arrays {
            let mut buf = Vec::with_capacity(data.len() * 8);
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let io_err = |e: std::io::Error| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut f = std::fs::File::open(path).map_err(io_err)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(io_err)?;
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if 16 + header_len > bytes.len() {
            return Err(CheckpointError::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let payload = &bytes[16 + header_len..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in &header.arrays {
            let len: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let end = start + len * 8;
            if end > payload.len() {
                return Err(CheckpointError::Format(format!(
                    "array `{}` overruns payload",
                    e.name
                )));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((e.name.clone(), e.shape.clone(), data));
        }
        Ok(Self {
            kind: header.kind,
            dtype: header.dtype,
            vocab_hash: header.vocab_hash,
            meta: header.meta,
            arrays,
        })
    }
}

/// Serializes any [`Params`] model into a checkpoint.
pub fn model_to_checkpoint<T: Scalar, P: Params<T>>(
    model: &P,
    kind: &str,
    meta: Value,
    vocab_hash: Option<u64>,
) -> Checkpoint {
    let arrays = collect_params(model)
        .into_iter()
        .map(|(name, m)| {
            (
                name,
                vec![m.rows(), m.cols()],
                m.data().iter().map(|v| v.as_f64()).collect(),
            )
        })
        .collect();
    Checkpoint {
        kind: kind.into(),
        dtype: T::DTYPE.into(),
        vocab_hash,
        meta,
        arrays,
    }
}

/// Restores parameters in place; the model must already have the right
/// architecture (shapes are verified array by array).
pub fn load_model_params<T: Scalar, P: Params<T>>(
    model: &mut P,
    ckpt: &Checkpoint,
    kind: &str,
) -> Result<(), CheckpointError> {
    if ckpt.kind != kind {
        return Err(CheckpointError::KindMismatch {
            expected: kind.into(),
            found: ckpt.kind.clone(),
        });
    }
    if ckpt.dtype != T::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            expected: T::DTYPE.into(),
            found: ckpt.dtype.clone(),
        });
    }
    for (name, m) in collect_params_mut(model) {
        let (_, shape, data) = ckpt.array(&name)?;
        if shape != &[m.rows(), m.cols()] {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: vec![m.rows(), m.cols()],
                found: shape.clone(),
            });
        }
        for (dst, v) in m.data_mut().iter_mut().zip(data) {
            *dst = T::from_f64(*v);
        }
    }
    Ok(())
}

pub fn check_vocab_hash(ckpt: &Checkpoint, expected: u64) -> Result<(), CheckpointError> {
    match ckpt.vocab_hash {
        Some(found) if found != expected => {
            Err(CheckpointError::VocabHashMismatch { expected, found })
        }
        _ => Ok(()),
    }
}

/// Codebook file support (shared container, kind `kmeans-codebook` /
/// `rvq-codebook` with a level count in the metadata).
pub fn kmeans_to_checkpoint<T: Scalar>(cb: &KmeansCodebook<T>, kind: &str) -> Checkpoint {
    Checkpoint {
        kind: kind.into(),
        dtype: T::DTYPE.into(),
        vocab_hash: None,
        meta: serde_json::json!({ "k": cb.k(), "dim": cb.dim() }),
        arrays: vec![
            (
                "centroids".into(),
                vec![cb.k(), cb.dim()],
                cb.centroids.data().iter().map(|v| v.as_f64()).collect(),
            ),
            (
                "counts".into(),
                vec![cb.k(), 1],
                cb.counts.iter().map(|&c| c as f64).collect(),
            ),
        ],
    }
}

pub fn kmeans_from_checkpoint<T: Scalar>(
    ckpt: &Checkpoint,
) -> Result<KmeansCodebook<T>, CheckpointError> {
    if ckpt.dtype != T::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            expected: T::DTYPE.into(),
            found: ckpt.dtype.clone(),
        });
    }
    let (_, shape, data) = ckpt.array("centroids")?;
    if shape.len() != 2 {
        return Err(CheckpointError::Format("centroids must be 2-D".into()));
    }
    let centroids = Mat::from_vec(
        shape[0],
        shape[1],
        data.iter().map(|&v| T::from_f64(v)).collect(),
    );
    let (_, _, counts) = ckpt.array("counts")?;
    Ok(KmeansCodebook {
        centroids,
        counts: counts.iter().map(|&c| c as u64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn model_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lin = Linear::<f32>::new(7, 5, 0.3, &mut rng);
        let ckpt = model_to_checkpoint(&lin, "linear-test", serde_json::json!({"d": 7}), Some(42));
        let dir = tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        ckpt.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        assert_eq!(loaded.kind, "linear-test");
        assert_eq!(loaded.vocab_hash, Some(42));
        let mut restored = Linear::<f32>::new(7, 5, 0.0, &mut rng);
        load_model_params(&mut restored, &loaded, "linear-test").unwrap();
        assert_eq!(restored.w, lin.w);
        assert_eq!(restored.b, lin.b);
    }

    #[test]
    fn f64_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lin = Linear::<f64>::new(4, 4, 0.5, &mut rng);
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        model_to_checkpoint(&lin, "lin", serde_json::json!({}), None)
            .save(&p)
            .unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        let mut restored = Linear::<f64>::new(4, 4, 0.0, &mut rng);
        load_model_params(&mut restored, &loaded, "lin").unwrap();
        for (a, b) in restored.w.data().iter().zip(lin.w.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mismatches_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lin = Linear::<f32>::new(3, 3, 0.2, &mut rng);
        let ckpt = model_to_checkpoint(&lin, "kind-a", serde_json::json!({}), Some(1));
        let mut as_f64 = Linear::<f64>::new(3, 3, 0.0, &mut rng);
        assert!(matches!(
            load_model_params(&mut as_f64, &ckpt, "kind-a"),
            Err(CheckpointError::DtypeMismatch { .. })
        ));
        let mut wrong_kind = Linear::<f32>::new(3, 3, 0.0, &mut rng);
        assert!(matches!(
            load_model_params(&mut wrong_kind, &ckpt, "kind-b"),
            Err(CheckpointError::KindMismatch { .. })
        ));
        let mut wrong_shape = Linear::<f32>::new(3, 4, 0.0, &mut rng);
        assert!(matches!(
            load_model_params(&mut wrong_shape, &ckpt, "kind-a"),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            check_vocab_hash(&ckpt, 2),
            Err(CheckpointError::VocabHashMismatch { .. })
        ));
        check_vocab_hash(&ckpt, 1).unwrap();
    }

    #[test]
    fn kmeans_codebook_round_trips() {
        let cb = KmeansCodebook::<f32> {
            centroids: Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]),
            counts: vec![10, 20],
        };
        let dir = tempdir().unwrap();
        let p = dir.path().join("cb.ckpt");
        kmeans_to_checkpoint(&cb, "kmeans-codebook").save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        let back: KmeansCodebook<f32> = kmeans_from_checkpoint(&loaded).unwrap();
        assert_eq!(back.centroids, cb.centroids);
        assert_eq!(back.counts, cb.counts);
    }
}
