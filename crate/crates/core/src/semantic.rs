//! Semantic unit sequences: nearest-centroid quantization of feature
//! frames, run-length dedup, and the line-delimited unit file format.

use crate::features::FeatureFrames;
use crate::kmeans::{nearest, ClusterError, KmeansCodebook};
use crate::mat::Mat;
use crate::Scalar;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticUnitSeq {
    pub units: Vec<u32>,
}

impl SemanticUnitSeq {
    pub fn new(units: Vec<u32>) -> Self {
        Self { units }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Maps every frame to its nearest centroid (ties to the lowest index).
pub fn quantize<T: Scalar>(
    frames: &FeatureFrames<T>,
    cb: &KmeansCodebook<T>,
) -> Result<SemanticUnitSeq, ClusterError> {
    quantize_mat(&frames.frames, cb)
}

pub fn quantize_mat<T: Scalar>(
    frames: &Mat<T>,
    cb: &KmeansCodebook<T>,
) -> Result<SemanticUnitSeq, ClusterError> {
    if frames.rows() > 0 && frames.cols() != cb.dim() {
        return Err(ClusterError::DimMismatch {
            data: frames.cols(),
            codebook: cb.dim(),
        });
    }
    let units = (0..frames.rows())
        .map(|t| nearest(&cb.centroids, frames.row(t)).0 as u32)
        .collect();
    Ok(SemanticUnitSeq { units })
}

/// Collapses maximal runs of equal units to single units.
pub fn dedup_consecutive(s: &SemanticUnitSeq) -> SemanticUnitSeq {
    let mut units = Vec::with_capacity(s.units.len());
    for &u in &s.units {
        if units.last() != Some(&u) {
            units.push(u);
        }
    }
    SemanticUnitSeq { units }
}

/// Inverse-ish of [`dedup_consecutive`] for deduped S1 outputs: repeats
/// every unit `repeat` times (the configured frames-per-unit rate).
pub fn expand_uniform(s: &SemanticUnitSeq, repeat: usize) -> SemanticUnitSeq {
    let mut units = Vec::with_capacity(s.units.len() * repeat);
    for &u in &s.units {
        units.extend(std::iter::repeat(u).take(repeat));
    }
    SemanticUnitSeq { units }
}

#[derive(Serialize, Deserialize)]
struct UnitRecord<'a> {
    utterance_id: &'a str,
    units: Vec<u32>,
}

/// Writes `{utterance_id, units}` records, one JSON object per line.
pub fn write_units_jsonl(
    path: &Path,
    rows: &[(String, SemanticUnitSeq)],
) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (id, seq) in rows {
        let rec = UnitRecord {
            utterance_id: id,
            units: seq.units.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_units_jsonl(path: &Path) -> std::io::Result<Vec<(String, SemanticUnitSeq)>> {
    #[derive(Deserialize)]
    struct Owned {
        utterance_id: String,
        units: Vec<u32>,
    }
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Owned = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.push((rec.utterance_id, SemanticUnitSeq::new(rec.units)));
    }
    Ok(out)
}
