//! Model vocabulary and token-sequence layout. A training sequence is
//! `BOS, flatten(prompt), SEP, semantic, SEP, flatten(target), EOS` with the
//! loss mask covering exactly the target tokens and the final EOS. The
//! prompt is the first three seconds of the utterance (150 frames at 50 Hz).
//!
//! Record stream layout (`write_records`): magic `S2TR`, u32 version (1),
//! u32 record count; then per record: u32 token count `n`, `n` u32 tokens,
//! u32 prompt_end, u32 semantic_end, `n` mask bytes (0/1). All integers
//! little-endian.

use crate::codec::AcousticUnitGrid;
use crate::semantic::SemanticUnitSeq;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

/// Prompt length in acoustic frames: 3 s at 50 Hz.
pub const PROMPT_FRAMES: usize = 3 * crate::SAMPLE_RATE as usize / crate::HOP;
/// Training examples need at least this much audio beyond the prompt (1 s).
pub const MIN_REMAINDER_FRAMES: usize = crate::SAMPLE_RATE as usize / crate::HOP;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("vocabulary sizes must be positive (K_s={k_semantic}, C={c_levels}, V_a={v_acoustic})")]
    BadVocabSize {
        k_semantic: u32,
        c_levels: u32,
        v_acoustic: u32,
    },
    #[error("token count {count} not divisible by {c_levels} levels")]
    NotFrameAligned { count: usize, c_levels: u32 },
    #[error("token {token} at position {pos} outside the acoustic ranges")]
    NotAcoustic { pos: usize, token: u32 },
    #[error("token {token} at position {pos} is level {got}, expected level {expected}")]
    LevelMismatch {
        pos: usize,
        token: u32,
        expected: u32,
        got: u32,
    },
    #[error("semantic length {semantic} != acoustic frames {acoustic}")]
    LengthMismatch { semantic: usize, acoustic: usize },
    #[error("utterance too short: {frames} frames < prompt {prompt} + min remainder {min_remainder}")]
    TooShort {
        frames: usize,
        prompt: usize,
        min_remainder: usize,
    },
    #[error("semantic sequence is empty")]
    EmptySemantic,
    #[error("semantic unit {unit} >= K_s {k_semantic}")]
    UnitOutOfRange { unit: u32, k_semantic: u32 },
    #[error("code {code} >= V_a {v_acoustic}")]
    CodeOutOfRange { code: u32, v_acoustic: u32 },
    #[error("malformed token sequence: {0}")]
    Malformed(String),
    #[error("record stream error: {0}")]
    Records(String),
}

/// Flat model vocabulary: semantic units, then C acoustic ranges, then the
/// four specials.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub k_semantic: u32,
    pub c_levels: u32,
    pub v_acoustic: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Semantic(u32),
    Acoustic { level: u32, code: u32 },
    Sep,
    Bos,
    Eos,
    Pad,
}

impl VocabLayout {
    pub fn new(k_semantic: u32, c_levels: u32, v_acoustic: u32) -> Result<Self, SequenceError> {
        if k_semantic == 0 || c_levels == 0 || v_acoustic == 0 {
            return Err(SequenceError::BadVocabSize {
                k_semantic,
                c_levels,
                v_acoustic,
            });
        }
        Ok(Self {
            k_semantic,
            c_levels,
            v_acoustic,
        })
    }

    pub fn total_size(&self) -> u32 {
        self.k_semantic + self.c_levels * self.v_acoustic + 4
    }

    pub fn sep(&self) -> u32 {
        self.k_semantic + self.c_levels * self.v_acoustic
    }

    pub fn bos(&self) -> u32 {
        self.sep() + 1
    }

    pub fn eos(&self) -> u32 {
        self.sep() + 2
    }

    pub fn pad(&self) -> u32 {
        self.sep() + 3
    }

    pub fn semantic_token(&self, unit: u32) -> Result<u32, SequenceError> {
        if unit >= self.k_semantic {
            return Err(SequenceError::UnitOutOfRange {
                unit,
                k_semantic: self.k_semantic,
            });
        }
        Ok(unit)
    }

    pub fn acoustic_token(&self, level: u32, code: u32) -> Result<u32, SequenceError> {
        debug_assert!(level < self.c_levels);
        if code >= self.v_acoustic {
            return Err(SequenceError::CodeOutOfRange {
                code,
                v_acoustic: self.v_acoustic,
            });
        }
        Ok(self.k_semantic + level * self.v_acoustic + code)
    }

    /// First token id of acoustic level `level`.
    pub fn acoustic_range_start(&self, level: u32) -> u32 {
        self.k_semantic + level * self.v_acoustic
    }

    pub fn kind(&self, token: u32) -> Result<TokenKind, SequenceError> {
        if token < self.k_semantic {
            return Ok(TokenKind::Semantic(token));
        }
        let a = token - self.k_semantic;
        if a < self.c_levels * self.v_acoustic {
            return Ok(TokenKind::Acoustic {
                level: a / self.v_acoustic,
                code: a % self.v_acoustic,
            });
        }
        match token - self.sep() {
            0 => Ok(TokenKind::Sep),
            1 => Ok(TokenKind::Bos),
            2 => Ok(TokenKind::Eos),
            3 => Ok(TokenKind::Pad),
            _ => Err(SequenceError::Malformed(format!(
                "token {token} >= total size {}",
                self.total_size()
            ))),
        }
    }

    pub fn is_special(&self, token: u32) -> bool {
        token >= self.sep() && token < self.total_size()
    }

    /// Stable fingerprint recorded in checkpoints.
    pub fn hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(12);
        bytes.extend_from_slice(&self.k_semantic.to_le_bytes());
        bytes.extend_from_slice(&self.c_levels.to_le_bytes());
        bytes.extend_from_slice(&self.v_acoustic.to_le_bytes());
        crate::fnv1a64(&bytes)
    }
}

/// Token stream plus loss mask and segment boundaries (`prompt_end` and
/// `semantic_end` index the two SEP tokens).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<u8>,
    pub prompt_end: usize,
    pub semantic_end: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Frame-major flattening: a_1^1..a_1^C, a_2^1..a_2^C, ...
pub fn flatten(grid: &AcousticUnitGrid, vocab: &VocabLayout) -> Result<Vec<u32>, SequenceError> {
    let mut out = Vec::with_capacity(grid.t_frames() * grid.c_levels());
    for t in 0..grid.t_frames() {
        for (level, &code) in grid.frame(t).iter().enumerate() {
            out.push(vocab.acoustic_token(level as u32, code)?);
        }
    }
    Ok(out)
}

/// Inverse of [`flatten`]; checks divisibility, ranges and level order.
pub fn unflatten(tokens: &[u32], vocab: &VocabLayout) -> Result<AcousticUnitGrid, SequenceError> {
    let c = vocab.c_levels;
    if tokens.len() % c as usize != 0 {
        return Err(SequenceError::NotFrameAligned {
            count: tokens.len(),
            c_levels: c,
        });
    }
    let mut codes = Vec::with_capacity(tokens.len());
    for (pos, &tok) in tokens.iter().enumerate() {
        let expected = (pos % c as usize) as u32;
        match vocab.kind(tok)? {
            TokenKind::Acoustic { level, code } => {
                if level != expected {
                    return Err(SequenceError::LevelMismatch {
                        pos,
                        token: tok,
                        expected,
                        got: level,
                    });
                }
                codes.push(code);
            }
            _ => return Err(SequenceError::NotAcoustic { pos, token: tok }),
        }
    }
    Ok(AcousticUnitGrid::from_codes(codes, c as usize, vocab.v_acoustic))
}

/// Builds a self-supervised training example: the first three seconds of
/// the utterance act as the style prompt; the model is trained to predict
/// the acoustic units of the remainder given the remainder's semantic units.
pub fn make_training_example(
    grid: &AcousticUnitGrid,
    semantic: &SemanticUnitSeq,
    vocab: &VocabLayout,
) -> Result<TokenSequence, SequenceError> {
    if semantic.len() != grid.t_frames() {
        return Err(SequenceError::LengthMismatch {
            semantic: semantic.len(),
            acoustic: grid.t_frames(),
        });
    }
    if grid.t_frames() < PROMPT_FRAMES + MIN_REMAINDER_FRAMES {
        return Err(SequenceError::TooShort {
            frames: grid.t_frames(),
            prompt: PROMPT_FRAMES,
            min_remainder: MIN_REMAINDER_FRAMES,
        });
    }
    let prompt = grid.head(PROMPT_FRAMES);
    let target = grid.tail(PROMPT_FRAMES);
    let sem_rest = &semantic.units[PROMPT_FRAMES..];

    let prompt_tokens = flatten(&prompt, vocab)?;
    let target_tokens = flatten(&target, vocab)?;
    let mut tokens = Vec::with_capacity(3 + prompt_tokens.len() + sem_rest.len() + target_tokens.len() + 1);
    tokens.push(vocab.bos());
    tokens.extend_from_slice(&prompt_tokens);
    let prompt_end = tokens.len();
    tokens.push(vocab.sep());
    for &u in sem_rest {
        tokens.push(vocab.semantic_token(u)?);
    }
    let semantic_end = tokens.len();
    tokens.push(vocab.sep());
    let target_start = tokens.len();
    tokens.extend_from_slice(&target_tokens);
    tokens.push(vocab.eos());

    let mut loss_mask = vec![0u8; tokens.len()];
    for m in &mut loss_mask[target_start..] {
        *m = 1;
    }
    Ok(TokenSequence {
        tokens,
        loss_mask,
        prompt_end,
        semantic_end,
    })
}

/// Builds the generation prefix: source acoustic units (up to three
/// seconds) as the style prompt, then the translated semantic units, ready
/// for autoregressive continuation.
pub fn make_inference_prefix(
    source_grid: &AcousticUnitGrid,
    semantic: &SemanticUnitSeq,
    vocab: &VocabLayout,
) -> Result<TokenSequence, SequenceError> {
    if semantic.is_empty() {
        return Err(SequenceError::EmptySemantic);
    }
    let prompt = source_grid.head(PROMPT_FRAMES.min(source_grid.t_frames()));
    let prompt_tokens = flatten(&prompt, vocab)?;
    let mut tokens = Vec::with_capacity(3 + prompt_tokens.len() + semantic.len());
    tokens.push(vocab.bos());
    tokens.extend_from_slice(&prompt_tokens);
    let prompt_end = tokens.len();
    tokens.push(vocab.sep());
    for &u in &semantic.units {
        tokens.push(vocab.semantic_token(u)?);
    }
    let semantic_end = tokens.len();
    tokens.push(vocab.sep());
    let loss_mask = vec![0u8; tokens.len()];
    Ok(TokenSequence {
        tokens,
        loss_mask,
        prompt_end,
        semantic_end,
    })
}

/// Recovers (prompt grid, semantic units, target grid) from a training
/// sequence; exact inverse of [`make_training_example`].
pub fn parse_training_example(
    seq: &TokenSequence,
    vocab: &VocabLayout,
) -> Result<(AcousticUnitGrid, SemanticUnitSeq, AcousticUnitGrid), SequenceError> {
    let t = &seq.tokens;
    if t.is_empty() || t[0] != vocab.bos() {
        return Err(SequenceError::Malformed("missing BOS".into()));
    }
    if t.get(seq.prompt_end) != Some(&vocab.sep()) || t.get(seq.semantic_end) != Some(&vocab.sep()) {
        return Err(SequenceError::Malformed(
            "segment boundaries do not point at SEP tokens".into(),
        ));
    }
    let prompt = unflatten(&t[1..seq.prompt_end], vocab)?;
    let mut units = Vec::new();
    for (i, &tok) in t[seq.prompt_end + 1..seq.semantic_end].iter().enumerate() {
        match vocab.kind(tok)? {
            TokenKind::Semantic(u) => units.push(u),
            _ => {
                return Err(SequenceError::Malformed(format!(
                    "non-semantic token {tok} at semantic position {i}"
                )))
            }
        }
    }
    let last = t.len() - 1;
    if t[last] != vocab.eos() {
        return Err(SequenceError::Malformed("missing EOS".into()));
    }
    let target = unflatten(&t[seq.semantic_end + 1..last], vocab)?;
    Ok((prompt, SemanticUnitSeq::new(units), target))
}

const RECORD_MAGIC: &[u8; 4] = b"S2TR";
const RECORD_VERSION: u32 = 1;

pub fn write_records(path: &Path, records: &[TokenSequence]) -> Result<(), SequenceError> {
    let mut out = Vec::new();
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.tokens.len() as u32).to_le_bytes());
        for t in &r.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&(r.prompt_end as u32).to_le_bytes());
        out.extend_from_slice(&(r.semantic_end as u32).to_le_bytes());
        out.extend_from_slice(&r.loss_mask);
    }
    std::fs::write(path, out).map_err(|e| SequenceError::Records(e.to_string()))
}

pub fn read_records(path: &Path) -> Result<Vec<TokenSequence>, SequenceError> {
    let mut f = std::fs::File::open(path).map_err(|e| SequenceError::Records(e.to_string()))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| SequenceError::Records(e.to_string()))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], SequenceError> {
        if pos + n > bytes.len() {
            return Err(SequenceError::Records("truncated record stream".into()));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4)? != RECORD_MAGIC {
        return Err(SequenceError::Records("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != RECORD_VERSION {
        return Err(SequenceError::Records(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let toks = take(n * 4)?;
        let tokens: Vec<u32> = toks
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let prompt_end = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let semantic_end = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let loss_mask = take(n)?.to_vec();
        records.push(TokenSequence {
            tokens,
            loss_mask,
            prompt_end,
            semantic_end,
        });
    }
    Ok(records)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> VocabLayout {
        VocabLayout::new(64, 3, 256).unwrap()
    }

    fn grid_from(rows: &[[u32; 3]]) -> AcousticUnitGrid {
        AcousticUnitGrid::from_codes(rows.iter().flatten().copied().collect(), 3, 256)
    }

    fn ramp_grid(t: usize) -> AcousticUnitGrid {
        let codes = (0..t * 3).map(|i| (i % 256) as u32).collect();
        AcousticUnitGrid::from_codes(codes, 3, 256)
    }

    #[test]
    fn vocab_arithmetic_matches_desk_and_paper_scales() {
        assert_eq!(vocab().total_size(), 64 + 3 * 256 + 4); // 836
        let paper = VocabLayout::new(1000, 3, 1024).unwrap();
        assert_eq!(paper.total_size(), 4076);
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(VocabLayout::new(0, 3, 256).is_err());
        assert!(VocabLayout::new(64, 0, 256).is_err());
        assert!(VocabLayout::new(64, 3, 0).is_err());
    }

    #[test]
    fn token_encode_decode_is_a_bijection() {
        let v = vocab();
        for unit in [0u32, 1, 63] {
            let t = v.semantic_token(unit).unwrap();
            assert_eq!(v.kind(t).unwrap(), TokenKind::Semantic(unit));
        }
        for level in 0..3u32 {
            for code in [0u32, 17, 255] {
                let t = v.acoustic_token(level, code).unwrap();
                assert_eq!(v.kind(t).unwrap(), TokenKind::Acoustic { level, code });
            }
        }
        assert_eq!(v.kind(v.sep()).unwrap(), TokenKind::Sep);
        assert_eq!(v.kind(v.bos()).unwrap(), TokenKind::Bos);
        assert_eq!(v.kind(v.eos()).unwrap(), TokenKind::Eos);
        assert_eq!(v.kind(v.pad()).unwrap(), TokenKind::Pad);
        assert!(v.kind(v.total_size()).is_err());
    }

    #[test]
    fn flatten_order_is_frame_major() {
        let v = vocab();
        let g = grid_from(&[[1, 2, 3], [4, 5, 6]]);
        let toks = flatten(&g, &v).unwrap();
        assert_eq!(
            toks,
            vec![
                64 + 1,
                64 + 256 + 2,
                64 + 512 + 3,
                64 + 4,
                64 + 256 + 5,
                64 + 512 + 6
            ]
        );
        assert_eq!(unflatten(&toks, &v).unwrap(), g);
    }

    #[test]
    fn unflatten_rejects_bad_input() {
        let v = vocab();
        let g = grid_from(&[[1, 2, 3], [4, 5, 6]]);
        let toks = flatten(&g, &v).unwrap();
        assert!(matches!(
            unflatten(&toks[..5], &v),
            Err(SequenceError::NotFrameAligned { count: 5, .. })
        ));
        let mut wrong_level = toks.clone();
        wrong_level.swap(0, 1);
        assert!(matches!(
            unflatten(&wrong_level, &v),
            Err(SequenceError::LevelMismatch { pos: 0, .. })
        ));
        let mut not_acoustic = toks;
        not_acoustic[0] = 3; // semantic token
        assert!(matches!(
            unflatten(&not_acoustic, &v),
            Err(SequenceError::NotAcoustic { pos: 0, .. })
        ));
    }

    #[test]
    fn training_example_layout_for_10s_utterance() {
        let v = vocab();
        let t = 500; // 10 s at 50 Hz
        let grid = ramp_grid(t);
        let sem = SemanticUnitSeq::new((0..t as u32).map(|i| i % 64).collect());
        let seq = make_training_example(&grid, &sem, &v).unwrap();
        // 1 + 450 + 1 + 350 + 1 + 1050 + 1
        assert_eq!(seq.len(), 1854);
        assert_eq!(seq.masked_count(), 1050 + 1);
        assert_eq!(seq.prompt_end, 451);
        assert_eq!(seq.semantic_end, 451 + 1 + 350);
        assert_eq!(seq.tokens[seq.prompt_end], v.sep());
        assert_eq!(seq.tokens[seq.semantic_end], v.sep());
        assert_eq!(seq.tokens[0], v.bos());
        assert_eq!(*seq.tokens.last().unwrap(), v.eos());
        // mask never covers prompt or semantic segments
        assert!(seq.loss_mask[..seq.semantic_end + 1].iter().all(|&m| m == 0));
    }

    #[test]
    fn training_example_round_trips() {
        let v = vocab();
        let t = 250;
        let grid = ramp_grid(t);
        let sem = SemanticUnitSeq::new((0..t as u32).map(|i| (i * 7) % 64).collect());
        let seq = make_training_example(&grid, &sem, &v).unwrap();
        let (prompt, sem_rest, target) = parse_training_example(&seq, &v).unwrap();
        assert_eq!(prompt, grid.head(PROMPT_FRAMES));
        assert_eq!(target, grid.tail(PROMPT_FRAMES));
        assert_eq!(sem_rest.units, sem.units[PROMPT_FRAMES..]);
    }

    #[test]
    fn short_utterance_is_skipped() {
        let v = vocab();
        let t = 175; // 3.5 s < 3 s prompt + 1 s remainder
        let grid = ramp_grid(t);
        let sem = SemanticUnitSeq::new(vec![0; t]);
        assert!(matches!(
            make_training_example(&grid, &sem, &v),
            Err(SequenceError::TooShort { frames: 175, .. })
        ));
    }

    #[test]
    fn length_mismatch_rejected() {
        let v = vocab();
        let grid = ramp_grid(300);
        let sem = SemanticUnitSeq::new(vec![0; 299]);
        assert!(matches!(
            make_training_example(&grid, &sem, &v),
            Err(SequenceError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn inference_prefix_lengths() {
        let v = vocab();
        // source 5 s = 250 frames, semantic 200 -> 1 + 450 + 1 + 200 + 1
        let seq = make_inference_prefix(
            &ramp_grid(250),
            &SemanticUnitSeq::new(vec![7; 200]),
            &v,
        )
        .unwrap();
        assert_eq!(seq.len(), 653);
        assert_eq!(seq.masked_count(), 0);
        // source 2 s < 3 s: whole 100-frame grid used
        let seq = make_inference_prefix(
            &ramp_grid(100),
            &SemanticUnitSeq::new(vec![7; 80]),
            &v,
        )
        .unwrap();
        assert_eq!(seq.len(), 1 + 300 + 1 + 80 + 1);
        // empty semantic -> error
        assert!(matches!(
            make_inference_prefix(&ramp_grid(100), &SemanticUnitSeq::default(), &v),
            Err(SequenceError::EmptySemantic)
        ));
    }

    #[test]
    fn record_stream_round_trips() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.records");
        let grids = [ramp_grid(220), ramp_grid(260)];
        let records: Vec<TokenSequence> = grids
            .iter()
            .map(|g| {
                let sem = SemanticUnitSeq::new((0..g.t_frames() as u32).map(|i| i % 64).collect());
                make_training_example(g, &sem, &v).unwrap()
            })
            .collect();
        write_records(&p, &records).unwrap();
        let back = read_records(&p).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn no_token_exceeds_total_size() {
        let v = vocab();
        let grid = ramp_grid(300);
        let sem = SemanticUnitSeq::new((0..300u32).map(|i| i % 64).collect());
        let seq = make_training_example(&grid, &sem, &v).unwrap();
        assert!(seq.tokens.iter().all(|&t| t < v.total_size()));
    }
}
