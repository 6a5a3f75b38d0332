//! Stage S1 stand-in: a small encoder-decoder transformer translating
//! source-language semantic unit sequences into target-language semantic
//! units. The pipeline treats this stage as pluggable; anything that maps
//! unit sequences to unit sequences over the same vocabulary fits.

use crate::mat::Mat;
use crate::nn::{
    self, Adam, AttnMask, CrossBlock, CrossBlockCache, LayerNorm, Linear, Params, SelfBlock,
    SelfBlockCache,
};
use crate::semantic::SemanticUnitSeq;
use crate::Scalar;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum S2utError {
    #[error("empty source sequence")]
    EmptySource,
    #[error("unit {unit} out of range (K = {k})")]
    UnitOutOfRange { unit: u32, k: u32 },
    #[error("sequence of {len} exceeds maximum {max}")]
    Overlong { len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct S2utConfig {
    pub k_units: u32,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
}

impl S2utConfig {
    pub fn desk(k_units: u32) -> Self {
        Self {
            k_units,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            enc_layers: 2,
            dec_layers: 2,
            max_len: 640,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Output length cap as a multiple of the source length.
    pub max_ratio: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_ratio: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct S2utMetrics {
    pub loss: f64,
    pub token_accuracy: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct S2utModel<T> {
    pub cfg: S2utConfig,
    pub src_embed: Mat<T>,
    pub tgt_embed: Mat<T>,
    pub src_pos: Mat<T>,
    pub tgt_pos: Mat<T>,
    pub encoder: Vec<SelfBlock<T>>,
    pub enc_ln: LayerNorm<T>,
    pub decoder: Vec<CrossBlock<T>>,
    pub dec_ln: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> S2utModel<T> {
    pub fn bos(&self) -> u32 {
        self.cfg.k_units
    }

    pub fn eos(&self) -> u32 {
        self.cfg.k_units + 1
    }

    pub fn pad(&self) -> u32 {
        self.cfg.k_units + 2
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.k_units as usize + 3
    }

    pub fn new(cfg: S2utConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let std = 0.02;
        let e_scale = 1.0 / (2.0 * cfg.enc_layers.max(1) as f64).sqrt();
        let d_scale = 1.0 / (2.0 * cfg.dec_layers.max(1) as f64).sqrt();
        let v = cfg.k_units as usize + 3;
        let mut src_embed = Mat::zeros(v, d);
        nn::normal_init(&mut src_embed, std, &mut rng);
        let mut tgt_embed = Mat::zeros(v, d);
        nn::normal_init(&mut tgt_embed, std, &mut rng);
        let mut src_pos = Mat::zeros(cfg.max_len, d);
        nn::normal_init(&mut src_pos, std, &mut rng);
        let mut tgt_pos = Mat::zeros(cfg.max_len, d);
        nn::normal_init(&mut tgt_pos, std, &mut rng);
        let encoder = (0..cfg.enc_layers)
            .map(|_| SelfBlock::new(d, cfg.n_heads, cfg.d_ff, std, e_scale, &mut rng))
            .collect();
        let decoder = (0..cfg.dec_layers)
            .map(|_| CrossBlock::new(d, cfg.n_heads, cfg.d_ff, std, d_scale, &mut rng))
            .collect();
        Self {
            cfg,
            src_embed,
            tgt_embed,
            src_pos,
            tgt_pos,
            encoder,
            enc_ln: LayerNorm::new(d),
            decoder,
            dec_ln: LayerNorm::new(d),
            head: Linear::new(d, v, std, &mut rng),
        }
    }

    pub fn zeroed_clone(&self) -> Self {
        let mut g = self.clone();
        nn::scale_params(&mut g, T::zero());
        g
    }

    fn check_units(&self, units: &[u32]) -> Result<(), S2utError> {
        for &u in units {
            if u >= self.cfg.k_units {
                return Err(S2utError::UnitOutOfRange {
                    unit: u,
                    k: self.cfg.k_units,
                });
            }
        }
        Ok(())
    }

    fn embed_tokens(&self, table: &Mat<T>, pos: &Mat<T>, tokens: &[u32]) -> Mat<T> {
        let mut x = Mat::zeros(tokens.len(), self.cfg.d_model);
        for (i, &t) in tokens.iter().enumerate() {
            x.set_row(i, table.row(t as usize));
            x.add_to_row(i, pos.row(i));
        }
        x
    }

    fn encode(&self, src: &[u32]) -> Result<(Mat<T>, EncTrace<T>), S2utError> {
        if src.is_empty() {
            return Err(S2utError::EmptySource);
        }
        if src.len() > self.cfg.max_len {
            return Err(S2utError::Overlong {
                len: src.len(),
                max: self.cfg.max_len,
            });
        }
        let mut x = self.embed_tokens(&self.src_embed, &self.src_pos, src);
        let mut caches = Vec::with_capacity(self.encoder.len());
        for blk in &self.encoder {
            let (next, cache) = blk.forward(&x, AttnMask::None);
            caches.push(cache);
            x = next;
        }
        let (out, ln) = self.enc_ln.forward(&x);
        Ok((out, EncTrace { caches, ln }))
    }

    /// Teacher-forced decoder logits: row `i` predicts the token following
    /// decoder input `i` given inputs `..=i` and the full encoder output.
    pub fn decoder_logits(&self, src: &[u32], dec_in: &[u32]) -> Result<Mat<T>, S2utError> {
        let (enc, _) = self.encode(src)?;
        let (logits, _) = self.decode_full(&enc, dec_in)?;
        Ok(logits)
    }

    fn decode_full(&self, enc: &Mat<T>, dec_in: &[u32]) -> Result<(Mat<T>, DecTrace<T>), S2utError> {
        if dec_in.len() > self.cfg.max_len {
            return Err(S2utError::Overlong {
                len: dec_in.len(),
                max: self.cfg.max_len,
            });
        }
        let mut x = self.embed_tokens(&self.tgt_embed, &self.tgt_pos, dec_in);
        let mut caches = Vec::with_capacity(self.decoder.len());
        for blk in &self.decoder {
            let (next, cache) = blk.forward(&x, enc);
            caches.push(cache);
            x = next;
        }
        let (out, ln) = self.dec_ln.forward(&x);
        let logits = self.head.forward(&out);
        Ok((
            logits,
            DecTrace {
                caches,
                ln,
                head_in: out,
            },
        ))
    }

    fn example_grads(
        &self,
        src: &[u32],
        tgt: &[u32],
        scale: f64,
    ) -> Result<(Self, f64, usize, usize), S2utError> {
        self.check_units(src)?;
        self.check_units(tgt)?;
        let (enc, enc_trace) = self.encode(src)?;
        let mut dec_in = Vec::with_capacity(tgt.len() + 1);
        dec_in.push(self.bos());
        dec_in.extend_from_slice(tgt);
        let mut labels: Vec<u32> = tgt.to_vec();
        labels.push(self.eos());
        let (logits, dec_trace) = self.decode_full(&enc, &dec_in)?;

        let mut dlogits = Mat::zeros(logits.rows(), self.vocab_size());
        let sc = T::from_f64(scale);
        let mut loss_sum = 0.0;
        let mut n_correct = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            loss_sum -= nn::log_softmax_at(row, label as usize);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(k, _)| k)
                .unwrap_or(0);
            if argmax == label as usize {
                n_correct += 1;
            }
            let mut sm: Vec<T> = row.to_vec();
            nn::softmax_row(&mut sm);
            let drow = dlogits.row_mut(i);
            for (dv, s) in drow.iter_mut().zip(&sm) {
                *dv += *s * sc;
            }
            drow[label as usize] -= sc;
        }

        let mut grads = self.zeroed_clone();
        let dhead_in = self.head.backward(&dec_trace.head_in, &dlogits, &mut grads.head);
        let mut dx = self.dec_ln.backward(&dec_trace.ln, &dhead_in, &mut grads.dec_ln);
        let mut denc_total = Mat::zeros(enc.rows(), enc.cols());
        for (i, blk) in self.decoder.iter().enumerate().rev() {
            let (dxi, denc) = blk.backward(&dec_trace.caches[i], &dx, &mut grads.decoder[i]);
            dx = dxi;
            denc_total.add_assign(&denc);
        }
        for (i, &t) in dec_in.iter().enumerate() {
            grads.tgt_embed.add_to_row(t as usize, dx.row(i));
            grads.tgt_pos.add_to_row(i, dx.row(i));
        }
        let mut de = self.enc_ln.backward(&enc_trace.ln, &denc_total, &mut grads.enc_ln);
        for (i, blk) in self.encoder.iter().enumerate().rev() {
            de = blk.backward(&enc_trace.caches[i], &de, &mut grads.encoder[i]);
        }
        for (i, &t) in src.iter().enumerate() {
            grads.src_embed.add_to_row(t as usize, de.row(i));
            grads.src_pos.add_to_row(i, de.row(i));
        }
        Ok((grads, loss_sum, labels.len(), n_correct))
    }

    /// One optimizer step of teacher-forced cross-entropy on (source units,
    /// target units) pairs. Deterministic for a fixed batch order.
    pub fn train_step(
        &mut self,
        batch: &[(&[u32], &[u32])],
        adam: &mut Adam<T>,
    ) -> Result<S2utMetrics, S2utError> {
        if batch.is_empty() {
            return Err(S2utError::EmptyBatch);
        }
        let total_labels: usize = batch.iter().map(|(_, t)| t.len() + 1).sum();
        let scale = 1.0 / total_labels as f64;
        let results: Vec<Result<(Self, f64, usize, usize), S2utError>> = batch
            .par_iter()
            .map(|(s, t)| self.example_grads(s, t, scale))
            .collect();
        let mut grads: Option<Self> = None;
        let mut loss_sum = 0.0;
        let mut n_correct = 0usize;
        for r in results {
            let (g, l, _n, c) = r?;
            loss_sum += l;
            n_correct += c;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => nn::accumulate(acc, &g),
            }
        }
        let mut grads = grads.unwrap();
        let grad_norm = adam.update(self, &mut grads);
        Ok(S2utMetrics {
            loss: loss_sum / total_labels as f64,
            token_accuracy: n_correct as f64 / total_labels as f64,
            grad_norm,
        })
    }

    /// Greedy or beam decode; stops at EOS or the configured multiple of
    /// the source length. The output never contains specials.
    pub fn translate(
        &self,
        source: &SemanticUnitSeq,
        cfg: &DecodeConfig,
    ) -> Result<SemanticUnitSeq, S2utError> {
        if source.is_empty() {
            return Err(S2utError::EmptySource);
        }
        self.check_units(&source.units)?;
        let (enc, _) = self.encode(&source.units)?;
        let max_len = ((source.len() as f64 * cfg.max_ratio) as usize)
            .min(self.cfg.max_len - 1)
            .max(1);
        match cfg.mode {
            DecodeMode::Greedy => self.beam_decode(&enc, max_len, 1),
            DecodeMode::Beam { width } => self.beam_decode(&enc, max_len, width.max(1)),
        }
    }

    fn beam_decode(
        &self,
        enc: &Mat<T>,
        max_len: usize,
        width: usize,
    ) -> Result<SemanticUnitSeq, S2utError> {
        #[derive(Clone)]
        struct Hyp<T> {
            tokens: Vec<u32>,
            score: f64,
            state: DecState<T>,
            done: bool,
        }
        let mut beam = vec![Hyp {
            tokens: vec![],
            score: 0.0,
            state: DecState::new(self, enc),
            done: false,
        }];
        let eos = self.eos();
        for step in 0..=max_len {
            if beam.iter().all(|h| h.done) {
                break;
            }
            let mut candidates: Vec<Hyp<T>> = Vec::new();
            for h in &beam {
                if h.done {
                    candidates.push(h.clone());
                    continue;
                }
                let prev = if h.tokens.is_empty() {
                    self.bos()
                } else {
                    *h.tokens.last().unwrap()
                };
                let mut state = h.state.clone();
                let logits = state.step(self, prev, h.tokens.len());
                // log-softmax over the legal ids (units + EOS)
                let mut legal: Vec<(u32, f64)> = (0..self.cfg.k_units)
                    .map(|u| (u, logits[u as usize].as_f64()))
                    .collect();
                legal.push((eos, logits[eos as usize].as_f64()));
                let max = legal.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + legal.iter().map(|e| (e.1 - max).exp()).sum::<f64>().ln();
                let expansions: Vec<(u32, f64)> = if step == max_len {
                    // forced EOS at the length cap
                    vec![(eos, legal.last().unwrap().1 - lse)]
                } else {
                    let mut sorted: Vec<(u32, f64)> =
                        legal.iter().map(|&(id, l)| (id, l - lse)).collect();
                    sorted.sort_by(|a, b| {
                        b.1.partial_cmp(&a.1)
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(a.0.cmp(&b.0))
                    });
                    sorted.truncate(width);
                    sorted
                };
                for (id, lp) in expansions {
                    let mut tokens = h.tokens.clone();
                    let done = id == eos;
                    if !done {
                        tokens.push(id);
                    }
                    candidates.push(Hyp {
                        tokens,
                        score: h.score + lp,
                        state: state.clone(),
                        done,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            candidates.truncate(width);
            beam = candidates;
        }
        let best = beam
            .into_iter()
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap();
        Ok(SemanticUnitSeq::new(best.tokens))
    }
}

struct EncTrace<T> {
    caches: Vec<SelfBlockCache<T>>,
    ln: nn::NormCache<T>,
}

struct DecTrace<T> {
    caches: Vec<CrossBlockCache<T>>,
    ln: nn::NormCache<T>,
    head_in: Mat<T>,
}

/// Incremental decoder state: per layer, cached self-attention K/V rows
/// plus precomputed cross-attention K/V of the encoder output.
#[derive(Clone)]
struct DecState<T> {
    self_kv: Vec<(Vec<T>, Vec<T>, usize)>,
    cross_kv: Vec<(Mat<T>, Mat<T>)>,
}

impl<T: Scalar> DecState<T> {
    fn new(model: &S2utModel<T>, enc: &Mat<T>) -> Self {
        let cross_kv = model
            .decoder
            .iter()
            .map(|blk| {
                // cross attention normalizes the QUERY side only; K/V come
                // straight from the encoder output
                (blk.cross_attn.wk.forward(enc), blk.cross_attn.wv.forward(enc))
            })
            .collect();
        let self_kv = model.decoder.iter().map(|_| (Vec::new(), Vec::new(), 0)).collect();
        Self { self_kv, cross_kv }
    }

    /// Feeds one decoder-input token at `position`, returns head logits.
    fn step(&mut self, model: &S2utModel<T>, token: u32, position: usize) -> Vec<T> {
        let d = model.cfg.d_model;
        let n_heads = model.cfg.n_heads;
        let dh = d / n_heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut x = Mat::zeros(1, d);
        x.set_row(0, model.tgt_embed.row(token as usize));
        x.add_to_row(0, model.tgt_pos.row(position));

        for (li, blk) in model.decoder.iter().enumerate() {
            let (a, _) = blk.ln1.forward(&x);
            let q = blk.self_attn.wq.forward(&a);
            let k_new = blk.self_attn.wk.forward(&a);
            let v_new = blk.self_attn.wv.forward(&a);
            let (kbuf, vbuf, n_rows) = &mut self.self_kv[li];
            kbuf.extend_from_slice(k_new.row(0));
            vbuf.extend_from_slice(v_new.row(0));
            *n_rows += 1;
            let n = *n_rows;
            let mut concat = Mat::zeros(1, d);
            for h in 0..n_heads {
                let qh = &q.row(0)[h * dh..(h + 1) * dh];
                let mut scores: Vec<T> = (0..n)
                    .map(|j| crate::mat::dot(qh, &kbuf[j * d + h * dh..j * d + (h + 1) * dh]) * scale)
                    .collect();
                nn::softmax_row(&mut scores);
                let out = &mut concat.row_mut(0)[h * dh..(h + 1) * dh];
                for (j, &w) in scores.iter().enumerate() {
                    for (o, v) in out.iter_mut().zip(&vbuf[j * d + h * dh..j * d + (h + 1) * dh]) {
                        *o += w * *v;
                    }
                }
            }
            let sa = blk.self_attn.wo.forward(&concat);
            let mut x1 = x.clone();
            x1.add_assign(&sa);

            let (cx, _) = blk.ln_cross.forward(&x1);
            let q2 = blk.cross_attn.wq.forward(&cx);
            let (ck, cv) = &self.cross_kv[li];
            let m = ck.rows();
            let mut concat2 = Mat::zeros(1, d);
            for h in 0..n_heads {
                let qh = &q2.row(0)[h * dh..(h + 1) * dh];
                let mut scores: Vec<T> = (0..m)
                    .map(|j| crate::mat::dot(qh, &ck.row(j)[h * dh..(h + 1) * dh]) * scale)
                    .collect();
                nn::softmax_row(&mut scores);
                let out = &mut concat2.row_mut(0)[h * dh..(h + 1) * dh];
                for (j, &w) in scores.iter().enumerate() {
                    for (o, v) in out.iter_mut().zip(&cv.row(j)[h * dh..(h + 1) * dh]) {
                        *o += w * *v;
                    }
                }
            }
            let ca = blk.cross_attn.wo.forward(&concat2);
            let mut x2 = x1;
            x2.add_assign(&ca);

            let (b, _) = blk.ln2.forward(&x2);
            let (ff, _) = blk.ffn.forward(&b);
            let mut y = x2;
            y.add_assign(&ff);
            x = y;
        }
        let (out, _) = model.dec_ln.forward(&x);
        let logits = model.head.forward(&out);
        logits.row(0).to_vec()
    }
}

impl<T: Scalar> Params<T> for S2utModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        f(format!("{prefix}src_embed"), &self.src_embed);
        f(format!("{prefix}tgt_embed"), &self.tgt_embed);
        f(format!("{prefix}src_pos"), &self.src_pos);
        f(format!("{prefix}tgt_pos"), &self.tgt_pos);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&format!("{prefix}encoder.{i}"), f);
        }
        self.enc_ln.visit(&format!("{prefix}enc_ln"), f);
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&format!("{prefix}decoder.{i}"), f);
        }
        self.dec_ln.visit(&format!("{prefix}dec_ln"), f);
        self.head.visit(&format!("{prefix}head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        f(format!("{prefix}src_embed"), &mut self.src_embed);
        f(format!("{prefix}tgt_embed"), &mut self.tgt_embed);
        f(format!("{prefix}src_pos"), &mut self.src_pos);
        f(format!("{prefix}tgt_pos"), &mut self.tgt_pos);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}encoder.{i}"), f);
        }
        self.enc_ln.visit_mut(&format!("{prefix}enc_ln"), f);
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}decoder.{i}"), f);
        }
        self.dec_ln.visit_mut(&format!("{prefix}dec_ln"), f);
        self.head.visit_mut(&format!("{prefix}head"), f);
    }
}
