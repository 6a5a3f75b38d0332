use s2st_core::lm::{AcousticLm, LmConfig};
use s2st_core::nn::{Adam, AdamConfig};
use s2st_core::seqfmt::{TokenSequence, VocabLayout};
use std::time::Instant;

fn example(v: &VocabLayout, r: usize, seed: u64) -> TokenSequence {
    let mut state = seed;
    let mut next = |m: u32| -> u32 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) as u32) % m
    };
    let mut tokens = vec![v.bos()];
    for _ in 0..150 {
        for c in 0..3u32 {
            tokens.push(v.acoustic_token(c, next(256)).unwrap());
        }
    }
    let prompt_end = tokens.len();
    tokens.push(v.sep());
    for _ in 0..r {
        tokens.push(v.semantic_token(next(64)).unwrap());
    }
    let semantic_end = tokens.len();
    tokens.push(v.sep());
    let target_start = tokens.len();
    for _ in 0..r {
        for c in 0..3u32 {
            tokens.push(v.acoustic_token(c, next(256)).unwrap());
        }
    }
    tokens.push(v.eos());
    let mut loss_mask = vec![0u8; tokens.len()];
    for m in &mut loss_mask[target_start..] {
        *m = 1;
    }
    TokenSequence { tokens, loss_mask, prompt_end, semantic_end }
}

#[test]
fn lm_step_time() {
    let v = VocabLayout::new(64, 3, 256).unwrap();
    let mut m = AcousticLm::<f32>::new(v, LmConfig::desk(), 1);
    let mut adam = Adam::new(&m, AdamConfig::default());
    let examples: Vec<TokenSequence> = (0..4).map(|i| example(&v, 75, i)).collect();
    let batch: Vec<&TokenSequence> = examples.iter().collect();
    // warmup
    m.train_step(&batch, &mut adam).unwrap();
    let t0 = Instant::now();
    for _ in 0..5 {
        m.train_step(&batch, &mut adam).unwrap();
    }
    println!("lm train_step (batch 4, R=75): {:.2} s/step", t0.elapsed().as_secs_f64() / 5.0);
}
