//! Cross-module checks on a small synthetic corpus: pitch identifiability
//! of the speakers, semantic/acoustic frame-rate alignment, and the
//! phone-to-unit consistency statistic.

use s2st_core::audio::{build_corpus, read_wav, CorpusConfig, Split};
use s2st_core::codec::Codec;
use s2st_core::config::PipelineConfig;
use s2st_core::features::FeatureExtractor;
use s2st_core::pipeline::{semantic_units_for, train_semantic_km};
use s2st_core::timbre::estimate_f0;
use s2st_core::Real;
use std::collections::HashMap;

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.corpus = CorpusConfig {
        train_speakers: 6,
        valid_speakers: 1,
        test_speakers: 2,
        utts_per_speaker: 4,
        test_utts_per_speaker: 2,
        phones_per_utt: 10,
        phone_ms_min: 160,
        phone_ms_max: 260,
        utt_ms_min: 1800,
        utt_ms_max: 2600,
        grammar_seed: 3,
        identity_grammar: false,
    };
    cfg.train.max_fit_frames = 20_000;
    cfg
}

#[test]
fn pitch_identifies_speakers_and_units_track_phones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let art = build_corpus(&cfg.corpus, 42, dir.path()).unwrap();

    // --- pitch identifiability: nearest-neighbor on estimated F0 recovers
    // the speaker on >= 95% of train utterances ---
    let speakers: Vec<(&str, f64)> = art
        .speakers
        .iter()
        .map(|s| (s.speaker_id.as_str(), s.base_f0))
        .collect();
    let train: Vec<_> = art.manifest.split(Split::Train).collect();
    let mut correct = 0usize;
    for e in &train {
        let w = read_wav::<Real>(&dir.path().join(&e.audio_path)).unwrap();
        let track = estimate_f0(&w);
        let voiced: Vec<f64> = track.iter().flatten().copied().collect();
        assert!(!voiced.is_empty(), "utterance {} has no voiced frames", e.utterance_id);
        let mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
        let nearest = speakers
            .iter()
            .min_by(|a, b| {
                (a.1 - mean)
                    .abs()
                    .partial_cmp(&(b.1 - mean).abs())
                    .unwrap()
            })
            .unwrap();
        if nearest.0 == e.speaker_id {
            correct += 1;
        }
    }
    let acc = correct as f64 / train.len() as f64;
    assert!(
        acc >= 0.95,
        "F0 nearest-neighbor speaker accuracy {acc:.3} < 0.95"
    );

    // --- frame alignment: semantic frame count equals codec frame count ---
    let (km, _) = train_semantic_km(&cfg, &art.manifest, dir.path(), 1).unwrap();
    let extractor = FeatureExtractor::new(cfg.features.clone());
    let codec = Codec::new(cfg.codec.clone());
    let first = &art.manifest.entries[0];
    let w = read_wav::<Real>(&dir.path().join(&first.audio_path)).unwrap();
    let units = semantic_units_for(&w, &extractor, &km).unwrap();
    let grid_rows = codec.analyze(&w).rows();
    assert_eq!(units.len(), grid_rows, "semantic and acoustic frame rates must align");
    assert_eq!(grid_rows, w.len() / 320);

    // --- phone-to-unit consistency statistic (printed, not asserted: it is
    // an acceptance-level statistic, not a unit contract) ---
    let mut utts_ok = 0usize;
    let mut utts_total = 0usize;
    for e in train.iter().take(12) {
        let w = read_wav::<Real>(&dir.path().join(&e.audio_path)).unwrap();
        let units = semantic_units_for(&w, &extractor, &km).unwrap();
        // frame-aligned phone labels
        let mut labels = Vec::with_capacity(units.len());
        for p in &e.source_phones.phones {
            for _ in 0..(p.duration_ms / 20) {
                labels.push(p.phone_id);
            }
        }
        labels.truncate(units.len());
        let mut per_phone: HashMap<u8, Vec<u32>> = HashMap::new();
        for (lab, unit) in labels.iter().zip(&units.units) {
            per_phone.entry(*lab).or_default().push(*unit);
        }
        let ok = per_phone.values().all(|us| {
            let mut distinct: Vec<u32> = us.clone();
            distinct.sort_unstable();
            distinct.dedup();
            distinct.len() <= 3
        });
        utts_total += 1;
        if ok {
            utts_ok += 1;
        }
    }
    println!(
        "phone-consistency statistic: {utts_ok}/{utts_total} utterances map each phone to <= 3 units"
    );
}
