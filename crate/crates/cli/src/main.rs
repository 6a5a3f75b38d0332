//! `s2st`: drives corpus preparation, the five training jobs, single-file
//! translation and split evaluation. Exit codes: 0 success, 2 configuration
//! error, 3 stage failure.

use clap::{Args, Parser, Subcommand};
use s2st_core::audio::{build_corpus, read_manifest, read_wav, write_wav, CorpusManifest, Split};
use s2st_core::checkpoint::{kmeans_from_checkpoint, Checkpoint};
use s2st_core::config::{PipelineConfig, RunPaths, Scale};
use s2st_core::kmeans::KmeansCodebook;
use s2st_core::pipeline::{
    build_lm_examples, build_s2ut_pairs, rvq_from_checkpoint, save_km, save_lm, save_rvq,
    save_s2ut, save_vocoder, semantic_units_for, train_codec, train_lm, train_s2ut,
    train_semantic_km, train_vocoder, PipelineContext, PipelineError,
};
use s2st_core::semantic::{read_units_jsonl, write_units_jsonl, SemanticUnitSeq};
use s2st_core::seqfmt::{read_records, write_records};
use s2st_core::Real;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "s2st", about = "Discrete-unit speech-to-speech translation with style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration file (JSON); defaults to the --scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; all randomness derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Configuration preset when --config is absent.
    #[arg(long, global = true, default_value = "desk")]
    scale: Scale,

    /// Run directory holding corpus, checkpoints and reports.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus and write its manifest.
    PrepareCorpus,
    /// Fit the semantic-unit k-means codebook on the train split.
    TrainSemanticKm,
    /// Fit the residual-vector-quantizer codebooks on the train split.
    TrainCodec,
    /// Train the S1 unit translator.
    TrainS2ut(TrainArgs),
    /// Train the S2 acoustic language model.
    TrainLm(TrainLmArgs),
    /// Train the S3 unit vocoder.
    TrainVocoder(TrainArgs),
    /// Run the full pipeline on one source WAV.
    Translate(TranslateArgs),
    /// Translate semantic-unit sequences from a units file (S1 only).
    TranslateUnits(TranslateUnitsArgs),
    /// Run the pipeline over a split and write the evaluation report.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Override the configured number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct TrainLmArgs {
    /// Override the configured number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Pre-built training-example records (written on first run).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Save an intermediate checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct TranslateArgs {
    /// Source waveform (16 kHz mono PCM16 WAV).
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct TranslateUnitsArgs {
    /// Line-delimited JSON units file ({utterance_id, units}).
    #[arg(long)]
    input: PathBuf,
    /// Output units file.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Which split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
}

/// Errors mapped to exit codes.
enum CliError {
    Config(String),
    Stage(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => CliError::Config(e.to_string()),
            PipelineError::Stage { .. } => CliError::Stage(e.to_string()),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn stage_err(e: impl std::fmt::Display) -> CliError {
    CliError::Stage(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Stage(msg)) => {
            eprintln!("stage failure: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(config_err),
        None => {
            let paths = RunPaths::new(&cli.out);
            if paths.config().exists() {
                PipelineConfig::load(&paths.config()).map_err(config_err)
            } else {
                Ok(PipelineConfig::for_scale(cli.scale))
            }
        }
    }
}

fn load_manifest(paths: &RunPaths) -> Result<CorpusManifest, CliError> {
    read_manifest(&paths.manifest()).map_err(config_err)
}

fn load_km(paths: &RunPaths) -> Result<KmeansCodebook<Real>, CliError> {
    let ck = Checkpoint::load(&paths.km_codebook()).map_err(config_err)?;
    kmeans_from_checkpoint(&ck).map_err(config_err)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli)?;
    let paths = RunPaths::new(&cli.out);
    std::fs::create_dir_all(&paths.root).map_err(config_err)?;

    match &cli.command {
        Command::PrepareCorpus => {
            let art = build_corpus(&config.corpus, cli.seed, &paths.corpus_dir()).map_err(stage_err)?;
            config.save(&paths.config()).map_err(config_err)?;
            println!(
                "corpus: {} utterances, {} speakers (+canonical), manifest at {}",
                art.manifest.entries.len(),
                art.speakers.len(),
                art.manifest_path.display()
            );
        }
        Command::TrainSemanticKm => {
            let manifest = load_manifest(&paths)?;
            let (km, report) =
                train_semantic_km(&config, &manifest, &paths.corpus_dir(), cli.seed)?;
            save_km(&km, &paths.km_codebook()).map_err(stage_err)?;
            println!(
                "semantic k-means: K={} D={} iters={} final inertia {:.3e}",
                km.k(),
                km.dim(),
                report.iterations,
                report.inertia_per_iter.last().copied().unwrap_or(0.0)
            );
        }
        Command::TrainCodec => {
            let manifest = load_manifest(&paths)?;
            let (rvq, report) = train_codec(&config, &manifest, &paths.corpus_dir(), cli.seed)?;
            save_rvq(&rvq, &paths.rvq_codebook()).map_err(stage_err)?;
            println!(
                "codec RVQ: {} levels x {} codes; residual energy per level {:?}{}",
                rvq.n_levels(),
                rvq.codebook_size(),
                report
                    .residual_energy
                    .iter()
                    .map(|e| format!("{e:.3}"))
                    .collect::<Vec<_>>(),
                if report.degenerate_levels.is_empty() {
                    String::new()
                } else {
                    format!("; degenerate levels {:?}", report.degenerate_levels)
                }
            );
        }
        Command::TrainS2ut(args) => {
            let mut config = config;
            if let Some(steps) = args.steps {
                config.train.s2ut_steps = steps;
            }
            let manifest = load_manifest(&paths)?;
            let km = load_km(&paths)?;
            let pairs = build_s2ut_pairs(&config, &manifest, &paths.corpus_dir(), &km, Split::Train)?;
            println!("training S1 on {} unit pairs", pairs.len());
            let model = train_s2ut(&config, &pairs, cli.seed, |step, m| {
                if step % 100 == 0 {
                    println!("  step {step}: loss {:.4} acc {:.3}", m.loss, m.token_accuracy);
                }
            })?;
            save_s2ut(&model, &paths.s2ut_model()).map_err(stage_err)?;
            println!("saved {}", paths.s2ut_model().display());
        }
        Command::TrainLm(args) => {
            let mut config = config;
            if let Some(steps) = args.steps {
                config.train.lm_steps = steps;
            }
            let manifest = load_manifest(&paths)?;
            let km = load_km(&paths)?;
            let rvq_ck = Checkpoint::load(&paths.rvq_codebook()).map_err(config_err)?;
            let rvq = rvq_from_checkpoint(&rvq_ck).map_err(config_err)?;
            let examples = match &args.data {
                Some(p) if p.exists() => read_records(p).map_err(config_err)?,
                maybe => {
                    let (examples, skipped) = build_lm_examples(
                        &config,
                        &manifest,
                        &paths.corpus_dir(),
                        &km,
                        &rvq,
                        Split::Train,
                    )?;
                    if skipped > 0 {
                        println!("skipped {skipped} utterances shorter than prompt + 1 s");
                    }
                    if let Some(p) = maybe {
                        write_records(p, &examples).map_err(stage_err)?;
                        println!("wrote training records to {}", p.display());
                    }
                    examples
                }
            };
            println!("training S2 on {} examples", examples.len());
            let every = args.checkpoint_every.unwrap_or(0);
            let ckpt_dir = paths.root.clone();
            let model = train_lm(&config, &examples, cli.seed, |step, m, model| {
                if step % 50 == 0 {
                    println!(
                        "  step {step}: loss {:.4} acc {:.3} gnorm {:.2}",
                        m.loss, m.token_accuracy, m.grad_norm
                    );
                }
                if every > 0 && step > 0 && step % every == 0 {
                    let p = ckpt_dir.join(format!("acoustic_lm_step{step}.ckpt"));
                    if let Err(e) = save_lm(model, &p) {
                        eprintln!("checkpoint at step {step} failed: {e}");
                    }
                }
            })?;
            save_lm(&model, &paths.lm_model()).map_err(stage_err)?;
            println!("saved {}", paths.lm_model().display());
        }
        Command::TrainVocoder(args) => {
            let mut config = config;
            if let Some(steps) = args.steps {
                config.train.vocoder_steps = steps;
            }
            let manifest = load_manifest(&paths)?;
            let rvq_ck = Checkpoint::load(&paths.rvq_codebook()).map_err(config_err)?;
            let rvq = rvq_from_checkpoint(&rvq_ck).map_err(config_err)?;
            let (gen, _disc) = train_vocoder(
                &config,
                &manifest,
                &paths.corpus_dir(),
                &rvq,
                cli.seed,
                |step, l| {
                    if step % 100 == 0 {
                        println!(
                            "  step {step}: D {:.4} G {:.4} (recon {:.4})",
                            l.disc_loss, l.gen_total, l.gen_reconstruction
                        );
                    }
                },
            )?;
            save_vocoder(&gen, &paths.vocoder_model()).map_err(stage_err)?;
            println!("saved {}", paths.vocoder_model().display());
        }
        Command::Translate(args) => {
            let ctx = PipelineContext::load(config, &paths)?;
            let wave = read_wav::<Real>(&args.input).map_err(config_err)?;
            let out = ctx.run_pipeline(&wave, cli.seed)?;
            let dir = paths.root.join("translate");
            std::fs::create_dir_all(&dir).map_err(stage_err)?;
            let stem = args
                .input
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "input".into());
            let wav_path = dir.join(format!("{stem}_translated.wav"));
            write_wav(&out.wave, &wav_path).map_err(stage_err)?;
            write_units_jsonl(
                &dir.join(format!("{stem}_units.jsonl")),
                &[
                    ("source".to_string(), out.source_units.clone()),
                    ("translated".to_string(), out.translated_units.clone()),
                ],
            )
            .map_err(stage_err)?;
            s2st_core::codec::write_codes_jsonl(
                &dir.join(format!("{stem}_codes.jsonl")),
                &[(stem.clone(), out.generated_grid.clone())],
            )
            .map_err(stage_err)?;
            println!(
                "translated {} -> {} ({} frames, stop: {:?})",
                args.input.display(),
                wav_path.display(),
                out.generated_grid.t_frames(),
                out.stop
            );
        }
        Command::TranslateUnits(args) => {
            let ctx = PipelineContext::load(config, &paths)?;
            let rows = read_units_jsonl(&args.input).map_err(config_err)?;
            let mut out_rows = Vec::with_capacity(rows.len());
            for (id, units) in rows {
                let translated = ctx
                    .s2ut
                    .translate(&units, &ctx.config.decode)
                    .map_err(stage_err)?;
                out_rows.push((id, translated));
            }
            write_units_jsonl(&args.output, &out_rows).map_err(stage_err)?;
            println!("translated {} sequences -> {}", out_rows.len(), args.output.display());
        }
        Command::Evaluate(args) => {
            let split = match args.split.as_str() {
                "train" => Split::Train,
                "valid" => Split::Valid,
                "test" => Split::Test,
                other => return Err(CliError::Config(format!("unknown split `{other}`"))),
            };
            let manifest = load_manifest(&paths)?;
            let ctx = PipelineContext::load(config, &paths)?;
            let report = ctx.evaluate(&manifest, &paths.corpus_dir(), split, cli.seed, &paths.eval_dir())?;
            println!("evaluation of split {split} ({} utterances)", report.rows.len());
            println!("  unit BLEU            {:8.2}", report.unit_bleu);
            println!("  shuffled-unit BLEU   {:8.2}", report.shuffled_unit_bleu);
            println!("  mean sim(out, src)   {:8.4}", report.mean_sim_source);
            println!("  mean sim(out, other) {:8.4}", report.mean_sim_other);
            println!("  style win rate       {:8.3}", report.style_win_rate);
            println!(
                "  {:<24} {:>9} {:>9} {:>7}",
                "utterance", "sim_src", "sim_other", "frames"
            );
            for row in &report.rows {
                println!(
                    "  {:<24} {:>9.4} {:>9.4} {:>7}",
                    row.utterance_id, row.sim_source, row.sim_other, row.generated_frames
                );
            }
            println!("report written to {}", paths.eval_report().display());
        }
    }
    Ok(())
}

/// Small helper kept for integration tests: semantic units of one WAV.
#[allow(dead_code)]
fn units_of(path: &Path, ctx: &PipelineContext) -> Result<SemanticUnitSeq, CliError> {
    let wave = read_wav::<Real>(path).map_err(config_err)?;
    semantic_units_for(&wave, &ctx.extractor, &ctx.km).map_err(config_err)
}
