//! Implementations behind the CLI verbs. Validation problems map to exit
//! code 1, runtime failures to 2.

use crate::ckpt_file::{load_checkpoint, save_checkpoint, CkptError, LoadedCheckpoint};
use crate::config_file::load_config;
use crate::manifest::{load_corpus, load_manifest};
use crate::png;
use crate::report::{
    discover_clips, ear_series_from_landmarks, evaluate, write_report, EvalInputs,
    ExtractorEmbedder,
};
use crate::synth::make_synthetic_corpus;
use crate::video::assemble_video;
use crate::wav::read_wav_mono16;
use crate::{runtime, validation, CliError};
use a2v_core::adapt::{adapt, AdaptScope, AdaptationConfig};
use a2v_core::checkpoint::config_fingerprint;
use a2v_core::config::PipelineConfig;
use a2v_core::image::IdentityImage;
use a2v_core::losses::ear_from_points;
use a2v_core::trainer::Trainer;
use a2v_core::Var;
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Table 4 row names accepted by `train --ablation`.
pub fn ablation_max_phase(flag: &str) -> Result<u8, CliError> {
    let canon: String = flag.to_ascii_uppercase().chars().filter(|c| !c.is_whitespace()).collect();
    match canon.as_str() {
        "BM" => Ok(1),
        "BM+CL+TAL" => Ok(2),
        "BM+CL+TAL+BL" => Ok(3),
        other => Err(validation(format!(
            "unknown ablation `{}` (expected BM, BM+CL+TAL or BM+CL+TAL+BL)",
            other
        ))),
    }
}

pub struct TrainOpts {
    pub config: Option<PathBuf>,
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub ablation: Option<String>,
    pub resume: Option<PathBuf>,
}

pub fn cmd_train(opts: &TrainOpts) -> Result<(), CliError> {
    let mut cfg = load_config(opts.config.as_deref()).map_err(validation)?;
    if let Some(flag) = &opts.ablation {
        cfg.train.max_phase = ablation_max_phase(flag)?;
    }
    let report = load_manifest(&opts.manifest).map_err(validation)?;
    for err in &report.errors {
        eprintln!("manifest: skipping {}: {:?}", err.clip_id, err.kind);
    }
    if report.valid.is_empty() {
        return Err(validation("no valid manifest entries"));
    }
    let corpus = load_corpus(&report.valid, &cfg.audio).map_err(validation)?;
    fs::create_dir_all(&opts.out).map_err(runtime)?;

    let mut trainer = match &opts.resume {
        None => Trainer::new(&cfg),
        Some(path) => {
            let fingerprint = config_fingerprint(&cfg);
            let loaded = load_checkpoint(path, Some(&fingerprint)).map_err(|e| match e {
                CkptError::FingerprintMismatch { .. } | CkptError::VersionUnsupported(_) => {
                    validation(e)
                }
                other => runtime(other),
            })?;
            Trainer::from_checkpoint(&cfg, &loaded.data).map_err(runtime)?
        }
    };

    let log_path = opts.out.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(runtime)?;
    let out_dir = opts.out.clone();
    let cfg_for_sink = cfg.clone();
    let mut sink_err: Option<CliError> = None;
    let reports = trainer
        .train(&corpus, |report, ckpt| {
            if sink_err.is_some() {
                return;
            }
            for (i, step) in report.step_records.iter().enumerate() {
                let line = json!({
                    "epoch": report.epoch,
                    "phase": report.phase,
                    "step": i,
                    "lr": step.lr,
                    "losses": step.losses,
                });
                if let Err(e) = writeln!(log, "{}", line) {
                    sink_err = Some(runtime(e));
                    return;
                }
            }
            let path = out_dir.join(format!("ckpt_epoch_{:04}.a2v", report.epoch));
            if let Err(e) = save_checkpoint(&path, ckpt, &cfg_for_sink, &BTreeMap::new()) {
                sink_err = Some(runtime(e));
            }
        })
        .map_err(runtime)?;
    if let Some(e) = sink_err {
        return Err(e);
    }

    let final_ckpt = trainer.export_checkpoint();
    let final_path = opts.out.join("final.a2v");
    save_checkpoint(&final_path, &final_ckpt, &cfg, &BTreeMap::new()).map_err(runtime)?;
    println!(
        "trained {} epochs (final phase {}), checkpoints in {}",
        reports.len(),
        trainer.state.phase,
        opts.out.display()
    );
    for r in &reports {
        let total = r.loss_means.get("total_gen").copied().unwrap_or(f64::NAN);
        println!(
            "  epoch {:3} phase {} lr {:.5} total_gen {:.4}",
            r.epoch, r.phase, r.lr, total
        );
    }
    Ok(())
}

/// Load an identity PNG at the configured resolution into the model range.
pub fn load_identity(path: &Path, resolution: usize) -> Result<IdentityImage, CliError> {
    let t = png::read_frame_unit(path).map_err(validation)?;
    let s = t.shape().to_vec();
    if s[1] != resolution || s[2] != resolution {
        return Err(validation(format!(
            "identity image is {}x{}, expected {}x{}",
            s[2], s[1], resolution, resolution
        )));
    }
    IdentityImage::from_pixels(t).map_err(validation)
}

pub struct GenerateOpts {
    pub ckpt: PathBuf,
    pub image: PathBuf,
    pub audio: PathBuf,
    pub out: PathBuf,
}

fn load_ckpt_any(path: &Path) -> Result<LoadedCheckpoint, CliError> {
    load_checkpoint(path, None).map_err(|e| match e {
        CkptError::VersionUnsupported(_) | CkptError::FingerprintMismatch { .. } => validation(e),
        CkptError::CorruptArchive(_) => validation(e),
        other => runtime(other),
    })
}

pub fn cmd_generate(opts: &GenerateOpts) -> Result<(), CliError> {
    let loaded = load_ckpt_any(&opts.ckpt)?;
    let cfg = loaded.config.clone();
    let trainer = Trainer::from_checkpoint(&cfg, &loaded.data).map_err(runtime)?;
    let identity = load_identity(&opts.image, cfg.gen.resolution)?;
    let audio = read_wav_mono16(&opts.audio).map_err(validation)?;
    let frames = trainer
        .generator
        .generate_video(&audio, &identity, &trainer.encoder, &cfg.audio)
        .map_err(runtime)?;
    let tensors: Vec<_> = frames.into_iter().map(|f| f.pixels).collect();
    let descriptor = assemble_video(
        &tensors,
        audio.duration_s(),
        &opts.audio.display().to_string(),
        cfg.audio.fps,
        &opts.out,
    )
    .map_err(runtime)?;
    println!("wrote {} frames and {}", tensors.len(), descriptor.display());
    Ok(())
}

pub struct AdaptOpts {
    pub ckpt: PathBuf,
    pub image: PathBuf,
    pub audio: PathBuf,
    pub epochs: usize,
    pub lr: Option<f64>,
    pub scope: String,
    pub allow_untrained: bool,
    pub out: PathBuf,
}

pub fn cmd_adapt(opts: &AdaptOpts) -> Result<(), CliError> {
    let loaded = load_ckpt_any(&opts.ckpt)?;
    let cfg = loaded.config.clone();
    let identity = load_identity(&opts.image, cfg.gen.resolution)?;
    let audio = read_wav_mono16(&opts.audio).map_err(validation)?;
    let scope = match opts.scope.as_str() {
        "all" | "all_generator" => AdaptScope::AllGenerator,
        "modulation" | "modulation_only" => AdaptScope::ModulationOnly,
        other => return Err(validation(format!("unknown scope `{}`", other))),
    };
    let acfg = AdaptationConfig {
        epochs: opts.epochs,
        lr: opts.lr.unwrap_or(cfg.train.lr / 10.0),
        scope,
        allow_untrained: opts.allow_untrained,
    };
    let (derived, outcome) = adapt(&cfg, &loaded.data, &identity, &audio, &acfg).map_err(|e| {
        match e {
            a2v_core::adapt::AdaptError::ResolutionMismatch { .. }
            | a2v_core::adapt::AdaptError::UntrainedCheckpoint { .. } => validation(e),
            other => runtime(other),
        }
    })?;
    let mut meta = BTreeMap::new();
    meta.insert("derived_from".to_string(), loaded.data.config_fingerprint.clone());
    meta.insert(
        "adaptation".to_string(),
        serde_json::to_string(&acfg).expect("adapt config serialises"),
    );
    save_checkpoint(&opts.out, &derived, &cfg, &meta).map_err(runtime)?;
    println!(
        "adapted {} epochs: clip perceptual loss {:.6} -> {:.6}; wrote {}",
        outcome.epochs_run,
        outcome.initial_loss,
        outcome.final_loss,
        opts.out.display()
    );
    Ok(())
}

pub struct EvaluateOpts {
    pub generated: PathBuf,
    pub reference: PathBuf,
    pub report: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub wer_file: Option<PathBuf>,
}

pub fn cmd_evaluate(opts: &EvaluateOpts) -> Result<(), CliError> {
    let generated = discover_clips(&opts.generated).map_err(validation)?;
    let reference = discover_clips(&opts.reference).map_err(validation)?;

    // EAR series: ground truth on the reference side when a manifest
    // supplied landmarks, regressor-based on the generated side when a
    // checkpoint is available.
    let mut ref_ears = BTreeMap::new();
    if opts.reference.extension().map(|e| e == "json").unwrap_or(false) {
        let m = load_manifest(&opts.reference).map_err(validation)?;
        for v in &m.valid {
            if let Some(lm_path) = &v.landmark_file {
                let text = fs::read_to_string(lm_path).map_err(runtime)?;
                let rows: Vec<[f64; 24]> = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| {
                        let vals: Vec<f64> =
                            l.split_whitespace().filter_map(|t| t.parse().ok()).collect();
                        std::array::from_fn(|i| vals[i])
                    })
                    .collect();
                ref_ears.insert(v.entry.clip_id.clone(), ear_series_from_landmarks(&rows));
            }
        }
    }

    let loaded = match &opts.ckpt {
        Some(p) => Some(load_ckpt_any(p)?),
        None => None,
    };
    let trainer = match &loaded {
        Some(l) => Some(Trainer::from_checkpoint(&l.config, &l.data).map_err(runtime)?),
        None => None,
    };
    let mut gen_ears = BTreeMap::new();
    if let Some(t) = &trainer {
        for (id, frames) in &generated {
            let mut series = Vec::with_capacity(frames.len());
            let mut ok = true;
            for f in frames {
                match png::read_frame_unit(f) {
                    Ok(tensor) => {
                        let s = tensor.shape().to_vec();
                        if s[1] != t.cfg.gen.resolution {
                            ok = false;
                            break;
                        }
                        let x = Var::input(tensor.reshaped(&[1, 3, s[1], s[2]]));
                        let pts = t.landmark_reg.predict(&x);
                        series.push(ear_from_points(&pts).item());
                    }
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                gen_ears.insert(id.clone(), series);
            }
        }
    }

    let mut wer = BTreeMap::new();
    if let Some(path) = &opts.wer_file {
        let text = fs::read_to_string(path).map_err(validation)?;
        let map: BTreeMap<String, f64> =
            serde_json::from_str(&text).map_err(|e| validation(format!("wer file: {}", e)))?;
        wer = map;
    }

    // Default embedder: the frozen perceptual extractor (from the checkpoint
    // when given); explicitly labelled as not comparable to published
    // numbers.
    let fallback_extractor =
        a2v_core::losses::ConvPyramidExtractor::new(&mut a2v_core::nn::seeded_rng(0, 6));
    let (extractor, label): (&dyn a2v_core::losses::FeatureExtractor, String) = match &trainer {
        Some(t) => (
            &t.extractor,
            format!("conv-pyramid[{}] (not comparable to published numbers)", loaded.as_ref().unwrap().data.config_fingerprint),
        ),
        None => (&fallback_extractor, "conv-pyramid-random[seed 0] (not comparable to published numbers)".to_string()),
    };
    let embedder = ExtractorEmbedder { extractor, label };

    let inputs = EvalInputs { generated, reference, embedder: &embedder, ref_ears, gen_ears, wer };
    let (records, aggregate) = evaluate(&inputs);
    write_report(&opts.report, &records, &aggregate).map_err(runtime)?;
    println!(
        "evaluated {} clips ({} with errors); report at {}",
        aggregate.clips,
        aggregate.clips_with_errors,
        opts.report.display()
    );
    if aggregate.clips_with_errors > 0 {
        return Err(validation(format!(
            "{} clips had error records",
            aggregate.clips_with_errors
        )));
    }
    Ok(())
}

pub fn cmd_synth_data(n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if n == 0 {
        return Err(validation("--n must be at least 1"));
    }
    let manifest = make_synthetic_corpus(n, seed, out).map_err(runtime)?;
    println!("wrote {} clips, manifest at {}", n, manifest.display());
    Ok(())
}

pub fn cmd_inspect(path: &Path) -> Result<(), CliError> {
    let loaded = load_ckpt_any(path)?;
    let state = &loaded.data.state;
    println!("version:      {}", loaded.data.version);
    println!("fingerprint:  {}", loaded.data.config_fingerprint);
    println!("phase:        {}", state.phase);
    println!("epoch:        {}", state.epoch);
    println!("halted:       {}", state.halted);
    println!("active:       {}", state.active_losses.join(", "));
    let params: usize = loaded
        .data
        .tensors
        .iter()
        .filter(|(k, _)| !k.starts_with("opt."))
        .map(|(_, t)| t.numel())
        .sum();
    println!("tensors:      {} ({} parameters)", loaded.data.tensors.len(), params);
    if !loaded.meta.is_empty() {
        println!("meta:");
        for (k, v) in &loaded.meta {
            println!("  {}: {}", k, v);
        }
    }
    for (name, hist) in &state.loss_history {
        let tail: Vec<String> = hist.iter().rev().take(5).rev().map(|v| format!("{:.4}", v)).collect();
        println!("history {:12} [{}]", name, tail.join(", "));
    }
    Ok(())
}
