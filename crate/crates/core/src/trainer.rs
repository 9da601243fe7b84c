//! Three-phase curriculum training: alternating discriminator/generator
//! updates, the lr schedule, plateau-driven phase transitions and bit-exact
//! checkpointing.

use crate::audio::{AudioError, ContentEncoder};
use crate::autograd::Var;
use crate::checkpoint::{config_fingerprint, CheckpointData, CurriculumState, CHECKPOINT_VERSION};
use crate::config::PipelineConfig;
use crate::data::Corpus;
use crate::disc::{
    crop_lower_half_resized, DiscError, FrameDiscriminator, SyncDiscriminator,
    TemporalDiscriminator,
};
use crate::generator::{GenError, SpadeGenerator};
use crate::losses::{
    blink_loss_var, contrastive_loss, ear_from_points, feature_matching_loss, gan_loss, mean_ear,
    perceptual_loss, reconstruction_loss, ConvPyramidExtractor, GanSide, LossError, LossWeights,
};
use crate::losses::LandmarkRegressor;
use crate::nn::{seeded_rng, Adam, ParamSet};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid curriculum phase {0} (expected 1..=3)")]
    InvalidPhase(u8),
    #[error("clip `{clip}` has no eye landmarks but phase 3 requires them")]
    MissingLandmarks { clip: String },
    #[error("non-finite loss at epoch {epoch} step {step} (phase {phase}): {diagnostics}")]
    NonFinite { epoch: u32, phase: u8, step: usize, diagnostics: String },
    #[error("clip `{clip}` too short for sync sampling: {frames} frames < {needed}")]
    ClipTooShort { clip: String, frames: usize, needed: usize },
    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Disc(#[from] DiscError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// The optimisation schedule constants.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub constant_epochs: u32,
    pub decay_epochs: u32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr0: 0.002, beta1: 0.0, beta2: 0.90, constant_epochs: 50, decay_epochs: 100 }
    }
}

/// Constant for `constant_epochs`, then linear decay to zero over
/// `decay_epochs`, then zero.
pub fn lr_schedule(epoch: u32, cfg: &OptimizerConfig) -> f64 {
    if epoch < cfg.constant_epochs {
        cfg.lr0
    } else if epoch < cfg.constant_epochs + cfg.decay_epochs {
        cfg.lr0 * (1.0 - (epoch - cfg.constant_epochs) as f64 / cfg.decay_epochs as f64)
    } else {
        0.0
    }
}

pub const LOSS_IDS_PHASE1: [&str; 3] = ["gan_frame", "fm", "pl"];
pub const LOSS_IDS_PHASE2: [&str; 3] = ["rl", "cl", "tal"];
pub const LOSS_IDS_PHASE3: [&str; 1] = ["bl"];

/// The strictly nested active-loss sets of the curriculum.
pub fn phase_losses(phase: u8) -> Result<Vec<&'static str>, TrainError> {
    let mut set: Vec<&str> = LOSS_IDS_PHASE1.to_vec();
    match phase {
        1 => {}
        2 => set.extend(LOSS_IDS_PHASE2),
        3 => {
            set.extend(LOSS_IDS_PHASE2);
            set.extend(LOSS_IDS_PHASE3);
        }
        p => return Err(TrainError::InvalidPhase(p)),
    }
    Ok(set)
}

/// True when the tail of `history` has stabilised: with at least `window`
/// entries, the spread of the trailing entries after the window's first
/// (which may still be a transient) stays within `rel_tol` of the window
/// mean's magnitude.
pub fn plateau_detect(history: &[f64], window: usize, rel_tol: f64) -> bool {
    if history.len() < window || window < 2 || rel_tol <= 0.0 {
        return false;
    }
    let tail = &history[history.len() - window..];
    let mean = tail.iter().sum::<f64>() / window as f64;
    let settled = &tail[1..];
    let max = settled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = settled.iter().cloned().fold(f64::INFINITY, f64::min);
    (max - min) <= rel_tol * mean.abs()
}

/// Per-step record of raw loss values (plus the weighted generator total).
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub losses: BTreeMap<String, f64>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: u32,
    pub phase: u8,
    pub lr: f64,
    pub steps: usize,
    pub loss_means: BTreeMap<String, f64>,
    pub step_records: Vec<StepRecord>,
}

struct Sample {
    clip: usize,
    k: usize,
    neg: usize,
}

pub struct Trainer {
    pub cfg: PipelineConfig,
    pub generator: SpadeGenerator,
    pub encoder: ContentEncoder,
    pub frame_disc: FrameDiscriminator,
    pub temporal_disc: TemporalDiscriminator,
    pub sync_disc: SyncDiscriminator,
    pub extractor: ConvPyramidExtractor,
    pub landmark_reg: LandmarkRegressor,
    opt_gen: Adam,
    opt_enc: Adam,
    opt_frame: Adam,
    opt_temporal: Adam,
    opt_sync: Adam,
    opt_landmark: Adam,
    pub state: CurriculumState,
}

/// Network namespaces inside the checkpoint archive.
const NET_PREFIXES: [&str; 7] = [
    "gen",
    "audio_enc",
    "disc.frame",
    "disc.temporal",
    "disc.sync",
    "extractor",
    "landmark",
];

impl Trainer {
    pub fn new(cfg: &PipelineConfig) -> Trainer {
        let seed = cfg.train.seed;
        let generator = SpadeGenerator::new(&cfg.gen, &mut seeded_rng(seed, 1));
        let encoder = ContentEncoder::new(&cfg.audio, &mut seeded_rng(seed, 2));
        let frame_disc = FrameDiscriminator::new(&cfg.disc, cfg.gen.resolution, &mut seeded_rng(seed, 3));
        let temporal_disc =
            TemporalDiscriminator::new(&cfg.disc, cfg.gen.resolution, &mut seeded_rng(seed, 4));
        let sync_disc = SyncDiscriminator::new(
            &cfg.disc,
            cfg.audio.mfcc_frames(),
            cfg.audio.n_mfcc,
            &mut seeded_rng(seed, 5),
        );
        let extractor = ConvPyramidExtractor::new(&mut seeded_rng(seed, 6));
        let landmark_reg = LandmarkRegressor::new(cfg.gen.resolution, &mut seeded_rng(seed, 7));
        let (b1, b2) = (cfg.train.beta1, cfg.train.beta2);
        let state = CurriculumState {
            phase: 1,
            epoch: 0,
            phase_start_epoch: 0,
            active_losses: phase_losses(1).unwrap().iter().map(|s| s.to_string()).collect(),
            loss_history: BTreeMap::new(),
            rng_seed: seed,
            halted: false,
        };
        Trainer {
            opt_gen: Adam::new(&generator.params, b1, b2),
            opt_enc: Adam::new(&encoder.params, b1, b2),
            opt_frame: Adam::new(&frame_disc.params, b1, b2),
            opt_temporal: Adam::new(&temporal_disc.params, b1, b2),
            opt_sync: Adam::new(&sync_disc.params, b1, b2),
            opt_landmark: Adam::new(&landmark_reg.params, b1, b2),
            cfg: cfg.clone(),
            generator,
            encoder,
            frame_disc,
            temporal_disc,
            sync_disc,
            extractor,
            landmark_reg,
            state,
        }
    }

    fn param_sets(&self) -> [(&str, &ParamSet); 7] {
        [
            ("gen", &self.generator.params),
            ("audio_enc", &self.encoder.params),
            ("disc.frame", &self.frame_disc.params),
            ("disc.temporal", &self.temporal_disc.params),
            ("disc.sync", &self.sync_disc.params),
            ("extractor", &self.extractor.params),
            ("landmark", &self.landmark_reg.params),
        ]
    }

    fn optimizers(&mut self) -> [(&str, &mut Adam); 6] {
        [
            ("gen", &mut self.opt_gen),
            ("audio_enc", &mut self.opt_enc),
            ("disc.frame", &mut self.opt_frame),
            ("disc.temporal", &mut self.opt_temporal),
            ("disc.sync", &mut self.opt_sync),
            ("landmark", &mut self.opt_landmark),
        ]
    }

    /// Snapshot everything a bit-exact resume needs.
    pub fn export_checkpoint(&mut self) -> CheckpointData {
        let mut tensors = BTreeMap::new();
        for (prefix, set) in self.param_sets() {
            for (name, value) in set.export() {
                tensors.insert(format!("{}.{}", prefix, name), value);
            }
        }
        let param_names: BTreeMap<String, Vec<String>> = self
            .param_sets()
            .iter()
            .map(|(p, s)| (p.to_string(), s.entries().iter().map(|(n, _)| n.clone()).collect()))
            .collect();
        for (net, opt) in self.optimizers() {
            let names = &param_names[net];
            for (i, n) in names.iter().enumerate() {
                tensors.insert(format!("opt.{}.m.{}", net, n), opt.m[i].clone());
                tensors.insert(format!("opt.{}.v.{}", net, n), opt.v[i].clone());
            }
            tensors.insert(format!("opt.{}.t", net), Tensor::scalar(opt.step_count as f64));
        }
        CheckpointData {
            version: CHECKPOINT_VERSION,
            config_fingerprint: config_fingerprint(&self.cfg),
            state: self.state.clone(),
            tensors,
        }
    }

    /// Rebuild a trainer from a checkpoint produced under the same config.
    pub fn from_checkpoint(cfg: &PipelineConfig, ckpt: &CheckpointData) -> Result<Trainer, TrainError> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        let mut trainer = Trainer::new(cfg);
        trainer.load_checkpoint(ckpt)?;
        Ok(trainer)
    }

    pub fn load_checkpoint(&mut self, ckpt: &CheckpointData) -> Result<(), TrainError> {
        for prefix in NET_PREFIXES {
            let sub: BTreeMap<String, Tensor> = ckpt
                .tensors
                .iter()
                .filter_map(|(k, v)| {
                    k.strip_prefix(&format!("{}.", prefix)).and_then(|rest| {
                        // optimiser tensors live under opt.*; parameter names
                        // never start with another net prefix
                        if prefix == "disc.frame" || prefix == "disc.temporal" || prefix == "disc.sync" {
                            Some((rest.to_string(), v.clone()))
                        } else if k.starts_with("opt.") || k.starts_with("disc.") && !prefix.starts_with("disc.") {
                            None
                        } else {
                            Some((rest.to_string(), v.clone()))
                        }
                    })
                })
                .collect();
            let set = match prefix {
                "gen" => &self.generator.params,
                "audio_enc" => &self.encoder.params,
                "disc.frame" => &self.frame_disc.params,
                "disc.temporal" => &self.temporal_disc.params,
                "disc.sync" => &self.sync_disc.params,
                "extractor" => &self.extractor.params,
                "landmark" => &self.landmark_reg.params,
                _ => unreachable!(),
            };
            set.load(&sub).map_err(TrainError::Checkpoint)?;
        }
        let param_names: BTreeMap<String, Vec<String>> = self
            .param_sets()
            .iter()
            .map(|(p, s)| (p.to_string(), s.entries().iter().map(|(n, _)| n.clone()).collect()))
            .collect();
        for (net, opt) in self.optimizers() {
            let names = &param_names[net];
            for (i, n) in names.iter().enumerate() {
                let m = ckpt
                    .tensors
                    .get(&format!("opt.{}.m.{}", net, n))
                    .ok_or_else(|| TrainError::Checkpoint(format!("missing opt.{}.m.{}", net, n)))?;
                let v = ckpt
                    .tensors
                    .get(&format!("opt.{}.v.{}", net, n))
                    .ok_or_else(|| TrainError::Checkpoint(format!("missing opt.{}.v.{}", net, n)))?;
                opt.m[i] = m.clone();
                opt.v[i] = v.clone();
            }
            let t = ckpt
                .tensors
                .get(&format!("opt.{}.t", net))
                .ok_or_else(|| TrainError::Checkpoint(format!("missing opt.{}.t", net)))?;
            opt.step_count = t.item() as u64;
        }
        self.state = ckpt.state.clone();
        Ok(())
    }

    fn optimizer_cfg(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr0: self.cfg.train.lr,
            beta1: self.cfg.train.beta1,
            beta2: self.cfg.train.beta2,
            constant_epochs: self.cfg.train.lr_constant_epochs,
            decay_epochs: self.cfg.train.lr_decay_epochs,
        }
    }

    fn current_lr(&self) -> f64 {
        let clock = if self.cfg.train.lr_restart_per_phase {
            self.state.epoch - self.state.phase_start_epoch
        } else {
            self.state.epoch
        };
        lr_schedule(clock, &self.optimizer_cfg())
    }

    /// All (clip, frame) samples usable for a window-based step.
    fn sample_space(&self, corpus: &Corpus) -> Result<Vec<(usize, usize)>, TrainError> {
        let l = self.cfg.disc.temporal_window;
        let shift = self.cfg.disc.sync_negative_shift;
        let mut out = Vec::new();
        for (ci, clip) in corpus.clips.iter().enumerate() {
            let needed = l + shift;
            if clip.n_frames() < needed {
                return Err(TrainError::ClipTooShort {
                    clip: clip.id.clone(),
                    frames: clip.n_frames(),
                    needed,
                });
            }
            for k in (l - 1)..clip.n_frames() {
                out.push((ci, k));
            }
        }
        Ok(out)
    }

    /// Deterministic batch schedule for one epoch.
    fn epoch_samples(
        &self,
        corpus: &Corpus,
        epoch: u32,
        steps: usize,
    ) -> Result<Vec<Vec<Sample>>, TrainError> {
        let mut space = self.sample_space(corpus)?;
        let mut rng = seeded_rng(self.state.rng_seed, 1000 + epoch as u64);
        space.shuffle(&mut rng);
        let b = self.cfg.train.batch_size;
        let shift = self.cfg.disc.sync_negative_shift;
        let mut batches = Vec::with_capacity(steps);
        let mut cursor = 0usize;
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(b);
            for _ in 0..b {
                if cursor >= space.len() {
                    cursor = 0;
                    space.shuffle(&mut rng);
                }
                let (clip, k) = space[cursor];
                cursor += 1;
                // mismatched audio window at least `shift` frames away
                let len = corpus.clips[clip].n_frames();
                let neg = loop {
                    let j = rng.gen_range(0..len);
                    if j.abs_diff(k) >= shift {
                        break j;
                    }
                };
                batch.push(Sample { clip, k, neg });
            }
            batches.push(batch);
        }
        Ok(batches)
    }

    fn steps_for_epoch(&self, corpus: &Corpus) -> Result<usize, TrainError> {
        if self.cfg.train.steps_per_epoch > 0 {
            return Ok(self.cfg.train.steps_per_epoch);
        }
        let total = self.sample_space(corpus)?.len();
        Ok(total.div_ceil(self.cfg.train.batch_size))
    }

    /// One optimisation step: discriminator updates (all active adversaries)
    /// followed by one generator update over the active loss set.
    fn train_step(&mut self, corpus: &Corpus, batch: &[Sample], lr: f64, step: usize) -> Result<StepRecord, TrainError> {
        let phase = self.state.phase;
        let b = batch.len();
        let res = self.cfg.gen.resolution;
        let l = self.cfg.disc.temporal_window;
        let fpw = self.cfg.audio.mfcc_frames();
        let n_mfcc = self.cfg.audio.n_mfcc;
        let weights = LossWeights::from(&self.cfg.loss);
        let id_frame = self.cfg.train.identity_frame;

        // ---- assemble batch tensors ----
        let mut identity = Vec::with_capacity(b * 3 * res * res);
        let mut target = Vec::with_capacity(b * 3 * res * res);
        let mut real_window = Vec::with_capacity(b * l * 3 * res * res);
        let mut window_mfcc = Vec::with_capacity(b * l * fpw * n_mfcc);
        let mut k_mfcc = Vec::with_capacity(b * fpw * n_mfcc);
        let mut neg_mfcc = Vec::with_capacity(b * fpw * n_mfcc);
        let mut real_ears = Vec::with_capacity(b);
        for s in batch {
            let clip = &corpus.clips[s.clip];
            let idf = id_frame.min(clip.n_frames() - 1);
            identity.extend_from_slice(clip.frame_tensor(idf).data());
            target.extend_from_slice(clip.frame_tensor(s.k).data());
            for j in (s.k + 1 - l)..=s.k {
                real_window.extend_from_slice(clip.frame_tensor(j).data());
                window_mfcc.extend_from_slice(corpus.mfcc[s.clip][j].data());
            }
            k_mfcc.extend_from_slice(corpus.mfcc[s.clip][s.k].data());
            neg_mfcc.extend_from_slice(corpus.mfcc[s.clip][s.neg].data());
            if phase == 3 {
                let rows = clip.landmarks.as_ref().ok_or_else(|| TrainError::MissingLandmarks {
                    clip: clip.id.clone(),
                })?;
                let lm = rows[s.k];
                let left: [[f64; 2]; 6] = std::array::from_fn(|i| [lm[2 * i], lm[2 * i + 1]]);
                let right: [[f64; 2]; 6] = std::array::from_fn(|i| [lm[12 + 2 * i], lm[13 + 2 * i]]);
                real_ears.push(mean_ear(&crate::losses::EyeLandmarks { left, right })?);
            }
        }
        let identity = Var::input(Tensor::from_vec(&[b, 3, res, res], identity));
        let target = Var::input(Tensor::from_vec(&[b, 3, res, res], target));
        let real_window = Var::input(Tensor::from_vec(&[b, l * 3, res, res], real_window));
        let k_mfcc = Var::input(Tensor::from_vec(&[b, fpw, n_mfcc], k_mfcc));
        let neg_mfcc = Var::input(Tensor::from_vec(&[b, fpw, n_mfcc], neg_mfcc));

        // ---- generator forward ----
        // Phase 1 renders only frame k; later phases render the whole window.
        let (fake_k, fake_window) = if phase == 1 {
            let emb = self.encoder.encode_batch(&k_mfcc);
            (self.generator.forward_batch(&emb, &identity)?, None)
        } else {
            let window_mfcc = Var::input(Tensor::from_vec(&[b * l, fpw, n_mfcc], window_mfcc));
            let emb = self.encoder.encode_batch(&window_mfcc);
            // every window frame conditions on its clip's identity
            let id_rep = {
                let src = identity.value();
                let mut data = Vec::with_capacity(b * l * 3 * res * res);
                for i in 0..b {
                    for _ in 0..l {
                        data.extend_from_slice(
                            &src.data()[i * 3 * res * res..(i + 1) * 3 * res * res],
                        );
                    }
                }
                Var::input(Tensor::from_vec(&[b * l, 3, res, res], data))
            };
            let frames = self.generator.forward_batch(&emb, &id_rep)?; // [b*l,3,res,res]
            let window = frames.reshape(&[b, l * 3, res, res]);
            let k_frame = window.narrow(1, (l - 1) * 3, 3);
            (k_frame, Some(window))
        };

        let mut losses: BTreeMap<String, f64> = BTreeMap::new();

        // ---- discriminator updates ----
        let fake_k_detached = fake_k.detach();
        self.frame_disc.params.zero_grads();
        let real_out = self.frame_disc.forward(&target, &identity)?;
        let fake_out = self.frame_disc.forward(&fake_k_detached, &identity)?;
        let d_frame = gan_loss(&real_out, &fake_out, GanSide::Discriminator);
        losses.insert("d_frame".into(), d_frame.item());
        d_frame.backward();
        self.opt_frame.step(&self.frame_disc.params, lr);

        if phase >= 2 {
            let fake_window = fake_window.as_ref().unwrap();
            self.temporal_disc.params.zero_grads();
            let real_t = self.temporal_disc.forward(&real_window)?;
            let fake_t = self.temporal_disc.forward(&fake_window.detach())?;
            let d_temporal = gan_loss(&real_t, &fake_t, GanSide::Discriminator);
            losses.insert("d_temporal".into(), d_temporal.item());
            d_temporal.backward();
            self.opt_temporal.step(&self.temporal_disc.params, lr);

            // sync: matched real pairs vs audio shifted within the clip
            let sync_frozen = self.cfg.train.freeze_sync_after_phase2 && phase >= 3;
            if !sync_frozen {
                self.sync_disc.params.zero_grads();
                let crops = crop_lower_half_resized(&real_window, self.cfg.disc.sync_resolution);
                let v = self.sync_disc.embed_video(&crops)?;
                let a_pos = self.sync_disc.embed_audio(&k_mfcc)?;
                let a_neg = self.sync_disc.embed_audio(&neg_mfcc)?;
                let v2 = Var::concat(&[v.clone(), v], 0);
                let a = Var::concat(&[a_pos, a_neg], 0);
                let mut y = vec![true; b];
                y.extend(vec![false; b]);
                let d_sync = contrastive_loss(&v2, &a, &y, weights.margin)?;
                losses.insert("d_sync".into(), d_sync.item());
                d_sync.backward();
                self.opt_sync.step(&self.sync_disc.params, lr);
            }
        }

        // landmark regressor trains on real frames while ground truth is in
        // scope (phases 1-2), then freezes
        if phase <= 2 {
            if let Some(lm) = batch
                .iter()
                .map(|s| corpus.clips[s.clip].landmark_tensor(s.k))
                .collect::<Option<Vec<_>>>()
            {
                let mut truth = Vec::with_capacity(b * 24);
                for t in &lm {
                    truth.extend_from_slice(t.data());
                }
                let truth = Tensor::from_vec(&[b, 12, 2], truth);
                self.landmark_reg.params.zero_grads();
                let lm_loss = self.landmark_reg.training_loss(&target, &truth);
                losses.insert("landmark".into(), lm_loss.item());
                lm_loss.backward();
                self.opt_landmark.step(&self.landmark_reg.params, lr);
            }
        }

        // ---- generator update ----
        self.generator.params.zero_grads();
        self.encoder.params.zero_grads();
        let real_out = self.frame_disc.forward(&target, &identity)?;
        let fake_out = self.frame_disc.forward(&fake_k, &identity)?;
        let gan_g = gan_loss(&real_out, &fake_out, GanSide::Generator);
        let fm = feature_matching_loss(&real_out.features, &fake_out.features)?;
        let pl = perceptual_loss(&target, &fake_k, &self.extractor, weights.pl);
        losses.insert("gan_frame".into(), gan_g.item());
        losses.insert("fm".into(), fm.item());
        losses.insert("pl".into(), pl.item() / weights.pl.max(1e-12));
        let mut total = gan_g.scale(weights.gan).add(&fm.scale(weights.fm)).add(&pl);

        if phase >= 2 {
            let fake_window = fake_window.as_ref().unwrap();
            let rl = reconstruction_loss(&target, &fake_k)?;
            let fake_t = self.temporal_disc.forward(fake_window)?;
            let real_t = self.temporal_disc.forward(&real_window)?;
            let tal = gan_loss(&real_t, &fake_t, GanSide::Generator);
            let crops = crop_lower_half_resized(fake_window, self.cfg.disc.sync_resolution);
            let v = self.sync_disc.embed_video(&crops)?;
            let a = self.sync_disc.embed_audio(&k_mfcc)?.detach();
            let cl = contrastive_loss(&v, &a, &vec![true; b], weights.margin)?;
            losses.insert("rl".into(), rl.item());
            losses.insert("tal".into(), tal.item());
            losses.insert("cl".into(), cl.item());
            total = total
                .add(&rl.scale(weights.rl))
                .add(&tal.scale(weights.tal))
                .add(&cl.scale(weights.cl));
        }

        if phase >= 3 {
            let real_ear = Var::input(Tensor::from_vec(&[b, 1], real_ears));
            let mut gen_ear = ear_from_points(&self.landmark_reg.predict(&fake_k));
            if !self.cfg.loss.blink_gradient {
                gen_ear = gen_ear.detach();
            }
            let bl = blink_loss_var(&real_ear, &gen_ear);
            losses.insert("bl".into(), bl.item());
            total = total.add(&bl.scale(weights.bl));
        }

        losses.insert("total_gen".into(), total.item());
        if losses.values().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                epoch: self.state.epoch,
                phase,
                step,
                diagnostics: format!("{:?}", losses),
            });
        }
        total.backward();
        self.opt_gen.step(&self.generator.params, lr);
        self.opt_enc.step(&self.encoder.params, lr);

        Ok(StepRecord { losses, lr })
    }

    /// Run one epoch; returns its report.
    pub fn run_epoch(&mut self, corpus: &Corpus) -> Result<EpochReport, TrainError> {
        let steps = self.steps_for_epoch(corpus)?;
        let lr = self.current_lr();
        let batches = self.epoch_samples(corpus, self.state.epoch, steps)?;
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut step_records = Vec::with_capacity(batches.len());
        for (i, batch) in batches.iter().enumerate() {
            let record = self.train_step(corpus, batch, lr, i)?;
            for (k, v) in &record.losses {
                *sums.entry(k.clone()).or_default() += v;
                *counts.entry(k.clone()).or_default() += 1;
            }
            step_records.push(record);
        }
        let loss_means: BTreeMap<String, f64> =
            sums.into_iter().map(|(k, v)| (v / counts[&k] as f64, k)).map(|(v, k)| (k, v)).collect();
        for (k, v) in &loss_means {
            self.state.loss_history.entry(k.clone()).or_default().push(*v);
        }
        let report = EpochReport {
            epoch: self.state.epoch,
            phase: self.state.phase,
            lr,
            steps,
            loss_means,
            step_records,
        };
        self.state.epoch += 1;
        self.maybe_advance_phase();
        Ok(report)
    }

    /// Phase moves forward when its losses plateau (after the minimum epoch
    /// count) or the phase cap is hit; it never moves backwards.
    fn maybe_advance_phase(&mut self) {
        let max_phase = self.cfg.train.max_phase.clamp(1, 3);
        if self.state.phase >= max_phase {
            return;
        }
        let in_phase = self.state.epoch - self.state.phase_start_epoch;
        let cap = self.cfg.train.max_epochs_per_phase[(self.state.phase - 1) as usize];
        let min = self.cfg.train.min_epochs_per_phase;
        let plateaued = in_phase >= min
            && self.state.active_losses.iter().all(|id| {
                self.state
                    .loss_history
                    .get(id)
                    .map(|h| {
                        plateau_detect(h, self.cfg.train.plateau_window, self.cfg.train.plateau_rel_tol)
                    })
                    .unwrap_or(false)
            });
        if plateaued || in_phase >= cap {
            self.state.phase += 1;
            self.state.phase_start_epoch = self.state.epoch;
            self.state.active_losses = phase_losses(self.state.phase)
                .unwrap()
                .iter()
                .map(|s| s.to_string())
                .collect();
        }
    }

    /// True once the current phase (at the curriculum cap) has exhausted its
    /// epoch budget.
    pub fn finished(&self) -> bool {
        let max_phase = self.cfg.train.max_phase.clamp(1, 3);
        if self.state.halted {
            return true;
        }
        self.state.phase >= max_phase
            && self.state.epoch - self.state.phase_start_epoch
                >= self.cfg.train.max_epochs_per_phase[(max_phase - 1) as usize]
    }

    /// Full curriculum run: phases 1..=max_phase with per-epoch checkpoints
    /// delivered through `sink`. Training halts once the lr schedule reaches
    /// zero.
    pub fn train(
        &mut self,
        corpus: &Corpus,
        mut sink: impl FnMut(&EpochReport, &CheckpointData),
    ) -> Result<Vec<EpochReport>, TrainError> {
        let mut reports = Vec::new();
        while !self.finished() {
            if self.current_lr() <= 0.0 {
                self.state.halted = true;
                break;
            }
            let report = self.run_epoch(corpus)?;
            let ckpt = self.export_checkpoint();
            sink(&report, &ckpt);
            reports.push(report);
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::*;
    use crate::data::Clip;
    use crate::audio::Waveform;

    #[test]
    fn lr_schedule_paper_values() {
        let cfg = OptimizerConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.002);
        assert_eq!(lr_schedule(49, &cfg), 0.002);
        assert!((lr_schedule(100, &cfg) - 0.001).abs() < 1e-15);
        assert_eq!(lr_schedule(150, &cfg), 0.0);
        assert_eq!(lr_schedule(1000, &cfg), 0.0);
        // non-increasing, piecewise linear
        let mut last = f64::INFINITY;
        for e in 0..200 {
            let lr = lr_schedule(e, &cfg);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn phase_loss_sets_nested() {
        assert_eq!(phase_losses(1).unwrap(), vec!["gan_frame", "fm", "pl"]);
        assert_eq!(
            phase_losses(2).unwrap(),
            vec!["gan_frame", "fm", "pl", "rl", "cl", "tal"]
        );
        assert_eq!(
            phase_losses(3).unwrap(),
            vec!["gan_frame", "fm", "pl", "rl", "cl", "tal", "bl"]
        );
        assert!(matches!(phase_losses(0), Err(TrainError::InvalidPhase(0))));
        assert!(matches!(phase_losses(4), Err(TrainError::InvalidPhase(4))));
        // strictly nested
        let p1 = phase_losses(1).unwrap();
        let p2 = phase_losses(2).unwrap();
        let p3 = phase_losses(3).unwrap();
        assert!(p1.iter().all(|l| p2.contains(l)) && p2.len() > p1.len());
        assert!(p2.iter().all(|l| p3.contains(l)) && p3.len() > p2.len());
    }

    #[test]
    fn plateau_rule_examples() {
        assert!(plateau_detect(&[1.0, 0.99, 0.985, 0.984, 0.9835], 5, 0.01));
        assert!(!plateau_detect(&[1.0, 0.5, 0.25], 5, 0.01));
        assert!(!plateau_detect(&[1.0, 0.8, 0.6, 0.4, 0.2], 5, 0.01));
        // zero tolerance disables
        assert!(!plateau_detect(&[1.0, 1.0, 1.0, 1.0, 1.0], 5, 0.0));
    }

    /// Tiny deterministic corpus: flat-coloured frames whose lower half
    /// brightness tracks the audio envelope, plus synthetic landmarks.
    pub fn tiny_corpus(n_clips: usize, n_frames: usize) -> Corpus {
        let audio_cfg = AudioConfig::default();
        let sr = 16_000usize;
        let res = 64usize;
        let clips: Vec<Clip> = (0..n_clips)
            .map(|ci| {
                let n = n_frames * sr / 25;
                let samples: Vec<f64> = (0..n)
                    .map(|i| {
                        let t = i as f64 / sr as f64;
                        let env = 0.3 + 0.25 * (2.0 * std::f64::consts::PI * (1.3 + ci as f64 * 0.2) * t).sin();
                        env * (2.0 * std::f64::consts::PI * 330.0 * t).sin()
                    })
                    .collect();
                let audio = Waveform::new(samples.clone(), sr as u32).unwrap();
                let frames: Vec<Vec<u8>> = (0..n_frames)
                    .map(|k| {
                        let c = k * sr / 25 + sr / 50;
                        let lo = c.saturating_sub(320);
                        let hi = (c + 320).min(n);
                        let rms = (samples[lo..hi].iter().map(|s| s * s).sum::<f64>()
                            / (hi - lo) as f64)
                            .sqrt();
                        let bright = (rms * 400.0).min(255.0) as u8;
                        let mut f = vec![120u8; 3 * res * res];
                        for y in res / 2..res {
                            for x in 0..res {
                                f[y * res + x] = bright;
                            }
                        }
                        f
                    })
                    .collect();
                let lm = vec![
                    {
                        let mut row = [0.0; 24];
                        for (i, v) in [
                            [20.0, 24.0], [22.0, 22.0], [26.0, 22.0], [28.0, 24.0], [26.0, 26.0], [22.0, 26.0],
                            [36.0, 24.0], [38.0, 22.0], [42.0, 22.0], [44.0, 24.0], [42.0, 26.0], [38.0, 26.0],
                        ]
                        .iter()
                        .flatten()
                        .enumerate()
                        {
                            row[i] = *v;
                        }
                        row
                    };
                    n_frames
                ];
                Clip {
                    id: format!("clip{}", ci),
                    frames,
                    resolution: res,
                    audio,
                    landmarks: Some(lm),
                }
            })
            .collect();
        Corpus::new(clips, &audio_cfg).unwrap()
    }

    fn tiny_config(seed: u64) -> PipelineConfig {
        PipelineConfig {
            audio: AudioConfig { encoder_dim: 32, ..AudioConfig::default() },
            gen: GenConfig { resolution: 64, base_channels: 2, audio_dim: 32, ..GenConfig::default() },
            disc: DiscConfig { base_channels: 4, ..DiscConfig::default() },
            loss: LossConfig::default(),
            train: TrainConfig {
                seed,
                batch_size: 2,
                steps_per_epoch: 2,
                min_epochs_per_phase: 1,
                max_epochs_per_phase: [1, 1, 1],
                plateau_rel_tol: 0.0,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn phase1_step_leaves_temporal_and_sync_untouched() {
        let cfg = tiny_config(11);
        let corpus = tiny_corpus(2, 16);
        let mut t = Trainer::new(&cfg);
        let temporal_before = t.temporal_disc.params.export();
        let sync_before = t.sync_disc.params.export();
        let extractor_before = t.extractor.params.export();
        let gen_before = t.generator.params.export();
        t.run_epoch(&corpus).unwrap();
        for ((_, a), (_, b)) in temporal_before.iter().zip(t.temporal_disc.params.export().iter()) {
            assert_eq!(a, b, "temporal discriminator must not move in phase 1");
        }
        for ((_, a), (_, b)) in sync_before.iter().zip(t.sync_disc.params.export().iter()) {
            assert_eq!(a, b, "sync discriminator must not move in phase 1");
        }
        for ((_, a), (_, b)) in extractor_before.iter().zip(t.extractor.params.export().iter()) {
            assert_eq!(a, b, "extractor is frozen");
        }
        assert!(
            gen_before.iter().zip(t.generator.params.export().iter()).any(|((_, a), (_, b))| a != b),
            "generator must move"
        );
    }

    #[test]
    fn curriculum_advances_through_phases_and_counts_checkpoints() {
        let cfg = tiny_config(7);
        let corpus = tiny_corpus(2, 16);
        let mut t = Trainer::new(&cfg);
        let mut ckpts = Vec::new();
        let reports = t
            .train(&corpus, |_, c| ckpts.push(c.state.clone()))
            .unwrap();
        assert_eq!(reports.len(), 3); // caps (1,1,1)
        assert_eq!(t.state.phase, 3);
        assert_eq!(ckpts.len(), 3);
        let phases: Vec<u8> = reports.iter().map(|r| r.phase).collect();
        assert_eq!(phases, vec![1, 2, 3]);
        // loss sets grow with phase
        assert!(reports[0].loss_means.contains_key("gan_frame"));
        assert!(!reports[0].loss_means.contains_key("rl"));
        assert!(reports[1].loss_means.contains_key("rl"));
        assert!(!reports[1].loss_means.contains_key("bl"));
        assert!(reports[2].loss_means.contains_key("bl"));
    }

    #[test]
    fn deterministic_runs_bitwise_identical() {
        let cfg = tiny_config(42);
        let corpus = tiny_corpus(2, 16);
        let run = || {
            let mut t = Trainer::new(&cfg);
            let mut last = None;
            t.train(&corpus, |_, c| last = Some(c.clone())).unwrap();
            last.unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.tensors.len(), b.tensors.len());
        for (k, v) in &a.tensors {
            assert_eq!(v, &b.tensors[k], "tensor {} differs between identical runs", k);
        }
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn resume_from_checkpoint_is_bit_exact() {
        let mut cfg = tiny_config(5);
        cfg.train.max_epochs_per_phase = [2, 1, 1];
        let corpus = tiny_corpus(2, 16);

        let mut full = Trainer::new(&cfg);
        let mut full_ckpts = Vec::new();
        full.train(&corpus, |_, c| full_ckpts.push(c.clone())).unwrap();

        // resume from after the first epoch
        let mut resumed = Trainer::from_checkpoint(&cfg, &full_ckpts[0]).unwrap();
        let mut resumed_ckpts = Vec::new();
        resumed.train(&corpus, |_, c| resumed_ckpts.push(c.clone())).unwrap();

        assert_eq!(full_ckpts.len(), resumed_ckpts.len() + 1);
        let a = full_ckpts.last().unwrap();
        let b = resumed_ckpts.last().unwrap();
        for (k, v) in &a.tensors {
            assert_eq!(v, &b.tensors[k], "tensor {} differs after resume", k);
        }
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn phase3_without_landmarks_fails() {
        let cfg = tiny_config(3);
        let mut corpus = tiny_corpus(2, 16);
        for c in &mut corpus.clips {
            c.landmarks = None;
        }
        let mut t = Trainer::new(&cfg);
        t.state.phase = 3;
        t.state.active_losses = phase_losses(3).unwrap().iter().map(|s| s.to_string()).collect();
        let err = t.run_epoch(&corpus).unwrap_err();
        assert!(matches!(err, TrainError::MissingLandmarks { .. }), "{:?}", err);
    }

    #[test]
    #[ignore = "manual timing probe"]
    fn bench_step_timing() {
        let cfg = PipelineConfig {
            audio: AudioConfig { encoder_dim: 128, ..AudioConfig::default() },
            gen: GenConfig { resolution: 64, base_channels: 16, audio_dim: 128, ..GenConfig::default() },
            disc: DiscConfig { base_channels: 16, ..DiscConfig::default() },
            loss: LossConfig::default(),
            train: TrainConfig {
                seed: 1,
                batch_size: 4,
                steps_per_epoch: 4,
                min_epochs_per_phase: 1,
                max_epochs_per_phase: [1, 1, 1],
                plateau_rel_tol: 0.0,
                ..TrainConfig::default()
            },
        };
        let corpus = tiny_corpus(4, 25);
        let mut t = Trainer::new(&cfg);
        for phase in 1..=3u8 {
            t.state.phase = phase;
            t.state.active_losses =
                phase_losses(phase).unwrap().iter().map(|s| s.to_string()).collect();
            let start = std::time::Instant::now();
            t.run_epoch(&corpus).unwrap();
            println!(
                "phase {}: {:.2} s for {} steps",
                phase,
                start.elapsed().as_secs_f64(),
                cfg.train.steps_per_epoch
            );
        }
    }

    #[test]
    fn landmark_regressor_frozen_in_phase3() {
        let cfg = tiny_config(9);
        let corpus = tiny_corpus(2, 16);
        let mut t = Trainer::new(&cfg);
        t.state.phase = 3;
        t.state.active_losses = phase_losses(3).unwrap().iter().map(|s| s.to_string()).collect();
        let before = t.landmark_reg.params.export();
        t.run_epoch(&corpus).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(t.landmark_reg.params.export().iter()) {
            assert_eq!(a, b, "landmark regressor must stay frozen in phase 3");
        }
    }
}
