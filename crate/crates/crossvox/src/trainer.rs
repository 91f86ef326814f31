//! Loss computation and staged optimization.
//!
//! Four stages cover the experiment matrix: `baseline` trains the TTS
//! network on mel and stop losses alone; `mtl` adds the speaker/language
//! classifier cross-entropies; `spk_classifier` trains the x-vector speaker
//! classifier on real mels; `joint` continues a converged TTS model together
//! with a converged classifier, adding the cross-lingual speaker loss every
//! `k` steps. The cross-lingual loss compares the x-vector of a speaker's
//! real utterance with the x-vector of a freshly synthesized utterance in a
//! different language; only TTS parameters receive its gradient — the
//! classifier is structurally frozen in that path.
//!
//! Autoregressive generation cannot be back-propagated practically, so the
//! cross-lingual sample is produced in two passes: a free-running inference
//! pass without gradient, then a parallel teacher-forced pass on the
//! generated frames with gradient.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Checkpoint, CheckpointMeta, ModelKind};
use crate::corpus::{Corpus, LangId, PhoneId, SpeakerId, Utterance};
use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;
use crate::nn::{Adam, AdamConfig, GradAccum, LrSchedule, ParamStore};
use crate::seeds;
use crate::spkembed::{XVectorConfig, XVectorModel};
use crate::tape::{NodeId, Tape};
use crate::tts::{shifted_inputs, ModelConfig, TtsModel};

/// Training stage names, matching the system labels of the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Baseline,
    Mtl,
    SpkClassifier,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Baseline, Stage::Mtl, Stage::SpkClassifier, Stage::Joint];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Mtl => "mtl",
            Stage::SpkClassifier => "spk_classifier",
            Stage::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|st| st.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown stage '{s}' (expected baseline, mtl, spk_classifier or joint)"
                ))
            })
    }

    /// Whether the multi-task classifier losses are active in this stage.
    fn mtl_enabled(&self) -> bool {
        matches!(self, Stage::Mtl | Stage::Joint)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Optimization settings for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Optimizer steps in this stage.
    pub steps: u64,
    /// Utterances averaged per optimizer step.
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Step after which exponential decay begins.
    pub decay_start: u64,
    /// Per-step decay factor once decay has begun.
    pub decay_factor: f64,
    pub min_lr: f64,
    pub lambda_mel: f64,
    pub lambda_stop: f64,
    pub lambda_spk_mtl: f64,
    pub lambda_lang_mtl: f64,
    pub lambda_cross: f64,
    /// The cross-lingual loss fires on steps divisible by this period.
    pub joint_period: u64,
    /// Extra binary-cross-entropy weight on the positive stop frame.
    pub stop_pos_weight: f64,
    /// Validation checks without improvement before early stop
    /// (0 disables the plateau criterion; the step budget then decides).
    pub plateau_patience: u64,
    /// Steps between validation checks (0 = a tenth of the budget).
    pub val_interval: u64,
    /// Write interval checkpoints every this many steps (0 disables).
    pub checkpoint_interval: u64,
    /// Probability that a draw in the new speaker's language picks the new
    /// speaker during extension refinement.
    pub p_new: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults for a given step budget: decay starts after 40%
    /// of the stage (the full-scale run decays after 100k steps).
    pub fn desk(steps: u64, seed: u64) -> Self {
        Self {
            steps,
            batch_size: 1,
            initial_lr: 1e-3,
            decay_start: steps * 2 / 5,
            decay_factor: 0.999,
            min_lr: 1e-5,
            lambda_mel: 1.0,
            lambda_stop: 1.0,
            lambda_spk_mtl: 1.0,
            lambda_lang_mtl: 1.0,
            lambda_cross: 0.1,
            joint_period: 20,
            stop_pos_weight: 5.0,
            plateau_patience: 0,
            val_interval: 0,
            checkpoint_interval: 0,
            p_new: 0.5,
            seed,
        }
    }

    /// Reads `train.<key>` entries, after which `train.<stage>.<key>`
    /// entries override for the given stage.
    pub fn from_kv(kv: &KvConfig, stage: Stage, seed: u64) -> Result<Self> {
        let read_u64 = |key: &str, default: u64| -> Result<u64> {
            let base = kv.get_u64(&format!("train.{key}"), default)?;
            kv.get_u64(&format!("train.{}.{key}", stage.name()), base)
        };
        let read_f64 = |key: &str, default: f64| -> Result<f64> {
            let base = kv.get_f64(&format!("train.{key}"), default)?;
            kv.get_f64(&format!("train.{}.{key}", stage.name()), base)
        };
        let steps = read_u64("steps", 2000)?;
        let d = Self::desk(steps, seed);
        let cfg = Self {
            steps,
            batch_size: read_u64("batch_size", d.batch_size as u64)? as usize,
            initial_lr: read_f64("initial_lr", d.initial_lr)?,
            decay_start: read_u64("decay_start", d.decay_start)?,
            decay_factor: read_f64("decay_factor", d.decay_factor)?,
            min_lr: read_f64("min_lr", d.min_lr)?,
            lambda_mel: read_f64("lambda_mel", d.lambda_mel)?,
            lambda_stop: read_f64("lambda_stop", d.lambda_stop)?,
            lambda_spk_mtl: read_f64("lambda_spk_mtl", d.lambda_spk_mtl)?,
            lambda_lang_mtl: read_f64("lambda_lang_mtl", d.lambda_lang_mtl)?,
            lambda_cross: read_f64("lambda_cross", d.lambda_cross)?,
            joint_period: read_u64("joint_period", d.joint_period)?,
            stop_pos_weight: read_f64("stop_pos_weight", d.stop_pos_weight)?,
            plateau_patience: read_u64("plateau_patience", d.plateau_patience)?,
            val_interval: read_u64("val_interval", d.val_interval)?,
            checkpoint_interval: read_u64("checkpoint_interval", d.checkpoint_interval)?,
            p_new: read_f64("p_new", d.p_new)?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.joint_period == 0 {
            return Err(Error::Config("joint_period must be >= 1".into()));
        }
        if self.min_lr <= 0.0 || self.initial_lr < self.min_lr {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 < min_lr ({}) <= initial_lr ({})",
                self.min_lr, self.initial_lr
            )));
        }
        if !(0.0..=1.0).contains(&self.decay_factor) || self.decay_factor == 0.0 {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        let lambdas = [
            self.lambda_mel,
            self.lambda_stop,
            self.lambda_spk_mtl,
            self.lambda_lang_mtl,
            self.lambda_cross,
        ];
        if lambdas.iter().any(|l| *l < 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.stop_pos_weight <= 0.0 {
            return Err(Error::Config("stop_pos_weight must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_new) {
            return Err(Error::Config(format!(
                "p_new must lie in [0, 1], got {}",
                self.p_new
            )));
        }
        Ok(())
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.initial_lr,
            decay_start: self.decay_start,
            decay_factor: self.decay_factor,
            min_lr: self.min_lr,
        }
    }

    fn effective_val_interval(&self) -> u64 {
        if self.val_interval > 0 {
            self.val_interval
        } else {
            (self.steps / 10).max(1)
        }
    }
}

/// One named, weighted loss component.
#[derive(Debug, Clone, PartialEq)]
pub struct LossComponent {
    pub name: &'static str,
    pub weight: f64,
    pub value: f64,
}

/// Scalar loss of one step with its named components. The recorded total is
/// always the weighted sum of the components, in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBundle {
    pub total: f64,
    pub components: Vec<LossComponent>,
}

impl LossBundle {
    pub fn weighted_sum(&self) -> f64 {
        self.components
            .iter()
            .fold(0.0, |acc, c| acc + c.weight * c.value)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.value)
    }
}

/// One line of the persisted loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub mel: Option<f64>,
    pub stop: Option<f64>,
    pub spk_mtl: Option<f64>,
    pub lang_mtl: Option<f64>,
    pub spk_ce: Option<f64>,
    pub cross: Option<f64>,
}

impl StepRecord {
    fn from_bundle(step: u64, lr: f64, bundle: &LossBundle) -> Self {
        Self {
            step,
            lr,
            total: bundle.total,
            mel: bundle.get("mel"),
            stop: bundle.get("stop"),
            spk_mtl: bundle.get("spk_mtl"),
            lang_mtl: bundle.get("lang_mtl"),
            spk_ce: bundle.get("spk_ce"),
            cross: bundle.get("cross"),
        }
    }
}

/// Everything a stage run reports. Step timings are kept in memory for
/// inspection but never persisted, so trace files are reproducible.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: Stage,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub converged: bool,
    /// Step at which the plateau criterion stopped the run, if it did.
    pub early_stopped_at: Option<u64>,
    /// `(step, validation loss)` pairs.
    pub val_trace: Vec<(u64, f64)>,
    /// Joint steps skipped because a generated mel was too short.
    pub skipped_cross: u64,
    pub step_timings_ms: Vec<f64>,
    pub final_checkpoint: Option<PathBuf>,
}

impl StageReport {
    fn new(stage: Stage, seed: u64) -> Self {
        Self {
            stage,
            seed,
            records: Vec::new(),
            converged: false,
            early_stopped_at: None,
            val_trace: Vec::new(),
            skipped_cross: 0,
            step_timings_ms: Vec::new(),
            final_checkpoint: None,
        }
    }

    /// Writes the loss trace as tab-separated records (step, lr, total and
    /// per-component columns; absent components print as `-`).
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        text.push_str(&format!("# stage = {}\n", self.stage));
        text.push_str(&format!("# seed = {}\n", self.seed));
        text.push_str("# columns = step lr total mel stop spk_mtl lang_mtl spk_ce cross\n");
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.12e}"));
        for r in &self.records {
            text.push_str(&format!(
                "{}\t{:.12e}\t{:.12e}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.step,
                r.lr,
                r.total,
                fmt(r.mel),
                fmt(r.stop),
                fmt(r.spk_mtl),
                fmt(r.lang_mtl),
                fmt(r.spk_ce),
                fmt(r.cross),
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A TTS network bundled with its parameters and training lineage.
#[derive(Debug)]
pub struct TtsSystem {
    pub store: ParamStore,
    pub model: TtsModel,
    pub stages: Vec<String>,
    pub converged: bool,
    pub seed: u64,
    pub speaker_ids: Vec<u32>,
    pub language_ids: Vec<u32>,
}

impl TtsSystem {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = TtsModel::new(cfg, &mut store, seed)?;
        let speaker_ids = (0..model.cfg.n_speakers as u32).collect();
        let language_ids = (0..model.cfg.n_languages as u32).collect();
        Ok(Self {
            store,
            model,
            stages: Vec::new(),
            converged: false,
            seed,
            speaker_ids,
            language_ids,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.ensure_kind(ModelKind::Tts)?;
        let cfg = ck
            .meta
            .tts_config
            .clone()
            .ok_or_else(|| Error::Checkpoint("tts checkpoint lacks a model config".into()))?;
        let model = TtsModel::from_store(cfg, &ck.store)?;
        Ok(Self {
            store: ck.store,
            model,
            stages: ck.meta.stages,
            converged: ck.meta.converged,
            seed: ck.meta.seed,
            speaker_ids: ck.meta.speaker_ids,
            language_ids: ck.meta.language_ids,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(checkpoint::load(path)?)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            kind: ModelKind::Tts,
            crate_version: crate::VERSION.to_string(),
            seed: self.seed,
            stages: self.stages.clone(),
            converged: self.converged,
            tts_config: Some(self.model.cfg.clone()),
            xvec_config: None,
            speaker_ids: self.speaker_ids.clone(),
            language_ids: self.language_ids.clone(),
            tensors: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, self.meta(), &self.store)
    }
}

/// An x-vector classifier bundled with its parameters and lineage.
#[derive(Debug)]
pub struct XvecSystem {
    pub store: ParamStore,
    pub model: XVectorModel,
    pub stages: Vec<String>,
    pub converged: bool,
    pub seed: u64,
    pub speaker_ids: Vec<u32>,
}

impl XvecSystem {
    pub fn new(cfg: XVectorConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = XVectorModel::new(cfg, &mut store, seed)?;
        let speaker_ids = (0..model.cfg.n_speakers as u32).collect();
        Ok(Self {
            store,
            model,
            stages: Vec::new(),
            converged: false,
            seed,
            speaker_ids,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.ensure_kind(ModelKind::Xvec)?;
        let cfg = ck
            .meta
            .xvec_config
            .clone()
            .ok_or_else(|| Error::Checkpoint("xvec checkpoint lacks a model config".into()))?;
        let model = XVectorModel::from_store(cfg, &ck.store)?;
        Ok(Self {
            store: ck.store,
            model,
            stages: ck.meta.stages,
            converged: ck.meta.converged,
            seed: ck.meta.seed,
            speaker_ids: ck.meta.speaker_ids,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(checkpoint::load(path)?)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            kind: ModelKind::Xvec,
            crate_version: crate::VERSION.to_string(),
            seed: self.seed,
            stages: self.stages.clone(),
            converged: self.converged,
            tts_config: None,
            xvec_config: Some(self.model.cfg.clone()),
            speaker_ids: self.speaker_ids.clone(),
            language_ids: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, self.meta(), &self.store)
    }
}

/// Nodes of the two TTS reconstruction loss components.
pub struct TtsLossNodes {
    pub mel: NodeId,
    pub stop: NodeId,
}

/// Mel MSE plus stop-token BCE against a target mel. The stop target is 1 on
/// the final frame only, up-weighted by `stop_pos_weight` so the single
/// positive frame is not drowned out.
pub fn tts_loss(
    tape: &mut Tape,
    mel_pred: NodeId,
    stop_logits: NodeId,
    target: &Array2<f64>,
    stop_pos_weight: f64,
) -> Result<TtsLossNodes> {
    let (t, d) = target.dim();
    if tape.value(mel_pred).dim() != (t, d) {
        return Err(Error::Train(format!(
            "mel prediction {:?} does not match target {:?}",
            tape.value(mel_pred).dim(),
            (t, d)
        )));
    }
    if tape.value(stop_logits).dim() != (t, 1) {
        return Err(Error::Train(format!(
            "stop logits {:?} do not match {} frames",
            tape.value(stop_logits).dim(),
            t
        )));
    }
    let tgt = tape.leaf(target.clone());
    let mel = tape.mse(mel_pred, tgt);

    let mut stop_targets = Array2::zeros((t, 1));
    stop_targets[[t - 1, 0]] = 1.0;
    let mut weights = Array2::from_elem((t, 1), 1.0);
    weights[[t - 1, 0]] = stop_pos_weight;
    let stop = tape.sigmoid_bce_mean(stop_logits, stop_targets, weights);
    Ok(TtsLossNodes { mel, stop })
}

/// Cross-entropies of the MTL heads against the true speaker and language.
pub fn mtl_loss(
    tape: &mut Tape,
    speaker_logits: NodeId,
    language_logits: NodeId,
    speaker_idx: usize,
    lang_idx: usize,
) -> (NodeId, NodeId) {
    let spk = tape.softmax_cross_entropy(speaker_logits, speaker_idx);
    let lang = tape.softmax_cross_entropy(language_logits, lang_idx);
    (spk, lang)
}

/// Uniform draw of a target language different from `native`.
pub fn draw_cross_language(languages: &[LangId], native: LangId, rng: &mut ChaCha8Rng) -> Result<LangId> {
    let others: Vec<LangId> = languages.iter().copied().filter(|l| *l != native).collect();
    if others.is_empty() {
        return Err(Error::Train(
            "cross-lingual generation needs at least two languages".into(),
        ));
    }
    Ok(others[rng.random_range(0..others.len())])
}

/// A free-running cross-lingual sample: language, phone sequence and the
/// generated mel, produced without retaining gradients.
#[derive(Debug, Clone)]
pub struct CrossDraw {
    pub lang: LangId,
    pub phones: Vec<PhoneId>,
    pub mel: Array2<f64>,
    pub hit_max_frames: bool,
}

/// Draws `l' != native` uniformly, picks a training utterance of `l'` as the
/// phone source, and synthesizes speaker `speaker` speaking it (inference
/// mode, no gradient). The result is reused as frozen teacher input by
/// [`cross_lingual_loss`].
pub fn generate_cross_lingual(
    tts: &TtsSystem,
    corpus: &Corpus,
    speaker: SpeakerId,
    native: LangId,
    max_frames: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CrossDraw> {
    let languages: Vec<LangId> = corpus.specs.languages.iter().map(|l| l.lang_id).collect();
    let target = draw_cross_language(&languages, native, rng)?;

    let candidates: Vec<usize> = corpus
        .train_indices()
        .into_iter()
        .filter(|i| corpus.manifest.records[*i].lang_id == target)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Train(format!(
            "language {target} has no training utterances to draw phones from"
        )));
    }
    let pick = candidates[rng.random_range(0..candidates.len())];
    let phones = corpus.manifest.records[pick].phones.clone();

    let out = tts.model.infer(&tts.store, &phones, speaker, target, max_frames)?;
    Ok(CrossDraw {
        lang: target,
        phones,
        mel: out.mel,
        hit_max_frames: out.hit_max_frames,
    })
}

/// L2 distance between the x-vectors of two mel nodes, with the x-vector
/// parameters frozen: gradients flow into the mels only.
pub fn xvec_pair_distance(
    tape: &mut Tape,
    xvec: &XvecSystem,
    real: NodeId,
    synth: NodeId,
) -> Result<NodeId> {
    let emb_real = xvec.model.forward_embed(tape, &xvec.store, real, true)?;
    let emb_synth = xvec.model.forward_embed(tape, &xvec.store, synth, true)?;
    Ok(tape.l2_dist(emb_real, emb_synth))
}

/// The cross-lingual speaker loss for one `(speaker, l, l')` draw.
///
/// Runs the gradient-carrying teacher-forced pass over the generated mel to
/// obtain the synthesized sample, embeds it and the real reference with the
/// frozen x-vector network, and returns their L2 distance node. TTS
/// parameters receive gradient through the teacher-forced pass; x-vector
/// parameters receive none.
pub fn cross_lingual_loss(
    tape: &mut Tape,
    tts: &TtsSystem,
    xvec: &XvecSystem,
    real_mel: &Array2<f64>,
    speaker: SpeakerId,
    draw: &CrossDraw,
) -> Result<NodeId> {
    let min = xvec.model.cfg.min_frames();
    if draw.mel.nrows() < min {
        return Err(Error::Train(format!(
            "generated mel has {} frames, below the x-vector minimum of {min}",
            draw.mel.nrows()
        )));
    }
    if real_mel.nrows() < min {
        return Err(Error::Train(format!(
            "reference mel has {} frames, below the x-vector minimum of {min}",
            real_mel.nrows()
        )));
    }

    let cond = tts.model.conditioning(tape, &tts.store, speaker, draw.lang)?;
    let enc = tts.model.encode(tape, &tts.store, &draw.phones, cond.l_cond)?;
    let inputs = tape.leaf(shifted_inputs(&draw.mel));
    let (mel_pred, _stop) =
        tts.model
            .decode_teacher_forced(tape, &tts.store, enc, inputs, cond, None)?;
    let real = tape.leaf(real_mel.clone());
    xvec_pair_distance(tape, xvec, real, mel_pred)
}

/// Infinite stream of training utterance indices: a language drawn uniformly
/// first, then an utterance uniformly within it, so long-run language
/// frequencies ignore corpus imbalance.
pub struct LanguageBalancedSampler {
    by_lang: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl LanguageBalancedSampler {
    pub fn new(corpus: &Corpus, seed: u64) -> Result<Self> {
        let train = corpus.train_indices();
        Self::from_indices(corpus, &train, seed)
    }

    /// Builds the sampler over a caller-chosen index subset.
    pub fn from_indices(corpus: &Corpus, indices: &[usize], seed: u64) -> Result<Self> {
        let n_langs = corpus.config.n_languages;
        let mut by_lang = vec![Vec::new(); n_langs];
        for &i in indices {
            by_lang[corpus.manifest.records[i].lang_id.0 as usize].push(i);
        }
        for (l, utts) in by_lang.iter().enumerate() {
            if utts.is_empty() {
                return Err(Error::Train(format!(
                    "language {l} has no training utterances to sample"
                )));
            }
        }
        Ok(Self { by_lang, rng: seeds::rng(seed, "sampler", 0) })
    }

    /// Next utterance index in the corpus.
    pub fn next_index(&mut self) -> usize {
        let lang = self.rng.random_range(0..self.by_lang.len());
        let utts = &self.by_lang[lang];
        utts[self.rng.random_range(0..utts.len())]
    }
}

/// What a step trained on: a corpus index or an out-of-corpus utterance
/// (the new speaker's data during extension).
enum DrawnUtterance<'a> {
    FromCorpus(usize),
    External(&'a Utterance),
}

/// Shared per-step state of a stage run.
struct StageRun<'a> {
    corpus: &'a Corpus,
    cfg: &'a TrainConfig,
    stage: Stage,
    schedule: LrSchedule,
    dropout_rng: ChaCha8Rng,
    cross_rng: ChaCha8Rng,
    report: StageReport,
}

impl<'a> StageRun<'a> {
    fn new(corpus: &'a Corpus, cfg: &'a TrainConfig, stage: Stage) -> Self {
        Self {
            corpus,
            cfg,
            stage,
            schedule: cfg.schedule(),
            dropout_rng: seeds::rng(cfg.seed, "dropout", 0),
            cross_rng: seeds::rng(cfg.seed, "cross-lang", 0),
            report: StageReport::new(stage, cfg.seed),
        }
    }
}

/// Upper frame bound for on-the-fly generation: twice the longest corpus
/// utterance, capped by the model limit.
fn generation_frame_cap(corpus: &Corpus, model_cfg: &ModelConfig) -> usize {
    let longest = corpus
        .manifest
        .records
        .iter()
        .map(|r| r.n_frames)
        .max()
        .unwrap_or(model_cfg.max_frames);
    (2 * longest).min(model_cfg.max_frames).max(1)
}

/// Runs one training stage. Exactly which systems must be present depends on
/// the stage: `baseline`/`mtl` train the TTS system, `spk_classifier` trains
/// the x-vector system, and `joint` requires both already converged.
pub fn train_stage(
    tts: Option<&mut TtsSystem>,
    xvec: Option<&mut XvecSystem>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<StageReport> {
    cfg.validate()?;
    match stage {
        Stage::Baseline | Stage::Mtl => {
            let tts = tts.ok_or_else(|| {
                Error::Config(format!("stage {stage} requires a TTS system"))
            })?;
            train_tts_stage(tts, None, corpus, cfg, stage)
        }
        Stage::SpkClassifier => {
            let xvec = xvec.ok_or_else(|| {
                Error::Config("stage spk_classifier requires an x-vector system".into())
            })?;
            train_xvec_stage(xvec, corpus, cfg)
        }
        Stage::Joint => {
            let tts = tts.ok_or_else(|| {
                Error::Config("stage joint requires a TTS system".into())
            })?;
            let xvec = xvec.ok_or_else(|| {
                Error::Config("stage joint requires an x-vector system".into())
            })?;
            if !tts.converged || tts.stages.is_empty() {
                return Err(Error::Config(
                    "joint stage requires a converged TTS checkpoint \
                     (run --stage baseline or --stage mtl first)"
                        .into(),
                ));
            }
            if !xvec.converged {
                return Err(Error::Config(
                    "joint stage requires a converged speaker-classifier checkpoint \
                     (run --stage spk_classifier first)"
                        .into(),
                ));
            }
            train_tts_stage(tts, Some(xvec), corpus, cfg, stage)
        }
    }
}

/// The TTS training loop, shared by baseline, mtl and joint stages.
fn train_tts_stage(
    tts: &mut TtsSystem,
    mut xvec: Option<&mut XvecSystem>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<StageReport> {
    let mut run = StageRun::new(corpus, cfg, stage);
    let mut sampler = LanguageBalancedSampler::new(corpus, cfg.seed)?;
    let mut adam = Adam::new(&tts.store, AdamConfig::default());
    let mut adam_xvec = xvec
        .as_deref()
        .map(|x| Adam::new(&x.store, AdamConfig::default()));
    let frame_cap = generation_frame_cap(corpus, &tts.model.cfg);

    let mut plateau = PlateauTracker::new(cfg);
    for step in 1..=cfg.steps {
        let started = Instant::now();
        let lr = run.schedule.lr_at(step);

        let mut grads = GradAccum::zeros_like(&tts.store);
        let mut xvec_grads = xvec
            .as_deref()
            .map(|x| GradAccum::zeros_like(&x.store));
        let mut bundle_acc = BundleAccum::new();

        for _ in 0..cfg.batch_size {
            let idx = sampler.next_index();
            let bundle = tts_step_losses(
                tts,
                xvec.as_deref(),
                &mut run,
                DrawnUtterance::FromCorpus(idx),
                step,
                frame_cap,
                &mut grads,
                xvec_grads.as_mut(),
            )?;
            bundle_acc.add(&bundle);
        }
        let scale = 1.0 / cfg.batch_size as f64;
        grads.scale(scale);
        adam.step(&mut tts.store, &grads, lr);
        if let (Some(x), Some(xg), Some(ax)) =
            (xvec.as_deref_mut(), xvec_grads.as_mut(), adam_xvec.as_mut())
        {
            xg.scale(scale);
            ax.step(&mut x.store, xg, lr);
        }
        debug_assert!(tts.store.all_finite(), "non-finite TTS parameter after step {step}");

        let bundle = bundle_acc.mean();
        run.report
            .records
            .push(StepRecord::from_bundle(step, lr, &bundle));
        run.report
            .step_timings_ms
            .push(started.elapsed().as_secs_f64() * 1e3);

        if plateau.check(step, || validation_mel_loss(tts, corpus)) {
            run.report.early_stopped_at = Some(step);
            break;
        }
    }
    run.report.val_trace = plateau.trace;

    tts.stages.push(stage.name().to_string());
    tts.converged = true;
    run.report.converged = true;
    Ok(run.report)
}

/// Builds the loss tape for one utterance and accumulates gradients.
/// Returns the loss bundle; the TTS gradients go into `grads`, and (in the
/// joint stage) the classifier CE gradient goes into `xvec_grads` from its
/// own tape.
#[allow(clippy::too_many_arguments)]
fn tts_step_losses(
    tts: &TtsSystem,
    xvec: Option<&XvecSystem>,
    run: &mut StageRun<'_>,
    drawn: DrawnUtterance<'_>,
    step: u64,
    frame_cap: usize,
    grads: &mut GradAccum,
    xvec_grads: Option<&mut GradAccum>,
) -> Result<LossBundle> {
    let owned;
    let utt: &Utterance = match drawn {
        DrawnUtterance::FromCorpus(idx) => {
            owned = run.corpus.utterance(idx)?;
            &owned
        }
        DrawnUtterance::External(u) => u,
    };
    let cfg = run.cfg;
    let stage = run.stage;

    let mut tape = Tape::new();
    let cond = tts
        .model
        .conditioning(&mut tape, &tts.store, utt.speaker_id, utt.lang_id)?;
    let enc = tts
        .model
        .encode(&mut tape, &tts.store, &utt.phones, cond.l_cond)?;
    let inputs = tape.leaf(shifted_inputs(&utt.mel));
    let (mel_pred, stop_logits) = tts.model.decode_teacher_forced(
        &mut tape,
        &tts.store,
        enc,
        inputs,
        cond,
        Some(&mut run.dropout_rng),
    )?;
    let losses = tts_loss(&mut tape, mel_pred, stop_logits, &utt.mel, cfg.stop_pos_weight)?;

    // Components gather in a fixed order; the tape total is assembled in the
    // same order so the recorded total equals the weighted sum exactly.
    let mut parts: Vec<(&'static str, f64, NodeId)> = vec![
        ("mel", cfg.lambda_mel, losses.mel),
        ("stop", cfg.lambda_stop, losses.stop),
    ];

    if stage.mtl_enabled() {
        let (spk_logits, lang_logits) = tts.model.mtl_heads(&mut tape, &tts.store, cond);
        let (spk_ce, lang_ce) = mtl_loss(
            &mut tape,
            spk_logits,
            lang_logits,
            utt.speaker_id.0 as usize,
            utt.lang_id.0 as usize,
        );
        parts.push(("spk_mtl", cfg.lambda_spk_mtl, spk_ce));
        parts.push(("lang_mtl", cfg.lambda_lang_mtl, lang_ce));
    }

    if stage == Stage::Joint && step % cfg.joint_period == 0 {
        let xv = xvec.expect("joint stage carries an x-vector system");
        let draw = generate_cross_lingual(
            tts,
            run.corpus,
            utt.speaker_id,
            utt.lang_id,
            frame_cap,
            &mut run.cross_rng,
        )?;
        if draw.mel.nrows() < xv.model.cfg.min_frames() {
            run.report.skipped_cross += 1;
            eprintln!(
                "warning: step {step}: generated mel too short for the x-vector \
                 ({} < {} frames); skipping the cross-lingual term",
                draw.mel.nrows(),
                xv.model.cfg.min_frames()
            );
        } else {
            let cross =
                cross_lingual_loss(&mut tape, tts, xv, &utt.mel, utt.speaker_id, &draw)?;
            parts.push(("cross", cfg.lambda_cross, cross));
        }
    }

    // Weighted sum in component order.
    let mut total = None;
    for (_, weight, node) in &parts {
        let scaled = tape.scale(*node, *weight);
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled),
        });
    }
    let total = total.expect("at least the mel component exists");
    let mut bundle = LossBundle {
        total: tape.scalar(total),
        components: parts
            .iter()
            .map(|(name, weight, node)| LossComponent {
                name,
                weight: *weight,
                value: tape.scalar(*node),
            })
            .collect(),
    };
    grads.backward(&tape, total);

    // In the joint stage the classifier keeps training on real data, from
    // its own tape so its CE gradient cannot mix into the TTS update.
    if stage == Stage::Joint {
        let (xv, xg) = (
            xvec.expect("joint stage carries an x-vector system"),
            xvec_grads.expect("joint stage carries x-vector gradients"),
        );
        let mut ce_tape = Tape::new();
        let mel = ce_tape.leaf(utt.mel.clone());
        let logits = xv
            .model
            .forward_classify(&mut ce_tape, &xv.store, mel, false)?;
        let ce = ce_tape.softmax_cross_entropy(logits, utt.speaker_id.0 as usize);
        let value = xg.backward(&ce_tape, ce);
        bundle.components.push(LossComponent { name: "spk_ce", weight: 1.0, value });
        bundle.total += value;
    }

    Ok(bundle)
}

/// The speaker-classifier training loop.
fn train_xvec_stage(
    xvec: &mut XvecSystem,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    let mut run = StageRun::new(corpus, cfg, Stage::SpkClassifier);
    let mut sampler = LanguageBalancedSampler::new(corpus, cfg.seed)?;
    let mut adam = Adam::new(&xvec.store, AdamConfig::default());

    let mut plateau = PlateauTracker::new(cfg);
    for step in 1..=cfg.steps {
        let started = Instant::now();
        let lr = run.schedule.lr_at(step);
        let mut grads = GradAccum::zeros_like(&xvec.store);
        let mut ce_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let utt = corpus.utterance(sampler.next_index())?;
            let mut tape = Tape::new();
            let mel = tape.leaf(utt.mel.clone());
            let logits = xvec
                .model
                .forward_classify(&mut tape, &xvec.store, mel, false)?;
            let ce = tape.softmax_cross_entropy(logits, utt.speaker_id.0 as usize);
            ce_sum += grads.backward(&tape, ce);
        }
        let scale = 1.0 / cfg.batch_size as f64;
        grads.scale(scale);
        adam.step(&mut xvec.store, &grads, lr);

        let bundle = LossBundle {
            total: ce_sum * scale,
            components: vec![LossComponent {
                name: "spk_ce",
                weight: 1.0,
                value: ce_sum * scale,
            }],
        };
        run.report
            .records
            .push(StepRecord::from_bundle(step, lr, &bundle));
        run.report
            .step_timings_ms
            .push(started.elapsed().as_secs_f64() * 1e3);

        if plateau.check(step, || validation_xvec_loss(xvec, corpus)) {
            run.report.early_stopped_at = Some(step);
            break;
        }
    }
    run.report.val_trace = plateau.trace;

    xvec.stages.push(Stage::SpkClassifier.name().to_string());
    xvec.converged = true;
    run.report.converged = true;
    Ok(run.report)
}

/// Plateau-based early stopping over a validation metric.
struct PlateauTracker {
    enabled: bool,
    interval: u64,
    patience: u64,
    best: f64,
    misses: u64,
    trace: Vec<(u64, f64)>,
}

impl PlateauTracker {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            enabled: cfg.plateau_patience > 0,
            interval: cfg.effective_val_interval(),
            patience: cfg.plateau_patience,
            best: f64::INFINITY,
            misses: 0,
            trace: Vec::new(),
        }
    }

    /// Returns true when training should stop early.
    fn check(&mut self, step: u64, eval: impl FnOnce() -> Result<Option<f64>>) -> bool {
        if !self.enabled || step % self.interval != 0 {
            return false;
        }
        let Ok(Some(loss)) = eval() else { return false };
        self.trace.push((step, loss));
        if loss < self.best - 1e-9 {
            self.best = loss;
            self.misses = 0;
            false
        } else {
            self.misses += 1;
            self.misses >= self.patience
        }
    }
}

/// Up to this many held-out utterances feed each validation check.
const VAL_UTTERANCES: usize = 16;

/// Mean teacher-forced mel MSE over held-out utterances (no dropout).
/// Returns `None` when the corpus has no hold-out split.
fn validation_mel_loss(tts: &TtsSystem, corpus: &Corpus) -> Result<Option<f64>> {
    let held = corpus.holdout_indices();
    if held.is_empty() {
        return Ok(None);
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for idx in held.into_iter().take(VAL_UTTERANCES) {
        let utt = corpus.utterance(idx)?;
        let mut tape = Tape::new();
        let cond = tts
            .model
            .conditioning(&mut tape, &tts.store, utt.speaker_id, utt.lang_id)?;
        let enc = tts
            .model
            .encode(&mut tape, &tts.store, &utt.phones, cond.l_cond)?;
        let inputs = tape.leaf(shifted_inputs(&utt.mel));
        let (mel_pred, _) =
            tts.model
                .decode_teacher_forced(&mut tape, &tts.store, enc, inputs, cond, None)?;
        let tgt = tape.leaf(utt.mel.clone());
        let mse = tape.mse(mel_pred, tgt);
        acc += tape.scalar(mse);
        n += 1;
    }
    Ok(Some(acc / n as f64))
}

/// Mean classifier CE over held-out utterances.
fn validation_xvec_loss(xvec: &XvecSystem, corpus: &Corpus) -> Result<Option<f64>> {
    let held = corpus.holdout_indices();
    if held.is_empty() {
        return Ok(None);
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for idx in held.into_iter().take(VAL_UTTERANCES) {
        let utt = corpus.utterance(idx)?;
        let mut tape = Tape::new();
        let mel = tape.leaf(utt.mel.clone());
        let logits = xvec
            .model
            .forward_classify(&mut tape, &xvec.store, mel, false)?;
        let ce = tape.softmax_cross_entropy(logits, utt.speaker_id.0 as usize);
        acc += tape.scalar(ce);
        n += 1;
    }
    Ok(Some(acc / n as f64))
}

/// Averages loss bundles over a batch, component-wise by name.
struct BundleAccum {
    bundles: Vec<LossBundle>,
}

impl BundleAccum {
    fn new() -> Self {
        Self { bundles: Vec::new() }
    }

    fn add(&mut self, bundle: &LossBundle) {
        self.bundles.push(bundle.clone());
    }

    fn mean(&self) -> LossBundle {
        if self.bundles.len() == 1 {
            return self.bundles[0].clone();
        }
        let n = self.bundles.len() as f64;
        let mut names: Vec<(&'static str, f64)> = Vec::new();
        for b in &self.bundles {
            for c in &b.components {
                if !names.iter().any(|(n, _)| *n == c.name) {
                    names.push((c.name, c.weight));
                }
            }
        }
        let components: Vec<LossComponent> = names
            .into_iter()
            .map(|(name, weight)| {
                let sum: f64 = self
                    .bundles
                    .iter()
                    .filter_map(|b| b.get(name))
                    .sum();
                LossComponent { name, weight, value: sum / n }
            })
            .collect();
        let total = components
            .iter()
            .fold(0.0, |acc, c| acc + c.weight * c.value);
        LossBundle { total, components }
    }
}

/// Grows a parameter table by one row initialised to the mean of the
/// existing rows.
fn append_mean_row(store: &mut ParamStore, id: crate::nn::ParamId) {
    let old = store.value(id).clone();
    let (rows, cols) = old.dim();
    let mut grown = Array2::zeros((rows + 1, cols));
    for r in 0..rows {
        for c in 0..cols {
            grown[[r, c]] = old[[r, c]];
        }
    }
    for c in 0..cols {
        let mean = (0..rows).map(|r| old[[r, c]]).sum::<f64>() / rows as f64;
        grown[[rows, c]] = mean;
    }
    store.replace(id, grown);
}

/// Grows a classifier output matrix/bias by one column initialised to the
/// mean of the existing columns.
fn append_mean_col(store: &mut ParamStore, id: crate::nn::ParamId) {
    let old = store.value(id).clone();
    let (rows, cols) = old.dim();
    let mut grown = Array2::zeros((rows, cols + 1));
    for r in 0..rows {
        for c in 0..cols {
            grown[[r, c]] = old[[r, c]];
        }
        grown[[r, cols]] = (0..cols).map(|c| old[[r, c]]).sum::<f64>() / cols as f64;
    }
    store.replace(id, grown);
}

/// Registers a previously unseen speaker in both systems and refines the
/// whole model on a mixed stream: languages drawn uniformly over existing
/// data, with draws in the new speaker's language switching to the new
/// speaker's utterances with probability `p_new`. When `apply_joint` is set
/// (the joint-trained system), the cross-lingual loss fires on the usual
/// period and the classifier keeps training, both covering the new speaker.
pub fn extend_speaker(
    tts: &mut TtsSystem,
    xvec: &mut XvecSystem,
    new_utts: &[Utterance],
    corpus: &Corpus,
    cfg: &TrainConfig,
    apply_joint: bool,
) -> Result<StageReport> {
    cfg.validate()?;
    let first = new_utts
        .first()
        .ok_or_else(|| Error::Train("extension needs at least one utterance".into()))?;
    let new_id = first.speaker_id;
    let new_lang = first.lang_id;
    if new_utts
        .iter()
        .any(|u| u.speaker_id != new_id || u.lang_id != new_lang)
    {
        return Err(Error::Train(
            "extension utterances must all come from one speaker in one language".into(),
        ));
    }
    if (new_id.0 as usize) < tts.model.cfg.n_speakers {
        return Err(Error::Train(format!(
            "speaker id {new_id} is already in the table"
        )));
    }
    if new_id.0 as usize != tts.model.cfg.n_speakers {
        return Err(Error::Train(format!(
            "speaker ids are dense; expected {} for the new speaker, got {new_id}",
            tts.model.cfg.n_speakers
        )));
    }
    if corpus.specs.language(new_lang).is_err() {
        return Err(Error::Train(format!(
            "new speaker's language {new_lang} is not in the corpus"
        )));
    }
    if apply_joint && (!tts.converged || !xvec.converged) {
        return Err(Error::Config(
            "joint extension requires converged TTS and classifier checkpoints".into(),
        ));
    }

    // Grow the TTS speaker table and MTL speaker head, and the x-vector
    // softmax head, then refresh the model handles with the larger sizes.
    append_mean_row(&mut tts.store, tts.model.speaker_table());
    append_mean_col(&mut tts.store, tts.model.mtl_speaker_head_out());
    append_mean_col(&mut tts.store, tts.model.mtl_speaker_head_bias());
    let mut tts_cfg = tts.model.cfg.clone();
    tts_cfg.n_speakers += 1;
    tts.model = TtsModel::from_store(tts_cfg, &tts.store)?;
    tts.speaker_ids.push(new_id.0);

    let cls_w = xvec
        .store
        .find("xvec.cls.w")
        .ok_or_else(|| Error::Checkpoint("x-vector classifier head missing".into()))?;
    let cls_b = xvec
        .store
        .find("xvec.cls.b")
        .ok_or_else(|| Error::Checkpoint("x-vector classifier bias missing".into()))?;
    append_mean_col(&mut xvec.store, cls_w);
    append_mean_col(&mut xvec.store, cls_b);
    let mut xvec_cfg = xvec.model.cfg.clone();
    xvec_cfg.n_speakers += 1;
    xvec.model = XVectorModel::from_store(xvec_cfg, &xvec.store)?;
    xvec.speaker_ids.push(new_id.0);

    // Refinement loop: the stage recipe of the system being extended.
    let stage = if apply_joint {
        Stage::Joint
    } else if tts.stages.iter().any(|s| s == Stage::Mtl.name()) {
        Stage::Mtl
    } else {
        Stage::Baseline
    };
    let mut run = StageRun::new(corpus, cfg, stage);
    let mut sampler = LanguageBalancedSampler::new(corpus, cfg.seed)?;
    let mut mix_rng = seeds::rng(cfg.seed, "extension-mix", 0);
    let mut adam = Adam::new(&tts.store, AdamConfig::default());
    let mut adam_xvec = Adam::new(&xvec.store, AdamConfig::default());
    let frame_cap = generation_frame_cap(corpus, &tts.model.cfg);

    for step in 1..=cfg.steps {
        let started = Instant::now();
        let lr = run.schedule.lr_at(step);
        let mut grads = GradAccum::zeros_like(&tts.store);
        let mut xvec_grads = GradAccum::zeros_like(&xvec.store);
        let mut bundle_acc = BundleAccum::new();

        for _ in 0..cfg.batch_size {
            let idx = sampler.next_index();
            let drawn = if corpus.manifest.records[idx].lang_id == new_lang
                && mix_rng.random::<f64>() < cfg.p_new
            {
                DrawnUtterance::External(&new_utts[mix_rng.random_range(0..new_utts.len())])
            } else {
                DrawnUtterance::FromCorpus(idx)
            };
            let bundle = tts_step_losses(
                tts,
                Some(&*xvec),
                &mut run,
                drawn,
                step,
                frame_cap,
                &mut grads,
                Some(&mut xvec_grads),
            )?;
            bundle_acc.add(&bundle);
        }
        let scale = 1.0 / cfg.batch_size as f64;
        grads.scale(scale);
        adam.step(&mut tts.store, &grads, lr);
        if apply_joint {
            xvec_grads.scale(scale);
            adam_xvec.step(&mut xvec.store, &xvec_grads, lr);
        }

        let bundle = bundle_acc.mean();
        run.report
            .records
            .push(StepRecord::from_bundle(step, lr, &bundle));
        run.report
            .step_timings_ms
            .push(started.elapsed().as_secs_f64() * 1e3);
    }

    tts.stages.push(format!("extend_speaker_{}", new_id.0));
    xvec.stages.push(format!("extend_speaker_{}", new_id.0));
    run.report.converged = true;
    Ok(run.report)
}
