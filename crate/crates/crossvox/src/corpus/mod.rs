//! Synthetic multilingual mel-spectrogram corpus.
//!
//! Every utterance is rendered from known generative factors: a per-phone
//! spectral template, an additive per-speaker signature, a per-speaker
//! spectral tilt, and a per-language prosody contour. Speaker signatures are
//! the sum of a language-shared bias and an individual component, so speakers
//! of one language resemble each other more than speakers across languages —
//! the confound that makes cross-lingual speaker transfer non-trivial.
//!
//! Because the contour integrates to zero over the voiced span and silence is
//! rendered at an exact floor level, the speaker factors of a clean utterance
//! can be recovered analytically; see [`oracle_speaker_vector`].

mod store;

pub use store::{MelStore, MelStoreWriter, CONFIG_FILE, MANIFEST_FILE, MEL_FILE};

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;
use crate::seeds;

/// Index of a speaker, global across languages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpeakerId(pub u32);

/// Index of a language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LangId(pub u32);

/// Index of a phone, global across languages (phone inventories are disjoint).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhoneId(pub u32);

impl fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
impl fmt::Display for LangId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
impl fmt::Display for PhoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Generative description of one language.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub lang_id: LangId,
    /// Disjoint slice of the global phone inventory owned by this language.
    pub phone_set: Vec<PhoneId>,
    /// Canonical frame duration of each phone, parallel to `phone_set`.
    pub durations: Vec<usize>,
    /// Amplitude of the additive prosody contour.
    pub contour_amplitude: f64,
    /// Nominal number of sine cycles the contour completes over an utterance.
    pub contour_cycles: u32,
}

impl LanguageSpec {
    pub fn contains(&self, phone: PhoneId) -> bool {
        self.phone_set.contains(&phone)
    }

    /// Position of `phone` within this language's inventory.
    pub fn phone_index(&self, phone: PhoneId) -> Option<usize> {
        self.phone_set.iter().position(|p| *p == phone)
    }

    /// Canonical duration of `phone`, if it belongs to this language.
    pub fn duration_of(&self, phone: PhoneId) -> Option<usize> {
        self.phone_index(phone).map(|i| self.durations[i])
    }
}

/// Generative description of one speaker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub speaker_id: SpeakerId,
    pub native_lang: LangId,
    /// Additive spectral signature (language-shared bias plus an individual
    /// component), one value per mel bin.
    pub signature: Vec<f64>,
    /// Spectral tilt coefficient; multiplies the centred bin ramp.
    pub tilt: f64,
}

/// One rendered utterance together with its generative labels.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub speaker_id: SpeakerId,
    pub lang_id: LangId,
    pub phones: Vec<PhoneId>,
    /// Mel frames, shape `(n_frames, n_mels)`.
    pub mel: Array2<f64>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.mel.nrows()
    }
}

/// Knobs of the corpus generator. All values have desk-scale defaults and can
/// be overridden from a flat key-value config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_languages: usize,
    pub speakers_per_language: usize,
    pub n_mels: usize,
    pub phones_per_language: usize,
    /// Utterance count of the largest language; smaller languages follow the
    /// geometric ladder controlled by `imbalance_ratio`.
    pub utterances_per_language: usize,
    /// Ratio between the largest and the smallest language (1.0 = balanced).
    pub imbalance_ratio: f64,
    pub min_phones_per_utterance: usize,
    pub max_phones_per_utterance: usize,
    pub duration_min: usize,
    pub duration_max: usize,
    /// Silence frames rendered at each end before trimming.
    pub render_silence_frames: usize,
    /// Silence frames kept at each end after trimming.
    pub target_silence_frames: usize,
    /// Exact value of every bin in a silence frame.
    pub silence_level: f64,
    /// Frames whose bins all fall below this are treated as silence.
    pub silence_threshold: f64,
    /// Standard deviation of per-bin Gaussian noise on voiced frames.
    pub noise_sigma: f64,
    /// Scale of the language-shared component of speaker signatures.
    pub language_bias_scale: f64,
    /// Norm band the individual signature component is rescaled into.
    pub signature_norm_min: f64,
    pub signature_norm_max: f64,
    /// Spectral tilt is drawn uniformly from `[-tilt_max, tilt_max]`.
    pub tilt_max: f64,
    /// Phone templates are drawn i.i.d. normal with this deviation.
    pub template_scale: f64,
    /// Contour amplitude is drawn uniformly from `[0, contour_amplitude_max]`.
    pub contour_amplitude_max: f64,
    /// Every n-th utterance of a speaker is held out for evaluation
    /// (0 disables the hold-out split).
    pub holdout_every: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_languages: 4,
            speakers_per_language: 3,
            n_mels: 20,
            phones_per_language: 8,
            utterances_per_language: 120,
            imbalance_ratio: 5.0,
            min_phones_per_utterance: 3,
            max_phones_per_utterance: 6,
            duration_min: 2,
            duration_max: 5,
            render_silence_frames: 4,
            target_silence_frames: 2,
            silence_level: -4.0,
            silence_threshold: -3.5,
            noise_sigma: 0.05,
            language_bias_scale: 0.8,
            signature_norm_min: 1.0,
            signature_norm_max: 2.0,
            tilt_max: 0.6,
            template_scale: 1.0,
            contour_amplitude_max: 0.5,
            holdout_every: 10,
        }
    }
}

impl CorpusConfig {
    /// Builds a config from defaults overridden by `kv`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            n_languages: kv.get_usize("corpus.n_languages", d.n_languages)?,
            speakers_per_language: kv
                .get_usize("corpus.speakers_per_language", d.speakers_per_language)?,
            n_mels: kv.get_usize("corpus.n_mels", d.n_mels)?,
            phones_per_language: kv
                .get_usize("corpus.phones_per_language", d.phones_per_language)?,
            utterances_per_language: kv
                .get_usize("corpus.utterances_per_language", d.utterances_per_language)?,
            imbalance_ratio: kv.get_f64("corpus.imbalance_ratio", d.imbalance_ratio)?,
            min_phones_per_utterance: kv
                .get_usize("corpus.min_phones_per_utterance", d.min_phones_per_utterance)?,
            max_phones_per_utterance: kv
                .get_usize("corpus.max_phones_per_utterance", d.max_phones_per_utterance)?,
            duration_min: kv.get_usize("corpus.duration_min", d.duration_min)?,
            duration_max: kv.get_usize("corpus.duration_max", d.duration_max)?,
            render_silence_frames: kv
                .get_usize("corpus.render_silence_frames", d.render_silence_frames)?,
            target_silence_frames: kv
                .get_usize("corpus.target_silence_frames", d.target_silence_frames)?,
            silence_level: kv.get_f64("corpus.silence_level", d.silence_level)?,
            silence_threshold: kv.get_f64("corpus.silence_threshold", d.silence_threshold)?,
            noise_sigma: kv.get_f64("corpus.noise_sigma", d.noise_sigma)?,
            language_bias_scale: kv
                .get_f64("corpus.language_bias_scale", d.language_bias_scale)?,
            signature_norm_min: kv.get_f64("corpus.signature_norm_min", d.signature_norm_min)?,
            signature_norm_max: kv.get_f64("corpus.signature_norm_max", d.signature_norm_max)?,
            tilt_max: kv.get_f64("corpus.tilt_max", d.tilt_max)?,
            template_scale: kv.get_f64("corpus.template_scale", d.template_scale)?,
            contour_amplitude_max: kv
                .get_f64("corpus.contour_amplitude_max", d.contour_amplitude_max)?,
            holdout_every: kv.get_usize("corpus.holdout_every", d.holdout_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_languages < 2 {
            return Err(Error::Config(format!(
                "corpus needs at least 2 languages, got {}",
                self.n_languages
            )));
        }
        if self.speakers_per_language < 2 {
            return Err(Error::Config(format!(
                "corpus needs at least 2 speakers per language, got {}",
                self.speakers_per_language
            )));
        }
        if self.n_mels == 0 || self.phones_per_language == 0 {
            return Err(Error::Config(
                "n_mels and phones_per_language must be positive".into(),
            ));
        }
        if self.utterances_per_language == 0 {
            return Err(Error::Config("utterances_per_language must be positive".into()));
        }
        if self.imbalance_ratio < 1.0 {
            return Err(Error::Config(format!(
                "imbalance_ratio must be >= 1, got {}",
                self.imbalance_ratio
            )));
        }
        if self.min_phones_per_utterance == 0
            || self.min_phones_per_utterance > self.max_phones_per_utterance
        {
            return Err(Error::Config(format!(
                "invalid phone count range [{}, {}]",
                self.min_phones_per_utterance, self.max_phones_per_utterance
            )));
        }
        if self.duration_min == 0 || self.duration_min > self.duration_max {
            return Err(Error::Config(format!(
                "invalid duration range [{}, {}]",
                self.duration_min, self.duration_max
            )));
        }
        if self.render_silence_frames < self.target_silence_frames {
            return Err(Error::Config(format!(
                "render_silence_frames ({}) must be >= target_silence_frames ({})",
                self.render_silence_frames, self.target_silence_frames
            )));
        }
        if self.silence_threshold <= self.silence_level {
            return Err(Error::Config(format!(
                "silence_threshold ({}) must exceed silence_level ({})",
                self.silence_threshold, self.silence_level
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if self.signature_norm_min <= 0.0 || self.signature_norm_min > self.signature_norm_max {
            return Err(Error::Config(format!(
                "invalid signature norm band [{}, {}]",
                self.signature_norm_min, self.signature_norm_max
            )));
        }
        Ok(())
    }

    pub fn n_speakers(&self) -> usize {
        self.n_languages * self.speakers_per_language
    }

    pub fn n_phones(&self) -> usize {
        self.n_languages * self.phones_per_language
    }
}

/// The hidden generative factors of a corpus, derived deterministically from
/// `(config, seed)`.
#[derive(Debug, Clone)]
pub struct CorpusSpecs {
    pub languages: Vec<LanguageSpec>,
    pub speakers: Vec<SpeakerSpec>,
    /// Spectral template of every global phone id, each of length `n_mels`.
    pub phone_templates: Vec<Vec<f64>>,
}

impl CorpusSpecs {
    pub fn language(&self, lang: LangId) -> Result<&LanguageSpec> {
        self.languages
            .get(lang.0 as usize)
            .ok_or_else(|| Error::Corpus(format!("unknown language id {lang}")))
    }

    pub fn speaker(&self, spk: SpeakerId) -> Result<&SpeakerSpec> {
        self.speakers
            .get(spk.0 as usize)
            .ok_or_else(|| Error::Corpus(format!("unknown speaker id {spk}")))
    }

    pub fn template(&self, phone: PhoneId) -> Result<&[f64]> {
        self.phone_templates
            .get(phone.0 as usize)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Corpus(format!("unknown phone id {phone}")))
    }
}

/// Derives all generative factors from the seed. Languages own disjoint
/// contiguous phone-id ranges; speaker signatures share a per-language bias.
pub fn derive_specs(cfg: &CorpusConfig, seed: u64) -> CorpusSpecs {
    let mut templates = Vec::with_capacity(cfg.n_phones());
    let mut languages = Vec::with_capacity(cfg.n_languages);
    let mut speakers = Vec::with_capacity(cfg.n_speakers());

    for l in 0..cfg.n_languages {
        let mut rng = seeds::rng(seed, "language", l as u64);
        let base = l * cfg.phones_per_language;
        let phone_set: Vec<PhoneId> = (base..base + cfg.phones_per_language)
            .map(|p| PhoneId(p as u32))
            .collect();
        let durations: Vec<usize> = (0..cfg.phones_per_language)
            .map(|_| rng.random_range(cfg.duration_min..=cfg.duration_max))
            .collect();
        let contour_amplitude = rng.random::<f64>() * cfg.contour_amplitude_max;
        let contour_cycles = rng.random_range(1..=3u32);
        languages.push(LanguageSpec {
            lang_id: LangId(l as u32),
            phone_set,
            durations,
            contour_amplitude,
            contour_cycles,
        });

        let mut trng = seeds::rng(seed, "templates", l as u64);
        let tdist = Normal::new(0.0, cfg.template_scale).expect("valid template scale");
        for _ in 0..cfg.phones_per_language {
            templates.push((0..cfg.n_mels).map(|_| tdist.sample(&mut trng)).collect());
        }
    }

    for l in 0..cfg.n_languages {
        // Language bias: a fixed-scale random direction shared by every
        // speaker of the language. This is the cross-lingual identity
        // confound the models must learn to disentangle.
        let mut brng = seeds::rng(seed, "language-bias", l as u64);
        let bias = random_direction(&mut brng, cfg.n_mels, cfg.language_bias_scale);

        for s in 0..cfg.speakers_per_language {
            let id = l * cfg.speakers_per_language + s;
            let mut rng = seeds::rng(seed, "speaker", id as u64);
            let norm_dist = Normal::new(0.0, 1.0).expect("unit normal");
            let mut personal: Vec<f64> =
                (0..cfg.n_mels).map(|_| norm_dist.sample(&mut rng)).collect();
            let target = cfg.signature_norm_min
                + rng.random::<f64>() * (cfg.signature_norm_max - cfg.signature_norm_min);
            rescale_to_norm(&mut personal, target);
            let signature: Vec<f64> =
                personal.iter().zip(&bias).map(|(p, b)| p + b).collect();
            let tilt = (rng.random::<f64>() * 2.0 - 1.0) * cfg.tilt_max;
            speakers.push(SpeakerSpec {
                speaker_id: SpeakerId(id as u32),
                native_lang: LangId(l as u32),
                signature,
                tilt,
            });
        }
    }

    CorpusSpecs { languages, speakers, phone_templates: templates }
}

fn random_direction<R: Rng>(rng: &mut R, dim: usize, norm: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    let mut v: Vec<f64> = (0..dim).map(|_| dist.sample(rng)).collect();
    rescale_to_norm(&mut v, norm);
    v
}

fn rescale_to_norm(v: &mut [f64], target: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x *= target / norm;
        }
    }
}

/// Centred bin ramp multiplied by the speaker tilt: `ramp[j] = j/(M-1) - 0.5`.
pub fn bin_ramp(n_mels: usize) -> Vec<f64> {
    if n_mels < 2 {
        return vec![0.0; n_mels];
    }
    (0..n_mels)
        .map(|j| j as f64 / (n_mels - 1) as f64 - 0.5)
        .collect()
}

/// Prosody contour value at voiced frame `t` of `n_voiced`. The cycle count
/// is folded into `1..n_voiced-1` so the sine sums to exactly zero over the
/// voiced span, which keeps the speaker oracle exact.
fn contour_at(lang: &LanguageSpec, t: usize, n_voiced: usize, phase: f64) -> f64 {
    if n_voiced < 2 {
        return 0.0;
    }
    let k = ((lang.contour_cycles as usize - 1) % (n_voiced - 1) + 1) as f64;
    lang.contour_amplitude * (TAU * k * t as f64 / n_voiced as f64 + phase).sin()
}

/// Renders the mel frames of one utterance from its generative factors.
///
/// Layout: `render_silence_frames` of exact silence, one block of frames per
/// phone at its canonical duration, then trailing silence. Voiced frame `t`,
/// bin `j` is `template[j] + signature[j] + tilt * ramp[j] + contour(t)` plus
/// Gaussian noise.
pub fn render_utterance(
    phones: &[PhoneId],
    speaker: &SpeakerSpec,
    language: &LanguageSpec,
    specs: &CorpusSpecs,
    cfg: &CorpusConfig,
    seed: u64,
) -> Result<Utterance> {
    if phones.is_empty() {
        return Err(Error::Corpus("utterance must contain at least one phone".into()));
    }
    for p in phones {
        if !language.contains(*p) {
            return Err(Error::Corpus(format!(
                "phone {p} does not belong to language {}",
                language.lang_id
            )));
        }
    }

    let n_voiced: usize = phones
        .iter()
        .map(|p| language.duration_of(*p).expect("membership checked"))
        .sum();
    let n_frames = n_voiced + 2 * cfg.render_silence_frames;
    let mut mel = Array2::from_elem((n_frames, cfg.n_mels), cfg.silence_level);

    let mut rng = seeds::rng(seed, "render", 0);
    let phase = rng.random::<f64>() * TAU;
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid noise sigma");
    let ramp = bin_ramp(cfg.n_mels);

    let mut t = 0usize;
    for p in phones {
        let template = specs.template(*p)?;
        let dur = language.duration_of(*p).expect("membership checked");
        for _ in 0..dur {
            let row = cfg.render_silence_frames + t;
            let c = contour_at(language, t, n_voiced, phase);
            for j in 0..cfg.n_mels {
                let clean = template[j] + speaker.signature[j] + speaker.tilt * ramp[j] + c;
                let sample = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                mel[[row, j]] = clean + sample;
            }
            t += 1;
        }
    }

    Ok(Utterance {
        speaker_id: speaker.speaker_id,
        lang_id: language.lang_id,
        phones: phones.to_vec(),
        mel,
    })
}

/// Result of [`trim_silence`].
#[derive(Debug, Clone)]
pub struct Trimmed {
    pub mel: Array2<f64>,
    /// True when an end had less silence than the target and was padded.
    pub padded: bool,
}

/// True when every bin of the frame falls below the silence threshold.
fn is_silence_row(mel: &Array2<f64>, row: usize, threshold: f64) -> bool {
    mel.row(row).iter().all(|v| *v < threshold)
}

/// First and last voiced frame index, or `None` for all-silence input.
pub fn voiced_span(mel: &Array2<f64>, threshold: f64) -> Option<(usize, usize)> {
    let first = (0..mel.nrows()).find(|r| !is_silence_row(mel, *r, threshold))?;
    let last = (0..mel.nrows()).rev().find(|r| !is_silence_row(mel, *r, threshold))?;
    Some((first, last))
}

/// Normalises leading and trailing silence to exactly `target` frames per
/// end, cutting surplus or padding with frames at `silence_level`. All-silence
/// input is an error. Idempotent: applying it twice equals applying it once.
pub fn trim_silence(
    mel: &Array2<f64>,
    target: usize,
    threshold: f64,
    silence_level: f64,
) -> Result<Trimmed> {
    let (first, last) = voiced_span(mel, threshold)
        .ok_or_else(|| Error::Corpus("cannot trim an all-silence utterance".into()))?;
    let n_voiced = last - first + 1;
    let n_mels = mel.ncols();
    let padded = first < target || mel.nrows() - 1 - last < target;

    let mut out = Array2::from_elem((n_voiced + 2 * target, n_mels), silence_level);
    for (i, r) in (first..=last).enumerate() {
        for j in 0..n_mels {
            out[[target + i, j]] = mel[[r, j]];
        }
    }
    Ok(Trimmed { mel: out, padded })
}

/// Duration-weighted mean of the phone templates of `phones`: the expected
/// time-mean of the voiced span for a zero-signature, zero-tilt speaker.
pub fn expected_phone_mean(
    phones: &[PhoneId],
    language: &LanguageSpec,
    specs: &CorpusSpecs,
) -> Result<Vec<f64>> {
    let n_mels = specs.phone_templates.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; n_mels];
    let mut total = 0usize;
    for p in phones {
        let dur = language
            .duration_of(*p)
            .ok_or_else(|| Error::Corpus(format!("phone {p} not in language {}", language.lang_id)))?;
        let template = specs.template(*p)?;
        for j in 0..n_mels {
            acc[j] += template[j] * dur as f64;
        }
        total += dur;
    }
    if total == 0 {
        return Err(Error::Corpus("phone sequence has zero total duration".into()));
    }
    for a in acc.iter_mut() {
        *a /= total as f64;
    }
    Ok(acc)
}

/// Recovers the speaker factors of a mel spectrogram analytically.
///
/// Averages the voiced frames and subtracts the duration-weighted phone
/// template mean; because the prosody contour sums to zero over the voiced
/// span, the remainder is `signature + tilt * ramp` exactly on noise-free
/// renders, and approximately on noisy or synthesized ones. The returned
/// vector is a model-free reference point for speaker similarity.
pub fn oracle_speaker_vector(
    mel: &Array2<f64>,
    phones: &[PhoneId],
    language: &LanguageSpec,
    specs: &CorpusSpecs,
    cfg: &CorpusConfig,
) -> Result<Vec<f64>> {
    let (first, last) = voiced_span(mel, cfg.silence_threshold)
        .ok_or_else(|| Error::Corpus("cannot extract a speaker vector from silence".into()))?;
    let n_mels = mel.ncols();
    let mut mean = vec![0.0; n_mels];
    for r in first..=last {
        for j in 0..n_mels {
            mean[j] += mel[[r, j]];
        }
    }
    let n = (last - first + 1) as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    let expected = expected_phone_mean(phones, language, specs)?;
    Ok(mean.iter().zip(&expected).map(|(m, e)| m - e).collect())
}

/// Per-utterance bookkeeping stored in the corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub utt_id: u32,
    pub speaker_id: SpeakerId,
    pub lang_id: LangId,
    pub n_frames: usize,
    pub phones: Vec<PhoneId>,
    /// Absolute byte offset of this utterance's frames in the mel store.
    pub byte_offset: u64,
    /// Ordinal of this utterance among its speaker's utterances.
    pub speaker_ordinal: u32,
}

impl UtteranceRecord {
    /// True when the hold-out rule assigns this utterance to evaluation.
    pub fn is_holdout(&self, holdout_every: usize) -> bool {
        holdout_every > 0 && (self.speaker_ordinal as usize + 1) % holdout_every == 0
    }
}

/// Line-delimited index of a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub seed: u64,
    pub generator_version: String,
    pub records: Vec<UtteranceRecord>,
}

impl CorpusManifest {
    /// Utterance counts per language, in language-id order.
    pub fn language_counts(&self, n_languages: usize) -> Vec<usize> {
        let mut counts = vec![0usize; n_languages];
        for r in &self.records {
            counts[r.lang_id.0 as usize] += 1;
        }
        counts
    }

    /// Utterance counts per speaker, keyed by speaker id.
    pub fn speaker_counts(&self) -> BTreeMap<SpeakerId, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.speaker_id).or_insert(0) += 1;
        }
        counts
    }
}

/// Geometric-ladder utterance counts: language `i` of `n` gets
/// `round(max * ratio^(-i/(n-1)))`, so language 0 has `max` utterances and
/// language `n-1` has `max / ratio`, with at least one utterance each.
pub fn language_utterance_counts(max: usize, ratio: f64, n_languages: usize) -> Vec<usize> {
    (0..n_languages)
        .map(|i| {
            let exp = if n_languages > 1 {
                -(i as f64) / (n_languages as f64 - 1.0)
            } else {
                0.0
            };
            ((max as f64 * ratio.powf(exp)).round() as usize).max(1)
        })
        .collect()
}

/// A fully generated corpus held in memory before serialization.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub specs: CorpusSpecs,
    pub utterances: Vec<Utterance>,
    pub records: Vec<UtteranceRecord>,
}

/// Generates every utterance of the corpus deterministically from the seed.
///
/// Utterances are assigned round-robin to the speakers of each language, each
/// rendered from its own derived random stream, then silence-normalised to
/// the configured target.
pub fn generate(cfg: &CorpusConfig, seed: u64) -> Result<GeneratedCorpus> {
    cfg.validate()?;
    let specs = derive_specs(cfg, seed);
    let counts = language_utterance_counts(
        cfg.utterances_per_language,
        cfg.imbalance_ratio,
        cfg.n_languages,
    );

    let mut utterances = Vec::new();
    let mut records = Vec::new();
    let mut speaker_ordinals = vec![0u32; cfg.n_speakers()];
    let mut utt_id = 0u32;

    for (l, count) in counts.iter().enumerate() {
        let language = &specs.languages[l];
        for u in 0..*count {
            let speaker_idx = l * cfg.speakers_per_language + u % cfg.speakers_per_language;
            let speaker = &specs.speakers[speaker_idx];

            let mut rng = seeds::rng(seed, "utterance", utt_id as u64);
            let n_phones =
                rng.random_range(cfg.min_phones_per_utterance..=cfg.max_phones_per_utterance);
            let phones: Vec<PhoneId> = (0..n_phones)
                .map(|_| language.phone_set[rng.random_range(0..language.phone_set.len())])
                .collect();
            let render_seed = u64::from_le_bytes(
                seeds::derive(seed, "render-utt", utt_id as u64)[..8]
                    .try_into()
                    .expect("8 bytes"),
            );
            let rendered = render_utterance(&phones, speaker, language, &specs, cfg, render_seed)?;
            let trimmed = trim_silence(
                &rendered.mel,
                cfg.target_silence_frames,
                cfg.silence_threshold,
                cfg.silence_level,
            )?;

            let ordinal = speaker_ordinals[speaker_idx];
            speaker_ordinals[speaker_idx] += 1;
            records.push(UtteranceRecord {
                utt_id,
                speaker_id: speaker.speaker_id,
                lang_id: language.lang_id,
                n_frames: trimmed.mel.nrows(),
                phones: phones.clone(),
                byte_offset: 0, // assigned when the mel store is written
                speaker_ordinal: ordinal,
            });
            utterances.push(Utterance { mel: trimmed.mel, ..rendered });
            utt_id += 1;
        }
    }

    Ok(GeneratedCorpus {
        config: cfg.clone(),
        seed,
        specs,
        utterances,
        records,
    })
}

/// A corpus loaded from disk: resolved config, manifest, re-derived specs and
/// the mel store.
#[derive(Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub specs: CorpusSpecs,
    pub manifest: CorpusManifest,
    store: MelStore,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let (config, seed) = store::read_config(dir)?;
        let manifest = store::read_manifest(dir)?;
        let melstore = MelStore::open(&dir.join(MEL_FILE))?;
        if melstore.n_mels() != config.n_mels {
            return Err(Error::Corpus(format!(
                "mel store has {} bins but config says {}",
                melstore.n_mels(),
                config.n_mels
            )));
        }
        let specs = derive_specs(&config, seed);
        Ok(Self { config, seed, specs, manifest, store: melstore })
    }

    pub fn n_utterances(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn record(&self, idx: usize) -> Result<&UtteranceRecord> {
        self.manifest
            .records
            .get(idx)
            .ok_or_else(|| Error::Corpus(format!("utterance index {idx} out of range")))
    }

    /// Reads the mel frames of utterance `idx` from the store.
    pub fn mel(&self, idx: usize) -> Result<Array2<f64>> {
        let rec = self.record(idx)?;
        self.store.read(rec.byte_offset, rec.n_frames)
    }

    pub fn utterance(&self, idx: usize) -> Result<Utterance> {
        let rec = self.record(idx)?;
        Ok(Utterance {
            speaker_id: rec.speaker_id,
            lang_id: rec.lang_id,
            phones: rec.phones.clone(),
            mel: self.store.read(rec.byte_offset, rec.n_frames)?,
        })
    }

    /// Indices of training utterances (hold-out rule excluded).
    pub fn train_indices(&self) -> Vec<usize> {
        self.split_indices(false)
    }

    /// Indices of held-out evaluation utterances.
    pub fn holdout_indices(&self) -> Vec<usize> {
        self.split_indices(true)
    }

    fn split_indices(&self, holdout: bool) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_holdout(self.config.holdout_every) == holdout)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Writes a generated corpus to `dir` (config, manifest and mel store) and
/// returns the manifest with byte offsets filled in.
pub fn write_corpus(corpus: &GeneratedCorpus, dir: &Path) -> Result<CorpusManifest> {
    store::write_corpus(corpus, dir)
}

/// Generates and writes a corpus in one step.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64, dir: &Path) -> Result<CorpusManifest> {
    let generated = generate(cfg, seed)?;
    write_corpus(&generated, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_cfg() -> CorpusConfig {
        CorpusConfig {
            n_languages: 2,
            speakers_per_language: 2,
            phones_per_language: 4,
            utterances_per_language: 12,
            imbalance_ratio: 1.0,
            noise_sigma: 0.0,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn render_frame_count_is_silence_plus_durations() {
        let cfg = CorpusConfig {
            render_silence_frames: 2,
            noise_sigma: 0.0,
            ..desk_cfg()
        };
        let mut specs = derive_specs(&cfg, 1);
        // Pin phone 0 of language 0 to duration 3: 2 + 3 + 2 = 7 frames.
        specs.languages[0].durations[0] = 3;
        let phones = [specs.languages[0].phone_set[0]];
        let utt = render_utterance(
            &phones,
            &specs.speakers[0],
            &specs.languages[0],
            &specs,
            &cfg,
            9,
        )
        .unwrap();
        assert_eq!(utt.n_frames(), 7);
        assert_eq!(utt.mel.ncols(), cfg.n_mels);
        // Leading and trailing silence sit exactly at the silence level.
        for r in [0, 1, 5, 6] {
            for j in 0..cfg.n_mels {
                assert_eq!(utt.mel[[r, j]], cfg.silence_level);
            }
        }
        for r in 2..5 {
            assert!(!is_silence_row(&utt.mel, r, cfg.silence_threshold));
        }
    }

    #[test]
    fn render_is_deterministic_in_seed() {
        let cfg = CorpusConfig { noise_sigma: 0.1, ..desk_cfg() };
        let specs = derive_specs(&cfg, 3);
        let phones: Vec<PhoneId> = specs.languages[0].phone_set[..2].to_vec();
        let a = render_utterance(&phones, &specs.speakers[0], &specs.languages[0], &specs, &cfg, 5)
            .unwrap();
        let b = render_utterance(&phones, &specs.speakers[0], &specs.languages[0], &specs, &cfg, 5)
            .unwrap();
        let c = render_utterance(&phones, &specs.speakers[0], &specs.languages[0], &specs, &cfg, 6)
            .unwrap();
        assert_eq!(a.mel, b.mel);
        assert_ne!(a.mel, c.mel);
    }

    #[test]
    fn render_rejects_foreign_phones() {
        let cfg = desk_cfg();
        let specs = derive_specs(&cfg, 1);
        let foreign = specs.languages[1].phone_set[0];
        let err = render_utterance(
            &[foreign],
            &specs.speakers[0],
            &specs.languages[0],
            &specs,
            &cfg,
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("does not belong"));
    }

    #[test]
    fn contour_sums_to_zero_over_voiced_span() {
        // Direct check of the oracle's key assumption, for several lengths
        // including lengths shorter than the nominal cycle count.
        for n_voiced in [2usize, 3, 5, 8, 13, 30] {
            for cycles in 1..=3u32 {
                let lang = LanguageSpec {
                    lang_id: LangId(0),
                    phone_set: vec![],
                    durations: vec![],
                    contour_amplitude: 0.7,
                    contour_cycles: cycles,
                };
                let sum: f64 = (0..n_voiced).map(|t| contour_at(&lang, t, n_voiced, 0.9)).sum();
                assert!(
                    sum.abs() < 1e-9,
                    "contour sum {sum} for n_voiced={n_voiced} cycles={cycles}"
                );
            }
        }
    }

    #[test]
    fn oracle_recovers_signature_plus_tilt_exactly_when_noise_free() {
        let cfg = CorpusConfig { noise_sigma: 0.0, ..desk_cfg() };
        let specs = derive_specs(&cfg, 11);
        let lang = &specs.languages[0];
        let speaker = &specs.speakers[1];
        let phones: Vec<PhoneId> = vec![lang.phone_set[2], lang.phone_set[0], lang.phone_set[2]];
        let utt = render_utterance(&phones, speaker, lang, &specs, &cfg, 21).unwrap();

        let got = oracle_speaker_vector(&utt.mel, &phones, lang, &specs, &cfg).unwrap();
        let ramp = bin_ramp(cfg.n_mels);
        for j in 0..cfg.n_mels {
            let expected = speaker.signature[j] + speaker.tilt * ramp[j];
            assert!(
                (got[j] - expected).abs() < 1e-9,
                "bin {j}: got {} expected {expected}",
                got[j]
            );
        }
    }

    #[test]
    fn oracle_separates_speakers_better_within_than_signatures_across() {
        // Noise-free corpus: the same speaker's vectors from different
        // utterances must coincide, and differ from any other speaker's.
        let cfg = CorpusConfig { noise_sigma: 0.0, ..desk_cfg() };
        let specs = derive_specs(&cfg, 17);
        let lang = &specs.languages[0];
        let phones_a: Vec<PhoneId> = vec![lang.phone_set[0], lang.phone_set[1]];
        let phones_b: Vec<PhoneId> = vec![lang.phone_set[3]];

        let v = |spk: usize, phones: &[PhoneId], seed: u64| {
            let utt =
                render_utterance(phones, &specs.speakers[spk], lang, &specs, &cfg, seed).unwrap();
            oracle_speaker_vector(&utt.mel, phones, lang, &specs, &cfg).unwrap()
        };
        let same_a = v(0, &phones_a, 1);
        let same_b = v(0, &phones_b, 2);
        let other = v(1, &phones_a, 3);

        let dist = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        assert!(dist(&same_a, &same_b) < 1e-9);
        assert!(dist(&same_a, &other) > 0.1);
    }

    #[test]
    fn oracle_rejects_all_silence() {
        let cfg = desk_cfg();
        let specs = derive_specs(&cfg, 1);
        let mel = Array2::from_elem((6, cfg.n_mels), cfg.silence_level);
        let err = oracle_speaker_vector(
            &mel,
            &[specs.languages[0].phone_set[0]],
            &specs.languages[0],
            &specs,
            &cfg,
        )
        .unwrap_err();
        assert!(err.to_string().contains("silence"));
    }

    #[test]
    fn trim_cuts_surplus_and_pads_deficit() {
        let cfg = desk_cfg();
        let n_mels = 3;
        let mut mel = Array2::from_elem((10, n_mels), cfg.silence_level);
        for j in 0..n_mels {
            mel[[4, j]] = 1.0;
            mel[[5, j]] = 0.5;
        }
        // 4 leading, 4 trailing silence frames; target 2 -> 2 + 2 + 2 = 6.
        let t = trim_silence(&mel, 2, cfg.silence_threshold, cfg.silence_level).unwrap();
        assert_eq!(t.mel.nrows(), 6);
        assert!(!t.padded);
        assert_eq!(t.mel[[2, 0]], 1.0);
        assert_eq!(t.mel[[3, 0]], 0.5);

        // No silence at all; target 2 -> padded on both ends.
        let mut voiced = Array2::zeros((2, n_mels));
        voiced.fill(1.0);
        let t2 = trim_silence(&voiced, 2, cfg.silence_threshold, cfg.silence_level).unwrap();
        assert_eq!(t2.mel.nrows(), 6);
        assert!(t2.padded);
        assert_eq!(t2.mel[[0, 0]], cfg.silence_level);
        assert_eq!(t2.mel[[2, 0]], 1.0);
    }

    #[test]
    fn trim_is_idempotent() {
        let cfg = desk_cfg();
        let specs = derive_specs(&cfg, 23);
        let lang = &specs.languages[1];
        let phones: Vec<PhoneId> = vec![lang.phone_set[1], lang.phone_set[2]];
        let utt = render_utterance(&phones, &specs.speakers[2], lang, &specs, &cfg, 4).unwrap();
        let once =
            trim_silence(&utt.mel, 2, cfg.silence_threshold, cfg.silence_level).unwrap();
        let twice =
            trim_silence(&once.mel, 2, cfg.silence_threshold, cfg.silence_level).unwrap();
        assert_eq!(once.mel, twice.mel);
        assert!(!twice.padded);
    }

    #[test]
    fn trim_rejects_all_silence() {
        let mel = Array2::from_elem((5, 4), -4.0);
        assert!(trim_silence(&mel, 2, -3.5, -4.0).is_err());
    }

    #[test]
    fn imbalance_ladder_matches_formula() {
        // ratio 10 over 4 languages: 120, 120*10^(-1/3), 120*10^(-2/3), 12.
        let counts = language_utterance_counts(120, 10.0, 4);
        let expect: Vec<usize> = (0..4)
            .map(|i| (120.0 * 10.0f64.powf(-(i as f64) / 3.0)).round() as usize)
            .collect();
        assert_eq!(counts, expect);
        assert_eq!(counts[0], 120);
        assert_eq!(counts[3], 12);

        // Balanced corpus: every language at the maximum.
        assert_eq!(language_utterance_counts(50, 1.0, 3), vec![50, 50, 50]);
    }

    #[test]
    fn generate_respects_ladder_and_assigns_all_speakers() {
        let cfg = CorpusConfig {
            utterances_per_language: 20,
            imbalance_ratio: 4.0,
            ..desk_cfg()
        };
        let corpus = generate(&cfg, 42).unwrap();
        let expect = language_utterance_counts(20, 4.0, cfg.n_languages);
        let manifest = CorpusManifest {
            seed: 42,
            generator_version: crate::VERSION.into(),
            records: corpus.records.clone(),
        };
        assert_eq!(manifest.language_counts(cfg.n_languages), expect);

        // Round-robin assignment touches every speaker.
        let per_speaker = manifest.speaker_counts();
        assert_eq!(per_speaker.len(), cfg.n_speakers());
        for (_, count) in per_speaker {
            assert!(count > 0);
        }

        // All phones belong to the utterance's language; silence normalised.
        for (rec, utt) in corpus.records.iter().zip(&corpus.utterances) {
            let lang = &corpus.specs.languages[rec.lang_id.0 as usize];
            assert!(rec.phones.iter().all(|p| lang.contains(*p)));
            assert_eq!(rec.n_frames, utt.n_frames());
            let (first, last) = voiced_span(&utt.mel, cfg.silence_threshold).unwrap();
            assert_eq!(first, cfg.target_silence_frames);
            assert_eq!(utt.n_frames() - 1 - last, cfg.target_silence_frames);
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let cfg = desk_cfg();
        let a = generate(&cfg, 7).unwrap();
        let b = generate(&cfg, 7).unwrap();
        assert_eq!(a.records, b.records);
        for (ua, ub) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(ua.mel, ub.mel);
        }
        let c = generate(&cfg, 8).unwrap();
        assert_ne!(a.utterances[0].mel, c.utterances[0].mel);
    }

    #[test]
    fn holdout_rule_marks_every_nth_per_speaker() {
        let rec = |ordinal: u32| UtteranceRecord {
            utt_id: 0,
            speaker_id: SpeakerId(0),
            lang_id: LangId(0),
            n_frames: 1,
            phones: vec![],
            byte_offset: 0,
            speaker_ordinal: ordinal,
        };
        assert!(!rec(0).is_holdout(10));
        assert!(!rec(8).is_holdout(10));
        assert!(rec(9).is_holdout(10));
        assert!(rec(19).is_holdout(10));
        assert!(!rec(9).is_holdout(0));
    }

    #[test]
    fn config_validation_rejects_degenerate_setups() {
        let bad_langs = CorpusConfig { n_languages: 1, ..CorpusConfig::default() };
        assert!(bad_langs.validate().is_err());
        let bad_speakers =
            CorpusConfig { speakers_per_language: 1, ..CorpusConfig::default() };
        assert!(bad_speakers.validate().is_err());
        let bad_ratio = CorpusConfig { imbalance_ratio: 0.5, ..CorpusConfig::default() };
        assert!(bad_ratio.validate().is_err());
        let bad_silence = CorpusConfig {
            silence_threshold: -4.5,
            ..CorpusConfig::default()
        };
        assert!(bad_silence.validate().is_err());
        assert!(CorpusConfig::default().validate().is_ok());
    }

    #[test]
    fn signatures_share_language_bias() {
        let cfg = CorpusConfig::default();
        let specs = derive_specs(&cfg, 5);
        // Mean pairwise signature distance within a language should be
        // smaller than across languages thanks to the shared bias.
        let dist = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let mut within = Vec::new();
        let mut across = Vec::new();
        for a in &specs.speakers {
            for b in &specs.speakers {
                if a.speaker_id >= b.speaker_id {
                    continue;
                }
                let d = dist(&a.signature, &b.signature);
                if a.native_lang == b.native_lang {
                    within.push(d);
                } else {
                    across.push(d);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&within) < mean(&across));
    }

    #[test]
    fn kv_overrides_and_validation_flow_through_from_kv() {
        let mut kv = KvConfig::new();
        kv.set("corpus.n_languages", "3");
        kv.set("corpus.noise_sigma", "0.2");
        let cfg = CorpusConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.n_languages, 3);
        assert_eq!(cfg.noise_sigma, 0.2);
        assert_eq!(cfg.n_mels, CorpusConfig::default().n_mels);

        kv.set("corpus.n_languages", "1");
        assert!(CorpusConfig::from_kv(&kv).is_err());
    }
}
