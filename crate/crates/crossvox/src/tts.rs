//! Multilingual transformer TTS with speaker and language conditioning.
//!
//! The model maps a phone sequence to mel frames: a pre-LN transformer
//! encoder over phone embeddings, a causal pre-LN transformer decoder with
//! cross-attention, a Tacotron-style pre-net on the mel inputs, and linear
//! mel / stop-token heads. Speaker and language identity enter through
//! lookup tables refined by small feed-forward networks; the resulting
//! conditioning vectors are added (after projection) to the encoder states,
//! and the speaker vector is additionally concatenated to the pre-net
//! output so the autoregressive path sees it directly.
//!
//! Multi-task classifier heads on the conditioning vectors encourage the
//! tables to stay speaker- and language-discriminative.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LangId, PhoneId, SpeakerId};
use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;
use crate::nn::{glorot, linear, ones, table_init, zeros, ParamId, ParamStore};
use crate::seeds;
use crate::tape::{NodeId, Tape};

/// Hyper-parameters of the TTS network, including the table sizes it was
/// built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_enc: usize,
    pub d_dec: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_spk_emb: usize,
    pub d_lang_emb: usize,
    pub n_mels: usize,
    pub max_frames: usize,
    pub dropout: f64,
    pub n_phones: usize,
    pub n_speakers: usize,
    pub n_languages: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough to train on a laptop CPU in
    /// minutes while keeping the full architecture.
    pub fn desk(n_phones: usize, n_speakers: usize, n_languages: usize) -> Self {
        Self {
            d_enc: 64,
            d_dec: 64,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_spk_emb: 16,
            d_lang_emb: 16,
            n_mels: 20,
            max_frames: 200,
            dropout: 0.1,
            n_phones,
            n_speakers,
            n_languages,
        }
    }

    /// Full-scale reference configuration (documented, not used at desk
    /// scale): encoder dimension 512, decoder 768, embeddings 128.
    pub fn full_scale(n_phones: usize, n_speakers: usize, n_languages: usize) -> Self {
        Self {
            d_enc: 512,
            d_dec: 768,
            n_heads: 8,
            n_enc_layers: 6,
            n_dec_layers: 6,
            d_spk_emb: 128,
            d_lang_emb: 128,
            n_mels: 80,
            max_frames: 1000,
            dropout: 0.1,
            n_phones,
            n_speakers,
            n_languages,
        }
    }

    pub fn from_kv(
        kv: &KvConfig,
        n_phones: usize,
        n_speakers: usize,
        n_languages: usize,
    ) -> Result<Self> {
        let d = Self::desk(n_phones, n_speakers, n_languages);
        let cfg = Self {
            d_enc: kv.get_usize("model.d_enc", d.d_enc)?,
            d_dec: kv.get_usize("model.d_dec", d.d_dec)?,
            n_heads: kv.get_usize("model.n_heads", d.n_heads)?,
            n_enc_layers: kv.get_usize("model.n_enc_layers", d.n_enc_layers)?,
            n_dec_layers: kv.get_usize("model.n_dec_layers", d.n_dec_layers)?,
            d_spk_emb: kv.get_usize("model.d_spk_emb", d.d_spk_emb)?,
            d_lang_emb: kv.get_usize("model.d_lang_emb", d.d_lang_emb)?,
            n_mels: kv.get_usize("model.n_mels", d.n_mels)?,
            max_frames: kv.get_usize("model.max_frames", d.max_frames)?,
            dropout: kv.get_f64("model.dropout", d.dropout)?,
            n_phones,
            n_speakers,
            n_languages,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_enc % self.n_heads != 0 || self.d_dec % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_enc ({}) and d_dec ({}) must be divisible by n_heads ({})",
                self.d_enc, self.d_dec, self.n_heads
            )));
        }
        if self.d_spk_emb != self.d_lang_emb {
            return Err(Error::Config(format!(
                "speaker ({}) and language ({}) embedding dimensions must match: \
                 they feed symmetric conditioning paths",
                self.d_spk_emb, self.d_lang_emb
            )));
        }
        if self.d_spk_emb == 0 || self.n_mels == 0 || self.max_frames == 0 {
            return Err(Error::Config(
                "embedding width, mel bins and max_frames must be positive".into(),
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(Error::Config("need at least one encoder and decoder layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.n_phones == 0 || self.n_speakers == 0 || self.n_languages == 0 {
            return Err(Error::Config("table sizes must be positive".into()));
        }
        Ok(())
    }

    fn d_ff_enc(&self) -> usize {
        2 * self.d_enc
    }

    fn d_ff_dec(&self) -> usize {
        2 * self.d_dec
    }
}

/// Per-head attention projections.
#[derive(Debug, Clone)]
struct HeadParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

/// One multi-head attention block (heads plus output projection).
#[derive(Debug, Clone)]
struct AttnParams {
    heads: Vec<HeadParams>,
    wo: ParamId,
}

#[derive(Debug, Clone)]
struct FfnParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct LnParams {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayerParams {
    ln1: LnParams,
    attn: AttnParams,
    ln2: LnParams,
    ffn: FfnParams,
}

#[derive(Debug, Clone)]
struct DecLayerParams {
    ln1: LnParams,
    self_attn: AttnParams,
    ln2: LnParams,
    cross_attn: AttnParams,
    ln3: LnParams,
    ffn: FfnParams,
}

/// Small two-layer feed-forward network (lookup refinement or MTL head).
#[derive(Debug, Clone)]
struct FfnHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Conditioning vectors produced by the speaker and language networks,
/// each a `(1, d_spk_emb)` node on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ConditioningVectors {
    pub s_cond: NodeId,
    pub l_cond: NodeId,
}

/// Output of autoregressive inference.
#[derive(Debug, Clone)]
pub struct InferOutput {
    /// Generated mel frames, shape `(n_frames, n_mels)`.
    pub mel: Array2<f64>,
    /// Per-frame stop probabilities.
    pub stop_probs: Vec<f64>,
    /// True when generation ran to the frame limit without a stop signal.
    pub hit_max_frames: bool,
}

/// Parameter handles of the TTS network inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct TtsModel {
    pub cfg: ModelConfig,
    phone_table: ParamId,
    spk_table: ParamId,
    lang_table: ParamId,
    spk_net: FfnHead,
    lang_net: FfnHead,
    mtl_spk: FfnHead,
    mtl_lang: FfnHead,
    /// Bias-free projections of the conditioning vectors into the encoder
    /// space; zero conditioning therefore leaves states untouched.
    cond_s_proj: ParamId,
    cond_l_proj: ParamId,
    enc_in_l_proj: ParamId,
    enc_layers: Vec<EncLayerParams>,
    enc_final_ln: LnParams,
    dec_layers: Vec<DecLayerParams>,
    dec_final_ln: LnParams,
    prenet_w1: ParamId,
    prenet_b1: ParamId,
    prenet_w2: ParamId,
    prenet_b2: ParamId,
    dec_in_w: ParamId,
    dec_in_b: ParamId,
    mel_head_w: ParamId,
    mel_head_b: ParamId,
    stop_head_w: ParamId,
    stop_head_b: ParamId,
}

fn new_attn(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_q: usize,
    d_kv: usize,
    d_model: usize,
    n_heads: usize,
) -> AttnParams {
    let dh = d_model / n_heads;
    let heads = (0..n_heads)
        .map(|h| HeadParams {
            wq: store.add(format!("{prefix}.h{h}.wq"), glorot(rng, d_q, dh)),
            wk: store.add(format!("{prefix}.h{h}.wk"), glorot(rng, d_kv, dh)),
            wv: store.add(format!("{prefix}.h{h}.wv"), glorot(rng, d_kv, dh)),
        })
        .collect();
    AttnParams {
        heads,
        wo: store.add(format!("{prefix}.wo"), glorot(rng, d_model, d_model)),
    }
}

fn new_ffn(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    d_ff: usize,
) -> FfnParams {
    FfnParams {
        w1: store.add(format!("{prefix}.w1"), glorot(rng, d, d_ff)),
        b1: store.add(format!("{prefix}.b1"), zeros(1, d_ff)),
        w2: store.add(format!("{prefix}.w2"), glorot(rng, d_ff, d)),
        b2: store.add(format!("{prefix}.b2"), zeros(1, d)),
    }
}

fn new_ln(store: &mut ParamStore, prefix: &str, d: usize) -> LnParams {
    LnParams {
        g: store.add(format!("{prefix}.g"), ones(1, d)),
        b: store.add(format!("{prefix}.b"), zeros(1, d)),
    }
}

fn new_head(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
) -> FfnHead {
    FfnHead {
        w1: store.add(format!("{prefix}.w1"), glorot(rng, d_in, d_hidden)),
        b1: store.add(format!("{prefix}.b1"), zeros(1, d_hidden)),
        w2: store.add(format!("{prefix}.w2"), glorot(rng, d_hidden, d_out)),
        b2: store.add(format!("{prefix}.b2"), zeros(1, d_out)),
    }
}

fn find_attn(store: &ParamStore, prefix: &str, n_heads: usize) -> Result<AttnParams> {
    let heads = (0..n_heads)
        .map(|h| {
            Ok(HeadParams {
                wq: find(store, &format!("{prefix}.h{h}.wq"))?,
                wk: find(store, &format!("{prefix}.h{h}.wk"))?,
                wv: find(store, &format!("{prefix}.h{h}.wv"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttnParams { heads, wo: find(store, &format!("{prefix}.wo"))? })
}

fn find_ffn(store: &ParamStore, prefix: &str) -> Result<FfnParams> {
    Ok(FfnParams {
        w1: find(store, &format!("{prefix}.w1"))?,
        b1: find(store, &format!("{prefix}.b1"))?,
        w2: find(store, &format!("{prefix}.w2"))?,
        b2: find(store, &format!("{prefix}.b2"))?,
    })
}

fn find_ln(store: &ParamStore, prefix: &str) -> Result<LnParams> {
    Ok(LnParams {
        g: find(store, &format!("{prefix}.g"))?,
        b: find(store, &format!("{prefix}.b"))?,
    })
}

fn find_head(store: &ParamStore, prefix: &str) -> Result<FfnHead> {
    Ok(FfnHead {
        w1: find(store, &format!("{prefix}.w1"))?,
        b1: find(store, &format!("{prefix}.b1"))?,
        w2: find(store, &format!("{prefix}.w2"))?,
        b2: find(store, &format!("{prefix}.b2"))?,
    })
}

fn find(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing TTS parameter {name}")))
}

impl TtsModel {
    /// Registers freshly initialised parameters in `store`.
    pub fn new(cfg: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeds::rng(seed, "tts-init", 0);
        let r = &mut rng;

        let phone_table =
            store.add("tts.phone_table", table_init(r, cfg.n_phones, cfg.d_enc, 0.1));
        let spk_table =
            store.add("tts.spk_table", table_init(r, cfg.n_speakers, cfg.d_spk_emb, 0.1));
        let lang_table =
            store.add("tts.lang_table", table_init(r, cfg.n_languages, cfg.d_lang_emb, 0.1));

        let spk_net = new_head(store, r, "tts.spk_net", cfg.d_spk_emb, cfg.d_spk_emb, cfg.d_spk_emb);
        let lang_net =
            new_head(store, r, "tts.lang_net", cfg.d_lang_emb, cfg.d_lang_emb, cfg.d_lang_emb);
        let mtl_spk = new_head(store, r, "tts.mtl_spk", cfg.d_spk_emb, cfg.d_spk_emb, cfg.n_speakers);
        let mtl_lang =
            new_head(store, r, "tts.mtl_lang", cfg.d_lang_emb, cfg.d_lang_emb, cfg.n_languages);

        let cond_s_proj = store.add("tts.cond.s_proj", glorot(r, cfg.d_spk_emb, cfg.d_enc));
        let cond_l_proj = store.add("tts.cond.l_proj", glorot(r, cfg.d_lang_emb, cfg.d_enc));
        let enc_in_l_proj = store.add("tts.enc_in.l_proj", glorot(r, cfg.d_lang_emb, cfg.d_enc));

        let enc_layers = (0..cfg.n_enc_layers)
            .map(|i| {
                let p = format!("tts.enc{i}");
                EncLayerParams {
                    ln1: new_ln(store, &format!("{p}.ln1"), cfg.d_enc),
                    attn: new_attn(store, r, &format!("{p}.attn"), cfg.d_enc, cfg.d_enc, cfg.d_enc, cfg.n_heads),
                    ln2: new_ln(store, &format!("{p}.ln2"), cfg.d_enc),
                    ffn: new_ffn(store, r, &format!("{p}.ff"), cfg.d_enc, cfg.d_ff_enc()),
                }
            })
            .collect();
        let enc_final_ln = new_ln(store, "tts.enc.final_ln", cfg.d_enc);

        let dec_layers = (0..cfg.n_dec_layers)
            .map(|i| {
                let p = format!("tts.dec{i}");
                DecLayerParams {
                    ln1: new_ln(store, &format!("{p}.ln1"), cfg.d_dec),
                    self_attn: new_attn(store, r, &format!("{p}.self"), cfg.d_dec, cfg.d_dec, cfg.d_dec, cfg.n_heads),
                    ln2: new_ln(store, &format!("{p}.ln2"), cfg.d_dec),
                    cross_attn: new_attn(store, r, &format!("{p}.cross"), cfg.d_dec, cfg.d_enc, cfg.d_dec, cfg.n_heads),
                    ln3: new_ln(store, &format!("{p}.ln3"), cfg.d_dec),
                    ffn: new_ffn(store, r, &format!("{p}.ff"), cfg.d_dec, cfg.d_ff_dec()),
                }
            })
            .collect();
        let dec_final_ln = new_ln(store, "tts.dec.final_ln", cfg.d_dec);

        let prenet_w1 = store.add("tts.prenet.w1", glorot(r, cfg.n_mels, cfg.d_dec));
        let prenet_b1 = store.add("tts.prenet.b1", zeros(1, cfg.d_dec));
        let prenet_w2 = store.add("tts.prenet.w2", glorot(r, cfg.d_dec, cfg.d_dec));
        let prenet_b2 = store.add("tts.prenet.b2", zeros(1, cfg.d_dec));
        let dec_in_w =
            store.add("tts.dec_in.w", glorot(r, cfg.d_dec + cfg.d_spk_emb, cfg.d_dec));
        let dec_in_b = store.add("tts.dec_in.b", zeros(1, cfg.d_dec));
        let mel_head_w = store.add("tts.mel_head.w", glorot(r, cfg.d_dec, cfg.n_mels));
        let mel_head_b = store.add("tts.mel_head.b", zeros(1, cfg.n_mels));
        let stop_head_w = store.add("tts.stop_head.w", glorot(r, cfg.d_dec, 1));
        let stop_head_b = store.add("tts.stop_head.b", zeros(1, 1));

        Ok(Self {
            cfg,
            phone_table,
            spk_table,
            lang_table,
            spk_net,
            lang_net,
            mtl_spk,
            mtl_lang,
            cond_s_proj,
            cond_l_proj,
            enc_in_l_proj,
            enc_layers,
            enc_final_ln,
            dec_layers,
            dec_final_ln,
            prenet_w1,
            prenet_b1,
            prenet_w2,
            prenet_b2,
            dec_in_w,
            dec_in_b,
            mel_head_w,
            mel_head_b,
            stop_head_w,
            stop_head_b,
        })
    }

    /// Rebuilds the handle struct for parameters already present in `store`
    /// (after loading a checkpoint).
    pub fn from_store(cfg: ModelConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let enc_layers = (0..cfg.n_enc_layers)
            .map(|i| {
                let p = format!("tts.enc{i}");
                Ok(EncLayerParams {
                    ln1: find_ln(store, &format!("{p}.ln1"))?,
                    attn: find_attn(store, &format!("{p}.attn"), cfg.n_heads)?,
                    ln2: find_ln(store, &format!("{p}.ln2"))?,
                    ffn: find_ffn(store, &format!("{p}.ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_layers = (0..cfg.n_dec_layers)
            .map(|i| {
                let p = format!("tts.dec{i}");
                Ok(DecLayerParams {
                    ln1: find_ln(store, &format!("{p}.ln1"))?,
                    self_attn: find_attn(store, &format!("{p}.self"), cfg.n_heads)?,
                    ln2: find_ln(store, &format!("{p}.ln2"))?,
                    cross_attn: find_attn(store, &format!("{p}.cross"), cfg.n_heads)?,
                    ln3: find_ln(store, &format!("{p}.ln3"))?,
                    ffn: find_ffn(store, &format!("{p}.ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            phone_table: find(store, "tts.phone_table")?,
            spk_table: find(store, "tts.spk_table")?,
            lang_table: find(store, "tts.lang_table")?,
            spk_net: find_head(store, "tts.spk_net")?,
            lang_net: find_head(store, "tts.lang_net")?,
            mtl_spk: find_head(store, "tts.mtl_spk")?,
            mtl_lang: find_head(store, "tts.mtl_lang")?,
            cond_s_proj: find(store, "tts.cond.s_proj")?,
            cond_l_proj: find(store, "tts.cond.l_proj")?,
            enc_in_l_proj: find(store, "tts.enc_in.l_proj")?,
            enc_layers,
            enc_final_ln: find_ln(store, "tts.enc.final_ln")?,
            dec_layers,
            dec_final_ln: find_ln(store, "tts.dec.final_ln")?,
            prenet_w1: find(store, "tts.prenet.w1")?,
            prenet_b1: find(store, "tts.prenet.b1")?,
            prenet_w2: find(store, "tts.prenet.w2")?,
            prenet_b2: find(store, "tts.prenet.b2")?,
            dec_in_w: find(store, "tts.dec_in.w")?,
            dec_in_b: find(store, "tts.dec_in.b")?,
            mel_head_w: find(store, "tts.mel_head.w")?,
            mel_head_b: find(store, "tts.mel_head.b")?,
            stop_head_w: find(store, "tts.stop_head.w")?,
            stop_head_b: find(store, "tts.stop_head.b")?,
            cfg,
        })
    }

    pub fn speaker_table(&self) -> ParamId {
        self.spk_table
    }

    pub fn mtl_speaker_head_out(&self) -> ParamId {
        self.mtl_spk.w2
    }

    pub fn mtl_speaker_head_bias(&self) -> ParamId {
        self.mtl_spk.b2
    }

    fn check_speaker(&self, id: SpeakerId) -> Result<usize> {
        let idx = id.0 as usize;
        if idx >= self.cfg.n_speakers {
            return Err(Error::Model(format!(
                "unknown speaker id {id} (table has {} rows); extend the model first",
                self.cfg.n_speakers
            )));
        }
        Ok(idx)
    }

    fn check_language(&self, id: LangId) -> Result<usize> {
        let idx = id.0 as usize;
        if idx >= self.cfg.n_languages {
            return Err(Error::Model(format!(
                "unknown language id {id} (table has {} rows)",
                self.cfg.n_languages
            )));
        }
        Ok(idx)
    }

    fn check_phones(&self, phones: &[PhoneId]) -> Result<Vec<usize>> {
        if phones.is_empty() {
            return Err(Error::Model("cannot encode an empty phone sequence".into()));
        }
        phones
            .iter()
            .map(|p| {
                let idx = p.0 as usize;
                if idx >= self.cfg.n_phones {
                    Err(Error::Model(format!(
                        "unknown phone id {p} (table has {} rows)",
                        self.cfg.n_phones
                    )))
                } else {
                    Ok(idx)
                }
            })
            .collect()
    }

    fn run_head(&self, tape: &mut Tape, store: &ParamStore, head: &FfnHead, x: NodeId) -> NodeId {
        let w1 = store.bind(tape, head.w1);
        let b1 = store.bind(tape, head.b1);
        let w2 = store.bind(tape, head.w2);
        let b2 = store.bind(tape, head.b2);
        let h = linear(tape, x, w1, b1);
        let h = tape.relu(h);
        linear(tape, h, w2, b2)
    }

    /// Speaker network: table lookup refined by a one-hidden-layer network.
    pub fn speaker_network(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        speaker: SpeakerId,
    ) -> Result<NodeId> {
        let idx = self.check_speaker(speaker)?;
        let table = store.bind(tape, self.spk_table);
        let row = tape.gather_rows(table, &[idx]);
        Ok(self.run_head(tape, store, &self.spk_net, row))
    }

    /// Language network, symmetric to the speaker network.
    pub fn language_network(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        lang: LangId,
    ) -> Result<NodeId> {
        let idx = self.check_language(lang)?;
        let table = store.bind(tape, self.lang_table);
        let row = tape.gather_rows(table, &[idx]);
        Ok(self.run_head(tape, store, &self.lang_net, row))
    }

    /// Both conditioning vectors at once.
    pub fn conditioning(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        speaker: SpeakerId,
        lang: LangId,
    ) -> Result<ConditioningVectors> {
        Ok(ConditioningVectors {
            s_cond: self.speaker_network(tape, store, speaker)?,
            l_cond: self.language_network(tape, store, lang)?,
        })
    }

    /// Multi-task classifier heads over the conditioning vectors. Returns
    /// `(speaker_logits, language_logits)`, shapes `(1, n_speakers)` and
    /// `(1, n_languages)`.
    pub fn mtl_heads(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cond: ConditioningVectors,
    ) -> (NodeId, NodeId) {
        let spk_logits = self.run_head(tape, store, &self.mtl_spk, cond.s_cond);
        let lang_logits = self.run_head(tape, store, &self.mtl_lang, cond.l_cond);
        (spk_logits, lang_logits)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        attn: &AttnParams,
        q_in: NodeId,
        kv_in: NodeId,
        mask: Option<&Array2<f64>>,
    ) -> NodeId {
        let mut head_outs = Vec::with_capacity(attn.heads.len());
        for head in &attn.heads {
            let wq = store.bind(tape, head.wq);
            let wk = store.bind(tape, head.wk);
            let wv = store.bind(tape, head.wv);
            let q = tape.matmul(q_in, wq);
            let k = tape.matmul(kv_in, wk);
            let v = tape.matmul(kv_in, wv);
            let dh = tape.value(q).ncols() as f64;
            let scores = tape.matmul_nt(q, k);
            let mut scaled = tape.scale(scores, 1.0 / dh.sqrt());
            if let Some(m) = mask {
                scaled = tape.add_const(scaled, m.clone());
            }
            let weights = tape.softmax_rows(scaled);
            head_outs.push(tape.matmul(weights, v));
        }
        let mut cat = head_outs[0];
        for h in &head_outs[1..] {
            cat = tape.concat_cols(cat, *h);
        }
        let wo = store.bind(tape, attn.wo);
        tape.matmul(cat, wo)
    }

    fn ffn_block(&self, tape: &mut Tape, store: &ParamStore, ffn: &FfnParams, x: NodeId) -> NodeId {
        let w1 = store.bind(tape, ffn.w1);
        let b1 = store.bind(tape, ffn.b1);
        let w2 = store.bind(tape, ffn.w2);
        let b2 = store.bind(tape, ffn.b2);
        let h = linear(tape, x, w1, b1);
        let h = tape.relu(h);
        linear(tape, h, w2, b2)
    }

    fn layer_norm(&self, tape: &mut Tape, store: &ParamStore, ln: &LnParams, x: NodeId) -> NodeId {
        let g = store.bind(tape, ln.g);
        let b = store.bind(tape, ln.b);
        tape.layer_norm(x, g, b, 1e-5)
    }

    /// Transformer encoder over the full phone sequence (no padding).
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        phones: &[PhoneId],
        l_cond: NodeId,
    ) -> Result<NodeId> {
        self.encode_masked(tape, store, phones, phones.len(), l_cond)
    }

    /// Encoder with explicit padding: positions `>= n_real` are present in
    /// the sequence but masked out of every attention, so real-position
    /// outputs are independent of their content.
    pub fn encode_masked(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        phones: &[PhoneId],
        n_real: usize,
        l_cond: NodeId,
    ) -> Result<NodeId> {
        let idx = self.check_phones(phones)?;
        if n_real == 0 || n_real > phones.len() {
            return Err(Error::Model(format!(
                "invalid real length {n_real} for a {}-phone sequence",
                phones.len()
            )));
        }
        let t = phones.len();

        let table = store.bind(tape, self.phone_table);
        let emb = tape.gather_rows(table, &idx);

        // Language identity is visible during encoding via a bias-free
        // projection added to every position.
        let inproj = store.bind(tape, self.enc_in_l_proj);
        let l_bias = tape.matmul(l_cond, inproj);
        let l_rows = tape.broadcast_row(l_bias, t);
        let with_lang = tape.add(emb, l_rows);

        let pe = tape.leaf(sinusoidal_encoding(t, self.cfg.d_enc));
        let mut x = tape.add(with_lang, pe);

        let mask = if n_real < t { Some(padding_mask(t, n_real)) } else { None };
        for layer in &self.enc_layers {
            let normed = self.layer_norm(tape, store, &layer.ln1, x);
            let attn = self.attention(tape, store, &layer.attn, normed, normed, mask.as_ref());
            x = tape.add(x, attn);
            let normed = self.layer_norm(tape, store, &layer.ln2, x);
            let ff = self.ffn_block(tape, store, &layer.ffn, normed);
            x = tape.add(x, ff);
        }
        Ok(self.layer_norm(tape, store, &self.enc_final_ln, x))
    }

    /// Adds the projected conditioning vectors to every encoder state row.
    /// Projections are bias-free, so zero conditioning is the identity.
    pub fn condition_injection(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoder_states: NodeId,
        cond: ConditioningVectors,
    ) -> NodeId {
        let t = tape.value(encoder_states).nrows();
        let sp = store.bind(tape, self.cond_s_proj);
        let lp = store.bind(tape, self.cond_l_proj);
        let s_bias = tape.matmul(cond.s_cond, sp);
        let l_bias = tape.matmul(cond.l_cond, lp);
        let bias = tape.add(s_bias, l_bias);
        let rows = tape.broadcast_row(bias, t);
        tape.add(encoder_states, rows)
    }

    /// Pre-net over mel input frames, with optional dropout between layers.
    fn prenet(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mel_inputs: NodeId,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let w1 = store.bind(tape, self.prenet_w1);
        let b1 = store.bind(tape, self.prenet_b1);
        let w2 = store.bind(tape, self.prenet_w2);
        let b2 = store.bind(tape, self.prenet_b2);
        let h = linear(tape, mel_inputs, w1, b1);
        let mut h = tape.relu(h);
        if let Some(rng) = dropout_rng {
            let p = self.cfg.dropout;
            if p > 0.0 {
                let dim = tape.value(h).dim();
                let mask = Array2::from_shape_fn(dim, |_| {
                    if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) }
                });
                h = tape.dropout(h, mask);
            }
        }
        let h2 = linear(tape, h, w2, b2);
        tape.relu(h2)
    }

    /// Parallel (teacher-forced) decoding pass.
    ///
    /// `mel_inputs` must be the target mel shifted right by one frame with a
    /// zero start frame (see [`shifted_inputs`]). Conditioning is injected
    /// into the encoder states here, and the speaker vector is concatenated
    /// to every pre-net output frame. Returns `(mel_pred, stop_logits)` of
    /// shapes `(t, n_mels)` and `(t, 1)`.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoder_states: NodeId,
        mel_inputs: NodeId,
        cond: ConditioningVectors,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, NodeId)> {
        let (t, d) = tape.value(mel_inputs).dim();
        if d != self.cfg.n_mels {
            return Err(Error::Model(format!(
                "decoder input has {d} mel bins, model expects {}",
                self.cfg.n_mels
            )));
        }
        if t == 0 {
            return Err(Error::Model("decoder input must have at least one frame".into()));
        }
        if t > self.cfg.max_frames {
            return Err(Error::Model(format!(
                "decoder input has {t} frames, exceeding max_frames = {}",
                self.cfg.max_frames
            )));
        }

        let conditioned = self.condition_injection(tape, store, encoder_states, cond);

        let pre = self.prenet(tape, store, mel_inputs, dropout_rng);
        let s_rows = tape.broadcast_row(cond.s_cond, t);
        let joined = tape.concat_cols(pre, s_rows);
        let in_w = store.bind(tape, self.dec_in_w);
        let in_b = store.bind(tape, self.dec_in_b);
        let projected = linear(tape, joined, in_w, in_b);
        let pe = tape.leaf(sinusoidal_encoding(t, self.cfg.d_dec));
        let mut x = tape.add(projected, pe);

        let mask = causal_mask(t);
        for layer in &self.dec_layers {
            let normed = self.layer_norm(tape, store, &layer.ln1, x);
            let self_attn =
                self.attention(tape, store, &layer.self_attn, normed, normed, Some(&mask));
            x = tape.add(x, self_attn);
            let normed = self.layer_norm(tape, store, &layer.ln2, x);
            let cross = self.attention(tape, store, &layer.cross_attn, normed, conditioned, None);
            x = tape.add(x, cross);
            let normed = self.layer_norm(tape, store, &layer.ln3, x);
            let ff = self.ffn_block(tape, store, &layer.ffn, normed);
            x = tape.add(x, ff);
        }
        let x = self.layer_norm(tape, store, &self.dec_final_ln, x);

        let mel_w = store.bind(tape, self.mel_head_w);
        let mel_b = store.bind(tape, self.mel_head_b);
        let mel_pred = linear(tape, x, mel_w, mel_b);
        let stop_w = store.bind(tape, self.stop_head_w);
        let stop_b = store.bind(tape, self.stop_head_b);
        let stop_logits = linear(tape, x, stop_w, stop_b);
        Ok((mel_pred, stop_logits))
    }

    /// Free-running autoregressive inference: the decoder is fed its own
    /// previous outputs frame by frame until the stop probability exceeds
    /// 0.5 or the frame limit is reached. Dropout is disabled, so the result
    /// is deterministic and reproduces exactly under teacher forcing on its
    /// own output.
    pub fn infer(
        &self,
        store: &ParamStore,
        phones: &[PhoneId],
        speaker: SpeakerId,
        lang: LangId,
        max_frames: usize,
    ) -> Result<InferOutput> {
        if max_frames == 0 {
            return Err(Error::Model("max_frames must be positive".into()));
        }
        let limit = max_frames.min(self.cfg.max_frames);
        let mut generated: Vec<Vec<f64>> = Vec::new();
        let mut stop_probs = Vec::new();
        let mut hit_max = true;

        for t in 0..limit {
            // Rebuild the prefix pass each step; values only, tape discarded.
            let mut tape = Tape::new();
            let cond = self.conditioning(&mut tape, store, speaker, lang)?;
            let enc = self.encode(&mut tape, store, phones, cond.l_cond)?;
            let mut inputs = Array2::zeros((t + 1, self.cfg.n_mels));
            for (r, frame) in generated.iter().enumerate() {
                for (c, v) in frame.iter().enumerate() {
                    inputs[[r + 1, c]] = *v;
                }
            }
            let mel_in = tape.leaf(inputs);
            let (mel_pred, stop_logits) =
                self.decode_teacher_forced(&mut tape, store, enc, mel_in, cond, None)?;
            let frame: Vec<f64> = tape.value(mel_pred).row(t).to_vec();
            let stop_logit = tape.value(stop_logits)[[t, 0]];
            let stop_p = 1.0 / (1.0 + (-stop_logit).exp());
            generated.push(frame);
            stop_probs.push(stop_p);
            if stop_p > 0.5 {
                hit_max = false;
                break;
            }
        }

        let n = generated.len();
        let mut mel = Array2::zeros((n, self.cfg.n_mels));
        for (r, frame) in generated.iter().enumerate() {
            for (c, v) in frame.iter().enumerate() {
                mel[[r, c]] = *v;
            }
        }
        Ok(InferOutput { mel, stop_probs, hit_max_frames: hit_max })
    }
}

/// Fixed sinusoidal positional encoding, shape `(t, d)`.
pub fn sinusoidal_encoding(t: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((t, d));
    for pos in 0..t {
        for i in 0..d {
            let exponent = 2.0 * (i / 2) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Additive causal mask: 0 on and below the diagonal, a large negative
/// number above, which drives post-softmax weights to exactly zero.
pub fn causal_mask(t: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, t), |(i, j)| if j > i { -1e30 } else { 0.0 })
}

/// Additive padding mask: columns `>= n_real` are unattendable.
fn padding_mask(t: usize, n_real: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, t), |(_, j)| if j >= n_real { -1e30 } else { 0.0 })
}

/// Teacher-forcing inputs: the target shifted right one frame, zero first row.
pub fn shifted_inputs(target: &Array2<f64>) -> Array2<f64> {
    let (t, d) = target.dim();
    let mut out = Array2::zeros((t, d));
    for r in 1..t {
        for c in 0..d {
            out[[r, c]] = target[[r - 1, c]];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_param_grad, rel_err, sample_coords};
    use crate::nn::GradAccum;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_enc: 8,
            d_dec: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_spk_emb: 4,
            d_lang_emb: 4,
            n_mels: 5,
            max_frames: 16,
            dropout: 0.0,
            n_phones: 6,
            n_speakers: 3,
            n_languages: 2,
        }
    }

    fn build(cfg: ModelConfig, seed: u64) -> (TtsModel, ParamStore) {
        let mut store = ParamStore::new();
        let model = TtsModel::new(cfg, &mut store, seed).unwrap();
        (model, store)
    }

    fn target_mel(t: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeds::rng(seed, "test-target", 0);
        Array2::from_shape_fn((t, d), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut bad = tiny_cfg();
        bad.d_enc = 9;
        assert!(bad.validate().is_err());
        let mut bad = tiny_cfg();
        bad.d_lang_emb = 8;
        assert!(bad.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
        assert!(ModelConfig::desk(10, 5, 3).validate().is_ok());
        assert!(ModelConfig::full_scale(100, 50, 10).validate().is_ok());
    }

    #[test]
    fn conditioning_vectors_are_deterministic_and_distinct() {
        let (model, store) = build(tiny_cfg(), 3);
        let run = |spk: u32| {
            let mut tape = Tape::new();
            let s = model
                .speaker_network(&mut tape, &store, SpeakerId(spk))
                .unwrap();
            tape.value(s).clone()
        };
        assert_eq!(run(0), run(0));
        assert_ne!(run(0), run(1));

        let (m2, s2) = build(tiny_cfg(), 3);
        let mut tape = Tape::new();
        let l = m2.language_network(&mut tape, &s2, LangId(1)).unwrap();
        assert_eq!(tape.value(l).dim(), (1, 4));
    }

    #[test]
    fn unknown_ids_are_rejected_with_guidance() {
        let (model, store) = build(tiny_cfg(), 3);
        let mut tape = Tape::new();
        let err = model
            .speaker_network(&mut tape, &store, SpeakerId(99))
            .unwrap_err();
        assert!(err.to_string().contains("extend"), "got: {err}");
        assert!(model
            .language_network(&mut tape, &store, LangId(7))
            .is_err());
        let l = model.language_network(&mut tape, &store, LangId(0)).unwrap();
        assert!(model.encode(&mut tape, &store, &[], l).is_err());
        assert!(model
            .encode(&mut tape, &store, &[PhoneId(100)], l)
            .is_err());
    }

    #[test]
    fn speaker_table_gradient_matches_finite_differences() {
        let (model, mut store) = build(tiny_cfg(), 5);
        // Scalar of s_cond: sum of components via MSE against zeros.
        let mut loss = |store: &ParamStore| {
            let mut tape = Tape::new();
            let s = model.speaker_network(&mut tape, store, SpeakerId(1)).unwrap();
            let zero = tape.leaf(Array2::zeros((1, 4)));
            let l = tape.mse(s, zero);
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let s = model.speaker_network(&mut tape, &store, SpeakerId(1)).unwrap();
        let zero = tape.leaf(Array2::zeros((1, 4)));
        let l = tape.mse(s, zero);
        let mut grads = GradAccum::zeros_like(&store);
        grads.backward(&tape, l);

        let tbl = model.speaker_table();
        for coord in [(1usize, 0usize), (1, 2)] {
            let fd = fd_param_grad(&mut store, tbl, coord, 1e-4, &mut loss);
            let an = grads.get(tbl)[[coord.0, coord.1]];
            assert!(rel_err(fd, an) < 1e-3, "coord {coord:?}: fd {fd} vs {an}");
        }
        // Unused speaker rows receive exactly zero gradient.
        for j in 0..4 {
            assert_eq!(grads.get(tbl)[[0, j]], 0.0);
            assert_eq!(grads.get(tbl)[[2, j]], 0.0);
        }
    }

    #[test]
    fn mtl_head_shapes_and_uniform_ce() {
        let (model, store) = build(tiny_cfg(), 7);
        let mut tape = Tape::new();
        let cond = model
            .conditioning(&mut tape, &store, SpeakerId(0), LangId(0))
            .unwrap();
        let (spk_logits, lang_logits) = model.mtl_heads(&mut tape, &store, cond);
        assert_eq!(tape.value(spk_logits).dim(), (1, 3));
        assert_eq!(tape.value(lang_logits).dim(), (1, 2));
        let ce = tape.softmax_cross_entropy(spk_logits, 0);
        assert!(tape.scalar(ce).is_finite());
    }

    #[test]
    fn encoder_output_shape_and_masked_padding_invariance() {
        let (model, store) = build(tiny_cfg(), 9);
        let phones = [PhoneId(0), PhoneId(2), PhoneId(4)];

        let run = |pad: PhoneId| {
            let mut tape = Tape::new();
            let l = model.language_network(&mut tape, &store, LangId(0)).unwrap();
            let padded = [phones[0], phones[1], phones[2], pad, pad];
            let out = model
                .encode_masked(&mut tape, &store, &padded, 3, l)
                .unwrap();
            tape.value(out).clone()
        };
        let a = run(PhoneId(1));
        let b = run(PhoneId(5));
        assert_eq!(a.dim(), (5, 8));
        for r in 0..3 {
            for c in 0..8 {
                assert!(
                    (a[[r, c]] - b[[r, c]]).abs() < 1e-6,
                    "real row {r} changed with pad content"
                );
            }
        }

        let mut tape = Tape::new();
        let l = model.language_network(&mut tape, &store, LangId(0)).unwrap();
        let out = model.encode(&mut tape, &store, &phones, l).unwrap();
        assert_eq!(tape.value(out).dim(), (3, 8));
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let (model, mut store) = build(tiny_cfg(), 11);
        let phones = [PhoneId(1), PhoneId(3), PhoneId(5)];
        let mut loss = |store: &ParamStore| {
            let mut tape = Tape::new();
            let l = model.language_network(&mut tape, store, LangId(1)).unwrap();
            let out = model.encode(&mut tape, store, &phones, l).unwrap();
            let zero = tape.leaf(Array2::zeros((3, 8)));
            let m = tape.mse(out, zero);
            tape.scalar(m)
        };
        let mut tape = Tape::new();
        let l = model.language_network(&mut tape, &store, LangId(1)).unwrap();
        let out = model.encode(&mut tape, &store, &phones, l).unwrap();
        let zero = tape.leaf(Array2::zeros((3, 8)));
        let m = tape.mse(out, zero);
        let mut grads = GradAccum::zeros_like(&store);
        grads.backward(&tape, m);

        // Probe a few coordinates of layer-0 attention and the phone table.
        for name in ["tts.enc0.attn.h0.wq", "tts.enc0.ff.w1", "tts.phone_table", "tts.lang_table"] {
            let pid = store.find(name).unwrap();
            let dim = store.value(pid).dim();
            for coord in sample_coords(dim.0, dim.1, 3) {
                let fd = fd_param_grad(&mut store, pid, coord, 1e-4, &mut loss);
                let an = grads.get(pid)[[coord.0, coord.1]];
                if fd.abs() < 1e-10 && an.abs() < 1e-10 {
                    continue;
                }
                assert!(
                    rel_err(fd, an) < 1e-3,
                    "{name}{coord:?}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn condition_injection_identity_and_row_uniformity() {
        let (model, store) = build(tiny_cfg(), 13);
        let phones = [PhoneId(0), PhoneId(1)];
        let mut tape = Tape::new();
        let l = model.language_network(&mut tape, &store, LangId(0)).unwrap();
        let enc = model.encode(&mut tape, &store, &phones, l).unwrap();

        // Zero conditioning vectors leave the states untouched.
        let zs = tape.leaf(Array2::zeros((1, 4)));
        let zl = tape.leaf(Array2::zeros((1, 4)));
        let out = model.condition_injection(
            &mut tape,
            &store,
            enc,
            ConditioningVectors { s_cond: zs, l_cond: zl },
        );
        assert_eq!(tape.value(out), tape.value(enc));

        // Swapping the speaker changes every row by the same offset.
        let cond_a = model
            .conditioning(&mut tape, &store, SpeakerId(0), LangId(0))
            .unwrap();
        let cond_b = model
            .conditioning(&mut tape, &store, SpeakerId(2), LangId(0))
            .unwrap();
        let ia = model.condition_injection(&mut tape, &store, enc, cond_a);
        let ib = model.condition_injection(&mut tape, &store, enc, cond_b);
        let da = tape.value(ia) - tape.value(ib);
        for r in 1..da.nrows() {
            for c in 0..da.ncols() {
                assert!((da[[r, c]] - da[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mel_loss_reaches_speaker_table() {
        let (model, store) = build(tiny_cfg(), 15);
        let phones = [PhoneId(0), PhoneId(2)];
        let target = target_mel(6, 5, 1);

        let mut tape = Tape::new();
        let cond = model
            .conditioning(&mut tape, &store, SpeakerId(1), LangId(0))
            .unwrap();
        let enc = model.encode(&mut tape, &store, &phones, cond.l_cond).unwrap();
        let inputs = tape.leaf(shifted_inputs(&target));
        let (mel_pred, _) = model
            .decode_teacher_forced(&mut tape, &store, enc, inputs, cond, None)
            .unwrap();
        let tgt = tape.leaf(target);
        let loss = tape.mse(mel_pred, tgt);
        let mut grads = GradAccum::zeros_like(&store);
        grads.backward(&tape, loss);

        let g = grads.get(model.speaker_table());
        let used: f64 = (0..4).map(|j| g[[1, j]].abs()).sum();
        assert!(used > 0.0, "speaker row used in the batch must receive gradient");
        for j in 0..4 {
            assert_eq!(g[[0, j]], 0.0);
            assert_eq!(g[[2, j]], 0.0);
        }
    }

    #[test]
    fn decode_is_causal() {
        let (model, store) = build(tiny_cfg(), 17);
        let phones = [PhoneId(0), PhoneId(3)];
        let base = target_mel(7, 5, 2);

        let run = |inputs: Array2<f64>| {
            let mut tape = Tape::new();
            let cond = model
                .conditioning(&mut tape, &store, SpeakerId(0), LangId(1))
                .unwrap();
            let enc = model.encode(&mut tape, &store, &phones, cond.l_cond).unwrap();
            let inp = tape.leaf(inputs);
            let (mel_pred, _) = model
                .decode_teacher_forced(&mut tape, &store, enc, inp, cond, None)
                .unwrap();
            tape.value(mel_pred).clone()
        };
        let clean = run(base.clone());
        assert_eq!(clean.dim(), (7, 5));

        // Perturb input row j; rows <= j-1 of the prediction must not move.
        for j in [3usize, 5] {
            let mut poked = base.clone();
            for c in 0..5 {
                poked[[j, c]] += 7.5;
            }
            let out = run(poked);
            for r in 0..j {
                for c in 0..5 {
                    assert!(
                        (out[[r, c]] - clean[[r, c]]).abs() < 1e-6,
                        "row {r} changed after perturbing input row {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn decode_rejects_overlong_input() {
        let (model, store) = build(tiny_cfg(), 19);
        let phones = [PhoneId(0)];
        let mut tape = Tape::new();
        let cond = model
            .conditioning(&mut tape, &store, SpeakerId(0), LangId(0))
            .unwrap();
        let enc = model.encode(&mut tape, &store, &phones, cond.l_cond).unwrap();
        let too_long = tape.leaf(Array2::zeros((17, 5)));
        let err = model
            .decode_teacher_forced(&mut tape, &store, enc, too_long, cond, None)
            .unwrap_err();
        assert!(err.to_string().contains("max_frames"));
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let (model, mut store) = build(tiny_cfg(), 21);
        let phones = [PhoneId(2), PhoneId(4)];
        let target = target_mel(5, 5, 3);

        let mut loss = |store: &ParamStore| {
            let mut tape = Tape::new();
            let cond = model
                .conditioning(&mut tape, store, SpeakerId(2), LangId(1))
                .unwrap();
            let enc = model.encode(&mut tape, store, &phones, cond.l_cond).unwrap();
            let inputs = tape.leaf(shifted_inputs(&target));
            let (mel_pred, stop_logits) = model
                .decode_teacher_forced(&mut tape, store, enc, inputs, cond, None)
                .unwrap();
            let tgt = tape.leaf(target.clone());
            let mel_loss = tape.mse(mel_pred, tgt);
            let stop_loss = tape.sigmoid_bce_mean(
                stop_logits,
                Array2::zeros((5, 1)),
                Array2::ones((5, 1)),
            );
            let total = tape.add(mel_loss, stop_loss);
            tape.scalar(total)
        };

        let mut tape = Tape::new();
        let cond = model
            .conditioning(&mut tape, &store, SpeakerId(2), LangId(1))
            .unwrap();
        let enc = model.encode(&mut tape, &store, &phones, cond.l_cond).unwrap();
        let inputs = tape.leaf(shifted_inputs(&target));
        let (mel_pred, stop_logits) = model
            .decode_teacher_forced(&mut tape, &store, enc, inputs, cond, None)
            .unwrap();
        let tgt = tape.leaf(target.clone());
        let mel_loss = tape.mse(mel_pred, tgt);
        let stop_loss =
            tape.sigmoid_bce_mean(stop_logits, Array2::zeros((5, 1)), Array2::ones((5, 1)));
        let total = tape.add(mel_loss, stop_loss);
        let mut grads = GradAccum::zeros_like(&store);
        grads.backward(&tape, total);

        for name in [
            "tts.dec0.self.h1.wq",
            "tts.dec0.cross.h0.wk",
            "tts.prenet.w1",
            "tts.mel_head.w",
            "tts.stop_head.w",
            "tts.dec_in.w",
            "tts.cond.s_proj",
        ] {
            let pid = store.find(name).unwrap();
            let dim = store.value(pid).dim();
            for coord in sample_coords(dim.0, dim.1, 2) {
                let fd = fd_param_grad(&mut store, pid, coord, 1e-4, &mut loss);
                let an = grads.get(pid)[[coord.0, coord.1]];
                if fd.abs() < 1e-10 && an.abs() < 1e-10 {
                    continue;
                }
                assert!(
                    rel_err(fd, an) < 1e-3,
                    "{name}{coord:?}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn forced_stop_head_yields_one_frame() {
        let (model, mut store) = build(tiny_cfg(), 23);
        let bias = store.find("tts.stop_head.b").unwrap();
        store.value_mut(bias)[[0, 0]] = 50.0;
        let out = model
            .infer(&store, &[PhoneId(0), PhoneId(1)], SpeakerId(0), LangId(0), 10)
            .unwrap();
        assert_eq!(out.mel.nrows(), 1);
        assert!(!out.hit_max_frames);
        assert!(out.stop_probs[0] > 0.5);
    }

    #[test]
    fn infer_is_self_consistent_with_teacher_forcing() {
        let (model, mut store) = build(tiny_cfg(), 25);
        // Hold the stop head firmly off so the run spans several frames.
        let bias = store.find("tts.stop_head.b").unwrap();
        store.value_mut(bias)[[0, 0]] = -50.0;
        let phones = [PhoneId(1), PhoneId(2), PhoneId(3)];
        let out = model
            .infer(&store, &phones, SpeakerId(1), LangId(1), 6)
            .unwrap();
        assert!(out.hit_max_frames);
        assert_eq!(out.mel.nrows(), 6);

        // Feed infer's own output back as teacher input.
        let mut tape = Tape::new();
        let cond = model
            .conditioning(&mut tape, &store, SpeakerId(1), LangId(1))
            .unwrap();
        let enc = model.encode(&mut tape, &store, &phones, cond.l_cond).unwrap();
        let inputs = tape.leaf(shifted_inputs(&out.mel));
        let (mel_pred, _) = model
            .decode_teacher_forced(&mut tape, &store, enc, inputs, cond, None)
            .unwrap();
        let teacher = tape.value(mel_pred);
        for r in 0..6 {
            for c in 0..5 {
                assert!(
                    (teacher[[r, c]] - out.mel[[r, c]]).abs() < 1e-5,
                    "frame {r} bin {c}: {} vs {}",
                    teacher[[r, c]],
                    out.mel[[r, c]]
                );
            }
        }
    }

    #[test]
    fn cross_lingual_pairs_are_accepted() {
        let (model, store) = build(tiny_cfg(), 27);
        // Speaker 0 with the non-native language 1 must synthesize fine.
        let out = model
            .infer(&store, &[PhoneId(4)], SpeakerId(0), LangId(1), 4)
            .unwrap();
        assert!(out.mel.nrows() >= 1);
    }

    #[test]
    fn dropout_perturbs_training_forward_but_not_inference() {
        let mut cfg = tiny_cfg();
        cfg.dropout = 0.5;
        let (model, store) = build(cfg, 29);
        let phones = [PhoneId(0), PhoneId(1)];
        let target = target_mel(4, 5, 4);

        let run = |rng: Option<u64>| {
            let mut tape = Tape::new();
            let cond = model
                .conditioning(&mut tape, &store, SpeakerId(0), LangId(0))
                .unwrap();
            let enc = model.encode(&mut tape, &store, &phones, cond.l_cond).unwrap();
            let inputs = tape.leaf(shifted_inputs(&target));
            let mut drop = rng.map(|s| seeds::rng(s, "dropout", 0));
            let (mel_pred, _) = model
                .decode_teacher_forced(&mut tape, &store, enc, inputs, cond, drop.as_mut())
                .unwrap();
            tape.value(mel_pred).clone()
        };
        assert_eq!(run(None), run(None));
        assert_ne!(run(Some(1)), run(None));
        assert_eq!(run(Some(1)), run(Some(1)));
    }

    #[test]
    fn from_store_rebuilds_identical_forwards() {
        let (model, store) = build(tiny_cfg(), 31);
        let rebuilt = TtsModel::from_store(tiny_cfg(), &store).unwrap();
        let out_a = model
            .infer(&store, &[PhoneId(0)], SpeakerId(0), LangId(0), 3)
            .unwrap();
        let out_b = rebuilt
            .infer(&store, &[PhoneId(0)], SpeakerId(0), LangId(0), 3)
            .unwrap();
        assert_eq!(out_a.mel, out_b.mel);

        let empty = ParamStore::new();
        assert!(TtsModel::from_store(tiny_cfg(), &empty).is_err());
    }

    #[test]
    fn positional_encoding_matches_definition() {
        let pe = sinusoidal_encoding(3, 4);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        let expected = (1.0f64 / 10000f64.powf(0.5)).sin();
        assert!((pe[[1, 2]] - expected).abs() < 1e-12);
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn shifted_inputs_prepends_zero_frame() {
        let target = target_mel(3, 2, 5);
        let shifted = shifted_inputs(&target);
        assert_eq!(shifted.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(shifted.row(1).to_vec(), target.row(0).to_vec());
        assert_eq!(shifted.row(2).to_vec(), target.row(1).to_vec());
    }
}
