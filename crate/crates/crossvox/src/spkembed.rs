//! X-vector speaker embedder: a small time-delay network over mel frames
//! with statistics pooling, a segment-level embedding and a speaker
//! classification head.
//!
//! The embedder serves two roles: trained standalone it is the speaker
//! classifier whose embeddings score speaker similarity, and during joint
//! synthesis training its frozen embedding defines the cross-lingual speaker
//! loss. Freezing is structural — frozen forwards bind parameters as plain
//! leaves, so their gradients are exactly zero by construction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;
use crate::nn::{glorot, linear, zeros, ParamId, ParamStore};
use crate::seeds;
use crate::tape::{NodeId, Tape};

/// Architecture of the x-vector network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct XVectorConfig {
    /// Mel bins per input frame.
    pub n_mels: usize,
    /// Width of the frame-level layers.
    pub d_hidden: usize,
    /// Dimension of the speaker embedding.
    pub d_xvec: usize,
    /// Temporal context of each frame-level layer.
    pub contexts: [usize; 3],
    /// Number of speakers the classifier head distinguishes.
    pub n_speakers: usize,
}

/// Variance floor inside statistics pooling.
pub const VAR_EPS: f64 = 1e-6;

impl Default for XVectorConfig {
    fn default() -> Self {
        Self {
            n_mels: 20,
            d_hidden: 64,
            d_xvec: 32,
            contexts: [5, 3, 3],
            n_speakers: 12,
        }
    }
}

impl XVectorConfig {
    pub fn from_kv(kv: &KvConfig, n_mels: usize, n_speakers: usize) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            n_mels,
            d_hidden: kv.get_usize("xvec.d_hidden", d.d_hidden)?,
            d_xvec: kv.get_usize("xvec.d_xvec", d.d_xvec)?,
            contexts: d.contexts,
            n_speakers,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.d_hidden == 0 || self.d_xvec == 0 || self.n_speakers == 0 {
            return Err(Error::Config(
                "x-vector dimensions must all be positive".into(),
            ));
        }
        if self.contexts.iter().any(|c| *c == 0) {
            return Err(Error::Config("x-vector contexts must be positive".into()));
        }
        Ok(())
    }

    /// Smallest number of input frames the network accepts: the receptive
    /// field of the stacked frame layers.
    pub fn min_frames(&self) -> usize {
        self.contexts.iter().sum::<usize>() - self.contexts.len() + 1
    }
}

/// Parameter handles of one x-vector network inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct XVectorModel {
    pub cfg: XVectorConfig,
    frame_w: [ParamId; 3],
    frame_b: [ParamId; 3],
    seg_w: ParamId,
    seg_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
}

impl XVectorModel {
    /// Registers freshly initialised parameters in `store`.
    pub fn new(cfg: XVectorConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeds::rng(seed, "xvec-init", 0);
        let in_dims = [
            cfg.contexts[0] * cfg.n_mels,
            cfg.contexts[1] * cfg.d_hidden,
            cfg.contexts[2] * cfg.d_hidden,
        ];
        let mut frame_w = Vec::new();
        let mut frame_b = Vec::new();
        for (i, d_in) in in_dims.iter().enumerate() {
            frame_w.push(store.add(
                format!("xvec.frame{i}.w"),
                glorot(&mut rng, *d_in, cfg.d_hidden),
            ));
            frame_b.push(store.add(format!("xvec.frame{i}.b"), zeros(1, cfg.d_hidden)));
        }
        let seg_w = store.add("xvec.seg.w", glorot(&mut rng, 2 * cfg.d_hidden, cfg.d_xvec));
        let seg_b = store.add("xvec.seg.b", zeros(1, cfg.d_xvec));
        let cls_w = store.add("xvec.cls.w", glorot(&mut rng, cfg.d_xvec, cfg.n_speakers));
        let cls_b = store.add("xvec.cls.b", zeros(1, cfg.n_speakers));
        Ok(Self {
            cfg,
            frame_w: frame_w.try_into().expect("three frame layers"),
            frame_b: frame_b.try_into().expect("three frame layers"),
            seg_w,
            seg_b,
            cls_w,
            cls_b,
        })
    }

    /// Rebuilds the handle struct for parameters already present in `store`
    /// (after loading a checkpoint).
    pub fn from_store(cfg: XVectorConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let find = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing x-vector parameter {name}")))
        };
        Ok(Self {
            cfg,
            frame_w: [find("xvec.frame0.w")?, find("xvec.frame1.w")?, find("xvec.frame2.w")?],
            frame_b: [find("xvec.frame0.b")?, find("xvec.frame1.b")?, find("xvec.frame2.b")?],
            seg_w: find("xvec.seg.w")?,
            seg_b: find("xvec.seg.b")?,
            cls_w: find("xvec.cls.w")?,
            cls_b: find("xvec.cls.b")?,
        })
    }

    /// Ids of every parameter of this model, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for i in 0..3 {
            ids.push(self.frame_w[i]);
            ids.push(self.frame_b[i]);
        }
        ids.extend([self.seg_w, self.seg_b, self.cls_w, self.cls_b]);
        ids
    }

    fn check_frames(&self, t: usize) -> Result<()> {
        let min = self.cfg.min_frames();
        if t < min {
            return Err(Error::Model(format!(
                "x-vector input has {t} frames but the network needs at least {min}"
            )));
        }
        Ok(())
    }

    fn bind(&self, tape: &mut Tape, store: &ParamStore, id: ParamId, frozen: bool) -> NodeId {
        if frozen {
            store.bind_frozen(tape, id)
        } else {
            store.bind(tape, id)
        }
    }

    /// Tape forward from a mel node `(t, n_mels)` to the embedding
    /// `(1, d_xvec)`. With `frozen` the x-vector parameters enter the tape as
    /// constants: gradients flow through the mel input only.
    pub fn forward_embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mel: NodeId,
        frozen: bool,
    ) -> Result<NodeId> {
        let (t, d) = tape.value(mel).dim();
        if d != self.cfg.n_mels {
            return Err(Error::Model(format!(
                "x-vector expects {} mel bins, got {d}",
                self.cfg.n_mels
            )));
        }
        self.check_frames(t)?;

        let mut h = mel;
        for i in 0..3 {
            let w = self.bind(tape, store, self.frame_w[i], frozen);
            let b = self.bind(tape, store, self.frame_b[i], frozen);
            let unfolded = tape.unfold(h, self.cfg.contexts[i]);
            let affine = linear(tape, unfolded, w, b);
            h = tape.relu(affine);
        }

        let mean = tape.mean_rows(h);
        let sd = tape.std_rows(h, VAR_EPS);
        let stats = tape.concat_cols(mean, sd);
        let w = self.bind(tape, store, self.seg_w, frozen);
        let b = self.bind(tape, store, self.seg_b, frozen);
        Ok(linear(tape, stats, w, b))
    }

    /// Tape forward to speaker logits `(1, n_speakers)`.
    pub fn forward_classify(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mel: NodeId,
        frozen: bool,
    ) -> Result<NodeId> {
        let emb = self.forward_embed(tape, store, mel, frozen)?;
        let act = tape.relu(emb);
        let w = self.bind(tape, store, self.cls_w, frozen);
        let b = self.bind(tape, store, self.cls_b, frozen);
        Ok(linear(tape, act, w, b))
    }

    /// Value-only forward (no tape) to the embedding. Implemented with plain
    /// loops, independently of the tape ops, and used for evaluation.
    pub fn embed_values(&self, store: &ParamStore, mel: &Array2<f64>) -> Result<Vec<f64>> {
        if mel.ncols() != self.cfg.n_mels {
            return Err(Error::Model(format!(
                "x-vector expects {} mel bins, got {}",
                self.cfg.n_mels,
                mel.ncols()
            )));
        }
        self.check_frames(mel.nrows())?;

        let mut h = mel.clone();
        for i in 0..3 {
            let k = self.cfg.contexts[i];
            let w = store.value(self.frame_w[i]);
            let b = store.value(self.frame_b[i]);
            let (t, c) = h.dim();
            let out_t = t - k + 1;
            let mut next = Array2::zeros((out_t, self.cfg.d_hidden));
            for ot in 0..out_t {
                for o in 0..self.cfg.d_hidden {
                    let mut acc = b[[0, o]];
                    for j in 0..k {
                        for ci in 0..c {
                            acc += h[[ot + j, ci]] * w[[j * c + ci, o]];
                        }
                    }
                    next[[ot, o]] = acc.max(0.0);
                }
            }
            h = next;
        }

        let (t, c) = h.dim();
        let mut stats = vec![0.0; 2 * c];
        for col in 0..c {
            let mut mean = 0.0;
            for row in 0..t {
                mean += h[[row, col]];
            }
            mean /= t as f64;
            let mut var = 0.0;
            for row in 0..t {
                let d = h[[row, col]] - mean;
                var += d * d;
            }
            var /= t as f64;
            stats[col] = mean;
            stats[c + col] = (var + VAR_EPS).sqrt();
        }

        let w = store.value(self.seg_w);
        let b = store.value(self.seg_b);
        let mut emb = vec![0.0; self.cfg.d_xvec];
        for (o, e) in emb.iter_mut().enumerate() {
            let mut acc = b[[0, o]];
            for (i, s) in stats.iter().enumerate() {
                acc += s * w[[i, o]];
            }
            *e = acc;
        }
        Ok(emb)
    }

    /// Value-only forward to speaker logits.
    pub fn classify_values(&self, store: &ParamStore, mel: &Array2<f64>) -> Result<Vec<f64>> {
        let emb = self.embed_values(store, mel)?;
        let w = store.value(self.cls_w);
        let b = store.value(self.cls_b);
        let mut logits = vec![0.0; self.cfg.n_speakers];
        for (o, l) in logits.iter_mut().enumerate() {
            let mut acc = b[[0, o]];
            for (i, e) in emb.iter().enumerate() {
                acc += e.max(0.0) * w[[i, o]];
            }
            *l = acc;
        }
        Ok(logits)
    }
}

/// Cosine distance `1 - cos(a, b)`, in `[0, 2]`. Zero-norm inputs are mapped
/// to distance 1 (no directional evidence either way).
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine distance needs equal dimensions");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    // Clamp to counter round-off at the extremes.
    1.0 - (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Euclidean distance between two vectors.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "l2 distance needs equal dimensions");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
