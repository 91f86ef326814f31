//! On-disk layout of a corpus directory.
//!
//! A corpus directory holds three files:
//! - `corpus.cfg`: the resolved generator config plus seed, flat key = value;
//! - `manifest.tsv`: one tab-separated record per utterance;
//! - `mels.bin`: all mel frames, f32 little-endian row-major, behind a
//!   16-byte header (magic, format version, mel bins, reserved).
//!
//! Generation is deterministic, so rebuilding with the same config and seed
//! reproduces all three files byte for byte.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;

use super::{
    CorpusConfig, CorpusManifest, GeneratedCorpus, LangId, PhoneId, SpeakerId, UtteranceRecord,
};

pub const CONFIG_FILE: &str = "corpus.cfg";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MEL_FILE: &str = "mels.bin";

const MEL_MAGIC: &[u8; 4] = b"CVML";
const MEL_VERSION: u32 = 1;
const MEL_HEADER_LEN: usize = 16;

/// Streaming writer for the mel store. `write` returns the absolute byte
/// offset of the utterance's first sample.
pub struct MelStoreWriter<W: Write> {
    out: W,
    n_mels: usize,
    offset: u64,
}

impl<W: Write> MelStoreWriter<W> {
    pub fn new(mut out: W, n_mels: usize) -> Result<Self> {
        let mut header = [0u8; MEL_HEADER_LEN];
        header[..4].copy_from_slice(MEL_MAGIC);
        header[4..8].copy_from_slice(&MEL_VERSION.to_le_bytes());
        header[8..12].copy_from_slice(&(n_mels as u32).to_le_bytes());
        out.write_all(&header).map_err(write_err)?;
        Ok(Self { out, n_mels, offset: MEL_HEADER_LEN as u64 })
    }

    pub fn write(&mut self, mel: &Array2<f64>) -> Result<u64> {
        if mel.ncols() != self.n_mels {
            return Err(Error::Corpus(format!(
                "mel has {} bins, store expects {}",
                mel.ncols(),
                self.n_mels
            )));
        }
        let start = self.offset;
        let mut buf = Vec::with_capacity(mel.len() * 4);
        for row in mel.rows() {
            for v in row {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        self.out.write_all(&buf).map_err(write_err)?;
        self.offset += buf.len() as u64;
        Ok(start)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(write_err)
    }
}

fn write_err(source: std::io::Error) -> Error {
    Error::Corpus(format!("mel store write failed: {source}"))
}

/// Read-only mel store, fully resident in memory.
#[derive(Debug)]
pub struct MelStore {
    data: Vec<u8>,
    n_mels: usize,
}

impl MelStore {
    pub fn open(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(data)
    }

    pub fn from_bytes(data: Vec<u8>) -> Result<Self> {
        if data.len() < MEL_HEADER_LEN {
            return Err(Error::Corpus("mel store truncated before header".into()));
        }
        if &data[..4] != MEL_MAGIC {
            return Err(Error::Corpus("mel store has wrong magic bytes".into()));
        }
        let version = u32::from_le_bytes(data[4..8].try_into().expect("4 bytes"));
        if version != MEL_VERSION {
            return Err(Error::Corpus(format!(
                "mel store format version {version} unsupported (expected {MEL_VERSION})"
            )));
        }
        let n_mels = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes")) as usize;
        if n_mels == 0 {
            return Err(Error::Corpus("mel store declares zero mel bins".into()));
        }
        Ok(Self { data, n_mels })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    /// Reads `n_frames` frames starting at absolute byte `offset`.
    pub fn read(&self, offset: u64, n_frames: usize) -> Result<Array2<f64>> {
        let start = offset as usize;
        let len = n_frames * self.n_mels * 4;
        let end = start
            .checked_add(len)
            .filter(|e| *e <= self.data.len() && start >= MEL_HEADER_LEN)
            .ok_or_else(|| {
                Error::Corpus(format!(
                    "mel store read out of bounds: offset {offset}, {n_frames} frames"
                ))
            })?;
        let bytes = &self.data[start..end];
        let mut mel = Array2::zeros((n_frames, self.n_mels));
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
            mel[[i / self.n_mels, i % self.n_mels]] = v;
        }
        Ok(mel)
    }
}

/// Serialises the resolved config and seed as a flat key-value file.
pub fn write_config(cfg: &CorpusConfig, seed: u64, dir: &Path) -> Result<()> {
    let mut kv = KvConfig::new();
    kv.set("corpus.seed", seed);
    kv.set("corpus.n_languages", cfg.n_languages);
    kv.set("corpus.speakers_per_language", cfg.speakers_per_language);
    kv.set("corpus.n_mels", cfg.n_mels);
    kv.set("corpus.phones_per_language", cfg.phones_per_language);
    kv.set("corpus.utterances_per_language", cfg.utterances_per_language);
    kv.set("corpus.imbalance_ratio", cfg.imbalance_ratio);
    kv.set("corpus.min_phones_per_utterance", cfg.min_phones_per_utterance);
    kv.set("corpus.max_phones_per_utterance", cfg.max_phones_per_utterance);
    kv.set("corpus.duration_min", cfg.duration_min);
    kv.set("corpus.duration_max", cfg.duration_max);
    kv.set("corpus.render_silence_frames", cfg.render_silence_frames);
    kv.set("corpus.target_silence_frames", cfg.target_silence_frames);
    kv.set("corpus.silence_level", cfg.silence_level);
    kv.set("corpus.silence_threshold", cfg.silence_threshold);
    kv.set("corpus.noise_sigma", cfg.noise_sigma);
    kv.set("corpus.language_bias_scale", cfg.language_bias_scale);
    kv.set("corpus.signature_norm_min", cfg.signature_norm_min);
    kv.set("corpus.signature_norm_max", cfg.signature_norm_max);
    kv.set("corpus.tilt_max", cfg.tilt_max);
    kv.set("corpus.template_scale", cfg.template_scale);
    kv.set("corpus.contour_amplitude_max", cfg.contour_amplitude_max);
    kv.set("corpus.holdout_every", cfg.holdout_every);
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, kv.to_text()).map_err(|e| Error::io(&path, e))
}

/// Reads the resolved config and seed back from a corpus directory.
pub fn read_config(dir: &Path) -> Result<(CorpusConfig, u64)> {
    let path = dir.join(CONFIG_FILE);
    let kv = KvConfig::load(&path)?;
    let seed = kv
        .get("corpus.seed")
        .ok_or_else(|| Error::Corpus(format!("{} is missing corpus.seed", path.display())))?
        .parse::<u64>()
        .map_err(|e| Error::Corpus(format!("invalid corpus.seed: {e}")))?;
    Ok((CorpusConfig::from_kv(&kv)?, seed))
}

/// Writes the manifest: two header comments (seed, generator version) then
/// one tab-separated record per utterance in corpus order.
pub fn write_manifest(manifest: &CorpusManifest, dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = String::new();
    text.push_str(&format!("# seed = {}\n", manifest.seed));
    text.push_str(&format!("# generator = {}\n", manifest.generator_version));
    for r in &manifest.records {
        let phones: Vec<String> = r.phones.iter().map(|p| p.0.to_string()).collect();
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.utt_id,
            r.speaker_id,
            r.lang_id,
            r.n_frames,
            phones.join(","),
            r.byte_offset
        ));
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Parses a manifest. Speaker ordinals are recomputed from record order, so
/// the hold-out split is a pure function of the manifest.
pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut seed = None;
    let mut version = None;
    let mut records = Vec::new();
    let mut per_speaker = std::collections::BTreeMap::new();

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                match k.trim() {
                    "seed" => seed = Some(parse_field::<u64>(v, lineno, "seed")?),
                    "generator" => version = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Corpus(format!(
                "manifest line {} has {} fields, expected 6",
                lineno + 1,
                fields.len()
            )));
        }
        let utt_id = parse_field::<u32>(fields[0], lineno, "utterance id")?;
        let speaker_id = SpeakerId(parse_field::<u32>(fields[1], lineno, "speaker id")?);
        let lang_id = LangId(parse_field::<u32>(fields[2], lineno, "lang id")?);
        let n_frames = parse_field::<usize>(fields[3], lineno, "frame count")?;
        let phones = fields[4]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| Ok(PhoneId(parse_field::<u32>(s, lineno, "phone id")?)))
            .collect::<Result<Vec<_>>>()?;
        let byte_offset = parse_field::<u64>(fields[5], lineno, "byte offset")?;

        let ordinal = per_speaker.entry(speaker_id).or_insert(0u32);
        records.push(UtteranceRecord {
            utt_id,
            speaker_id,
            lang_id,
            n_frames,
            phones,
            byte_offset,
            speaker_ordinal: *ordinal,
        });
        *ordinal += 1;
    }

    Ok(CorpusManifest {
        seed: seed.ok_or_else(|| Error::Corpus("manifest is missing the seed header".into()))?,
        generator_version: version
            .ok_or_else(|| Error::Corpus("manifest is missing the generator header".into()))?,
        records,
    })
}

fn parse_field<T: std::str::FromStr>(s: &str, lineno: usize, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse::<T>().map_err(|e| {
        Error::Corpus(format!("manifest line {}: bad {what}: {e}", lineno + 1))
    })
}

/// Writes config, mel store and manifest for a generated corpus.
pub fn write_corpus(corpus: &GeneratedCorpus, dir: &Path) -> Result<CorpusManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_config(&corpus.config, corpus.seed, dir)?;

    let mel_path = dir.join(MEL_FILE);
    let file = File::create(&mel_path).map_err(|e| Error::io(&mel_path, e))?;
    let mut writer = MelStoreWriter::new(BufWriter::new(file), corpus.config.n_mels)?;
    let mut records = corpus.records.clone();
    for (rec, utt) in records.iter_mut().zip(&corpus.utterances) {
        rec.byte_offset = writer.write(&utt.mel)?;
    }
    writer.finish()?;

    let manifest = CorpusManifest {
        seed: corpus.seed,
        generator_version: crate::VERSION.to_string(),
        records,
    };
    write_manifest(&manifest, dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, Corpus};
    use ndarray::array;

    #[test]
    fn mel_store_round_trips_within_f32_precision() {
        let mel = array![[0.125, -1.5], [3.25, 0.0], [-4.0, 2.0]];
        let mut bytes = Vec::new();
        let mut w = MelStoreWriter::new(&mut bytes, 2).unwrap();
        let off = w.write(&mel).unwrap();
        w.finish().unwrap();
        assert_eq!(off, MEL_HEADER_LEN as u64);

        let store = MelStore::from_bytes(bytes).unwrap();
        assert_eq!(store.n_mels(), 2);
        let back = store.read(off, 3).unwrap();
        // These values are all exactly representable in f32.
        assert_eq!(back, mel);
    }

    #[test]
    fn mel_store_rejects_corrupt_headers_and_bad_reads() {
        assert!(MelStore::from_bytes(vec![0; 4]).is_err());
        let mut bad_magic = vec![0u8; MEL_HEADER_LEN];
        bad_magic[..4].copy_from_slice(b"NOPE");
        assert!(MelStore::from_bytes(bad_magic).is_err());

        let mut bytes = Vec::new();
        let mut w = MelStoreWriter::new(&mut bytes, 2).unwrap();
        w.write(&array![[1.0, 2.0]]).unwrap();
        w.finish().unwrap();
        let store = MelStore::from_bytes(bytes).unwrap();
        assert!(store.read(MEL_HEADER_LEN as u64, 2).is_err());
        assert!(store.read(0, 1).is_err());
    }

    #[test]
    fn corpus_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = corpus::CorpusConfig {
            n_languages: 2,
            speakers_per_language: 2,
            phones_per_language: 3,
            utterances_per_language: 8,
            imbalance_ratio: 2.0,
            ..corpus::CorpusConfig::default()
        };
        let generated = corpus::generate(&cfg, 99).unwrap();
        let manifest = write_corpus(&generated, dir.path()).unwrap();

        let loaded = Corpus::load(dir.path()).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.seed, 99);
        assert_eq!(loaded.manifest, manifest);
        assert_eq!(loaded.n_utterances(), generated.utterances.len());

        // Mels agree with the in-memory originals to f32 precision, and the
        // re-derived specs reproduce the generative factors.
        for (i, utt) in generated.utterances.iter().enumerate() {
            let back = loaded.mel(i).unwrap();
            assert_eq!(back.dim(), utt.mel.dim());
            for (a, b) in back.iter().zip(utt.mel.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert_eq!(
            loaded.specs.speakers[0].signature,
            generated.specs.speakers[0].signature
        );
    }

    #[test]
    fn rebuilding_the_same_corpus_is_byte_identical() {
        let cfg = corpus::CorpusConfig {
            n_languages: 2,
            speakers_per_language: 2,
            phones_per_language: 3,
            utterances_per_language: 6,
            ..corpus::CorpusConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        corpus::build_corpus(&cfg, 5, d1.path()).unwrap();
        corpus::build_corpus(&cfg, 5, d2.path()).unwrap();
        for name in [CONFIG_FILE, MANIFEST_FILE, MEL_FILE] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between rebuilds");
        }
    }

    #[test]
    fn holdout_split_partitions_indices() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = corpus::CorpusConfig {
            n_languages: 2,
            speakers_per_language: 2,
            phones_per_language: 3,
            utterances_per_language: 30,
            holdout_every: 10,
            ..corpus::CorpusConfig::default()
        };
        corpus::build_corpus(&cfg, 3, dir.path()).unwrap();
        let loaded = Corpus::load(dir.path()).unwrap();
        let train = loaded.train_indices();
        let held = loaded.holdout_indices();
        assert_eq!(train.len() + held.len(), loaded.n_utterances());
        assert!(!held.is_empty());
        assert!(train.iter().all(|i| !held.contains(i)));
    }
}
