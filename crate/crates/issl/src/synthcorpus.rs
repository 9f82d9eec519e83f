//! Deterministic synthetic speech-like corpus with planted phoneme, word
//! and speaker structure.
//!
//! Each phoneme is a characteristic set of 2-3 sinusoid partials; each
//! speaker applies a fixed spectral tilt and a small pitch factor; tokens
//! get per-token frequency/amplitude jitter and a random phase. Audio
//! length is pinned to (T-1)*hop + window so the feature frame count
//! equals the alignment frame count exactly.

use crate::error::{Error, Result};
use crate::features::corpus::{write_alignment, write_audio, write_manifest, ManifestEntry, WordSpan};
use crate::features::{frame_geometry, FeatureConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub n_phonemes: usize,
    pub n_words: usize,
    /// Phonemes per word, inclusive bounds.
    pub word_len_range: (usize, usize),
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Words per utterance, inclusive bounds.
    pub words_per_utterance: (usize, usize),
    /// Phoneme token duration in feature frames, inclusive bounds.
    pub duration_range: (usize, usize),
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_phonemes: 20,
            n_words: 200,
            word_len_range: (2, 5),
            n_speakers: 12,
            utterances_per_speaker: 100,
            words_per_utterance: (2, 3),
            duration_range: (3, 6),
            sample_rate: 4000,
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_phonemes < 2 {
            return Err(Error::Config("need at least 2 phonemes".into()));
        }
        if self.n_words == 0 || self.n_speakers == 0 || self.utterances_per_speaker == 0 {
            return Err(Error::Config("corpus counts must be positive".into()));
        }
        for (lo, hi, what) in [
            (self.word_len_range.0, self.word_len_range.1, "word length"),
            (self.words_per_utterance.0, self.words_per_utterance.1, "words per utterance"),
            (self.duration_range.0, self.duration_range.1, "duration"),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("bad {what} range {lo}..={hi}")));
            }
        }
        if self.duration_range.0 < 3 {
            return Err(Error::Config(format!(
                "phoneme durations must be >= 3 frames, got {}",
                self.duration_range.0
            )));
        }
        if self.sample_rate < 1000 {
            return Err(Error::Config(format!("sample rate {} too low", self.sample_rate)));
        }
        Ok(())
    }
}

struct PhonemeTemplate {
    freqs: Vec<f64>,
    amps: Vec<f64>,
}

struct SpeakerProfile {
    tilt: f64,
    pitch: f64,
}

/// Partial frequencies stay at or below this so that speaker pitch and
/// token jitter never push them past the 2 kHz Nyquist of the default
/// 4 kHz rate.
const MAX_PARTIAL_HZ: f64 = 1800.0;
const TILT_PIVOT_HZ: f64 = 600.0;

fn phoneme_templates<R: Rng>(n: usize, rng: &mut R) -> Vec<PhonemeTemplate> {
    // anchor partials spread the phonemes across the band so templates
    // stay acoustically distinct
    let step = 750.0 / (n - 1).max(1) as f64;
    (0..n)
        .map(|p| {
            let base = 150.0 + step * p as f64 + rng.gen_range(-20.0..20.0);
            let mut freqs = vec![base, (base * rng.gen_range(1.55..1.95)).min(MAX_PARTIAL_HZ)];
            let mut amps = vec![1.0, rng.gen_range(0.4..0.8)];
            if rng.gen_bool(0.5) {
                freqs.push((base + rng.gen_range(180.0..650.0)).min(MAX_PARTIAL_HZ));
                amps.push(rng.gen_range(0.3..0.6));
            }
            PhonemeTemplate { freqs, amps }
        })
        .collect()
}

fn speaker_profiles<R: Rng>(n: usize, rng: &mut R) -> Vec<SpeakerProfile> {
    (0..n)
        .map(|_| SpeakerProfile {
            tilt: rng.gen_range(-0.5..0.5),
            pitch: rng.gen_range(0.97..1.03),
        })
        .collect()
}

/// Words are distinct as phoneme multisets (mean-pooled spans lose order)
/// and never repeat a phoneme back to back (frame alignments cannot
/// separate adjacent identical tokens).
fn word_vocabulary<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let mut seen = std::collections::HashSet::new();
    let mut words = Vec::with_capacity(cfg.n_words);
    let mut attempts = 0usize;
    let cap = 10_000 * cfg.n_words;
    while words.len() < cfg.n_words {
        attempts += 1;
        if attempts > cap {
            return Err(Error::Degenerate(format!(
                "could not draw {} distinct words from {} phonemes",
                cfg.n_words, cfg.n_phonemes
            )));
        }
        let len = rng.gen_range(cfg.word_len_range.0..=cfg.word_len_range.1);
        let mut w = Vec::with_capacity(len);
        for _ in 0..len {
            let mut p = rng.gen_range(0..cfg.n_phonemes);
            while Some(&p) == w.last() {
                p = rng.gen_range(0..cfg.n_phonemes);
            }
            w.push(p);
        }
        let mut key = w.clone();
        key.sort_unstable();
        if seen.insert(key) {
            words.push(w);
        }
    }
    Ok(words)
}

fn render_utterance<R: Rng>(
    phones: &[(usize, usize)], // (phoneme id, duration in feature frames)
    templates: &[PhonemeTemplate],
    speaker: &SpeakerProfile,
    window: usize,
    hop: usize,
    sample_rate: u32,
    rng: &mut R,
) -> Vec<f64> {
    let t_feat: usize = phones.iter().map(|&(_, d)| d).sum();
    let wave_len = (t_feat - 1) * hop + window;
    let mut wave = vec![0.0f64; wave_len];
    let mut frame = 0usize;
    for (tok_idx, &(p, dur)) in phones.iter().enumerate() {
        let start = frame * hop;
        let end = if tok_idx + 1 == phones.len() { wave_len } else { (frame + dur) * hop };
        let tpl = &templates[p];
        for (&f0, &a0) in tpl.freqs.iter().zip(&tpl.amps) {
            let freq = f0 * speaker.pitch * (1.0 + rng.gen_range(-0.02..0.02));
            let amp = a0 * (freq / TILT_PIVOT_HZ).powf(speaker.tilt) * (1.0 + rng.gen_range(-0.1..0.1));
            let phase = rng.gen_range(0.0..TAU);
            let w = TAU * freq / sample_rate as f64;
            for (i, s) in wave[start..end].iter_mut().enumerate() {
                *s += amp * (w * i as f64 + phase).sin();
            }
        }
        frame += dur;
    }
    let peak = wave.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        for s in wave.iter_mut() {
            *s *= 0.5 / peak;
        }
    }
    wave
}

pub struct GeneratedCorpus {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Generate the corpus under `out_dir`: manifest.txt plus audio/ and
/// align/ subdirectories. Fully deterministic in the config seed; each
/// utterance is rendered from its own derived seed.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<GeneratedCorpus> {
    cfg.validate()?;
    let (window, hop, _) = frame_geometry(&FeatureConfig::default(), cfg.sample_rate);
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates = phoneme_templates(cfg.n_phonemes, &mut master);
    let speakers = speaker_profiles(cfg.n_speakers, &mut master);
    let words = word_vocabulary(cfg, &mut master)?;

    let n_utts = cfg.n_speakers * cfg.utterances_per_speaker;
    let utt_seeds: Vec<u64> = (0..n_utts).map(|_| master.gen()).collect();

    std::fs::create_dir_all(out_dir.join("audio"))?;
    std::fs::create_dir_all(out_dir.join("align"))?;
    let mut entries = Vec::with_capacity(n_utts);
    for spk in 0..cfg.n_speakers {
        for k in 0..cfg.utterances_per_speaker {
            let utt_index = spk * cfg.utterances_per_speaker + k;
            let mut rng = ChaCha8Rng::seed_from_u64(utt_seeds[utt_index]);
            let n_words = rng.gen_range(cfg.words_per_utterance.0..=cfg.words_per_utterance.1);
            let word_ids: Vec<usize> = (0..n_words).map(|_| rng.gen_range(0..words.len())).collect();

            let mut phones: Vec<(usize, usize)> = Vec::new();
            let mut word_align: Vec<WordSpan> = Vec::new();
            let mut frame = 0usize;
            for &wid in &word_ids {
                let start = frame;
                for &p in &words[wid] {
                    let dur = rng.gen_range(cfg.duration_range.0..=cfg.duration_range.1);
                    phones.push((p, dur));
                    frame += dur;
                }
                word_align.push(WordSpan { start, end: frame, word_id: wid });
            }
            let phone_align: Vec<usize> = phones
                .iter()
                .flat_map(|&(p, d)| std::iter::repeat(p).take(d))
                .collect();

            let wave = render_utterance(
                &phones,
                &templates,
                &speakers[spk],
                window,
                hop,
                cfg.sample_rate,
                &mut rng,
            );

            let utterance_id = format!("u{spk:02}_{k:03}");
            let speaker_id = format!("spk{spk:02}");
            let audio_path = PathBuf::from(format!("audio/{utterance_id}.issl"));
            let alignment_path = PathBuf::from(format!("align/{utterance_id}.align"));
            write_audio(&out_dir.join(&audio_path), &wave, cfg.sample_rate)?;
            write_alignment(&out_dir.join(&alignment_path), &speaker_id, &phone_align, &word_align)?;
            entries.push(ManifestEntry { utterance_id, speaker_id, audio_path, alignment_path });
        }
    }
    let manifest_path = out_dir.join("manifest.txt");
    write_manifest(&manifest_path, &entries)?;
    Ok(GeneratedCorpus { root: out_dir.to_path_buf(), manifest_path, entries })
}
