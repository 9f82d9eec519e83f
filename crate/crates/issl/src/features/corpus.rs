//! Corpus types and the on-disk formats: a plain-text manifest, `ISSL`
//! PCM audio, and plain-text frame alignments.
//!
//! Manifest: one record per line, four whitespace-separated fields —
//! `utterance_id speaker_id audio_path alignment_path` (paths relative to
//! the manifest's directory). Lines starting with `#` are comments.
//!
//! Audio: magic `ISSL`, then sample rate and sample count as 4-byte
//! little-endian unsigned integers, then the samples as 16-bit little-endian
//! signed PCM (x in [-1,1] stored as round(x * 32767)).
//!
//! Alignment: `speaker <id>` line, one `<frame_index> <phoneme_id>` line per
//! feature frame (indices 0..T contiguous), and `word <start> <end> <id>`
//! lines with exclusive end, ordered and non-overlapping.

use crate::error::{Error, Result};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Word occurrence over feature frames [start, end).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
    pub word_id: usize,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub utterance_id: String,
    pub speaker_id: String,
    /// Phoneme id per feature frame.
    pub phone_align: Vec<usize>,
    pub word_align: Vec<WordSpan>,
}

impl Utterance {
    /// Alignment sanity: word spans in-range, ordered, non-overlapping.
    pub fn validate(&self) -> Result<()> {
        let t = self.phone_align.len();
        let mut prev_end = 0usize;
        for (i, w) in self.word_align.iter().enumerate() {
            if w.start >= w.end || w.end > t {
                return Err(Error::Contract(format!(
                    "{}: word span {i} [{}, {}) outside {t} frames",
                    self.utterance_id, w.start, w.end
                )));
            }
            if w.start < prev_end {
                return Err(Error::Contract(format!(
                    "{}: word span {i} overlaps or reorders at frame {}",
                    self.utterance_id, w.start
                )));
            }
            prev_end = w.end;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub audio_path: PathBuf,
    pub alignment_path: PathBuf,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{} {} {} {}\n",
            e.utterance_id,
            e.speaker_id,
            e.audio_path.display(),
            e.alignment_path.display()
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!(
                "{}:{}: expected 4 fields, got {}",
                path.display(),
                ln + 1,
                fields.len()
            )));
        }
        entries.push(ManifestEntry {
            utterance_id: fields[0].to_string(),
            speaker_id: fields[1].to_string(),
            audio_path: PathBuf::from(fields[2]),
            alignment_path: PathBuf::from(fields[3]),
        });
    }
    Ok(entries)
}

const AUDIO_MAGIC: &[u8; 4] = b"ISSL";

pub fn write_audio(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + samples.len() * 2);
    buf.extend_from_slice(AUDIO_MAGIC);
    buf.extend_from_slice(&sample_rate.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_audio(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != AUDIO_MAGIC {
        return Err(Error::Parse(format!("{}: not an ISSL audio file", path.display())));
    }
    let sample_rate = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 2 * n {
        return Err(Error::Parse(format!(
            "{}: header says {n} samples but payload is {} bytes",
            path.display(),
            bytes.len() - 12
        )));
    }
    let samples = bytes[12..]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32767.0)
        .collect();
    Ok((samples, sample_rate))
}

pub fn write_alignment(
    path: &Path,
    speaker_id: &str,
    phone_align: &[usize],
    word_align: &[WordSpan],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("speaker {speaker_id}\n"));
    for (i, p) in phone_align.iter().enumerate() {
        out.push_str(&format!("{i} {p}\n"));
    }
    for w in word_align {
        out.push_str(&format!("word {} {} {}\n", w.start, w.end, w.word_id));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_alignment(path: &Path) -> Result<(String, Vec<usize>, Vec<WordSpan>)> {
    let text = fs::read_to_string(path)?;
    let mut speaker = None;
    let mut phones = Vec::new();
    let mut words = Vec::new();
    let bad = |ln: usize, what: &str| {
        Error::Parse(format!("{}:{}: {what}", path.display(), ln + 1))
    };
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "speaker" => {
                if fields.len() != 2 {
                    return Err(bad(ln, "speaker line needs one id"));
                }
                speaker = Some(fields[1].to_string());
            }
            "word" => {
                if fields.len() != 4 {
                    return Err(bad(ln, "word line needs start end id"));
                }
                let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(ln, "bad integer"));
                words.push(WordSpan {
                    start: parse(fields[1])?,
                    end: parse(fields[2])?,
                    word_id: parse(fields[3])?,
                });
            }
            _ => {
                if fields.len() != 2 {
                    return Err(bad(ln, "frame line needs index and phoneme id"));
                }
                let idx: usize = fields[0].parse().map_err(|_| bad(ln, "bad frame index"))?;
                let pid: usize = fields[1].parse().map_err(|_| bad(ln, "bad phoneme id"))?;
                if idx != phones.len() {
                    return Err(bad(ln, "frame indices must be contiguous from 0"));
                }
                phones.push(pid);
            }
        }
    }
    let speaker = speaker.ok_or_else(|| {
        Error::Parse(format!("{}: missing speaker line", path.display()))
    })?;
    Ok((speaker, phones, words))
}

/// Load one utterance given its manifest entry, resolving paths against
/// `root` (the manifest's directory) and validating alignment structure.
pub fn load_utterance(root: &Path, entry: &ManifestEntry) -> Result<Utterance> {
    let (samples, sample_rate) = read_audio(&root.join(&entry.audio_path))?;
    let (speaker, phone_align, word_align) = read_alignment(&root.join(&entry.alignment_path))?;
    if speaker != entry.speaker_id {
        return Err(Error::Contract(format!(
            "{}: manifest says speaker {} but alignment says {}",
            entry.utterance_id, entry.speaker_id, speaker
        )));
    }
    let u = Utterance {
        samples,
        sample_rate,
        utterance_id: entry.utterance_id.clone(),
        speaker_id: entry.speaker_id.clone(),
        phone_align,
        word_align,
    };
    u.validate()?;
    Ok(u)
}
