//! Acoustic front end: MFCC extraction and derivative appending.
//!
//! Recipe: optional pre-emphasis, Hamming window, magnitude spectrum,
//! triangular mel filterbank, log with a floor, orthonormal DCT-II truncated
//! to the first coefficients. Derivatives use symmetric regression windows
//! with replicated edge padding.

pub mod corpus;

pub use corpus::{ManifestEntry, Utterance, WordSpan};

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FeatureConfig {
    pub window_secs: f64,
    pub hop_secs: f64,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub log_floor: f64,
    /// 0.0 disables; otherwise y[t] = x[t] - k * x[t-1].
    pub pre_emphasis: f64,
    pub fmin_hz: f64,
    /// Top mel edge; None means Nyquist.
    pub fmax_hz: Option<f64>,
    pub delta_radius: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window_secs: 0.025,
            hop_secs: 0.010,
            n_mels: 26,
            n_coeffs: 13,
            log_floor: 1e-10,
            pre_emphasis: 0.0,
            fmin_hz: 0.0,
            fmax_hz: None,
            delta_radius: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureSequence {
    /// T x D.
    pub frames: Matrix,
    pub frame_rate: f64,
}

/// Window length, hop length (samples) and the zero-padded FFT size for a
/// given config and sample rate.
pub fn frame_geometry(cfg: &FeatureConfig, sample_rate: u32) -> (usize, usize, usize) {
    let window = (cfg.window_secs * sample_rate as f64).round() as usize;
    let hop = (cfg.hop_secs * sample_rate as f64).round() as usize;
    (window, hop, window.next_power_of_two())
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank as an n_mels x (n_fft/2 + 1) matrix.
/// Very narrow filters may cover no FFT bin at small FFT sizes; such a
/// channel stays at the log floor, which downstream treats as constant.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Matrix {
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    Matrix::from_fn(n_mels, n_bins, |m, k| {
        let f = k as f64 * sample_rate as f64 / n_fft as f64;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= lo || f >= hi {
            0.0
        } else if f <= mid {
            (f - lo) / (mid - lo)
        } else {
            (hi - f) / (hi - mid)
        }
    })
}

fn hamming(window: usize) -> Vec<f64> {
    (0..window)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (window - 1) as f64).cos())
        .collect()
}

fn dct_ii_orthonormal(n_out: usize, n_in: usize) -> Matrix {
    Matrix::from_fn(n_out, n_in, |k, n| {
        let s = if k == 0 {
            (1.0 / n_in as f64).sqrt()
        } else {
            (2.0 / n_in as f64).sqrt()
        };
        s * (std::f64::consts::PI * k as f64 * (2.0 * n as f64 + 1.0) / (2.0 * n_in as f64)).cos()
    })
}

/// MFCCs from raw samples. Output is T x n_coeffs with
/// T = (len - window) / hop + 1.
pub fn mfcc_samples(samples: &[f64], sample_rate: u32, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    let (window, hop, n_fft) = frame_geometry(cfg, sample_rate);
    if window < 2 || hop == 0 {
        return Err(Error::Config(format!(
            "window {window} / hop {hop} samples too small at {sample_rate} Hz"
        )));
    }
    if samples.len() < window {
        return Err(Error::Degenerate(format!(
            "utterance of {} samples is shorter than one {window}-sample window",
            samples.len()
        )));
    }
    let fmax = cfg.fmax_hz.unwrap_or(sample_rate as f64 / 2.0);
    if fmax > sample_rate as f64 / 2.0 {
        return Err(Error::Config(format!(
            "top mel edge {fmax} Hz above Nyquist for {sample_rate} Hz"
        )));
    }
    if cfg.fmin_hz < 0.0 || cfg.fmin_hz >= fmax {
        return Err(Error::Config("mel band edges must satisfy 0 <= fmin < fmax".into()));
    }
    if cfg.n_coeffs > cfg.n_mels {
        return Err(Error::Config(format!(
            "{} coefficients from {} mel channels",
            cfg.n_coeffs, cfg.n_mels
        )));
    }

    let emphasized: Vec<f64> = if cfg.pre_emphasis != 0.0 {
        let k = cfg.pre_emphasis;
        let mut y = Vec::with_capacity(samples.len());
        y.push(samples[0]);
        for t in 1..samples.len() {
            y.push(samples[t] - k * samples[t - 1]);
        }
        y
    } else {
        samples.to_vec()
    };

    let t_frames = (emphasized.len() - window) / hop + 1;
    let win = hamming(window);
    let fbank = mel_filterbank(cfg.n_mels, n_fft, sample_rate, cfg.fmin_hz, fmax);
    let dct = dct_ii_orthonormal(cfg.n_coeffs, cfg.n_mels);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;

    let mut out = Matrix::zeros(t_frames, cfg.n_coeffs);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..t_frames {
        for (n, b) in buf.iter_mut().enumerate() {
            *b = if n < window {
                Complex::new(emphasized[t * hop + n] * win[n], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let mut logmel = vec![0.0f64; cfg.n_mels];
        for (m, lm) in logmel.iter_mut().enumerate() {
            let mut e = 0.0;
            for k in 0..n_bins {
                let w = fbank.get(m, k);
                if w != 0.0 {
                    e += w * buf[k].norm();
                }
            }
            *lm = e.max(cfg.log_floor).ln();
        }
        for c in 0..cfg.n_coeffs {
            let mut v = 0.0;
            for (m, lm) in logmel.iter().enumerate() {
                v += dct.get(c, m) * lm;
            }
            out.set(t, c, v);
        }
    }
    Ok(FeatureSequence { frames: out, frame_rate: 1.0 / cfg.hop_secs })
}

pub fn mfcc(u: &Utterance, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    mfcc_samples(&u.samples, u.sample_rate, cfg)
}

/// Append first- and second-order regression deltas, tripling D.
/// d_t = sum_i i * (c_{t+i} - c_{t-i}) / (2 * sum_i i^2), indices clamped to
/// the sequence (replicated edge padding).
pub fn append_deltas(f: &FeatureSequence, radius: usize) -> Result<FeatureSequence> {
    let (t_frames, d) = f.frames.shape();
    if t_frames == 0 {
        return Err(Error::Degenerate("append_deltas: empty sequence".into()));
    }
    if radius == 0 {
        return Err(Error::Config("append_deltas: radius must be >= 1".into()));
    }
    let denom: f64 = 2.0 * (1..=radius).map(|i| (i * i) as f64).sum::<f64>();
    let delta_of = |src: &Matrix| -> Matrix {
        Matrix::from_fn(t_frames, d, |t, j| {
            let mut acc = 0.0;
            for i in 1..=radius {
                let fwd = (t + i).min(t_frames - 1);
                let bwd = t.saturating_sub(i);
                acc += i as f64 * (src.get(fwd, j) - src.get(bwd, j));
            }
            acc / denom
        })
    };
    let d1 = delta_of(&f.frames);
    let d2 = delta_of(&d1);
    let mut out = Matrix::zeros(t_frames, 3 * d);
    for t in 0..t_frames {
        out.row_mut(t)[..d].copy_from_slice(f.frames.row(t));
        out.row_mut(t)[d..2 * d].copy_from_slice(d1.row(t));
        out.row_mut(t)[2 * d..].copy_from_slice(d2.row(t));
    }
    Ok(FeatureSequence { frames: out, frame_rate: f.frame_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> FeatureConfig {
        FeatureConfig::default()
    }

    #[test]
    fn zero_signal_gives_identical_frames() {
        let samples = vec![0.0; 4000];
        let f = mfcc_samples(&samples, 16000, &cfg()).unwrap();
        assert_eq!(f.frames.cols(), 13);
        for t in 1..f.frames.rows() {
            for j in 0..13 {
                assert_eq!(f.frames.get(t, j), f.frames.get(0, j));
            }
        }
    }

    #[test]
    fn thirteen_coefficients_always() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for len in [400usize, 1000, 4321] {
            let samples: Vec<f64> = (0..len).map(|_| rng.gen::<f64>() - 0.5).collect();
            let f = mfcc_samples(&samples, 16000, &cfg()).unwrap();
            assert_eq!(f.frames.cols(), 13);
        }
    }

    #[test]
    fn tone_matches_naive_dft_oracle() {
        let sr = 16000u32;
        let samples: Vec<f64> = (0..3200)
            .map(|n| 0.9 * (2.0 * std::f64::consts::PI * 200.0 * n as f64 / sr as f64).sin())
            .collect();
        let c = cfg();
        let f = mfcc_samples(&samples, sr, &c).unwrap();

        let (window, hop, n_fft) = frame_geometry(&c, sr);
        let fbank = mel_filterbank(c.n_mels, n_fft, sr, 0.0, sr as f64 / 2.0);
        let t_frames = (samples.len() - window) / hop + 1;
        assert_eq!(f.frames.rows(), t_frames);
        for t in 0..t_frames {
            // windowed frame, O(N^2) DFT magnitudes
            let frame: Vec<f64> = (0..window)
                .map(|n| {
                    let w = 0.54
                        - 0.46
                            * (2.0 * std::f64::consts::PI * n as f64 / (window - 1) as f64).cos();
                    samples[t * hop + n] * w
                })
                .collect();
            let mags: Vec<f64> = (0..n_fft / 2 + 1)
                .map(|k| {
                    let (mut re, mut im) = (0.0f64, 0.0f64);
                    for (n, &x) in frame.iter().enumerate() {
                        let ang = -2.0 * std::f64::consts::PI * k as f64 * n as f64 / n_fft as f64;
                        re += x * ang.cos();
                        im += x * ang.sin();
                    }
                    (re * re + im * im).sqrt()
                })
                .collect();
            for cidx in 0..13 {
                let mut v = 0.0;
                for m in 0..c.n_mels {
                    let mut e = 0.0;
                    for (k, &mg) in mags.iter().enumerate() {
                        e += fbank.get(m, k) * mg;
                    }
                    let lm = e.max(c.log_floor).ln();
                    let s = if cidx == 0 {
                        (1.0 / c.n_mels as f64).sqrt()
                    } else {
                        (2.0 / c.n_mels as f64).sqrt()
                    };
                    v += s
                        * (std::f64::consts::PI * cidx as f64 * (2.0 * m as f64 + 1.0)
                            / (2.0 * c.n_mels as f64))
                            .cos()
                        * lm;
                }
                assert!(
                    (v - f.frames.get(t, cidx)).abs() < 1e-8,
                    "frame {t} coeff {cidx}: oracle {v} vs {}",
                    f.frames.get(t, cidx)
                );
            }
        }
    }

    #[test]
    fn deterministic_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<f64> = (0..2000).map(|_| rng.gen::<f64>() - 0.5).collect();
        let a = mfcc_samples(&samples, 16000, &cfg()).unwrap();
        let b = mfcc_samples(&samples, 16000, &cfg()).unwrap();
        for t in 0..a.frames.rows() {
            for j in 0..13 {
                assert_eq!(a.frames.get(t, j).to_bits(), b.frames.get(t, j).to_bits());
            }
        }
    }

    #[test]
    fn amplitude_scaling_shifts_only_c0() {
        // broadband noise keeps every mel channel above the log floor, so
        // scaling adds a constant to all log-mel channels and only the DC
        // cepstral coefficient moves
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..1600).map(|_| 0.4 * (rng.gen::<f64>() - 0.5)).collect();
        let doubled: Vec<f64> = samples.iter().map(|x| 2.0 * x).collect();
        let a = mfcc_samples(&samples, 16000, &cfg()).unwrap();
        let b = mfcc_samples(&doubled, 16000, &cfg()).unwrap();
        for t in 0..a.frames.rows() {
            assert!((b.frames.get(t, 0) - a.frames.get(t, 0)).abs() > 1e-3);
            for j in 1..13 {
                assert!(
                    (b.frames.get(t, j) - a.frames.get(t, j)).abs() < 1e-9,
                    "coeff {j} moved under amplitude scaling"
                );
            }
        }
        // delta columns of the constant shift stay zero
        let da = append_deltas(&a, 2).unwrap();
        let db = append_deltas(&b, 2).unwrap();
        for t in 0..da.frames.rows() {
            for j in 13..39 {
                assert!((da.frames.get(t, j) - db.frames.get(t, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frame_count_law() {
        let c = cfg();
        let (window, hop, _) = frame_geometry(&c, 16000);
        for extra in 0..3 * hop + 2 {
            let samples = vec![0.1; window + extra];
            let f = mfcc_samples(&samples, 16000, &c).unwrap();
            assert_eq!(f.frames.rows(), extra / hop + 1);
        }
        assert!(mfcc_samples(&vec![0.1; window - 1], 16000, &c).is_err());
    }

    #[test]
    fn rejects_mel_edge_above_nyquist() {
        let mut c = cfg();
        c.fmax_hz = Some(9000.0);
        assert!(mfcc_samples(&vec![0.0; 1000], 16000, &c).is_err());
    }

    #[test]
    fn deltas_of_constant_are_zero() {
        let f = FeatureSequence { frames: Matrix::filled(7, 13, 3.25), frame_rate: 100.0 };
        let g = append_deltas(&f, 2).unwrap();
        assert_eq!(g.frames.cols(), 39);
        for t in 0..7 {
            for j in 13..39 {
                assert_eq!(g.frames.get(t, j), 0.0);
            }
        }
    }

    #[test]
    fn deltas_of_ramp_are_slope_then_zero() {
        let frames = Matrix::from_fn(12, 13, |t, j| t as f64 * (j + 1) as f64);
        let f = FeatureSequence { frames, frame_rate: 100.0 };
        let g = append_deltas(&f, 2).unwrap();
        // interior frames (away from the replicated edges by the radius)
        for t in 2..10 {
            for j in 0..13 {
                assert!((g.frames.get(t, 13 + j) - (j + 1) as f64).abs() < 1e-12);
            }
        }
        for t in 4..8 {
            for j in 0..13 {
                assert!(g.frames.get(t, 26 + j).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deltas_match_direct_regression_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let frames = Matrix::from_fn(9, 4, |_, _| rng.gen::<f64>() - 0.5);
        let f = FeatureSequence { frames: frames.clone(), frame_rate: 100.0 };
        let radius = 2usize;
        let g = append_deltas(&f, radius).unwrap();
        // oracle: explicitly build the padded sequence per column
        let t_frames = 9usize;
        let denom: f64 = 2.0 * (1..=radius).map(|i| (i * i) as f64).sum::<f64>();
        let reg = |src: &Vec<Vec<f64>>, t: usize, j: usize| -> f64 {
            let mut acc = 0.0;
            for i in 1..=radius {
                let fwd = src[(t + i).min(t_frames - 1)][j];
                let bwd = src[t.saturating_sub(i)][j];
                acc += i as f64 * (fwd - bwd);
            }
            acc / denom
        };
        let base: Vec<Vec<f64>> = (0..t_frames).map(|t| frames.row(t).to_vec()).collect();
        let d1: Vec<Vec<f64>> =
            (0..t_frames).map(|t| (0..4).map(|j| reg(&base, t, j)).collect()).collect();
        for t in 0..t_frames {
            for j in 0..4 {
                assert!((g.frames.get(t, 4 + j) - d1[t][j]).abs() < 1e-12);
                assert!((g.frames.get(t, 8 + j) - reg(&d1, t, j)).abs() < 1e-12);
            }
        }
    }
}
