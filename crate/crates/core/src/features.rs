//! Spectral features: STFT magnitude, Slaney-scale mel filterbank, log-mel
//! extraction, and the `MELS` on-disk format.
//!
//! Defaults follow the preprocessing recipe: 22050 Hz audio, 1024-point STFT
//! with Hann window and reflective center padding, 80 mel bins over the full
//! band, natural log with a 1e-5 floor. A 12.5 ms hop is 275.625 samples at
//! 22050 Hz, which is not an integer; a 256-sample hop is used instead.

use std::io::{Read, Write};
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f32,
    pub fmax: f32,
    pub log_floor: f32,
    pub trim_threshold_db: f32,
    pub segment_seconds: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 22050,
            n_fft: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 11025.0,
            log_floor: 1e-5,
            trim_threshold_db: 20.0,
            segment_seconds: 3.0,
        }
    }
}

impl FeatureConfig {
    pub fn n_freq_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.n_fft < 2 || self.hop == 0 {
            return Err(Error::Config(format!(
                "bad feature parameters: n_mels={} n_fft={} hop={}",
                self.n_mels, self.n_fft, self.hop
            )));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin) {
            return Err(Error::Config(format!(
                "bad mel range {}..{}",
                self.fmin, self.fmax
            )));
        }
        if self.fmax > self.sample_rate as f32 / 2.0 + 1e-3 {
            return Err(Error::Config(format!(
                "fmax {} above Nyquist {}",
                self.fmax,
                self.sample_rate / 2
            )));
        }
        Ok(())
    }
}

/// F x T log-mel magnitudes with the parameters needed to invert them.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor<f32>,
    pub sample_rate: u32,
    pub hop: u32,
}

const MELS_MAGIC: &[u8; 4] = b"MELS";
const MELS_VERSION: u32 = 1;

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    /// Binary layout: magic "MELS", u32 version=1, u32 F, u32 T,
    /// u32 sample_rate, u32 hop, then F*T little-endian f32, mel-bin major.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MELS_MAGIC)?;
        for v in [
            MELS_VERSION,
            self.n_mels() as u32,
            self.frames() as u32,
            self.sample_rate,
            self.hop,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in self.values.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, origin: &Path) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(origin, "truncated magic"))?;
        if &magic != MELS_MAGIC {
            return Err(Error::format(origin, "bad magic, expected MELS"));
        }
        let mut u32s = [0u32; 5];
        for slot in &mut u32s {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(origin, "truncated header"))?;
            *slot = u32::from_le_bytes(buf);
        }
        let [version, f, t, sample_rate, hop] = u32s;
        if version != MELS_VERSION {
            return Err(Error::format(origin, format!("unknown version {version}")));
        }
        let n = f as usize * t as usize;
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(origin, "truncated values"))?;
            data.push(f32::from_le_bytes(buf));
        }
        Ok(MelSpectrogram {
            values: Tensor::from_vec(vec![f as usize, t as usize], data),
            sample_rate,
            hop,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut file).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut file, path)
    }

    /// Plain-text view for inspection: one row per mel bin, comma-separated.
    pub fn export_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        let (f, t) = (self.n_mels(), self.frames());
        for bin in 0..f {
            let row = &self.values.data()[bin * t..(bin + 1) * t];
            let line: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

fn hz_to_mel(f: f32) -> f32 {
    // Slaney scale: linear below 1 kHz, logarithmic above.
    if f < 1000.0 {
        f * 3.0 / 200.0
    } else {
        15.0 + 27.0 * (f / 1000.0).ln() / 6.4f32.ln()
    }
}

fn mel_to_hz(m: f32) -> f32 {
    if m < 15.0 {
        m * 200.0 / 3.0
    } else {
        1000.0 * ((m - 15.0) * 6.4f32.ln() / 27.0).exp()
    }
}

/// Triangular mel filterbank, peak 1.0, no area normalization.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// n_mels x n_freq_bins weights.
    pub weights: Tensor<f32>,
    /// Center frequency of each filter in Hz.
    pub centers: Vec<f32>,
}

impl MelFilterbank {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let n_bins = cfg.n_freq_bins();
        let mel_lo = hz_to_mel(cfg.fmin);
        let mel_hi = hz_to_mel(cfg.fmax);
        let n_pts = cfg.n_mels + 2;
        let hz_pts: Vec<f32> = (0..n_pts)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f32 / (n_pts - 1) as f32))
            .collect();
        let bin_hz: Vec<f32> = (0..n_bins)
            .map(|k| k as f32 * cfg.sample_rate as f32 / cfg.n_fft as f32)
            .collect();
        let mut weights = vec![0.0f32; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (left, center, right) = (hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]);
            for (k, &f) in bin_hz.iter().enumerate() {
                let rising = (f - left) / (center - left);
                let falling = (right - f) / (right - center);
                let w = rising.min(falling).max(0.0);
                weights[m * n_bins + k] = w;
            }
        }
        MelFilterbank {
            weights: Tensor::from_vec(vec![cfg.n_mels, n_bins], weights),
            centers: hz_pts[1..=cfg.n_mels].to_vec(),
        }
    }
}

/// Magnitude (not power) spectrogram: `(n_fft/2 + 1) x T` with
/// `T = 1 + floor(len / hop)`, Hann window, reflective center padding.
pub fn stft_magnitude(clip: &AudioClip, cfg: &FeatureConfig) -> Result<Tensor<f32>> {
    let n_fft = cfg.n_fft;
    let pad = n_fft / 2;
    let n = clip.samples.len();
    if n < pad + 1 {
        return Err(Error::InvalidArgument(format!(
            "clip of {n} samples is shorter than the {pad}-sample center pad"
        )));
    }
    let frames = 1 + n / cfg.hop;
    let n_bins = cfg.n_freq_bins();

    // Periodic Hann window.
    let window: Vec<f32> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f32::consts::PI * i as f32 / n_fft as f32).cos())
        .collect();
    // Reflection that does not repeat the edge sample.
    let sample_at = |p: i64| -> f32 {
        let idx = if p < 0 {
            (-p) as usize
        } else if p as usize >= n {
            2 * n - 2 - p as usize
        } else {
            p as usize
        };
        clip.samples[idx]
    };

    let fft = FftPlanner::<f32>::new().plan_fft_forward(n_fft);
    let mut out = vec![0.0f32; n_bins * frames];
    let mut buf = vec![Complex::new(0.0f32, 0.0); n_fft];
    for frame in 0..frames {
        let start = frame as i64 * cfg.hop as i64 - pad as i64;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(sample_at(start + i as i64) * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (bin, value) in buf.iter().take(n_bins).enumerate() {
            out[bin * frames + frame] = value.norm();
        }
    }
    Ok(Tensor::from_vec(vec![n_bins, frames], out))
}

/// Project a linear magnitude spectrogram onto the mel filterbank and take
/// the (floored) natural log.
pub fn log_mel(
    mag: &Tensor<f32>,
    filterbank: &MelFilterbank,
    cfg: &FeatureConfig,
) -> Result<MelSpectrogram> {
    let n_bins = filterbank.weights.shape()[1];
    if mag.rank() != 2 || mag.shape()[0] != n_bins {
        return Err(Error::shape(
            "log_mel",
            format!("magnitude {:?} vs {n_bins} frequency bins", mag.shape()),
        ));
    }
    let n_mels = filterbank.weights.shape()[0];
    let frames = mag.shape()[1];
    let mut out = vec![0.0f32; n_mels * frames];
    let fw = filterbank.weights.data();
    for m in 0..n_mels {
        let wrow = &fw[m * n_bins..(m + 1) * n_bins];
        let orow = &mut out[m * frames..(m + 1) * frames];
        for (k, &w) in wrow.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mrow = mag.row(k);
            for (t, slot) in orow.iter_mut().enumerate() {
                *slot += w * mrow[t];
            }
        }
        for slot in orow.iter_mut() {
            *slot = slot.max(cfg.log_floor).ln();
        }
    }
    Ok(MelSpectrogram {
        values: Tensor::from_vec(vec![n_mels, frames], out),
        sample_rate: cfg.sample_rate,
        hop: cfg.hop as u32,
    })
}

/// Resample to the configured rate if needed, then STFT + log-mel.
pub fn mel_of_clip(
    clip: &AudioClip,
    filterbank: &MelFilterbank,
    cfg: &FeatureConfig,
) -> Result<MelSpectrogram> {
    let clip = if clip.sample_rate == cfg.sample_rate {
        clip.clone()
    } else {
        crate::audio::resample(clip, cfg.sample_rate)
    };
    let mag = stft_magnitude(&clip, cfg)?;
    log_mel(&mag, filterbank, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine_clip(freq: f32, secs: f32) -> AudioClip {
        let rate = 22050u32;
        let n = (secs * rate as f32) as usize;
        let samples = (0..n)
            .map(|i| (2.0 * std::f32::consts::PI * freq * i as f32 / rate as f32).sin() * 0.5)
            .collect();
        AudioClip::new(samples, rate)
    }

    #[test]
    fn stft_zero_clip_is_zero() {
        let cfg = FeatureConfig::default();
        let clip = AudioClip::new(vec![0.0; 22050], 22050);
        let mag = stft_magnitude(&clip, &cfg).unwrap();
        assert!(mag.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stft_frame_count_formula() {
        let cfg = FeatureConfig::default();
        let clip = AudioClip::new(vec![0.1; 66150], 22050);
        let mag = stft_magnitude(&clip, &cfg).unwrap();
        assert_eq!(mag.shape(), &[513, 259]);
    }

    #[test]
    fn stft_is_non_negative() {
        let cfg = FeatureConfig::default();
        let mag = stft_magnitude(&sine_clip(523.0, 0.4), &cfg).unwrap();
        assert!(mag.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn stft_impulse_at_frame_center_is_flat_window_column() {
        let cfg = FeatureConfig::default();
        let mut samples = vec![0.0f32; 4096];
        let frame = 4usize;
        samples[frame * cfg.hop] = 1.0; // lands at the window center of frame 4
        let clip = AudioClip::new(samples, 22050);
        let mag = stft_magnitude(&clip, &cfg).unwrap();
        // Periodic Hann at its center sample is exactly 1.
        for bin in 0..cfg.n_freq_bins() {
            let v = mag.at2(bin, frame);
            assert!((v - 1.0).abs() < 1e-5, "bin {bin}: {v}");
        }
    }

    #[test]
    fn log_mel_of_zero_magnitude_is_log_floor() {
        let cfg = FeatureConfig::default();
        let fb = MelFilterbank::new(&cfg);
        let mag = Tensor::zeros(&[513, 10]);
        let mel = log_mel(&mag, &fb, &cfg).unwrap();
        let want = cfg.log_floor.ln();
        assert!(mel.values.data().iter().all(|&v| v == want));
    }

    #[test]
    fn log_mel_of_ones_is_log_of_row_sums() {
        let cfg = FeatureConfig::default();
        let fb = MelFilterbank::new(&cfg);
        let mag = Tensor::full(&[513, 3], 1.0);
        let mel = log_mel(&mag, &fb, &cfg).unwrap();
        for m in 0..cfg.n_mels {
            let row_sum: f32 = fb.weights.row(m).iter().sum();
            let want = row_sum.max(cfg.log_floor).ln();
            for t in 0..3 {
                assert!((mel.values.at2(m, t) - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn log_mel_rejects_shape_mismatch() {
        let cfg = FeatureConfig::default();
        let fb = MelFilterbank::new(&cfg);
        let mag = Tensor::zeros(&[400, 10]);
        assert!(log_mel(&mag, &fb, &cfg).is_err());
    }

    #[test]
    fn pure_tone_peaks_at_nearest_mel_center() {
        let cfg = FeatureConfig::default();
        let fb = MelFilterbank::new(&cfg);
        let mel = mel_of_clip(&sine_clip(440.0, 1.0), &fb, &cfg).unwrap();
        let t = mel.frames();
        let argmax = (0..cfg.n_mels)
            .max_by(|&a, &b| {
                let sa: f32 = mel.values.row(a).iter().sum();
                let sb: f32 = mel.values.row(b).iter().sum();
                (sa / t as f32).partial_cmp(&(sb / t as f32)).unwrap()
            })
            .unwrap();
        let nearest = (0..cfg.n_mels)
            .min_by(|&a, &b| {
                (fb.centers[a] - 440.0)
                    .abs()
                    .partial_cmp(&(fb.centers[b] - 440.0).abs())
                    .unwrap()
            })
            .unwrap();
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn filterbank_weights_within_unit_interval_and_rows_nonzero() {
        let cfg = FeatureConfig::default();
        let fb = MelFilterbank::new(&cfg);
        assert!(fb.weights.data().iter().all(|&w| (0.0..=1.0).contains(&w)));
        for m in 0..cfg.n_mels {
            assert!(
                fb.weights.row(m).iter().any(|&w| w > 0.0),
                "filter {m} is all zero"
            );
        }
    }

    #[test]
    fn mels_file_round_trip() {
        let cfg = FeatureConfig::default();
        let fb = MelFilterbank::new(&cfg);
        let mel = mel_of_clip(&sine_clip(330.0, 0.5), &fb, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mels");
        mel.save(&path).unwrap();
        let back = MelSpectrogram::load(&path).unwrap();
        assert_eq!(mel, back);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let cfg = FeatureConfig::default();
        let fb = MelFilterbank::new(&cfg);
        let clip = sine_clip(523.0, 0.5);
        let a = mel_of_clip(&clip, &fb, &cfg).unwrap();
        let b = mel_of_clip(&clip, &fb, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
