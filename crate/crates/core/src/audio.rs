//! Audio I/O and time-domain preprocessing: WAV read/write, resampling,
//! silence trimming, and fixed-length segmentation.

use std::f32::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Mono waveform with its sample rate. Samples are normalized to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0);
        AudioClip {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Read a PCM WAV file into a normalized mono clip at its native rate.
/// Stereo channels are averaged; 16-bit integer and 32-bit float encodings
/// are supported, anything else is rejected by name.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            message: "zero channels".to_string(),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{fmt:?} {bits}-bit (want Int 16-bit or Float 32-bit)"
            )))
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Write a mono clip as 16-bit PCM.
pub fn save_wav_i16(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| Error::Wav {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(())
}

/// Write a mono clip as 32-bit float PCM.
pub fn save_wav_f32(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    for &s in &clip.samples {
        writer.write_sample(s).map_err(|e| Error::Wav {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(())
}

/// Windowed-sinc resampling. Output length is `round(n * target / source)`;
/// equal rates return the clip unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> AudioClip {
    assert!(target_rate > 0);
    if clip.sample_rate == target_rate || clip.is_empty() {
        return AudioClip::new(clip.samples.clone(), target_rate);
    }
    let n_in = clip.samples.len() as u64;
    let n_out = ((n_in * target_rate as u64 + clip.sample_rate as u64 / 2)
        / clip.sample_rate as u64) as usize;
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    // Anti-alias when downsampling: cutoff just under the lower Nyquist.
    let cutoff = (target_rate as f64 / clip.sample_rate as f64).min(1.0) * 0.97;
    let half_taps = 24i64;
    let mut out = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let center = i as f64 * ratio;
        let lo = center.floor() as i64 - half_taps + 1;
        let hi = center.floor() as i64 + half_taps;
        let mut acc = 0.0f64;
        for j in lo..=hi {
            if j < 0 || j as usize >= clip.samples.len() {
                continue;
            }
            let d = center - j as f64;
            if d.abs() >= half_taps as f64 {
                continue;
            }
            let x = PI as f64 * d * cutoff;
            let sinc = if x.abs() < 1e-12 { 1.0 } else { x.sin() / x };
            let window = 0.5 + 0.5 * (PI as f64 * d / half_taps as f64).cos();
            acc += clip.samples[j as usize] as f64 * sinc * cutoff * window;
        }
        out.push(acc as f32);
    }
    AudioClip::new(out, target_rate)
}

const TRIM_FRAME: usize = 1024;
const TRIM_HOP: usize = 256;

/// Drop leading and trailing frames whose RMS is more than `threshold_db`
/// below the loudest frame. A fully silent clip trims to empty.
pub fn trim_silence(clip: &AudioClip, threshold_db: f32) -> AudioClip {
    assert!(threshold_db > 0.0, "threshold is relative to the clip peak");
    if clip.is_empty() {
        return clip.clone();
    }
    let mut frame_rms = Vec::new();
    let mut offset = 0usize;
    while offset < clip.samples.len() {
        let end = (offset + TRIM_FRAME).min(clip.samples.len());
        let frame = &clip.samples[offset..end];
        let rms =
            (frame.iter().map(|&s| s as f64 * s as f64).sum::<f64>() / frame.len() as f64).sqrt();
        frame_rms.push(rms);
        offset += TRIM_HOP;
    }
    let peak = frame_rms.iter().cloned().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return AudioClip::new(Vec::new(), clip.sample_rate);
    }
    let floor = peak * 10f64.powf(-threshold_db as f64 / 20.0);
    let first = frame_rms.iter().position(|&r| r >= floor);
    let last = frame_rms.iter().rposition(|&r| r >= floor);
    match (first, last) {
        (Some(f), Some(l)) => {
            let start = f * TRIM_HOP;
            let end = (l * TRIM_HOP + TRIM_FRAME).min(clip.samples.len());
            AudioClip::new(clip.samples[start..end].to_vec(), clip.sample_rate)
        }
        _ => AudioClip::new(Vec::new(), clip.sample_rate),
    }
}

/// Cut or tile a clip to exactly `floor(seconds * sample_rate)` samples.
/// Shorter clips are repeated then truncated; longer clips yield a uniformly
/// random window from `rng`. A clip of exactly the target length is returned
/// unchanged without consuming randomness.
pub fn segment_fixed(clip: &AudioClip, seconds: f64, rng: &mut ChaCha20Rng) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot segment an empty clip".to_string(),
        ));
    }
    let target = (seconds * clip.sample_rate as f64).floor() as usize;
    let n = clip.samples.len();
    let samples = if n == target {
        clip.samples.clone()
    } else if n < target {
        clip.samples.iter().cycle().take(target).copied().collect()
    } else {
        let start = rng.gen_range(0..=n - target);
        clip.samples[start..start + target].to_vec()
    };
    Ok(AudioClip::new(samples, clip.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn sine(freq: f32, secs: f32, rate: u32) -> AudioClip {
        let n = (secs * rate as f32) as usize;
        let samples = (0..n)
            .map(|i| (2.0 * PI * freq * i as f32 / rate as f32).sin() * 0.5)
            .collect();
        AudioClip::new(samples, rate)
    }

    fn fft_peak_hz(clip: &AudioClip) -> f32 {
        use rustfft::{num_complex::Complex, FftPlanner};
        let n = clip.samples.len();
        let mut buf: Vec<Complex<f32>> = clip
            .samples
            .iter()
            .map(|&s| Complex::new(s, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let half = n / 2;
        let peak = (1..half)
            .max_by(|&a, &b| buf[a].norm().partial_cmp(&buf[b].norm()).unwrap())
            .unwrap();
        peak as f32 * clip.sample_rate as f32 / n as f32
    }

    #[test]
    fn wav_round_trip_zero_signal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zeros.wav");
        let clip = AudioClip::new(vec![0.0; 22050], 22050);
        save_wav_i16(&path, &clip).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 22050);
        assert_eq!(back.samples.len(), 22050);
        assert!(back.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn wav_i16_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("max.wav");
        {
            let spec = hound::WavSpec {
                channels: 1,
                sample_rate: 22050,
                bits_per_sample: 16,
                sample_format: hound::SampleFormat::Int,
            };
            let mut w = hound::WavWriter::create(&path, spec).unwrap();
            w.write_sample(32767i16).unwrap();
            w.finalize().unwrap();
        }
        let clip = load_wav(&path).unwrap();
        assert!((clip.samples[0] - 32767.0 / 32768.0).abs() < 1e-7);
    }

    #[test]
    fn wav_stereo_averages_to_mono() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        {
            let spec = hound::WavSpec {
                channels: 2,
                sample_rate: 22050,
                bits_per_sample: 32,
                sample_format: hound::SampleFormat::Float,
            };
            let mut w = hound::WavWriter::create(&path, spec).unwrap();
            for _ in 0..100 {
                w.write_sample(0.5f32).unwrap();
                w.write_sample(-0.5f32).unwrap();
            }
            w.finalize().unwrap();
        }
        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.samples.len(), 100);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn wav_rejects_unsupported_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eight.wav");
        {
            let spec = hound::WavSpec {
                channels: 1,
                sample_rate: 22050,
                bits_per_sample: 8,
                sample_format: hound::SampleFormat::Int,
            };
            let mut w = hound::WavWriter::create(&path, spec).unwrap();
            w.write_sample(0i8).unwrap();
            w.finalize().unwrap();
        }
        match load_wav(&path) {
            Err(Error::UnsupportedEncoding(msg)) => assert!(msg.contains("8-bit")),
            other => panic!("expected UnsupportedEncoding, got {other:?}"),
        }
    }

    #[test]
    fn resample_identity_when_rates_match() {
        let clip = sine(440.0, 0.5, 22050);
        let out = resample(&clip, 22050);
        assert_eq!(out, clip);
    }

    #[test]
    fn resample_length_contract() {
        let clip = sine(440.0, 1.0, 48000);
        let n = clip.samples.len() as u64;
        let out = resample(&clip, 22050);
        assert_eq!(out.samples.len() as u64, (n * 22050 + 24000) / 48000);
        assert_eq!(out.sample_rate, 22050);
    }

    #[test]
    fn resample_preserves_tone_frequency() {
        let clip = sine(440.0, 1.0, 48000);
        let out = resample(&clip, 22050);
        let bin_width = out.sample_rate as f32 / out.samples.len() as f32;
        let peak = fft_peak_hz(&out);
        assert!(
            (peak - 440.0).abs() <= bin_width + 1e-3,
            "peak {peak} Hz, bin width {bin_width}"
        );
    }

    #[test]
    fn trim_silence_removes_leading_and_trailing_zeros() {
        let rate = 22050u32;
        let mut samples = vec![0.0f32; (0.5 * rate as f32) as usize];
        samples.extend(sine(440.0, 1.0, rate).samples);
        samples.extend(vec![0.0f32; (0.5 * rate as f32) as usize]);
        let clip = AudioClip::new(samples, rate);
        let trimmed = trim_silence(&clip, 20.0);
        let want = rate as f32; // one second
        // A window overlapping the onset by a few samples already clears the
        // threshold, so allow one analysis frame of slack per side.
        let slack = (2 * TRIM_FRAME) as f32;
        assert!(
            (trimmed.samples.len() as f32 - want).abs() <= slack,
            "trimmed to {} samples",
            trimmed.samples.len()
        );
        assert!(trimmed.samples.len() >= want as usize);
    }

    #[test]
    fn trim_silence_keeps_loud_clip_unchanged() {
        let clip = sine(440.0, 0.7, 22050);
        let trimmed = trim_silence(&clip, 20.0);
        assert_eq!(trimmed, clip);
    }

    #[test]
    fn trim_silence_empties_all_zero_clip() {
        let clip = AudioClip::new(vec![0.0; 10000], 22050);
        assert!(trim_silence(&clip, 20.0).is_empty());
    }

    #[test]
    fn segment_tiles_short_clips() {
        let clip = sine(440.0, 1.0, 22050);
        let mut rng = seeds::rng_from(1);
        let out = segment_fixed(&clip, 3.0, &mut rng).unwrap();
        assert_eq!(out.samples.len(), 66150);
        let n = clip.samples.len();
        assert_eq!(&out.samples[..n], &clip.samples[..]);
        assert_eq!(&out.samples[n..2 * n], &clip.samples[..]);
    }

    #[test]
    fn segment_exact_length_is_identity_for_any_seed() {
        let clip = sine(330.0, 3.0, 22050);
        for seed in [0u64, 1, 99] {
            let mut rng = seeds::rng_from(seed);
            let out = segment_fixed(&clip, 3.0, &mut rng).unwrap();
            assert_eq!(out.samples, clip.samples);
        }
    }

    #[test]
    fn segment_long_clip_is_seed_deterministic() {
        let clip = sine(220.0, 10.0, 22050);
        let mut r1 = seeds::rng_from(7);
        let mut r2 = seeds::rng_from(7);
        let a = segment_fixed(&clip, 3.0, &mut r1).unwrap();
        let b = segment_fixed(&clip, 3.0, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 66150);
    }

    #[test]
    fn segment_empty_clip_errors() {
        let clip = AudioClip::new(Vec::new(), 22050);
        let mut rng = seeds::rng_from(0);
        assert!(segment_fixed(&clip, 3.0, &mut rng).is_err());
    }
}
