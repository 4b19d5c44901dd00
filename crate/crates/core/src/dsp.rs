//! Waveform → log-mel spectrogram front-end.
//!
//! 16 kHz mono input, 25 ms periodic Hann windows every 10 ms, 512-point
//! power spectrum, 128 HTK-scale triangular filters over 0–8 kHz and a
//! natural-log floor of `ln(1e-10)`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_MELS: usize = 128;
pub const ENERGY_FLOOR: f64 = 1e-10;
/// Patch extent along time; padded frame counts must be multiples of it.
pub const PATCH_FRAMES: usize = 16;

/// Value used for silence and padding.
pub fn floor_value() -> f64 {
    ENERGY_FLOOR.ln()
}

/// Mono audio at a known rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Input(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Returns a copy at 16 kHz, resampling if needed.
    pub fn to_16k(&self) -> Waveform {
        if self.sample_rate == SAMPLE_RATE {
            return self.clone();
        }
        Waveform {
            samples: resample(&self.samples, self.sample_rate, SAMPLE_RATE),
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a single-channel WAV (16-bit PCM or 32-bit float) and resamples to 16 kHz.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Input(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Input(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bits",
                path.display()
            )))
        }
    };
    Ok(Waveform::new(samples, spec.sample_rate)?.to_16k())
}

/// Writes 16-bit PCM mono. Samples are clipped to [-1, 1].
pub fn write_wav_pcm16(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    const ZERO_CROSSINGS: f64 = 16.0;
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let cutoff = ratio.min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let out_len = (samples.len() as f64 * ratio).floor() as usize;
    (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(samples.len() - 1);
            let mut acc = 0.0;
            for (k, &x) in samples.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let arg = cutoff * d;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                let win = 0.5 + 0.5 * (PI * d / half_width).cos();
                acc += x * cutoff * sinc * win;
            }
            acc
        })
        .collect()
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Splits `wave` into Hann-weighted frames, `frames × window_samples`.
pub fn frame_signal(wave: &Waveform, window_samples: usize, hop_samples: usize) -> Result<Tensor> {
    if window_samples == 0 || hop_samples == 0 {
        return Err(Error::Param("window and hop must be positive".into()));
    }
    let len = wave.samples.len();
    if len < window_samples {
        return Err(Error::Input(format!(
            "waveform has {len} samples; at least {window_samples} are required"
        )));
    }
    let count = (len - window_samples) / hop_samples + 1;
    let window = hann_window(window_samples);
    let mut data = Vec::with_capacity(count * window_samples);
    for f in 0..count {
        let start = f * hop_samples;
        data.extend(wave.samples[start..start + window_samples].iter().zip(&window).map(|(s, w)| s * w));
    }
    Tensor::matrix(count, window_samples, data)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK filters, `num_mels × (fft_size/2 + 1)`, peak weight 1.
pub fn mel_filterbank(num_mels: usize, fft_size: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Tensor {
    let bins = fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..num_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (num_mels + 1) as f64))
        .collect();
    let mut data = vec![0.0; num_mels * bins];
    for m in 0..num_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / fft_size as f64;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            data[m * bins + k] = rise.min(fall).max(0.0);
        }
    }
    Tensor::matrix(num_mels, bins, data).expect("filterbank shape")
}

/// Center frequency in Hz of every filter from [`mel_filterbank`].
pub fn mel_centers(num_mels: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    (1..=num_mels).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (num_mels + 1) as f64)).collect()
}

/// Time × mel grid of log filterbank energies, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub mels: usize,
    pub values: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(frames: usize, mels: usize, values: Vec<f64>) -> Result<Self> {
        if frames * mels != values.len() {
            return Err(Error::Dim(format!(
                "{frames}x{mels} spectrogram needs {} values, got {}",
                frames * mels,
                values.len()
            )));
        }
        Ok(Self { frames, mels, values })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.mels..(t + 1) * self.mels]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.frames, self.mels, self.values.clone()).expect("spectrogram shape")
    }

    /// Applies `(x - mean) / std` to every value.
    pub fn normalized(&self, mean: f64, std: f64) -> MelSpectrogram {
        let values = self.values.iter().map(|v| (v - mean) / std).collect();
        MelSpectrogram { frames: self.frames, mels: self.mels, values }
    }
}

/// Reusable front-end holding the FFT plan, window and filterbank.
pub struct LogMelExtractor {
    fft: Arc<dyn Fft<f64>>,
    window_samples: usize,
    hop_samples: usize,
    filterbank: Tensor,
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMelExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let filterbank = mel_filterbank(NUM_MELS, FFT_SIZE, SAMPLE_RATE, 0.0, SAMPLE_RATE as f64 / 2.0);
        Self { fft, window_samples: WINDOW_SAMPLES, hop_samples: HOP_SAMPLES, filterbank }
    }

    pub fn filterbank(&self) -> &Tensor {
        &self.filterbank
    }

    pub fn compute(&self, wave: &Waveform) -> Result<MelSpectrogram> {
        if wave.sample_rate != SAMPLE_RATE {
            return Err(Error::Input(format!(
                "expected {SAMPLE_RATE} Hz audio, got {} Hz; resample first",
                wave.sample_rate
            )));
        }
        let frames = frame_signal(wave, self.window_samples, self.hop_samples)?;
        let bins = FFT_SIZE / 2 + 1;
        let fb = self.filterbank.data();
        let mut values = Vec::with_capacity(frames.rows() * NUM_MELS);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut power = vec![0.0; bins];
        for t in 0..frames.rows() {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (b, &s) in buf.iter_mut().zip(frames.row(t)) {
                b.re = s;
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for m in 0..NUM_MELS {
                let energy: f64 = fb[m * bins..(m + 1) * bins].iter().zip(&power).map(|(w, p)| w * p).sum();
                values.push(energy.max(ENERGY_FLOOR).ln());
            }
        }
        MelSpectrogram::new(frames.rows(), NUM_MELS, values)
    }
}

/// Log-mel spectrogram of a 16 kHz waveform.
pub fn log_mel_spectrogram(wave: &Waveform) -> Result<MelSpectrogram> {
    LogMelExtractor::new().compute(wave)
}

/// Pads with the floor value (or truncates, with a warning) to `target_frames`.
pub fn pad_to_grid(spec: &MelSpectrogram, target_frames: usize) -> Result<MelSpectrogram> {
    if target_frames == 0 || target_frames % PATCH_FRAMES != 0 {
        return Err(Error::Param(format!(
            "target frame count {target_frames} is not a positive multiple of {PATCH_FRAMES}"
        )));
    }
    let mut values = spec.values.clone();
    if spec.frames > target_frames {
        log::warn!("truncating spectrogram from {} to {target_frames} frames", spec.frames);
        values.truncate(target_frames * spec.mels);
    } else {
        values.resize(target_frames * spec.mels, floor_value());
    }
    MelSpectrogram::new(target_frames, spec.mels, values)
}

/// Number of frames `frame_signal` produces for `len` samples.
pub fn frame_count(len: usize) -> usize {
    if len < WINDOW_SAMPLES {
        0
    } else {
        (len - WINDOW_SAMPLES) / HOP_SAMPLES + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, amp: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let s = (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin()).collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn frame_counts() {
        let w = Waveform::new(vec![0.0; 160_000], SAMPLE_RATE).unwrap();
        let f = frame_signal(&w, 400, 160).unwrap();
        assert_eq!(f.shape(), &[998, 400]);
        let w = Waveform::new(vec![0.0; 400], SAMPLE_RATE).unwrap();
        assert_eq!(frame_signal(&w, 400, 160).unwrap().rows(), 1);
        let w = Waveform::new(vec![0.0; 399], SAMPLE_RATE).unwrap();
        let e = frame_signal(&w, 400, 160).unwrap_err().to_string();
        assert!(e.contains("400"), "{e}");
    }

    #[test]
    fn constant_frame_is_the_window() {
        let w = Waveform::new(vec![1.0; 400], SAMPLE_RATE).unwrap();
        let f = frame_signal(&w, 400, 160).unwrap();
        assert_eq!(f.row(0), hann_window(400).as_slice());
    }

    #[test]
    fn silence_maps_to_floor() {
        let w = Waveform::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap();
        let s = log_mel_spectrogram(&w).unwrap();
        assert!(s.values.iter().all(|&v| v == floor_value()));
    }

    #[test]
    fn tone_peaks_in_one_mel_bin() {
        // 1 kHz falls exactly on FFT bin 32; the filter weighting that bin
        // most heavily must carry the peak.
        let fb = mel_filterbank(NUM_MELS, FFT_SIZE, SAMPLE_RATE, 0.0, 8000.0);
        let bins = FFT_SIZE / 2 + 1;
        let expected = (0..NUM_MELS)
            .max_by(|&a, &b| fb.data()[a * bins + 32].partial_cmp(&fb.data()[b * bins + 32]).unwrap())
            .unwrap();
        let s = log_mel_spectrogram(&tone(1000.0, 1.0, 0.5)).unwrap();
        let argmaxes: Vec<usize> = (2..s.frames - 2)
            .map(|t| {
                let row = s.frame(t);
                (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap()
            })
            .collect();
        assert!(argmaxes.iter().all(|&a| a == argmaxes[0]));
        assert_eq!(argmaxes[0], expected);
    }

    #[test]
    fn filterbank_rows_nonnegative_and_cover_interior_bins() {
        let fb = mel_filterbank(NUM_MELS, FFT_SIZE, SAMPLE_RATE, 0.0, 8000.0);
        assert!(fb.data().iter().all(|&w| w >= 0.0));
        let centers = mel_centers(NUM_MELS, 0.0, 8000.0);
        let bins = FFT_SIZE / 2 + 1;
        for k in 0..bins {
            let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
            if f >= centers[0] && f <= centers[NUM_MELS - 1] {
                let total: f64 = (0..NUM_MELS).map(|m| fb.data()[m * bins + k]).sum();
                assert!(total > 0.0, "bin {k} ({f} Hz) uncovered");
            }
        }
    }

    #[test]
    fn padding_and_truncation() {
        let s = MelSpectrogram::new(998, 128, vec![1.0; 998 * 128]).unwrap();
        let p = pad_to_grid(&s, 1024).unwrap();
        assert_eq!(p.frames, 1024);
        assert_eq!(&p.values[..998 * 128], &s.values[..]);
        assert!(p.values[998 * 128..].iter().all(|&v| v == floor_value()));
        let same = MelSpectrogram::new(1024, 128, vec![2.0; 1024 * 128]).unwrap();
        assert_eq!(pad_to_grid(&same, 1024).unwrap(), same);
        let long = MelSpectrogram::new(1030, 128, vec![3.0; 1030 * 128]).unwrap();
        assert_eq!(pad_to_grid(&long, 1024).unwrap().frames, 1024);
        assert!(pad_to_grid(&s, 1000).is_err());
    }

    #[test]
    fn resampling_keeps_a_tone() {
        let n = 8_000;
        let s: Vec<f64> = (0..n).map(|i| (2.0 * PI * 440.0 * i as f64 / 8_000.0).sin()).collect();
        let up = resample(&s, 8_000, 16_000);
        assert_eq!(up.len(), 16_000);
        for i in 2_000..2_100 {
            let expect = (2.0 * PI * 440.0 * i as f64 / 16_000.0).sin();
            assert!((up[i] - expect).abs() < 1e-2, "sample {i}: {} vs {expect}", up[i]);
        }
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = tone(300.0, 0.1, 0.25);
        write_wav_pcm16(&p, &w).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.samples.len(), w.samples.len());
        assert!(r.samples.iter().zip(&w.samples).all(|(a, b)| (a - b).abs() < 1e-4));
    }
}
