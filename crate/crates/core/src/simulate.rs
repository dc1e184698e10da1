//! Seeded anechoic scenes with known source images, oracle masks and SI-SNR.
//!
//! Every source reaches microphone `m` through a pure delay
//! `tau_m = -p_m . u / c`, with `u = (cos az, sin az)` the unit vector
//! towards the source and unit gain. Sources are bursts of band-limited
//! noise shaped like syllables, so they are sparse in time and frequency.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::mask::MaskTensor;
use crate::spectral::{stft, AudioBuffer, StftConfig};

pub const SPEED_OF_SOUND: f64 = 340.0;
/// RMS of the target image at the reference microphone.
pub const TARGET_RMS: f64 = 0.05;
/// SI-SNR ceiling in dB.
pub const SI_SNR_CAP_DB: f64 = 60.0;
/// Bins whose total oracle power is below this get uniform masks.
pub const ORACLE_POWER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Independent white noise per channel.
    White,
    /// Independent per-channel noise with a shared low-pass spectrum.
    Diffuse,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(Self::White),
            "diffuse" => Ok(Self::Diffuse),
            _ => Err(Error::Config(format!(
                "unknown noise kind '{s}' (expected white or diffuse)"
            ))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::White => "white",
            Self::Diffuse => "diffuse",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Microphone positions in metres (x, y).
    pub mic_positions: Vec<[f64; 2]>,
    /// 1 (target only) or 2 (target and interferer).
    pub num_speakers: usize,
    /// Azimuths in degrees from the x axis, target first.
    pub azimuths_deg: [f64; 2],
    /// Explicit per-source, per-microphone delays in seconds; overrides the
    /// azimuths when set.
    pub delays: Option<Vec<Vec<f64>>>,
    /// Target power over noise power at the reference microphone;
    /// `f64::INFINITY` disables noise.
    pub snr_db: f64,
    /// Target power over interferer power at the reference microphone.
    pub sir_db: f64,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub seed: u64,
    pub noise_kind: NoiseKind,
    pub speed_of_sound: f64,
    pub reference_channel: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            mic_positions: uniform_linear_array(4, 0.06),
            num_speakers: 2,
            azimuths_deg: [60.0, 120.0],
            delays: None,
            snr_db: 5.0,
            sir_db: 0.0,
            sample_rate: 16_000,
            duration_s: 10.0,
            seed: 0,
            noise_kind: NoiseKind::Diffuse,
            speed_of_sound: SPEED_OF_SOUND,
            reference_channel: 0,
        }
    }
}

/// `count` microphones on the x axis, `spacing` metres apart, starting at
/// the origin.
pub fn uniform_linear_array(count: usize, spacing: f64) -> Vec<[f64; 2]> {
    (0..count).map(|m| [m as f64 * spacing, 0.0]).collect()
}

impl SceneConfig {
    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.mic_positions.is_empty() {
            return bad("scene needs at least one microphone".into());
        }
        if self.mic_positions.iter().flatten().any(|v| !v.is_finite()) {
            return bad("microphone positions must be finite".into());
        }
        if !(1..=2).contains(&self.num_speakers) {
            return bad(format!("num_speakers must be 1 or 2, got {}", self.num_speakers));
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return bad(format!("duration must be positive, got {}", self.duration_s));
        }
        if self.sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        if self.num_samples() == 0 {
            return bad("scene is shorter than one sample".into());
        }
        if !(self.speed_of_sound > 0.0) || !self.speed_of_sound.is_finite() {
            return bad("speed of sound must be positive".into());
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return bad(format!("snr_db must be a number or +inf, got {}", self.snr_db));
        }
        if !self.sir_db.is_finite() {
            return bad(format!("sir_db must be finite, got {}", self.sir_db));
        }
        if self.azimuths_deg.iter().any(|a| !a.is_finite()) {
            return bad("azimuths must be finite".into());
        }
        if self.reference_channel >= self.num_mics() {
            return bad(format!(
                "reference channel {} out of range for {} microphones",
                self.reference_channel,
                self.num_mics()
            ));
        }
        Ok(())
    }

    /// Per-source, per-microphone delays in seconds. Explicit delays are
    /// checked against the array geometry.
    pub fn source_delays(&self) -> Result<Vec<Vec<f64>>> {
        let c = self.speed_of_sound;
        match &self.delays {
            None => Ok(self.azimuths_deg[..self.num_speakers]
                .iter()
                .map(|az| {
                    let (s, co) = az.to_radians().sin_cos();
                    self.mic_positions
                        .iter()
                        .map(|p| 0.0 - (p[0] * co + p[1] * s) / c)
                        .collect()
                })
                .collect()),
            Some(delays) => {
                if delays.len() != self.num_speakers
                    || delays.iter().any(|d| d.len() != self.num_mics())
                {
                    return Err(Error::Config(format!(
                        "explicit delays must be {} sources x {} microphones",
                        self.num_speakers,
                        self.num_mics()
                    )));
                }
                for (k, d) in delays.iter().enumerate() {
                    if d.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Config(format!("source {k}: non-finite delay")));
                    }
                    for i in 0..d.len() {
                        for j in i + 1..d.len() {
                            let (pi, pj) = (self.mic_positions[i], self.mic_positions[j]);
                            let dist = ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt();
                            let limit = dist / c;
                            if (d[i] - d[j]).abs() > limit * (1.0 + 1e-9) + 1e-12 {
                                return Err(Error::Config(format!(
                                    "source {k}: delay difference {:.3e} s between mics {i} and {j} \
                                     exceeds the {:.3e} s acoustic travel time (supersonic)",
                                    (d[i] - d[j]).abs(),
                                    limit
                                )));
                            }
                        }
                    }
                }
                Ok(delays.clone())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneOutput {
    /// Sum of all source images and the noise, per channel.
    pub mixture: AudioBuffer,
    /// Multichannel image of each source, target first.
    pub images: Vec<AudioBuffer>,
    pub noise: AudioBuffer,
    /// Delays used for each source, seconds per microphone.
    pub delays: Vec<Vec<f64>>,
    pub reference_channel: usize,
}

impl SceneOutput {
    /// Image of source `k` at the reference microphone.
    pub fn reference_image(&self, k: usize) -> AudioBuffer {
        self.images[k].select_channel(self.reference_channel)
    }

    pub fn reference_noise(&self) -> AudioBuffer {
        self.noise.select_channel(self.reference_channel)
    }
}

fn fft_real(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

fn ifft_real(mut buf: Vec<Complex64>) -> Vec<f64> {
    let n = buf.len();
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Signed frequency in Hz of FFT bin `k` of an `n`-point transform.
fn signed_frequency(k: usize, n: usize, fs: f64) -> f64 {
    if k <= n / 2 {
        k as f64 * fs / n as f64
    } else {
        (k as f64 - n as f64) * fs / n as f64
    }
}

/// Filters `x` with a real, even frequency response.
fn filter(x: &[f64], fs: f64, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = x.len();
    let mut spec = fft_real(x);
    for (k, c) in spec.iter_mut().enumerate() {
        *c *= gain(signed_frequency(k, n, fs).abs());
    }
    ifft_real(spec)
}

/// Circular fractional delay by `tau` seconds via a linear phase.
fn delay(x: &[f64], tau: f64, fs: f64) -> Vec<f64> {
    let n = x.len();
    let mut spec = fft_real(x);
    for (k, c) in spec.iter_mut().enumerate() {
        let f = signed_frequency(k, n, fs);
        *c *= Complex64::from_polar(1.0, -2.0 * PI * f * tau);
    }
    ifft_real(spec)
}

fn gaussian_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Syllable-like source: bursts of two-formant band-limited noise with
/// raised-cosine edges and random gaps.
fn speech_like_source(rng: &mut ChaCha8Rng, len: usize, fs: f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let ms = |v: f64| (v * fs / 1000.0).round() as usize;
    let mut pos = ms(rng.random_range(0.0..200.0));
    while pos < len {
        let dur = ms(rng.random_range(120.0..350.0)).min(len - pos);
        let f1 = rng.random_range(250.0..900.0);
        let f2 = rng.random_range(900.0..3200.0);
        let w1 = rng.random_range(120.0..300.0);
        let w2 = rng.random_range(200.0..500.0);
        let a2 = rng.random_range(0.3..1.0);
        let level = rng.random_range(0.5..1.5);
        let raw = gaussian_noise(rng, dur);
        let band = filter(&raw, fs, |f| {
            let g = (-0.5 * ((f - f1) / w1).powi(2)).exp()
                + a2 * (-0.5 * ((f - f2) / w2).powi(2)).exp();
            if (80.0..=5000.0).contains(&f) {
                g
            } else {
                0.0
            }
        });
        let edge = ms(20.0).min(dur / 2).max(1);
        for (i, v) in band.iter().enumerate() {
            let ramp = if i < edge {
                0.5 - 0.5 * (PI * i as f64 / edge as f64).cos()
            } else if i >= dur - edge {
                0.5 - 0.5 * (PI * (dur - 1 - i) as f64 / edge as f64).cos()
            } else {
                1.0
            };
            out[pos + i] += level * ramp * v;
        }
        let gap = if rng.random_bool(0.15) {
            rng.random_range(300.0..800.0)
        } else {
            rng.random_range(30.0..250.0)
        };
        pos += dur + ms(gap);
    }
    out
}

/// Builds a scene. Identical configurations give bit-identical output.
pub fn synthesize_scene(cfg: &SceneConfig) -> Result<SceneOutput> {
    cfg.validate()?;
    let delays = cfg.source_delays()?;
    let fs = cfg.sample_rate as f64;
    let n = cfg.num_samples();
    let mics = cfg.num_mics();
    let r = cfg.reference_channel;

    let max_shift = delays.iter().flatten().fold(0.0f64, |a, &t| a.max(t.abs())) * fs;
    let pad = max_shift.ceil() as usize + 64;

    let mut images = Vec::with_capacity(cfg.num_speakers);
    for (k, tau) in delays.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let dry = speech_like_source(&mut rng, n + 2 * pad, fs);
        let chans: Vec<Vec<f64>> = tau
            .iter()
            .map(|&t| delay(&dry, t, fs)[pad..pad + n].to_vec())
            .collect();
        let level = rms(&chans[r]);
        let wanted = if k == 0 {
            TARGET_RMS
        } else {
            TARGET_RMS * 10f64.powf(-cfg.sir_db / 20.0)
        };
        let gain = if level > 0.0 { wanted / level } else { 0.0 };
        let chans = chans
            .into_iter()
            .map(|c| c.into_iter().map(|v| v * gain).collect())
            .collect();
        images.push(AudioBuffer::new(chans, cfg.sample_rate)?);
    }

    let noise_chans: Vec<Vec<f64>> = if cfg.snr_db == f64::INFINITY {
        vec![vec![0.0; n]; mics]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(16);
        let raw: Vec<Vec<f64>> = (0..mics)
            .map(|_| {
                let w = gaussian_noise(&mut rng, n);
                match cfg.noise_kind {
                    NoiseKind::White => w,
                    NoiseKind::Diffuse => filter(&w, fs, |f| 1.0 / (1.0 + f / 500.0)),
                }
            })
            .collect();
        let level = rms(&raw.concat());
        let wanted = TARGET_RMS * 10f64.powf(-cfg.snr_db / 20.0);
        let gain = if level > 0.0 { wanted / level } else { 0.0 };
        raw.into_iter()
            .map(|c| c.into_iter().map(|v| v * gain).collect())
            .collect()
    };
    let noise = AudioBuffer::new(noise_chans, cfg.sample_rate)?;

    let mixture: Vec<Vec<f64>> = (0..mics)
        .map(|m| {
            (0..n)
                .map(|i| {
                    let s: f64 = images.iter().map(|img| img.channel(m)[i]).sum();
                    s + noise.channel(m)[i]
                })
                .collect()
        })
        .collect();

    Ok(SceneOutput {
        mixture: AudioBuffer::new(mixture, cfg.sample_rate)?,
        images,
        noise,
        delays,
        reference_channel: r,
    })
}

/// Power-ratio masks (target, interference, noise) at the reference
/// microphone. A scene with one speaker gets an all-zero interference mask
/// except on silent bins, which are uniform.
pub fn oracle_irm(scene: &SceneOutput, cfg: &StftConfig) -> Result<[MaskTensor; 3]> {
    let zero = AudioBuffer::new(vec![vec![0.0; scene.mixture.len()]], scene.mixture.sample_rate())?;
    let parts = [
        scene.reference_image(0),
        if scene.images.len() > 1 {
            scene.reference_image(1)
        } else {
            zero
        },
        scene.reference_noise(),
    ];
    let specs = parts
        .iter()
        .map(|p| stft(p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (bins, frames) = (specs[0].num_bins(), specs[0].num_frames());
    let mut values = [
        Vec::with_capacity(bins * frames),
        Vec::with_capacity(bins * frames),
        Vec::with_capacity(bins * frames),
    ];
    for f in 0..bins {
        for t in 0..frames {
            let p: [f64; 3] = std::array::from_fn(|k| specs[k].get(0, f, t).norm_sqr());
            let total = p[0] + p[1] + p[2];
            for k in 0..3 {
                values[k].push(if total < ORACLE_POWER_FLOOR {
                    1.0 / 3.0
                } else {
                    p[k] / total
                });
            }
        }
    }
    let [t, i, n] = values;
    Ok([
        MaskTensor::new(bins, frames, t)?,
        MaskTensor::new(bins, frames, i)?,
        MaskTensor::new(bins, frames, n)?,
    ])
}

/// Scale-invariant SNR in dB after removing the means, capped at
/// [`SI_SNR_CAP_DB`].
pub fn si_snr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.iter().chain(estimate).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SI-SNR input".into()));
    }
    let centre = |x: &[f64]| {
        let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
        x.iter().map(|v| v - mean).collect::<Vec<f64>>()
    };
    let s = centre(reference);
    let e = centre(estimate);
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Err(Error::InvalidArgument("reference has zero energy".into()));
    }
    if e.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument("estimate has zero energy".into()));
    }
    let scale = s.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / ss;
    let target: f64 = ss * scale * scale;
    let residual: f64 = s
        .iter()
        .zip(&e)
        .map(|(a, b)| (b - scale * a).powi(2))
        .sum();
    if residual == 0.0 {
        return Ok(SI_SNR_CAP_DB);
    }
    Ok((10.0 * (target / residual).log10()).min(SI_SNR_CAP_DB))
}
