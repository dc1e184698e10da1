//! Time-domain to time-frequency conversion and block segmentation.
//!
//! Spectra are one-sided (`fft_size / 2 + 1` bins) and stored bin-major with
//! the channel axis innermost, so the array snapshot `y(f, t)` of every
//! time-frequency bin is a contiguous slice.

use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Final partial blocks shorter than this are merged into the preceding block.
pub const MIN_TAIL_FRAMES: usize = 32;

const OLA_WINDOW_FLOOR: f64 = 1e-8;

/// Multichannel real-valued audio, one `Vec` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidArgument("audio needs at least one channel".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        let len = channels[0].len();
        if let Some(m) = channels.iter().position(|c| c.len() != len) {
            return Err(Error::ShapeMismatch(format!(
                "channel {m} has {} samples, channel 0 has {len}",
                channels[m].len()
            )));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Single-channel buffer holding channel `m`.
    pub fn select_channel(&self, m: usize) -> AudioBuffer {
        AudioBuffer {
            channels: vec![self.channels[m].clone()],
            sample_rate: self.sample_rate,
        }
    }

    /// Truncates or zero-extends every channel to `len` samples.
    pub fn resized(mut self, len: usize) -> AudioBuffer {
        for c in &mut self.channels {
            c.resize(len, 0.0);
        }
        self
    }

    pub fn scaled(&self, gain: f64) -> AudioBuffer {
        AudioBuffer {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|x| x * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Analysis/synthesis parameters. Defaults: 32 ms periodic Hamming window,
/// 16 ms hop, 16 kHz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_ms: 32.0,
            hop_ms: 16.0,
            sample_rate: 16_000,
        }
    }
}

impl StftConfig {
    pub fn with_sample_rate(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            ..Self::default()
        }
    }

    fn ms_to_samples(&self, ms: f64, what: &str) -> Result<usize> {
        let exact = ms * self.sample_rate as f64 / 1000.0;
        let rounded = exact.round();
        if !exact.is_finite() || rounded < 1.0 || (exact - rounded).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "{what} of {ms} ms is not a whole number of samples at {} Hz",
                self.sample_rate
            )));
        }
        Ok(rounded as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        let win = self.ms_to_samples(self.window_ms, "window")?;
        let hop = self.ms_to_samples(self.hop_ms, "hop")?;
        if hop > win {
            return Err(Error::Config(format!(
                "hop ({} ms) exceeds window ({} ms)",
                self.hop_ms, self.window_ms
            )));
        }
        Ok(())
    }

    pub fn window_len(&self) -> Result<usize> {
        self.ms_to_samples(self.window_ms, "window")
    }

    pub fn hop_len(&self) -> Result<usize> {
        self.ms_to_samples(self.hop_ms, "hop")
    }

    /// FFT size equals the window length; no extra zero padding.
    pub fn fft_size(&self) -> Result<usize> {
        self.window_len()
    }

    pub fn num_bins(&self) -> Result<usize> {
        Ok(self.fft_size()? / 2 + 1)
    }

    /// Number of frames produced for `len` samples; the last frame may be
    /// zero-padded.
    pub fn num_frames(&self, len: usize) -> Result<usize> {
        let win = self.window_len()?;
        let hop = self.hop_len()?;
        Ok(1 + len.saturating_sub(win).div_ceil(hop))
    }
}

/// Periodic (DFT-even) Hamming window.
pub fn hamming_periodic(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Complex STFT tensor `[M channels x F bins x T frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSpectrum {
    // layout: [f][t][m]
    data: Vec<Complex64>,
    channels: usize,
    bins: usize,
    frames: usize,
    frame_hop: usize,
    fft_size: usize,
    sample_rate: u32,
}

impl MultichannelSpectrum {
    pub fn zeros(
        channels: usize,
        bins: usize,
        frames: usize,
        frame_hop: usize,
        fft_size: usize,
        sample_rate: u32,
    ) -> Self {
        Self {
            data: vec![Complex64::new(0.0, 0.0); channels * bins * frames],
            channels,
            bins,
            frames,
            frame_hop,
            fft_size,
            sample_rate,
        }
    }

    /// Empty spectrum with the same geometry as `self` but a different
    /// channel and frame count.
    pub fn zeros_like(&self, channels: usize, frames: usize) -> Self {
        Self::zeros(
            channels,
            self.bins,
            frames,
            self.frame_hop,
            self.fft_size,
            self.sample_rate,
        )
    }

    /// Builds a spectrum from a closure over `(m, f, t)`.
    pub fn from_fn(
        channels: usize,
        bins: usize,
        frames: usize,
        frame_hop: usize,
        fft_size: usize,
        sample_rate: u32,
        mut value: impl FnMut(usize, usize, usize) -> Complex64,
    ) -> Self {
        let mut out = Self::zeros(channels, bins, frames, frame_hop, fft_size, sample_rate);
        for f in 0..bins {
            for t in 0..frames {
                for m in 0..channels {
                    out.data[(f * frames + t) * channels + m] = value(m, f, t);
                }
            }
        }
        out
    }

    pub fn num_channels(&self) -> usize {
        self.channels
    }

    pub fn num_bins(&self) -> usize {
        self.bins
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn frame_hop(&self) -> usize {
        self.frame_hop
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Physical frequency of bin `f` in Hz.
    pub fn bin_frequency(&self, f: usize) -> f64 {
        f as f64 * self.sample_rate as f64 / self.fft_size as f64
    }

    #[inline]
    fn offset(&self, f: usize, t: usize) -> usize {
        (f * self.frames + t) * self.channels
    }

    #[inline]
    pub fn get(&self, m: usize, f: usize, t: usize) -> Complex64 {
        self.data[self.offset(f, t) + m]
    }

    #[inline]
    pub fn set(&mut self, m: usize, f: usize, t: usize, value: Complex64) {
        let i = self.offset(f, t) + m;
        self.data[i] = value;
    }

    /// Array snapshot `y(f, t)` across all channels.
    #[inline]
    pub fn bin(&self, f: usize, t: usize) -> &[Complex64] {
        let o = self.offset(f, t);
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn bin_mut(&mut self, f: usize, t: usize) -> &mut [Complex64] {
        let o = self.offset(f, t);
        let m = self.channels;
        &mut self.data[o..o + m]
    }

    /// All frames of frequency `f`, `[T x M]` flattened.
    pub fn frequency_row(&self, f: usize) -> &[Complex64] {
        let n = self.frames * self.channels;
        &self.data[f * n..(f + 1) * n]
    }

    pub fn frequency_rows_mut(&mut self) -> std::slice::ChunksExactMut<'_, Complex64> {
        let n = self.frames * self.channels;
        self.data.chunks_exact_mut(n)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.bins == other.bins
            && self.frame_hop == other.frame_hop
            && self.fft_size == other.fft_size
            && self.sample_rate == other.sample_rate
    }

    /// Copy of frames `range` (all channels, all bins).
    pub fn slice_frames(&self, range: Range<usize>) -> Self {
        let len = range.len();
        let mut out = self.zeros_like(self.channels, len);
        let m = self.channels;
        for f in 0..self.bins {
            let src = self.offset(f, range.start);
            let dst = out.offset(f, 0);
            out.data[dst..dst + len * m].copy_from_slice(&self.data[src..src + len * m]);
        }
        out
    }

    /// Single-channel spectrum holding channel `m`.
    pub fn select_channel(&self, m: usize) -> Self {
        let mut out = self.zeros_like(1, self.frames);
        for f in 0..self.bins {
            for t in 0..self.frames {
                out.data[f * self.frames + t] = self.get(m, f, t);
            }
        }
        out
    }

    /// Multiplies every entry by a complex constant.
    pub fn scaled(&self, c: Complex64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x *= c);
        out
    }
}

/// Short-time Fourier transform of every channel.
///
/// Frame `t` covers samples `[t * hop, t * hop + win)`; the trailing partial
/// frame is zero-padded.
pub fn stft(audio: &AudioBuffer, cfg: &StftConfig) -> Result<MultichannelSpectrum> {
    cfg.validate()?;
    if audio.is_empty() {
        return Err(Error::InvalidArgument("cannot transform empty audio".into()));
    }
    if audio.sample_rate() != cfg.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "audio is {} Hz but STFT is configured for {} Hz",
            audio.sample_rate(),
            cfg.sample_rate
        )));
    }
    if audio
        .channels()
        .iter()
        .any(|c| c.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::NonFinite("audio samples".into()));
    }

    let win = cfg.window_len()?;
    let hop = cfg.hop_len()?;
    let n_fft = cfg.fft_size()?;
    let bins = n_fft / 2 + 1;
    let frames = cfg.num_frames(audio.len())?;
    let channels = audio.num_channels();
    let window = hamming_periodic(win);

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut out = MultichannelSpectrum::zeros(channels, bins, frames, hop, n_fft, cfg.sample_rate);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    for (m, x) in audio.channels().iter().enumerate() {
        for t in 0..frames {
            let start = t * hop;
            for (n, b) in buf.iter_mut().enumerate() {
                let s = x.get(start + n).copied().unwrap_or(0.0);
                *b = Complex64::new(s * window[n], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (f, v) in buf.iter().take(bins).enumerate() {
                out.set(m, f, t, *v);
            }
        }
    }
    Ok(out)
}

/// Inverse STFT by overlap-add of the inverse frames, normalized by the
/// summed analysis windows.
///
/// Returns `(T - 1) * hop + win` samples per channel.
pub fn istft(spec: &MultichannelSpectrum, cfg: &StftConfig) -> Result<AudioBuffer> {
    cfg.validate()?;
    let win = cfg.window_len()?;
    let hop = cfg.hop_len()?;
    let n_fft = cfg.fft_size()?;
    if spec.fft_size() != n_fft
        || spec.frame_hop() != hop
        || spec.num_bins() != n_fft / 2 + 1
        || spec.sample_rate() != cfg.sample_rate
    {
        return Err(Error::ShapeMismatch(format!(
            "spectrum (fft {}, hop {}, {} bins, {} Hz) does not match STFT config (fft {n_fft}, hop {hop}, {} Hz)",
            spec.fft_size(),
            spec.frame_hop(),
            spec.num_bins(),
            spec.sample_rate(),
            cfg.sample_rate
        )));
    }

    let frames = spec.num_frames();
    let len = (frames - 1) * hop + win;
    let window = hamming_periodic(win);
    let mut norm = vec![0.0; len];
    for t in 0..frames {
        for (n, w) in window.iter().enumerate() {
            norm[t * hop + n] += w;
        }
    }

    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let bins = spec.num_bins();
    let scale = 1.0 / n_fft as f64;

    let mut channels = Vec::with_capacity(spec.num_channels());
    for m in 0..spec.num_channels() {
        let mut y = vec![0.0; len];
        for t in 0..frames {
            for f in 0..bins {
                buf[f] = spec.get(m, f, t);
            }
            // DC and Nyquist must be real for a real frame
            buf[0].im = 0.0;
            if n_fft % 2 == 0 {
                buf[n_fft / 2].im = 0.0;
            }
            for f in bins..n_fft {
                buf[f] = buf[n_fft - f].conj();
            }
            ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = t * hop;
            for (n, v) in buf.iter().take(win).enumerate() {
                y[start + n] += v.re * scale;
            }
        }
        for (s, w) in y.iter_mut().zip(&norm) {
            *s /= w.max(OLA_WINDOW_FLOOR);
        }
        channels.push(y);
    }
    AudioBuffer::new(channels, cfg.sample_rate)
}

/// Frame ranges used by [`split_blocks`].
pub fn block_ranges(frames: usize, block_frames: usize) -> Result<Vec<Range<usize>>> {
    if block_frames == 0 {
        return Err(Error::InvalidArgument("block length must be at least one frame".into()));
    }
    let mut ranges: Vec<Range<usize>> = (0..frames)
        .step_by(block_frames)
        .map(|s| s..(s + block_frames).min(frames))
        .collect();
    if ranges.len() > 1 {
        let tail = ranges.last().map_or(0, |r| r.len());
        if tail < block_frames && tail < MIN_TAIL_FRAMES {
            let last = ranges.pop().unwrap();
            ranges.last_mut().unwrap().end = last.end;
        }
    }
    Ok(ranges)
}

/// Splits the frame axis into consecutive, non-overlapping blocks.
pub fn split_blocks(
    spec: &MultichannelSpectrum,
    block_frames: usize,
) -> Result<Vec<MultichannelSpectrum>> {
    Ok(block_ranges(spec.num_frames(), block_frames)?
        .into_iter()
        .map(|r| spec.slice_frames(r))
        .collect())
}

/// Concatenates blocks along the frame axis, in order.
pub fn concat_blocks(blocks: &[MultichannelSpectrum]) -> Result<MultichannelSpectrum> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no blocks to concatenate".into()))?;
    for (i, b) in blocks.iter().enumerate() {
        if !b.same_geometry(first) || b.num_channels() != first.num_channels() {
            return Err(Error::ShapeMismatch(format!(
                "block {i} geometry differs from block 0"
            )));
        }
    }
    let total: usize = blocks.iter().map(|b| b.num_frames()).sum();
    let m = first.num_channels();
    let mut out = first.zeros_like(m, total);
    for f in 0..first.num_bins() {
        let mut dst = out.offset(f, 0);
        for b in blocks {
            let src = b.frequency_row(f);
            out.data[dst..dst + src.len()].copy_from_slice(src);
            dst += src.len();
        }
    }
    Ok(out)
}
