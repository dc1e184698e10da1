//! Block-wise beamforming framework.
//!
//! Per block: optional enhancement mask and target mask on all channels
//! ("early" masking), a beamformer, then optional target masking of the
//! beamformed output ("later" masking). The beamformer is delay-and-sum,
//! MVDR steered by an input mask, or MVDR steered by the posterior of a
//! two- or three-component CGMM.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::beamform::{
    apply_beamformer, delay_and_sum, mvdr_weights, noisy_covariance, steering_vector,
    weighted_covariance,
};
use crate::cgmm::{run_em, CgmmConfig, CgmmDiagnostics};
use crate::error::{Error, Result};
use crate::linalg::{DEFAULT_LOADING, PHI_FLOOR};
use crate::mask::{MaskRole, MaskTensor};
use crate::spectral::{
    block_ranges, concat_blocks, istft, stft, AudioBuffer, MultichannelSpectrum, StftConfig,
};

pub const DEFAULT_BLOCK_FRAMES: usize = 512;
pub const DEFAULT_ITERATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BeamformerKind {
    DelayAndSum,
    Mvdr,
    /// Two-component CGMM initialized from a speech mask.
    Cgmm2,
    /// Two-component CGMM with identity/noisy-covariance initialization.
    Cgmm2NoInit,
    /// Target / interference / noise CGMM.
    Cgmm3,
}

impl BeamformerKind {
    pub fn is_cgmm(self) -> bool {
        matches!(self, Self::Cgmm2 | Self::Cgmm2NoInit | Self::Cgmm3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LaterSs {
    Off,
    /// Multiply the output by the input target mask.
    InputMask,
    /// Multiply the output by the CGMM target posterior.
    PostEmMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelReduce {
    Mean,
    Max,
}

/// Which input mask steers the plain MVDR and initializes the speech
/// component of the two-component CGMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SteerMask {
    /// The enhancement (speech vs. noise) mask.
    Speech,
    Target,
}

impl SteerMask {
    pub fn role(self) -> MaskRole {
        match self {
            Self::Speech => MaskRole::Enhancement,
            Self::Target => MaskRole::Target,
        }
    }
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", $what, " '{}' (expected one of: {})"),
                        s,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(BeamformerKind, "beamformer", {
    "das" => BeamformerKind::DelayAndSum,
    "mvdr" => BeamformerKind::Mvdr,
    "cgmm2" => BeamformerKind::Cgmm2,
    "cgmm2-noinit" => BeamformerKind::Cgmm2NoInit,
    "cgmm3" => BeamformerKind::Cgmm3,
});

keyword_enum!(LaterSs, "later-ss mode", {
    "off" => LaterSs::Off,
    "input" => LaterSs::InputMask,
    "post-em" => LaterSs::PostEmMask,
});

keyword_enum!(ChannelReduce, "channel reduction", {
    "mean" => ChannelReduce::Mean,
    "max" => ChannelReduce::Max,
});

keyword_enum!(SteerMask, "steering mask", {
    "speech" => SteerMask::Speech,
    "target" => SteerMask::Target,
});

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub beamformer: BeamformerKind,
    /// Use the input masks as fixed CGMM mixture weights.
    pub prior: bool,
    pub early_se: bool,
    pub early_ss: bool,
    pub later_ss: LaterSs,
    pub block_frames: usize,
    pub iterations: usize,
    pub loading: f64,
    pub reference_channel: usize,
    pub channel_reduce: ChannelReduce,
    pub steer_mask: SteerMask,
    pub stft: StftConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            beamformer: BeamformerKind::DelayAndSum,
            prior: false,
            early_se: false,
            early_ss: false,
            later_ss: LaterSs::Off,
            block_frames: DEFAULT_BLOCK_FRAMES,
            iterations: DEFAULT_ITERATIONS,
            loading: DEFAULT_LOADING,
            reference_channel: 0,
            channel_reduce: ChannelReduce::Mean,
            steer_mask: SteerMask::Speech,
            stft: StftConfig::default(),
        }
    }
}

/// Block length in frames for a block duration: the number of frames whose
/// windows span `block_ms` (8208 ms at 32/16 ms gives 512).
pub fn block_frames_from_ms(block_ms: f64, stft: &StftConfig) -> Result<usize> {
    let frames = ((block_ms - stft.window_ms) / stft.hop_ms).round() + 1.0;
    if !frames.is_finite() || frames < 1.0 {
        return Err(Error::Config(format!(
            "block of {block_ms} ms is shorter than one {} ms window",
            stft.window_ms
        )));
    }
    Ok(frames as usize)
}

impl PipelineConfig {
    pub fn cgmm_config(&self) -> CgmmConfig {
        CgmmConfig {
            iterations: self.iterations,
            loading: self.loading,
            phi_floor: PHI_FLOOR,
        }
    }

    /// Masks this configuration consumes, without duplicates.
    pub fn required_masks(&self) -> Vec<MaskRole> {
        let mut roles = Vec::new();
        let mut need = |r: MaskRole| {
            if !roles.contains(&r) {
                roles.push(r);
            }
        };
        if self.early_se {
            need(MaskRole::Enhancement);
        }
        if self.early_ss {
            need(MaskRole::Target);
        }
        match self.beamformer {
            BeamformerKind::Mvdr | BeamformerKind::Cgmm2 => need(self.steer_mask.role()),
            BeamformerKind::Cgmm3 => {
                need(MaskRole::Target);
                need(MaskRole::Interference);
                need(MaskRole::Noise);
            }
            BeamformerKind::DelayAndSum | BeamformerKind::Cgmm2NoInit => {}
        }
        if self.later_ss == LaterSs::InputMask {
            need(MaskRole::Target);
        }
        roles
    }

    /// Checks the configuration on its own (mask availability is checked
    /// where masks are supplied).
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.block_frames == 0 {
            return Err(Error::Config("block_frames must be at least 1".into()));
        }
        if !(self.loading >= 0.0) || !self.loading.is_finite() {
            return Err(Error::Config(format!("loading must be >= 0, got {}", self.loading)));
        }
        if self.later_ss == LaterSs::PostEmMask && !self.beamformer.is_cgmm() {
            return Err(Error::Config(format!(
                "later_ss=post-em needs a CGMM beamformer, not {}",
                self.beamformer
            )));
        }
        if self.prior && self.beamformer == BeamformerKind::Cgmm2NoInit {
            return Err(Error::Config(
                "prior=true needs input masks; cgmm2-noinit has none".into(),
            ));
        }
        Ok(())
    }
}

/// The input masks available to a run, each `[F x T]`.
#[derive(Debug, Clone, Default)]
pub struct PipelineMasks {
    pub target: Option<MaskTensor>,
    pub interference: Option<MaskTensor>,
    pub noise: Option<MaskTensor>,
    /// Enhancement (speech vs. noise) mask.
    pub speech: Option<MaskTensor>,
}

impl PipelineMasks {
    pub fn get(&self, role: MaskRole) -> Option<&MaskTensor> {
        match role {
            MaskRole::Target => self.target.as_ref(),
            MaskRole::Interference => self.interference.as_ref(),
            MaskRole::Noise => self.noise.as_ref(),
            MaskRole::Enhancement => self.speech.as_ref(),
        }
    }

    pub fn set(&mut self, role: MaskRole, mask: MaskTensor) {
        let slot = match role {
            MaskRole::Target => &mut self.target,
            MaskRole::Interference => &mut self.interference,
            MaskRole::Noise => &mut self.noise,
            MaskRole::Enhancement => &mut self.speech,
        };
        *slot = Some(mask);
    }

    fn require(&self, role: MaskRole) -> Result<&MaskTensor> {
        self.get(role)
            .ok_or_else(|| Error::Config(format!("configuration needs a {} mask", role_name(role))))
    }

    fn check(&self, cfg: &PipelineConfig, bins: usize, frames: usize) -> Result<()> {
        for role in cfg.required_masks() {
            self.require(role)?.check_shape(bins, frames)?;
        }
        Ok(())
    }

    fn slice_frames(&self, range: std::ops::Range<usize>) -> Self {
        let s = |m: &Option<MaskTensor>| m.as_ref().map(|m| m.slice_frames(range.clone()));
        Self {
            target: s(&self.target),
            interference: s(&self.interference),
            noise: s(&self.noise),
            speech: s(&self.speech),
        }
    }
}

pub fn role_name(role: MaskRole) -> &'static str {
    match role {
        MaskRole::Target => "target",
        MaskRole::Interference => "interference",
        MaskRole::Noise => "noise",
        MaskRole::Enhancement => "enhancement",
    }
}

/// Three-way prior from a target-speaker mask and a speech-vs-noise mask:
/// target as given, noise `1 - speech`, interference the clamped remainder.
/// The CGMM renormalizes per bin.
pub fn three_way_masks(target: &MaskTensor, speech: &MaskTensor) -> Result<[MaskTensor; 3]> {
    speech.check_shape(target.num_bins(), target.num_frames())?;
    let noise = speech.complement();
    let interference = MaskTensor::from_fn(target.num_bins(), target.num_frames(), |f, t| {
        1.0 - target.get(f, t) - noise.get(f, t)
    });
    Ok([target.clone(), interference, noise])
}

/// Collapses per-channel masks into one by mean or max.
pub fn reduce_channels(masks: &[MaskTensor], mode: ChannelReduce) -> Result<MaskTensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no channel masks to reduce".into()))?;
    let (bins, frames) = (first.num_bins(), first.num_frames());
    for m in masks {
        m.check_shape(bins, frames)?;
    }
    let n = masks.len() as f64;
    let values = (0..bins * frames)
        .map(|i| {
            let it = masks.iter().map(|m| m.values()[i]);
            match mode {
                ChannelReduce::Mean => it.sum::<f64>() / n,
                ChannelReduce::Max => it.fold(0.0, f64::max),
            }
        })
        .map(|v: f64| v.clamp(0.0, 1.0))
        .collect();
    MaskTensor::new(bins, frames, values)
}

/// Scales every channel of `spec` by the real mask; phases are untouched.
pub fn apply_mask(spec: &MultichannelSpectrum, mask: &MaskTensor) -> Result<MultichannelSpectrum> {
    mask.check_shape(spec.num_bins(), spec.num_frames())?;
    let mut out = spec.clone();
    for f in 0..spec.num_bins() {
        for (t, &g) in mask.row(f).iter().enumerate() {
            for y in out.bin_mut(f, t) {
                *y *= g;
            }
        }
    }
    Ok(out)
}

/// Elementwise product of two masks.
pub fn mask_product(a: &MaskTensor, b: &MaskTensor) -> Result<MaskTensor> {
    b.check_shape(a.num_bins(), a.num_frames())?;
    let values = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
    MaskTensor::new(a.num_bins(), a.num_frames(), values)
}

/// What happened in one block.
#[derive(Debug, Clone, Default)]
pub struct BlockReport {
    pub index: usize,
    pub start_frame: usize,
    pub frames: usize,
    pub log_likelihood: Vec<f64>,
    pub cgmm: Option<CgmmDiagnostics>,
    pub mvdr_fallback_bins: usize,
    pub covariance_fallback_bins: usize,
    pub unconverged_eigen_bins: usize,
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    /// One-channel enhanced spectrum.
    pub spectrum: MultichannelSpectrum,
    /// CGMM posteriors, when a CGMM ran.
    pub posteriors: Option<Vec<MaskTensor>>,
    pub report: BlockReport,
}

fn mvdr_stage(
    x: &MultichannelSpectrum,
    steer: &MaskTensor,
    cfg: &PipelineConfig,
    report: &mut BlockReport,
) -> Result<MultichannelSpectrum> {
    let r_target = weighted_covariance(x, steer)?;
    let h = steering_vector(&r_target, cfg.reference_channel)?;
    let r_y = noisy_covariance(x);
    let w = mvdr_weights(&r_y, &h, cfg.loading)?;
    report.covariance_fallback_bins += r_target.fallback_bins.len();
    report.unconverged_eigen_bins += h.unconverged_bins.len();
    report.mvdr_fallback_bins += w.fallback_bins.len();
    apply_beamformer(x, &w)
}

/// Runs the framework on one block. `masks` must already be cut to the
/// block's frames.
pub fn process_block(
    block: &MultichannelSpectrum,
    cfg: &PipelineConfig,
    masks: &PipelineMasks,
) -> Result<BlockOutput> {
    cfg.validate()?;
    masks.check(cfg, block.num_bins(), block.num_frames())?;
    if cfg.reference_channel >= block.num_channels() {
        return Err(Error::Config(format!(
            "reference channel {} out of range for {} channels",
            cfg.reference_channel,
            block.num_channels()
        )));
    }
    let mut report = BlockReport {
        frames: block.num_frames(),
        ..Default::default()
    };

    // Early masks are multiplied into one gain first, so SE-then-SS and
    // SS-then-SE give bit-identical spectra.
    let mut early: Vec<&MaskTensor> = Vec::new();
    if cfg.early_se {
        early.push(masks.require(MaskRole::Enhancement)?);
    }
    if cfg.early_ss {
        early.push(masks.require(MaskRole::Target)?);
    }
    let x = match early.as_slice() {
        [] => block.clone(),
        [only] => apply_mask(block, only)?,
        [a, b] => apply_mask(block, &mask_product(a, b)?)?,
        _ => unreachable!(),
    };

    let mut posteriors = None;
    let y = match cfg.beamformer {
        BeamformerKind::DelayAndSum => delay_and_sum(&x, &vec![0.0; x.num_channels()])?,
        BeamformerKind::Mvdr => {
            let steer = masks.require(cfg.steer_mask.role())?;
            mvdr_stage(&x, steer, cfg, &mut report)?
        }
        kind => {
            let init: Option<Vec<MaskTensor>> = match kind {
                BeamformerKind::Cgmm2 => {
                    let speech = masks.require(cfg.steer_mask.role())?;
                    Some(vec![speech.clone(), speech.complement()])
                }
                BeamformerKind::Cgmm3 => Some(vec![
                    masks.require(MaskRole::Target)?.clone(),
                    masks.require(MaskRole::Interference)?.clone(),
                    masks.require(MaskRole::Noise)?.clone(),
                ]),
                _ => None,
            };
            let state = run_em(&x, init.as_deref(), cfg.prior, &cfg.cgmm_config())?;
            report.log_likelihood = state.log_likelihood_trace.clone();
            report.cgmm = Some(state.diagnostics.clone());
            let post = state.posteriors();
            let y = mvdr_stage(&x, &post[0], cfg, &mut report)?;
            posteriors = Some(post);
            y
        }
    };

    let y = match cfg.later_ss {
        LaterSs::Off => y,
        LaterSs::InputMask => apply_mask(&y, masks.require(MaskRole::Target)?)?,
        LaterSs::PostEmMask => {
            let post = posteriors
                .as_ref()
                .ok_or_else(|| Error::Config("later_ss=post-em without CGMM posteriors".into()))?;
            apply_mask(&y, &post[0])?
        }
    };

    Ok(BlockOutput {
        spectrum: y,
        posteriors,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Enhanced single-channel audio, same length as the input.
    pub audio: AudioBuffer,
    pub spectrum: MultichannelSpectrum,
    /// Concatenated CGMM posteriors over the whole input.
    pub posteriors: Option<Vec<MaskTensor>>,
    pub blocks: Vec<BlockReport>,
}

/// Processes a whole spectrum block by block and concatenates the results.
pub fn process_spectrum(
    spec: &MultichannelSpectrum,
    cfg: &PipelineConfig,
    masks: &PipelineMasks,
) -> Result<(MultichannelSpectrum, Option<Vec<MaskTensor>>, Vec<BlockReport>)> {
    cfg.validate()?;
    masks.check(cfg, spec.num_bins(), spec.num_frames())?;
    let ranges = block_ranges(spec.num_frames(), cfg.block_frames)?;
    let outputs: Vec<BlockOutput> = ranges
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let block = spec.slice_frames(r.clone());
            let mut out = process_block(&block, cfg, &masks.slice_frames(r.clone()))?;
            out.report.index = i;
            out.report.start_frame = r.start;
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let spectra: Vec<MultichannelSpectrum> = outputs.iter().map(|o| o.spectrum.clone()).collect();
    let joined = concat_blocks(&spectra)?;
    let posteriors = if cfg.beamformer.is_cgmm() {
        let k = outputs[0].posteriors.as_ref().map_or(0, |p| p.len());
        let mut per_k = Vec::with_capacity(k);
        for kk in 0..k {
            let parts: Vec<MaskTensor> = outputs
                .iter()
                .map(|o| o.posteriors.as_ref().expect("cgmm block has posteriors")[kk].clone())
                .collect();
            per_k.push(MaskTensor::concat(&parts)?);
        }
        Some(per_k)
    } else {
        None
    };
    let reports = outputs.into_iter().map(|o| o.report).collect();
    Ok((joined, posteriors, reports))
}

/// STFT, block processing, overlap-add. The output has the input's length.
pub fn run_pipeline(
    audio: &AudioBuffer,
    cfg: &PipelineConfig,
    masks: &PipelineMasks,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let spec = stft(audio, &cfg.stft)?;
    let (joined, posteriors, blocks) = process_spectrum(&spec, cfg, masks)?;
    let out = istft(&joined, &cfg.stft)?.resized(audio.len());
    Ok(PipelineOutput {
        audio: out,
        spectrum: joined,
        posteriors,
        blocks,
    })
}

/// One row of the ablation over the framework's components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationSystem {
    pub id: &'static str,
    pub description: &'static str,
}

/// The component combinations A0-D3 (sixteen rows) and their configurations.
/// Masks: "speech" is the enhancement mask, "target" the target-speaker
/// mask, and the three-component systems take target/interference/noise.
pub fn ablation_systems() -> Vec<(AblationSystem, PipelineConfig)> {
    use BeamformerKind::*;
    let base = PipelineConfig::default();
    let das = PipelineConfig {
        beamformer: DelayAndSum,
        ..base.clone()
    };
    let mvdr = PipelineConfig {
        beamformer: Mvdr,
        ..base.clone()
    };
    let cgmm2 = PipelineConfig {
        beamformer: Cgmm2,
        ..base.clone()
    };
    let cgmm3 = PipelineConfig {
        beamformer: Cgmm3,
        ..base.clone()
    };
    let sys = |id, description| AblationSystem { id, description };
    vec![
        (sys("A0", "delay-and-sum"), das.clone()),
        (
            sys("A1", "delay-and-sum + early SE"),
            PipelineConfig {
                early_se: true,
                ..das.clone()
            },
        ),
        (
            sys("A2", "delay-and-sum + early SS"),
            PipelineConfig {
                early_ss: true,
                ..das.clone()
            },
        ),
        (
            sys("A3", "delay-and-sum + early SS + early SE"),
            PipelineConfig {
                early_ss: true,
                early_se: true,
                ..das
            },
        ),
        (sys("B1", "MVDR(speech mask)"), mvdr.clone()),
        (
            sys("B2", "MVDR(target mask)"),
            PipelineConfig {
                steer_mask: SteerMask::Target,
                ..mvdr.clone()
            },
        ),
        (
            sys("B3", "MVDR(speech mask) + early SS"),
            PipelineConfig {
                early_ss: true,
                ..mvdr.clone()
            },
        ),
        (
            sys("B4", "MVDR(speech mask) + later SS(input)"),
            PipelineConfig {
                later_ss: LaterSs::InputMask,
                ..mvdr
            },
        ),
        (
            sys("C0", "2CGMM without init"),
            PipelineConfig {
                beamformer: Cgmm2NoInit,
                ..base
            },
        ),
        (sys("C1", "2CGMM(speech mask, no prior)"), cgmm2.clone()),
        (
            sys("C2", "2CGMM(speech mask, no prior) + early SS"),
            PipelineConfig {
                early_ss: true,
                ..cgmm2.clone()
            },
        ),
        (
            sys("C3", "2CGMM(speech mask, no prior) + later SS(input)"),
            PipelineConfig {
                later_ss: LaterSs::InputMask,
                ..cgmm2.clone()
            },
        ),
        (
            sys("C4", "2CGMM(speech mask, prior) + later SS(input)"),
            PipelineConfig {
                later_ss: LaterSs::InputMask,
                prior: true,
                ..cgmm2
            },
        ),
        (
            sys("D1", "3CGMM(no prior) + later SS(input)"),
            PipelineConfig {
                later_ss: LaterSs::InputMask,
                ..cgmm3.clone()
            },
        ),
        (
            sys("D2", "3CGMM(prior) + later SS(input)"),
            PipelineConfig {
                later_ss: LaterSs::InputMask,
                prior: true,
                ..cgmm3.clone()
            },
        ),
        (
            sys("D3", "3CGMM(prior) + later SS(post-EM)"),
            PipelineConfig {
                later_ss: LaterSs::PostEmMask,
                prior: true,
                ..cgmm3
            },
        ),
    ]
}
