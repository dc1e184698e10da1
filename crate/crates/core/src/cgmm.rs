//! Complex Gaussian mixture model over multichannel time-frequency bins.
//!
//! Each component `k` models the array snapshot as
//! `y(f,t) | k ~ N_c(0, phi[k,f,t] * R[k,f])`. The mixture weights are either
//! uniform or a fixed per-bin prior `alpha[k,f,t]` supplied from external
//! masks; the prior is never re-estimated. Component order is
//! `[speech, noise]` for two components and `[target, interference, noise]`
//! for three.
//!
//! EM alternates:
//!
//! * E-step: `lambda = alpha * N_c(y; 0, phi R) / sum_k alpha * N_c(...)`,
//!   evaluated with log-sum-exp.
//! * M-step: `phi = tr(y y^H R^-1) / M` using the current `R`, then
//!   `R = sum_t (lambda / phi) y y^H / sum_t lambda` using the new `phi`.
//!
//! `R` is not trace-normalized; its scale is absorbed by `phi`.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::beamform::{noisy_covariance, MIN_MASK_MASS};
use crate::error::{Error, Result};
use crate::linalg::{log_density_with, HermitianInverse, HermitianMatrix, DEFAULT_LOADING, PHI_FLOOR};
use crate::mask::MaskTensor;
use crate::spectral::MultichannelSpectrum;

/// Floor applied to initial posteriors before renormalization.
pub const LAMBDA_INIT_FLOOR: f64 = 1e-6;

/// Contribution of a bin whose mixture density underflows completely.
pub const LOG_LIKELIHOOD_FLOOR: f64 = -708.0;

pub const MAX_COMPONENTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgmmConfig {
    pub iterations: usize,
    pub loading: f64,
    pub phi_floor: f64,
}

impl Default for CgmmConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            loading: DEFAULT_LOADING,
            phi_floor: PHI_FLOOR,
        }
    }
}

/// How the parameters were initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Speech component from the noisy covariance, noise component `I`.
    IdentityVsNoisy,
    /// Posteriors and covariances from input masks.
    Masks,
}

/// Counters for every numerical safeguard that fired.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CgmmDiagnostics {
    /// (component, frequency) pairs whose `R` was kept because the
    /// component had no posterior mass.
    pub low_mass_components: usize,
    /// Bins where every prior was zero; posteriors fell back to uniform.
    pub invalid_prior_bins: usize,
    /// Bins whose mixture density underflowed in the log-likelihood.
    pub underflow_bins: usize,
    /// Covariances that could not be factored and were replaced by `I`.
    pub singular_covariances: usize,
}

/// Parameters and posteriors of the mixture for one block.
///
/// Per-bin tensors are stored `[f][k][t]`; use the accessors.
#[derive(Debug, Clone)]
pub struct CgmmState {
    components: usize,
    channels: usize,
    bins: usize,
    frames: usize,
    /// `[f][k]`
    r: Vec<HermitianMatrix>,
    phi: Vec<f64>,
    lambda: Vec<f64>,
    alpha: Option<Vec<f64>>,
    pub init_mode: InitMode,
    pub config: CgmmConfig,
    pub diagnostics: CgmmDiagnostics,
    /// Log-likelihood after initialization and after every iteration.
    pub log_likelihood_trace: Vec<f64>,
}

impl CgmmState {
    #[inline]
    fn idx(&self, k: usize, f: usize, t: usize) -> usize {
        (f * self.components + k) * self.frames + t
    }

    pub fn num_components(&self) -> usize {
        self.components
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

    pub fn covariance(&self, k: usize, f: usize) -> &HermitianMatrix {
        &self.r[f * self.components + k]
    }

    pub fn set_covariance(&mut self, k: usize, f: usize, r: HermitianMatrix) {
        let i = f * self.components + k;
        self.r[i] = r;
    }

    #[inline]
    pub fn phi(&self, k: usize, f: usize, t: usize) -> f64 {
        self.phi[self.idx(k, f, t)]
    }

    pub fn set_phi(&mut self, k: usize, f: usize, t: usize, value: f64) {
        let i = self.idx(k, f, t);
        self.phi[i] = value.max(self.config.phi_floor);
    }

    #[inline]
    pub fn lambda(&self, k: usize, f: usize, t: usize) -> f64 {
        self.lambda[self.idx(k, f, t)]
    }

    /// Prior weight; `1/K` when no prior is set.
    #[inline]
    pub fn alpha(&self, k: usize, f: usize, t: usize) -> f64 {
        match &self.alpha {
            Some(a) => a[self.idx(k, f, t)],
            None => 1.0 / self.components as f64,
        }
    }

    pub fn has_prior(&self) -> bool {
        self.alpha.is_some()
    }

    /// Raw prior storage, for exact comparisons.
    pub fn alpha_values(&self) -> Option<&[f64]> {
        self.alpha.as_deref()
    }

    /// Replaces the prior. Values are used as given.
    pub fn set_prior(&mut self, alpha: Vec<MaskTensor>) -> Result<()> {
        if alpha.len() != self.components {
            return Err(Error::ShapeMismatch(format!(
                "{} prior masks for {} components",
                alpha.len(),
                self.components
            )));
        }
        for a in &alpha {
            a.check_shape(self.bins, self.frames)?;
        }
        let mut values = vec![0.0; self.phi.len()];
        for f in 0..self.bins {
            for (k, a) in alpha.iter().enumerate() {
                let i = self.idx(k, f, 0);
                values[i..i + self.frames].copy_from_slice(a.row(f));
            }
        }
        self.alpha = Some(values);
        Ok(())
    }

    /// Posterior of component `k` as a mask.
    pub fn posterior(&self, k: usize) -> MaskTensor {
        MaskTensor::from_fn(self.bins, self.frames, |f, t| self.lambda(k, f, t))
    }

    pub fn posteriors(&self) -> Vec<MaskTensor> {
        (0..self.components).map(|k| self.posterior(k)).collect()
    }

    fn check_block(&self, block: &MultichannelSpectrum) -> Result<()> {
        if block.num_channels() != self.channels
            || block.num_bins() != self.bins
            || block.num_frames() != self.frames
        {
            return Err(Error::ShapeMismatch(format!(
                "block is {}x{}x{}, model is {}x{}x{}",
                block.num_channels(),
                block.num_bins(),
                block.num_frames(),
                self.channels,
                self.bins,
                self.frames
            )));
        }
        Ok(())
    }

    fn inverses_at(&self, f: usize) -> (Vec<HermitianInverse>, usize) {
        let mut singular = 0;
        let inv = (0..self.components)
            .map(|k| {
                self.covariance(k, f)
                    .loaded_inverse(self.config.loading)
                    .unwrap_or_else(|_| {
                        singular += 1;
                        HermitianMatrix::identity(self.channels)
                            .loaded_inverse(0.0)
                            .expect("identity is positive definite")
                    })
            })
            .collect();
        (inv, singular)
    }

    /// Unnormalized log posterior terms `log alpha + log N_c` for one bin;
    /// components with zero prior get `-inf`.
    fn log_terms(
        &self,
        f: usize,
        t: usize,
        y: &[Complex64],
        inv: &[HermitianInverse],
        out: &mut [f64; MAX_COMPONENTS],
    ) {
        for k in 0..self.components {
            let a = self.alpha(k, f, t);
            out[k] = if a > 0.0 {
                a.ln() + log_density_with(y, self.phi(k, f, t), &inv[k])
            } else {
                f64::NEG_INFINITY
            };
        }
    }

    /// Updates the posteriors from the current parameters.
    pub fn e_step(&mut self, block: &MultichannelSpectrum) -> Result<()> {
        self.check_block(block)?;
        let (k_count, frames) = (self.components, self.frames);
        let results: Vec<(Vec<f64>, usize, usize)> = (0..self.bins)
            .into_par_iter()
            .map(|f| {
                let (inv, singular) = self.inverses_at(f);
                let mut lam = vec![0.0; k_count * frames];
                let mut invalid = 0;
                let mut terms = [0.0; MAX_COMPONENTS];
                for t in 0..frames {
                    self.log_terms(f, t, block.bin(f, t), &inv, &mut terms);
                    let terms = &terms[..k_count];
                    let lse = log_sum_exp(terms);
                    if lse.is_finite() {
                        for (k, &l) in terms.iter().enumerate() {
                            lam[k * frames + t] = if l == f64::NEG_INFINITY {
                                0.0
                            } else {
                                (l - lse).exp()
                            };
                        }
                    } else {
                        invalid += 1;
                        for k in 0..k_count {
                            lam[k * frames + t] = 1.0 / k_count as f64;
                        }
                    }
                }
                (lam, invalid, singular)
            })
            .collect();
        for (f, (lam, invalid, singular)) in results.into_iter().enumerate() {
            let i = self.idx(0, f, 0);
            self.lambda[i..i + lam.len()].copy_from_slice(&lam);
            self.diagnostics.invalid_prior_bins += invalid;
            self.diagnostics.singular_covariances += singular;
        }
        Ok(())
    }

    /// Updates `phi` from the current `R`, then `R` from the new `phi`.
    pub fn m_step(&mut self, block: &MultichannelSpectrum) -> Result<()> {
        self.check_block(block)?;
        let (k_count, frames, m) = (self.components, self.frames, self.channels);
        let floor = self.config.phi_floor;
        let results: Vec<(Vec<f64>, Vec<HermitianMatrix>, usize, usize)> = (0..self.bins)
            .into_par_iter()
            .map(|f| {
                let (inv, singular) = self.inverses_at(f);
                let mut phi = vec![0.0; k_count * frames];
                let mut r_new = Vec::with_capacity(k_count);
                let mut low_mass = 0;
                for k in 0..k_count {
                    let phi_k = &mut phi[k * frames..(k + 1) * frames];
                    for (t, p) in phi_k.iter_mut().enumerate() {
                        *p = (inv[k].quad_form(block.bin(f, t)) / m as f64).max(floor);
                    }
                    let mut acc = HermitianMatrix::zeros(m);
                    let mut mass = 0.0;
                    for (t, p) in phi_k.iter().enumerate() {
                        let l = self.lambda(k, f, t);
                        if l > 0.0 {
                            mass += l;
                            acc.add_outer_upper(block.bin(f, t), l / p);
                        }
                    }
                    if mass < MIN_MASK_MASS {
                        low_mass += 1;
                        r_new.push(self.covariance(k, f).clone());
                    } else {
                        acc.mirror_upper();
                        acc.scale(1.0 / mass);
                        r_new.push(acc);
                    }
                }
                (phi, r_new, low_mass, singular)
            })
            .collect();
        for (f, (phi, r_new, low_mass, singular)) in results.into_iter().enumerate() {
            let i = self.idx(0, f, 0);
            self.phi[i..i + phi.len()].copy_from_slice(&phi);
            for (k, r) in r_new.into_iter().enumerate() {
                self.set_covariance(k, f, r);
            }
            self.diagnostics.low_mass_components += low_mass;
            self.diagnostics.singular_covariances += singular;
        }
        Ok(())
    }

    /// `sum_{f,t} log sum_k alpha N_c(y; 0, phi R)`.
    pub fn log_likelihood(&mut self, block: &MultichannelSpectrum) -> Result<f64> {
        self.check_block(block)?;
        let per_bin: Vec<(f64, usize)> = (0..self.bins)
            .into_par_iter()
            .map(|f| {
                let (inv, _) = self.inverses_at(f);
                let mut terms = [0.0; MAX_COMPONENTS];
                let mut sum = 0.0;
                let mut underflow = 0;
                for t in 0..self.frames {
                    self.log_terms(f, t, block.bin(f, t), &inv, &mut terms);
                    let lse = log_sum_exp(&terms[..self.components]);
                    if lse.is_finite() {
                        sum += lse;
                    } else {
                        underflow += 1;
                        sum += LOG_LIKELIHOOD_FLOOR;
                    }
                }
                (sum, underflow)
            })
            .collect();
        let mut total = 0.0;
        for (s, u) in per_bin {
            total += s;
            self.diagnostics.underflow_bins += u;
        }
        Ok(total)
    }
}

/// `log sum exp(x)`; `-inf` when every term is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Builds the initial model for one block.
///
/// With masks, the component count is the number of masks; posteriors start
/// at the floored, renormalized masks, `R` is their weighted covariance
/// (unit variances) and `phi` follows from that `R`. With `prior`, the
/// renormalized masks also become the fixed mixture weights, exact zeros
/// included. Without masks only the two-component model is available.
pub fn init_cgmm(
    block: &MultichannelSpectrum,
    masks: Option<&[MaskTensor]>,
    prior: bool,
    cfg: &CgmmConfig,
) -> Result<CgmmState> {
    if !(cfg.loading >= 0.0) || !(cfg.phi_floor > 0.0) {
        return Err(Error::Config(format!(
            "loading must be >= 0 and phi floor > 0 (got {}, {})",
            cfg.loading, cfg.phi_floor
        )));
    }
    let (m, bins, frames) = (block.num_channels(), block.num_bins(), block.num_frames());
    let masks = match masks {
        Some(ms) => ms,
        None => return init_without_masks(block, prior, cfg),
    };
    let k_count = masks.len();
    if k_count == 0 || k_count > MAX_COMPONENTS {
        return Err(Error::InvalidArgument(format!(
            "need 1 to {MAX_COMPONENTS} masks, got {k_count}"
        )));
    }
    for mk in masks {
        mk.check_shape(bins, frames)?;
    }

    let len = bins * k_count * frames;
    let mut state = CgmmState {
        components: k_count,
        channels: m,
        bins,
        frames,
        r: vec![HermitianMatrix::zeros(m); bins * k_count],
        phi: vec![1.0; len],
        lambda: vec![0.0; len],
        alpha: prior.then(|| vec![0.0; len]),
        init_mode: InitMode::Masks,
        config: *cfg,
        diagnostics: CgmmDiagnostics::default(),
        log_likelihood_trace: Vec::new(),
    };

    let mut invalid_prior = 0;
    for f in 0..bins {
        for t in 0..frames {
            let floored: f64 = masks.iter().map(|mk| mk.get(f, t).max(LAMBDA_INIT_FLOOR)).sum();
            let raw: f64 = masks.iter().map(|mk| mk.get(f, t)).sum();
            for (k, mk) in masks.iter().enumerate() {
                let i = state.idx(k, f, t);
                state.lambda[i] = mk.get(f, t).max(LAMBDA_INIT_FLOOR) / floored;
                if let Some(alpha) = state.alpha.as_mut() {
                    alpha[i] = if raw > 0.0 {
                        mk.get(f, t) / raw
                    } else {
                        1.0 / k_count as f64
                    };
                }
            }
            if prior && !(raw > 0.0) {
                invalid_prior += 1;
            }
        }
    }
    state.diagnostics.invalid_prior_bins = invalid_prior;

    // covariance with unit variances, then variances from that covariance
    let fallback = noisy_covariance(block);
    for f in 0..bins {
        for k in 0..k_count {
            let mut acc = HermitianMatrix::zeros(m);
            let mut mass = 0.0;
            for t in 0..frames {
                let l = state.lambda(k, f, t);
                mass += l;
                acc.add_outer_upper(block.bin(f, t), l);
            }
            if mass < MIN_MASK_MASS {
                state.diagnostics.low_mass_components += 1;
                state.set_covariance(k, f, fallback.matrices[f].clone());
            } else {
                acc.mirror_upper();
                acc.scale(1.0 / mass);
                state.set_covariance(k, f, acc);
            }
        }
    }
    update_phi(&mut state, block);
    Ok(state)
}

fn init_without_masks(
    block: &MultichannelSpectrum,
    prior: bool,
    cfg: &CgmmConfig,
) -> Result<CgmmState> {
    if prior {
        return Err(Error::InvalidArgument(
            "a mixture prior needs input masks".into(),
        ));
    }
    let (m, bins, frames) = (block.num_channels(), block.num_bins(), block.num_frames());
    let noisy = noisy_covariance(block);
    let mut r = Vec::with_capacity(2 * bins);
    for rf in noisy.matrices {
        r.push(rf);
        r.push(HermitianMatrix::identity(m));
    }
    let len = bins * 2 * frames;
    let mut state = CgmmState {
        components: 2,
        channels: m,
        bins,
        frames,
        r,
        phi: vec![1.0; len],
        lambda: vec![0.5; len],
        alpha: None,
        init_mode: InitMode::IdentityVsNoisy,
        config: *cfg,
        diagnostics: CgmmDiagnostics::default(),
        log_likelihood_trace: Vec::new(),
    };
    update_phi(&mut state, block);
    Ok(state)
}

fn update_phi(state: &mut CgmmState, block: &MultichannelSpectrum) {
    let m = state.channels as f64;
    for f in 0..state.bins {
        let (inv, singular) = state.inverses_at(f);
        state.diagnostics.singular_covariances += singular;
        for (k, ik) in inv.iter().enumerate() {
            for t in 0..state.frames {
                let v = ik.quad_form(block.bin(f, t)) / m;
                state.set_phi(k, f, t, v);
            }
        }
    }
}

/// Initializes and runs `cfg.iterations` E/M alternations, recording the
/// log-likelihood after initialization and after each iteration.
pub fn run_em(
    block: &MultichannelSpectrum,
    masks: Option<&[MaskTensor]>,
    prior: bool,
    cfg: &CgmmConfig,
) -> Result<CgmmState> {
    let mut state = init_cgmm(block, masks, prior, cfg)?;
    let ll = state.log_likelihood(block)?;
    state.log_likelihood_trace.push(ll);
    for _ in 0..cfg.iterations {
        state.e_step(block)?;
        state.m_step(block)?;
        let ll = state.log_likelihood(block)?;
        state.log_likelihood_trace.push(ll);
    }
    Ok(state)
}
