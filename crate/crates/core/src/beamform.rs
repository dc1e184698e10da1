//! Spatial covariance estimation, steering vectors, MVDR weights and a naive
//! delay-and-sum baseline.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{hermitian_solve, principal_eigenvector, HermitianMatrix};
use crate::mask::MaskTensor;
use crate::spectral::MultichannelSpectrum;

/// Masks whose total weight at a frequency falls below this are treated as
/// absent there.
pub const MIN_MASK_MASS: f64 = 1e-8;

const REFERENCE_MIN_MAGNITUDE: f64 = 1e-8;

/// One `M x M` spatial covariance per frequency bin.
#[derive(Debug, Clone)]
pub struct SpatialCovarianceSet {
    pub matrices: Vec<HermitianMatrix>,
    pub frame_count: usize,
    /// Bins where a mask-weighted estimate fell back to the unweighted one.
    pub fallback_bins: Vec<usize>,
}

impl SpatialCovarianceSet {
    pub fn num_bins(&self) -> usize {
        self.matrices.len()
    }

    pub fn dim(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.dim())
    }
}

/// Per-frequency steering vectors `h_f`, normalized so the reference entry is
/// one (or the largest entry, when the reference is degenerate).
#[derive(Debug, Clone)]
pub struct SteeringVectors {
    pub vectors: Vec<Vec<Complex64>>,
    pub reference_channel: usize,
    /// Bins where power iteration hit its iteration cap.
    pub unconverged_bins: Vec<usize>,
    /// Bins normalized by a channel other than the reference.
    pub renormalized_bins: Vec<usize>,
}

/// MVDR filter and the steering vectors it was built for.
#[derive(Debug, Clone)]
pub struct BeamformerWeights {
    /// `[F x M]`
    pub w: Vec<Vec<Complex64>>,
    /// `[F x M]`
    pub h: Vec<Vec<Complex64>>,
    pub reference_channel: usize,
    /// Bins where the noisy covariance was singular and `h / |h|^2` was used.
    pub fallback_bins: Vec<usize>,
}

impl BeamformerWeights {
    /// `max_f |w_f^H h_f - 1|`.
    pub fn max_distortion(&self) -> f64 {
        self.w
            .iter()
            .zip(&self.h)
            .map(|(w, h)| (dot_h(w, h) - Complex64::new(1.0, 0.0)).norm())
            .fold(0.0, f64::max)
    }
}

/// `a^H b`
#[inline]
pub(crate) fn dot_h(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn unweighted_at(block: &MultichannelSpectrum, f: usize) -> HermitianMatrix {
    let mut r = HermitianMatrix::zeros(block.num_channels());
    let t_count = block.num_frames();
    for t in 0..t_count {
        r.add_outer_upper(block.bin(f, t), 1.0);
    }
    r.mirror_upper();
    r.scale(1.0 / t_count as f64);
    r
}

/// `R_f = (1/T) sum_t y y^H` for every frequency.
pub fn noisy_covariance(block: &MultichannelSpectrum) -> SpatialCovarianceSet {
    let matrices = (0..block.num_bins())
        .into_par_iter()
        .map(|f| unweighted_at(block, f))
        .collect();
    SpatialCovarianceSet {
        matrices,
        frame_count: block.num_frames(),
        fallback_bins: Vec::new(),
    }
}

/// `R_f = sum_t m y y^H / sum_t m`; bins where the mask is (nearly) empty
/// use the unweighted estimate and are listed in `fallback_bins`.
pub fn weighted_covariance(
    block: &MultichannelSpectrum,
    mask: &MaskTensor,
) -> Result<SpatialCovarianceSet> {
    mask.check_shape(block.num_bins(), block.num_frames())?;
    let per_bin: Vec<(HermitianMatrix, bool)> = (0..block.num_bins())
        .into_par_iter()
        .map(|f| {
            let weights = mask.row(f);
            let mass: f64 = weights.iter().sum();
            if mass < MIN_MASK_MASS {
                return (unweighted_at(block, f), true);
            }
            let mut r = HermitianMatrix::zeros(block.num_channels());
            for (t, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    r.add_outer_upper(block.bin(f, t), w);
                }
            }
            r.mirror_upper();
            r.scale(1.0 / mass);
            (r, false)
        })
        .collect();
    let fallback_bins = per_bin
        .iter()
        .enumerate()
        .filter_map(|(f, (_, fb))| fb.then_some(f))
        .collect();
    Ok(SpatialCovarianceSet {
        matrices: per_bin.into_iter().map(|(r, _)| r).collect(),
        frame_count: block.num_frames(),
        fallback_bins,
    })
}

/// Principal eigenvector of each `R_f`, scaled so `h[reference] = 1`.
pub fn steering_vector(r: &SpatialCovarianceSet, reference: usize) -> Result<SteeringVectors> {
    let m = r.dim();
    if reference >= m {
        return Err(Error::InvalidArgument(format!(
            "reference channel {reference} out of range for {m} channels"
        )));
    }
    let per_bin: Vec<(Vec<Complex64>, bool, bool)> = r
        .matrices
        .par_iter()
        .map(|rf| {
            let eig = principal_eigenvector(rf);
            let mut h = eig.vector;
            let mut anchor = reference;
            if h[reference].norm() < REFERENCE_MIN_MAGNITUDE {
                anchor = (0..m)
                    .max_by(|&a, &b| h[a].norm().total_cmp(&h[b].norm()))
                    .unwrap_or(reference);
            }
            let scale = h[anchor];
            if scale.norm() > 0.0 {
                h.iter_mut().for_each(|x| *x /= scale);
            }
            (h, !eig.converged, anchor != reference)
        })
        .collect();
    let mut out = SteeringVectors {
        vectors: Vec::with_capacity(per_bin.len()),
        reference_channel: reference,
        unconverged_bins: Vec::new(),
        renormalized_bins: Vec::new(),
    };
    for (f, (h, unconverged, renormalized)) in per_bin.into_iter().enumerate() {
        if unconverged {
            out.unconverged_bins.push(f);
        }
        if renormalized {
            out.renormalized_bins.push(f);
        }
        out.vectors.push(h);
    }
    Ok(out)
}

/// MVDR weights `w_f = R~^-1 h_f / (h_f^H R~^-1 h_f)`.
///
/// Frequencies whose loaded noisy covariance is singular get the matched
/// filter `h / |h|^2`, which is still distortionless.
pub fn mvdr_weights(
    r_y: &SpatialCovarianceSet,
    steering: &SteeringVectors,
    loading: f64,
) -> Result<BeamformerWeights> {
    if r_y.num_bins() != steering.vectors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} covariances for {} steering vectors",
            r_y.num_bins(),
            steering.vectors.len()
        )));
    }
    let per_bin: Vec<(Vec<Complex64>, bool)> = r_y
        .matrices
        .par_iter()
        .zip(steering.vectors.par_iter())
        .map(|(r, h)| {
            let matched = || {
                let n: f64 = h.iter().map(|c| c.norm_sqr()).sum();
                h.iter().map(|c| c / n).collect::<Vec<_>>()
            };
            match hermitian_solve(r, h, loading) {
                Ok(x) => {
                    // normalizing by conj(x^H h) makes w^H h = 1 to rounding
                    let s = dot_h(&x, h);
                    if s.norm() > 0.0 && s.re.is_finite() && s.im.is_finite() {
                        let s = s.conj();
                        (x.into_iter().map(|c| c / s).collect(), false)
                    } else {
                        (matched(), true)
                    }
                }
                Err(_) => (matched(), true),
            }
        })
        .collect();
    let fallback_bins = per_bin
        .iter()
        .enumerate()
        .filter_map(|(f, (_, fb))| fb.then_some(f))
        .collect();
    Ok(BeamformerWeights {
        w: per_bin.into_iter().map(|(w, _)| w).collect(),
        h: steering.vectors.clone(),
        reference_channel: steering.reference_channel,
        fallback_bins,
    })
}

/// `s(f, t) = w_f^H y(f, t)`; returns a one-channel spectrum.
pub fn apply_beamformer(
    block: &MultichannelSpectrum,
    weights: &BeamformerWeights,
) -> Result<MultichannelSpectrum> {
    if weights.w.len() != block.num_bins()
        || weights.w.iter().any(|w| w.len() != block.num_channels())
    {
        return Err(Error::ShapeMismatch(format!(
            "weights do not fit a {}-channel, {}-bin spectrum",
            block.num_channels(),
            block.num_bins()
        )));
    }
    let mut out = block.zeros_like(1, block.num_frames());
    out.frequency_rows_mut()
        .zip(&weights.w)
        .enumerate()
        .for_each(|(f, (row, w))| {
            for (t, s) in row.iter_mut().enumerate() {
                *s = dot_h(w, block.bin(f, t));
            }
        });
    Ok(out)
}

/// `(1/M) sum_m exp(+j 2 pi f tau_m) y_m(f, t)`, undoing per-channel delays
/// `tau_m` given in seconds.
pub fn delay_and_sum(block: &MultichannelSpectrum, delays: &[f64]) -> Result<MultichannelSpectrum> {
    let m = block.num_channels();
    if delays.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "{} delays for {m} channels",
            delays.len()
        )));
    }
    if delays.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("delays".into()));
    }
    let mut out = block.zeros_like(1, block.num_frames());
    let inv_m = 1.0 / m as f64;
    for (f, row) in out.frequency_rows_mut().enumerate() {
        let hz = block.bin_frequency(f);
        let phasors: Vec<Complex64> = delays
            .iter()
            .map(|tau| Complex64::from_polar(inv_m, 2.0 * PI * hz * tau))
            .collect();
        for (t, s) in row.iter_mut().enumerate() {
            *s = block
                .bin(f, t)
                .iter()
                .zip(&phasors)
                .map(|(y, p)| y * p)
                .sum();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DEFAULT_LOADING;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_block(m: usize, f: usize, t: usize, seed: u64) -> MultichannelSpectrum {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultichannelSpectrum::from_fn(m, f, t, 256, 2 * (f - 1), 16_000, |_, _, _| {
            c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn random_mask(f: usize, t: usize, seed: u64) -> MaskTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MaskTensor::from_fn(f, t, |_, _| rng.random_range(0.0..1.0))
    }

    fn assert_close(a: &HermitianMatrix, b: &[Vec<Complex64>], tol: f64) {
        for (i, row) in b.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((a.get(i, j) - v).norm() <= tol, "({i},{j})");
            }
        }
    }

    // scalar triple loop
    fn loop_covariance(
        block: &MultichannelSpectrum,
        f: usize,
        weight: impl Fn(usize) -> f64,
    ) -> Vec<Vec<Complex64>> {
        let m = block.num_channels();
        let mut acc = vec![vec![c(0.0, 0.0); m]; m];
        let mut mass = 0.0;
        for t in 0..block.num_frames() {
            let w = weight(t);
            mass += w;
            for i in 0..m {
                for j in 0..m {
                    acc[i][j] += block.get(i, f, t) * block.get(j, f, t).conj() * w;
                }
            }
        }
        for row in &mut acc {
            for v in row.iter_mut() {
                *v /= mass;
            }
        }
        acc
    }

    #[test]
    fn noisy_covariance_cases() {
        let block = random_block(2, 4, 1, 1);
        let r = noisy_covariance(&block);
        for f in 0..4 {
            let y = block.bin(f, 0);
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(r.matrices[f].get(i, j), y[i] * y[j].conj());
                }
            }
        }
        let zero = MultichannelSpectrum::zeros(3, 5, 7, 256, 8, 16_000);
        assert!(noisy_covariance(&zero)
            .matrices
            .iter()
            .all(|m| m == &HermitianMatrix::zeros(3)));

        let block = random_block(2, 4, 16, 2);
        let r = noisy_covariance(&block);
        for f in 0..4 {
            assert_close(&r.matrices[f], &loop_covariance(&block, f, |_| 1.0), 1e-12);
        }
    }

    #[test]
    fn weighted_covariance_cases() {
        let block = random_block(3, 5, 9, 3);
        let ones = weighted_covariance(&block, &MaskTensor::ones(5, 9)).unwrap();
        let plain = noisy_covariance(&block);
        for f in 0..5 {
            let diff: f64 = ones.matrices[f]
                .entries()
                .iter()
                .zip(plain.matrices[f].entries())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(diff < 1e-14);
        }

        let one_hot = MaskTensor::from_fn(5, 9, |_, t| if t == 4 { 1.0 } else { 0.0 });
        let r = weighted_covariance(&block, &one_hot).unwrap();
        for f in 0..5 {
            let y = block.bin(f, 4);
            assert_eq!(r.matrices[f].get(0, 2), y[0] * y[2].conj());
        }

        let mask = random_mask(5, 9, 4);
        let r = weighted_covariance(&block, &mask).unwrap();
        for f in 0..5 {
            assert_close(&r.matrices[f], &loop_covariance(&block, f, |t| mask.get(f, t)), 1e-12);
        }

        let empty = MaskTensor::from_fn(5, 9, |f, _| if f == 2 { 0.0 } else { 0.5 });
        let r = weighted_covariance(&block, &empty).unwrap();
        assert_eq!(r.fallback_bins, vec![2]);
        assert_eq!(r.matrices[2], plain.matrices[2]);

        assert!(weighted_covariance(&block, &MaskTensor::ones(5, 8)).is_err());
    }

    #[test]
    fn steering_rank_one_and_identity() {
        let h = [c(1.0, 0.0), c(0.0, 1.0)];
        let set = SpatialCovarianceSet {
            matrices: vec![HermitianMatrix::outer(&h), HermitianMatrix::identity(2)],
            frame_count: 1,
            fallback_bins: vec![],
        };
        let s = steering_vector(&set, 0).unwrap();
        assert!((s.vectors[0][0] - h[0]).norm() < 1e-12);
        assert!((s.vectors[0][1] - h[1]).norm() < 1e-12);
        assert_eq!(s.vectors[1], vec![c(1.0, 0.0), c(0.0, 0.0)]);
        assert!(steering_vector(&set, 2).is_err());
    }

    #[test]
    fn steering_falls_back_when_reference_is_silent() {
        let set = SpatialCovarianceSet {
            matrices: vec![HermitianMatrix::from_diagonal(&[0.0, 3.0, 1.0])],
            frame_count: 1,
            fallback_bins: vec![],
        };
        let s = steering_vector(&set, 0).unwrap();
        assert_eq!(s.renormalized_bins, vec![0]);
        assert!((s.vectors[0][1] - c(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn steering_recovers_noisy_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let h: Vec<Complex64> = std::iter::once(c(1.0, 0.0))
                .chain((0..3).map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..6.28))))
                .collect();
            let mut r = HermitianMatrix::outer(&h).scaled(10.0);
            for _ in 0..8 {
                let v: Vec<Complex64> = (0..4)
                    .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 1e-3)
                    .collect();
                r.add_outer(&v, 1.0);
            }
            let set = SpatialCovarianceSet {
                matrices: vec![r],
                frame_count: 1,
                fallback_bins: vec![],
            };
            let est = &steering_vector(&set, 0).unwrap().vectors[0];
            let cos = dot_h(&h, est).norm()
                / (dot_h(&h, &h).re.sqrt() * dot_h(est, est).re.sqrt());
            assert!(cos.min(1.0).acos() < 1e-3);
        }
    }

    #[test]
    fn mvdr_closed_forms() {
        let set = |m: HermitianMatrix| SpatialCovarianceSet {
            matrices: vec![m],
            frame_count: 1,
            fallback_bins: vec![],
        };
        let steer = |h: Vec<Complex64>| SteeringVectors {
            vectors: vec![h],
            reference_channel: 0,
            unconverged_bins: vec![],
            renormalized_bins: vec![],
        };

        let w = mvdr_weights(&set(HermitianMatrix::from_diagonal(&[2.5])), &steer(vec![c(0.0, 2.0)]), 0.0)
            .unwrap();
        assert!((w.w[0][0] - c(0.0, 0.5)).norm() < 1e-15);

        let w = mvdr_weights(
            &set(HermitianMatrix::identity(2)),
            &steer(vec![c(1.0, 0.0), c(0.0, 0.0)]),
            0.0,
        )
        .unwrap();
        assert_eq!(w.w[0], vec![c(1.0, 0.0), c(0.0, 0.0)]);

        let w = mvdr_weights(
            &set(HermitianMatrix::from_diagonal(&[2.0, 1.0])),
            &steer(vec![c(1.0, 0.0), c(1.0, 0.0)]),
            0.0,
        )
        .unwrap();
        assert!((w.w[0][0] - c(1.0 / 3.0, 0.0)).norm() < 1e-15);
        assert!((w.w[0][1] - c(2.0 / 3.0, 0.0)).norm() < 1e-15);
        assert!(w.max_distortion() < 1e-15);

        let w = mvdr_weights(
            &set(HermitianMatrix::zeros(2)),
            &steer(vec![c(1.0, 0.0), c(0.0, 1.0)]),
            DEFAULT_LOADING,
        )
        .unwrap();
        assert_eq!(w.fallback_bins, vec![0]);
        assert!(w.max_distortion() < 1e-15);
    }

    #[test]
    fn beamformer_application() {
        let block = random_block(3, 4, 6, 5);
        let sel = BeamformerWeights {
            w: vec![vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]; 4],
            h: vec![vec![c(1.0, 0.0); 3]; 4],
            reference_channel: 0,
            fallback_bins: vec![],
        };
        assert_eq!(apply_beamformer(&block, &sel).unwrap(), block.select_channel(0));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w: Vec<Vec<Complex64>> = (0..4)
            .map(|_| (0..3).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect())
            .collect();
        let bw = BeamformerWeights {
            w: w.clone(),
            h: w.clone(),
            reference_channel: 0,
            fallback_bins: vec![],
        };
        let out = apply_beamformer(&block, &bw).unwrap();
        for f in 0..4 {
            for t in 0..6 {
                let mut acc = c(0.0, 0.0);
                for m in 0..3 {
                    acc += w[f][m].conj() * block.get(m, f, t);
                }
                assert!((out.get(0, f, t) - acc).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn distortionless_output_on_noise_free_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m, f, t) = (4, 3, 20);
        let h: Vec<Vec<Complex64>> = (0..f)
            .map(|_| {
                std::iter::once(c(1.0, 0.0))
                    .chain((1..m).map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..6.28))))
                    .collect()
            })
            .collect();
        let s: Vec<Vec<Complex64>> = (0..f)
            .map(|_| (0..t).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect())
            .collect();
        let block = MultichannelSpectrum::from_fn(m, f, t, 256, 4, 16_000, |mm, ff, tt| h[ff][mm] * s[ff][tt]);
        let noise = random_block(m, f, t, 10);
        let r_y = noisy_covariance(&noise);
        let steer = SteeringVectors {
            vectors: h.clone(),
            reference_channel: 0,
            unconverged_bins: vec![],
            renormalized_bins: vec![],
        };
        let w = mvdr_weights(&r_y, &steer, DEFAULT_LOADING).unwrap();
        let out = apply_beamformer(&block, &w).unwrap();
        for ff in 0..f {
            for tt in 0..t {
                assert!((out.get(0, ff, tt) - s[ff][tt]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn delay_and_sum_cases() {
        let block = random_block(3, 4, 5, 12);
        let avg = delay_and_sum(&block, &[0.0; 3]).unwrap();
        for f in 0..4 {
            for t in 0..5 {
                let mean = block.bin(f, t).iter().sum::<Complex64>() / 3.0;
                assert!((avg.get(0, f, t) - mean).norm() < 1e-15);
            }
        }
        let mono = random_block(1, 4, 5, 13);
        assert_eq!(delay_and_sum(&mono, &[0.0]).unwrap(), mono);
        assert!(delay_and_sum(&block, &[0.0; 2]).is_err());
        assert!(delay_and_sum(&block, &[0.0, f64::NAN, 0.0]).is_err());
    }
}
