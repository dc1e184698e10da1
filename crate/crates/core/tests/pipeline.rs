use beamkit::beamform::{mvdr_weights, noisy_covariance, steering_vector, weighted_covariance};
use beamkit::cgmm::LAMBDA_INIT_FLOOR;
use beamkit::mask::MaskTensor;
use beamkit::pipeline::*;
use beamkit::simulate::{oracle_irm, synthesize_scene, SceneConfig};
use beamkit::spectral::{concat_blocks, stft, AudioBuffer, StftConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(seconds: f64) -> (AudioBuffer, PipelineMasks) {
    let cfg = SceneConfig {
        duration_s: seconds,
        seed: 11,
        snr_db: 5.0,
        ..Default::default()
    };
    let scene = synthesize_scene(&cfg).unwrap();
    let [t, i, n] = oracle_irm(&scene, &StftConfig::default()).unwrap();
    let masks = PipelineMasks {
        target: Some(t),
        interference: Some(i),
        speech: Some(n.complement()),
        noise: Some(n),
    };
    (scene.mixture, masks)
}

#[test]
fn single_channel_mvdr_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..16000).map(|_| rng.random_range(-0.5..0.5)).collect();
    let audio = AudioBuffer::mono(x.clone(), 16000).unwrap();
    let frames = StftConfig::default().num_frames(x.len()).unwrap();
    let masks = PipelineMasks {
        speech: Some(MaskTensor::ones(257, frames)),
        ..Default::default()
    };
    let cfg = PipelineConfig {
        beamformer: BeamformerKind::Mvdr,
        ..Default::default()
    };
    let out = run_pipeline(&audio, &cfg, &masks).unwrap();
    assert_eq!(out.audio.len(), x.len());
    let (mut err, mut energy) = (0.0, 0.0);
    for n in 512..x.len() - 512 {
        err += (out.audio.channel(0)[n] - x[n]).powi(2);
        energy += x[n] * x[n];
    }
    assert!((err / energy).sqrt() < 1e-6);
}

#[test]
fn output_length_matches_input() {
    let (audio, masks) = scene(2.345);
    for (sys, cfg) in ablation_systems().into_iter().filter(|(s, _)| ["A0", "B4", "D3"].contains(&s.id)) {
        let out = run_pipeline(&audio, &cfg, &masks).unwrap();
        assert_eq!(out.audio.len(), audio.len(), "{}", sys.id);
        assert_eq!(out.audio.num_channels(), 1);
    }
}

#[test]
fn blocks_are_processed_independently() {
    // 1024 frames split as 2 x 512 equals processing each half on its own.
    let (audio, masks) = scene(16.4);
    let stft_cfg = StftConfig::default();
    let spec = stft(&audio, &stft_cfg).unwrap().slice_frames(0..1024);
    let masks = PipelineMasks {
        target: masks.target.map(|m| m.slice_frames(0..1024)),
        interference: masks.interference.map(|m| m.slice_frames(0..1024)),
        noise: masks.noise.map(|m| m.slice_frames(0..1024)),
        speech: masks.speech.map(|m| m.slice_frames(0..1024)),
    };
    let cfg = ablation_systems().into_iter().find(|(s, _)| s.id == "D2").unwrap().1;
    let (joined, _, reports) = process_spectrum(&spec, &cfg, &masks).unwrap();
    assert_eq!(reports.len(), 2);
    let halves: Vec<_> = [0..512, 512..1024]
        .into_iter()
        .map(|r| {
            let part = |m: &Option<MaskTensor>| m.as_ref().map(|m| m.slice_frames(r.clone()));
            let sub = PipelineMasks {
                target: part(&masks.target),
                interference: part(&masks.interference),
                noise: part(&masks.noise),
                speech: part(&masks.speech),
            };
            process_block(&spec.slice_frames(r.clone()), &cfg, &sub).unwrap().spectrum
        })
        .collect();
    assert_eq!(joined, concat_blocks(&halves).unwrap());
}

#[test]
fn mvdr_system_is_distortionless() {
    let (audio, masks) = scene(3.0);
    let spec = stft(&audio, &StftConfig::default()).unwrap();
    let speech = masks.speech.as_ref().unwrap();
    let h = steering_vector(&weighted_covariance(&spec, speech).unwrap(), 0).unwrap();
    let w = mvdr_weights(&noisy_covariance(&spec), &h, 1e-6).unwrap();
    assert!(w.max_distortion() < 1e-8);
}

#[test]
fn cgmm3_without_iterations_is_mvdr_on_initial_posteriors() {
    let (audio, masks) = scene(3.0);
    let spec = stft(&audio, &StftConfig::default()).unwrap();
    let cgmm = PipelineConfig {
        beamformer: BeamformerKind::Cgmm3,
        iterations: 0,
        ..Default::default()
    };
    let out = process_spectrum(&spec, &cgmm, &masks).unwrap().0;

    let m = [
        masks.target.as_ref().unwrap(),
        masks.interference.as_ref().unwrap(),
        masks.noise.as_ref().unwrap(),
    ];
    let floored = |k: usize, f, t| m[k].get(f, t).max(LAMBDA_INIT_FLOOR);
    let lambda0 = MaskTensor::from_fn(spec.num_bins(), spec.num_frames(), |f, t| {
        floored(0, f, t) / (floored(0, f, t) + floored(1, f, t) + floored(2, f, t))
    });
    let mvdr = PipelineConfig {
        beamformer: BeamformerKind::Mvdr,
        steer_mask: SteerMask::Target,
        ..Default::default()
    };
    let expected = process_spectrum(
        &spec,
        &mvdr,
        &PipelineMasks {
            target: Some(lambda0),
            ..Default::default()
        },
    )
    .unwrap()
    .0;
    let mut worst: f64 = 0.0;
    for (a, b) in out.data().iter().zip(expected.data()) {
        worst = worst.max((a - b).norm() / b.norm().max(1e-12));
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn posteriors_cover_the_whole_input() {
    let (audio, masks) = scene(9.0);
    let cfg = ablation_systems().into_iter().find(|(s, _)| s.id == "D3").unwrap().1;
    let out = run_pipeline(&audio, &cfg, &masks).unwrap();
    let post = out.posteriors.unwrap();
    assert_eq!(post.len(), 3);
    assert_eq!(post[0].num_frames(), masks.target.as_ref().unwrap().num_frames());
    assert_eq!(out.blocks.len(), 2);
    for b in &out.blocks {
        assert_eq!(b.log_likelihood.len(), 11);
    }
}

#[test]
fn missing_masks_are_reported() {
    let (audio, masks) = scene(1.0);
    let cfg = PipelineConfig {
        beamformer: BeamformerKind::Cgmm3,
        ..Default::default()
    };
    let partial = PipelineMasks {
        noise: None,
        ..masks
    };
    let err = run_pipeline(&audio, &cfg, &partial).unwrap_err();
    assert!(err.to_string().contains("noise"), "{err}");
}
