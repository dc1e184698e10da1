use std::fs;

use beamkit::io::*;
use beamkit::mask::MaskTensor;
use beamkit::pipeline::BeamformerKind;
use beamkit::spectral::AudioBuffer;
use beamkit::Error;

#[test]
fn wav_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let ch: Vec<Vec<f64>> = (0..4)
        .map(|m| (0..321).map(|n| (((n * 13 + m * 7) % 97) as f32 / 97.0 - 0.5) as f64).collect())
        .collect();
    let audio = AudioBuffer::new(ch, 16000).unwrap();
    assert_eq!(write_wav(&path, &audio, WavCodec::Float32).unwrap(), 0);
    assert_eq!(read_wav(&path).unwrap(), audio);

    let pcm: Vec<f64> = (-4..4).map(|v| v as f64 * 4096.0 / 32768.0).collect();
    let audio = AudioBuffer::mono(pcm, 8000).unwrap();
    write_wav(&path, &audio, WavCodec::Pcm16).unwrap();
    let back = read_wav(&path).unwrap();
    assert_eq!(back, audio);
    assert_eq!(fs::metadata(&path).unwrap().len(), 44 + 16);
}

#[test]
fn writes_leave_no_temporary_files() {
    let dir = tempfile::tempdir().unwrap();
    let audio = AudioBuffer::mono(vec![0.0; 10], 16000).unwrap();
    write_wav(&dir.path().join("x.wav"), &audio, WavCodec::Pcm16).unwrap();
    write_mask(&dir.path().join("m.msk"), &[MaskTensor::ones(2, 2)]).unwrap();
    let mut names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["m.msk", "x.wav"]);
}

#[test]
fn mask_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.msk");
    let masks: Vec<MaskTensor> = (0..3)
        .map(|k| MaskTensor::from_fn(5, 7, |f, t| (((k + 2 * f + 3 * t) % 11) as f32 / 10.0) as f64))
        .collect();
    write_mask(&path, &masks).unwrap();
    assert_eq!(read_mask(&path).unwrap(), masks);
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"MSK1\x01\x00\x03\x00");
    assert_eq!(bytes.len(), 20 + 3 * 5 * 7 * 4);
}

#[test]
fn readers_report_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.wav");
    assert!(matches!(read_wav(&missing), Err(Error::Io { .. })));
    assert!(matches!(read_mask(&missing), Err(Error::Io { .. })));
    assert!(matches!(load_config(&missing), Err(Error::Io { .. })));
}

#[test]
fn readers_never_panic_on_truncations() {
    let audio = AudioBuffer::new(vec![vec![0.25; 8], vec![-0.5; 8]], 16000).unwrap();
    let (wav, _) = encode_wav(&audio, WavCodec::Pcm16).unwrap();
    for n in 0..wav.len() {
        assert!(decode_wav(&wav[..n]).is_err(), "prefix {n}");
    }
    let msk = encode_masks(&[MaskTensor::ones(2, 3)]).unwrap();
    for n in 0..msk.len() {
        assert!(decode_masks(&msk[..n]).is_err(), "prefix {n}");
    }
}

#[test]
fn config_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(&path, "").unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg.pipeline.block_frames, 512);
    assert_eq!(cfg.pipeline.iterations, 10);

    fs::write(&path, "iterations=0\n").unwrap();
    assert_eq!(load_config(&path).unwrap().pipeline.iterations, 0);

    fs::write(&path, "beamformer=cgmm3\n").unwrap();
    assert!(matches!(load_config(&path), Err(Error::Config(_))));

    fs::write(&path, "beamformer=cgmm3\ntarget_mask=t.msk\ninterference_mask=i.msk\nnoise_mask=n.msk\n").unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg.pipeline.beamformer, BeamformerKind::Cgmm3);
    assert_eq!(cfg.masks.noise.unwrap(), dir.path().join("n.msk"));

    fs::write(&path, "# ok\nbogus=1\n").unwrap();
    match load_config(&path) {
        Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    fs::write(&path, b"iterations=1\n\xff\n").unwrap();
    match load_config(&path) {
        Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}
