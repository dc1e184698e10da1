use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use beamkit::io::{read_mask, read_wav};
use beamkit::simulate::si_snr;

const BIN: &str = env!("CARGO_BIN_EXE_beamkit");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("scene{seed}"));
    let o = run(&[
        "simulate",
        "--out-dir",
        out.to_str().unwrap(),
        "--duration",
        "2",
        "--seed",
        seed,
        "--snr-db",
        "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_writes_complete_deterministic_scene() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "3");
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "interference.msk",
            "interference.wav",
            "manifest.txt",
            "masks.msk",
            "mixture.wav",
            "noise.msk",
            "noise.wav",
            "speech.msk",
            "target.msk",
            "target.wav"
        ]
    );
    let b = dir.path().join("again");
    std::fs::rename(&a, &b).unwrap();
    let a = simulate(dir.path(), "3");
    for name in &names {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = simulate(dir.path(), "4");
    assert_ne!(std::fs::read(a.join("mixture.wav")).unwrap(), std::fs::read(c.join("mixture.wav")).unwrap());
    assert_eq!(read_mask(&a.join("masks.msk")).unwrap().len(), 3);
}

#[test]
fn beamform_d3_reports_blocks_and_rtf() {
    let dir = tempfile::tempdir().unwrap();
    let s = simulate(dir.path(), "1");
    let out = dir.path().join("d3.wav");
    let post = dir.path().join("post.msk");
    let o = run(&[
        "beamform", "--input", p(&s.join("mixture.wav")), "--output", p(&out),
        "--beamformer", "cgmm3", "--prior", "true", "--later-ss", "post-em",
        "--target-mask", p(&s.join("target.msk")),
        "--interference-mask", p(&s.join("interference.msk")),
        "--noise-mask", p(&s.join("noise.msk")),
        "--posterior-out", p(&post),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let blocks: Vec<&str> = text.lines().filter(|l| l.starts_with("block=")).collect();
    assert_eq!(blocks.len(), 1);
    assert_eq!(blocks[0].split(" loglik=").nth(1).unwrap().split(' ').next().unwrap().split(',').count(), 11);
    assert!(text.lines().any(|l| l.starts_with("elapsed_s=") && l.contains(" rtf=")));
    assert_eq!(read_wav(&out).unwrap().len(), read_wav(&s.join("mixture.wav")).unwrap().len());
    assert_eq!(read_mask(&post).unwrap().len(), 3);
}

#[test]
fn missing_mask_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let s = simulate(dir.path(), "1");
    let o = run(&[
        "beamform", "--input", p(&s.join("mixture.wav")), "--output", p(&dir.path().join("x.wav")),
        "--beamformer", "cgmm3",
        "--target-mask", p(&s.join("target.msk")),
        "--interference-mask", p(&s.join("interference.msk")),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--noise-mask"), "{}", stderr(&o));
    assert!(!dir.path().join("x.wav").exists());
}

#[test]
fn zero_iterations_and_config_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let s = simulate(dir.path(), "1");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "beamformer=cgmm3\niterations=5\ntarget_mask={}\ninterference_mask={}\nnoise_mask={}\n",
            p(&s.join("target.msk")),
            p(&s.join("interference.msk")),
            p(&s.join("noise.msk"))
        ),
    )
    .unwrap();
    let o = run(&[
        "beamform", "--input", p(&s.join("mixture.wav")), "--output", p(&dir.path().join("y.wav")),
        "--config", p(&cfg), "--iterations", "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("block=")).unwrap().to_string();
    assert_eq!(line.split(" loglik=").nth(1).unwrap().split(' ').next().unwrap().split(',').count(), 1);

    std::fs::write(&cfg, "unknown_key=1\n").unwrap();
    let o = run(&[
        "beamform", "--input", p(&s.join("mixture.wav")), "--output", p(&dir.path().join("y.wav")),
        "--config", p(&cfg),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn eval_scores_and_renders() {
    let dir = tempfile::tempdir().unwrap();
    let s = simulate(dir.path(), "2");
    let target = p(&s.join("target.wav")).to_string();
    let o = run(&["eval", "--ref", &target, "--est", &target]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "si_snr_db=60.0000");

    let mix = p(&s.join("mixture.wav")).to_string();
    let o = run(&["eval", "--ref", &target, "--est", &mix, "--est-channel", "2"]);
    let printed: f64 = stdout(&o).trim().strip_prefix("si_snr_db=").unwrap().parse().unwrap();
    let want = si_snr(
        read_wav(&s.join("target.wav")).unwrap().channel(0),
        read_wav(&s.join("mixture.wav")).unwrap().channel(2),
    )
    .unwrap();
    assert!((printed - want).abs() < 5e-5);

    let short = dir.path().join("short");
    let o = run(&["simulate", "--out-dir", p(&short), "--duration", "1"]);
    assert!(o.status.success());
    let o = run(&["eval", "--ref", &target, "--est", p(&short.join("target.wav"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("length mismatch"));

    let png_path = dir.path().join("masks.png");
    let o = run(&["eval", "--mask-png", p(&s.join("masks.msk")), "--png-out", p(&png_path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&png_path).unwrap()));
    let reader = decoder.read_info().unwrap();
    let info = reader.info();
    let masks = read_mask(&s.join("masks.msk")).unwrap();
    assert_eq!(info.width as usize, masks[0].num_frames());
    assert_eq!(info.height as usize, 3 * masks[0].num_bins());
}

#[test]
fn bad_thread_count_is_rejected() {
    let o = Command::new(BIN)
        .args(["eval", "--ref", "a", "--est", "b"])
        .env("BEAMKIT_THREADS", "many")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("BEAMKIT_THREADS"));
}

#[test]
fn ablation_script_reaches_every_system() {
    let dir = tempfile::tempdir().unwrap();
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/ablation.sh");
    let o = Command::new("bash")
        .arg(&script)
        .arg(dir.path())
        .arg("2")
        .env("BEAMKIT", BIN)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let ids: Vec<String> = stdout(&o)
        .lines()
        .map(|l| l.split(' ').next().unwrap().to_string())
        .collect();
    assert_eq!(
        ids,
        ["A0", "A1", "A2", "A3", "B1", "B2", "B3", "B4", "C0", "C1", "C2", "C3", "C4", "D1", "D2", "D3"]
    );
    assert!(stdout(&o).lines().all(|l| l.contains("si_snr_db=")));
}
