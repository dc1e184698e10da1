//! Command-line front end: `beamform`, `simulate` and `eval`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::io::{
    format_key_values, read_config, read_mask, read_wav, write_atomic, write_mask, write_wav,
    MaskPaths, RunConfig, WavCodec,
};
use crate::mask::{MaskRole, MaskTensor};
use crate::pipeline::{
    block_frames_from_ms, reduce_channels, role_name, run_pipeline, BeamformerKind, BlockReport,
    ChannelReduce, LaterSs, PipelineMasks, SteerMask,
};
use crate::simulate::{
    oracle_irm, si_snr, synthesize_scene, uniform_linear_array, NoiseKind, SceneConfig,
};
use crate::spectral::StftConfig;

/// Environment variable capping worker threads; 0 or unset means one per
/// core.
pub const THREADS_ENV: &str = "BEAMKIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "beamkit", version, about = "Mask-supervised CGMM/MVDR beamforming")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance a multichannel recording.
    Beamform(BeamformArgs),
    /// Generate a synthetic scene with oracle masks.
    Simulate(SimulateArgs),
    /// Score an estimate with SI-SNR and/or render masks as PNG.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct BeamformArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// key=value configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beamformer: Option<BeamformerKind>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub prior: Option<bool>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, conflicts_with = "block_ms")]
    pub block_frames: Option<usize>,
    #[arg(long)]
    pub block_ms: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub early_ss: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub early_se: Option<bool>,
    #[arg(long)]
    pub later_ss: Option<LaterSs>,
    #[arg(long)]
    pub target_mask: Option<PathBuf>,
    #[arg(long)]
    pub interference_mask: Option<PathBuf>,
    #[arg(long)]
    pub noise_mask: Option<PathBuf>,
    #[arg(long)]
    pub se_mask: Option<PathBuf>,
    #[arg(long)]
    pub reference_channel: Option<usize>,
    #[arg(long)]
    pub channel_reduce: Option<ChannelReduce>,
    /// Input mask steering plain MVDR and initializing 2-component CGMM.
    #[arg(long)]
    pub steer_mask: Option<SteerMask>,
    /// Relative diagonal loading.
    #[arg(long)]
    pub loading: Option<f64>,
    #[arg(long)]
    pub window_ms: Option<f64>,
    #[arg(long)]
    pub hop_ms: Option<f64>,
    #[arg(long, default_value = "float32")]
    pub codec: WavCodec,
    /// Write the CGMM posteriors (one mask per component) as MSK1.
    #[arg(long)]
    pub posterior_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub mics: usize,
    /// Microphone spacing in metres of the linear array on the x axis.
    #[arg(long, default_value_t = 0.06)]
    pub spacing: f64,
    #[arg(long, default_value_t = 2)]
    pub speakers: usize,
    #[arg(long, default_value_t = 60.0)]
    pub target_azimuth: f64,
    #[arg(long, default_value_t = 120.0)]
    pub interferer_azimuth: f64,
    /// Target-to-noise ratio in dB; `inf` disables noise.
    #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
    pub snr_db: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub sir_db: f64,
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "diffuse")]
    pub noise: NoiseKind,
    #[arg(long, default_value_t = 0)]
    pub reference_channel: usize,
    #[arg(long, default_value = "float32")]
    pub codec: WavCodec,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "ref", requires = "est")]
    pub reference: Option<PathBuf>,
    #[arg(long, requires = "reference")]
    pub est: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub ref_channel: usize,
    #[arg(long, default_value_t = 0)]
    pub est_channel: usize,
    /// MSK1 file to render, masks stacked top to bottom.
    #[arg(long, requires = "png_out")]
    pub mask_png: Option<PathBuf>,
    #[arg(long, requires = "mask_png")]
    pub png_out: Option<PathBuf>,
}

/// Applies `BEAMKIT_THREADS` to the global worker pool.
pub fn configure_threads() -> Result<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .with_context(|| format!("{THREADS_ENV}='{v}' is not a thread count"))?,
        Err(_) => 0,
    };
    // Fails only if a pool already exists, which is harmless.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Beamform(args) => cmd_beamform(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Eval(args) => cmd_eval(&args),
    }
}

fn mask_flag(role: MaskRole) -> &'static str {
    match role {
        MaskRole::Target => "--target-mask",
        MaskRole::Interference => "--interference-mask",
        MaskRole::Noise => "--noise-mask",
        MaskRole::Enhancement => "--se-mask",
    }
}

/// Configuration file (if any) with command-line overrides applied.
pub fn resolve_config(args: &BeamformArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_config(path)?,
        None => RunConfig::default(),
    };
    let p = &mut cfg.pipeline;
    macro_rules! set {
        ($($field:ident).+ <- $arg:expr) => {
            if let Some(v) = $arg.clone() {
                p.$($field).+ = v;
            }
        };
    }
    set!(beamformer <- args.beamformer);
    set!(prior <- args.prior);
    set!(iterations <- args.iterations);
    set!(block_frames <- args.block_frames);
    set!(early_ss <- args.early_ss);
    set!(early_se <- args.early_se);
    set!(later_ss <- args.later_ss);
    set!(reference_channel <- args.reference_channel);
    set!(channel_reduce <- args.channel_reduce);
    set!(steer_mask <- args.steer_mask);
    set!(loading <- args.loading);
    set!(stft.window_ms <- args.window_ms);
    set!(stft.hop_ms <- args.hop_ms);
    if let Some(ms) = args.block_ms {
        p.block_frames = block_frames_from_ms(ms, &p.stft)?;
    }
    let m = &mut cfg.masks;
    for (slot, arg) in [
        (&mut m.target, &args.target_mask),
        (&mut m.interference, &args.interference_mask),
        (&mut m.noise, &args.noise_mask),
        (&mut m.speech, &args.se_mask),
    ] {
        if arg.is_some() {
            slot.clone_from(arg);
        }
    }

    cfg.pipeline.validate()?;
    for role in cfg.pipeline.required_masks() {
        if cfg.masks.get(role).is_none() {
            bail!(
                "beamformer {} with this configuration needs {} (the {} mask)",
                cfg.pipeline.beamformer,
                mask_flag(role),
                role_name(role)
            );
        }
    }
    Ok(cfg)
}

/// Loads a mask file; several masks in one file are per-channel masks and
/// are reduced to one.
fn load_role_mask(path: &Path, reduce: ChannelReduce) -> Result<MaskTensor> {
    let masks = read_mask(path)?;
    Ok(match masks.len() {
        1 => masks.into_iter().next().expect("one mask"),
        _ => reduce_channels(&masks, reduce)?,
    })
}

fn load_masks(paths: &MaskPaths, cfg: &RunConfig) -> Result<PipelineMasks> {
    let mut masks = PipelineMasks::default();
    for role in cfg.pipeline.required_masks() {
        let path = paths.get(role).expect("validated mask path");
        let mask = load_role_mask(path, cfg.pipeline.channel_reduce)
            .with_context(|| format!("loading {} {}", mask_flag(role), path.display()))?;
        masks.set(role, mask);
    }
    Ok(masks)
}

fn format_block(report: &BlockReport) -> String {
    let mut line = format!(
        "block={} start_frame={} frames={}",
        report.index, report.start_frame, report.frames
    );
    if !report.log_likelihood.is_empty() {
        let trace: Vec<String> = report
            .log_likelihood
            .iter()
            .map(|v| format!("{v:.6e}"))
            .collect();
        line += &format!(" loglik={}", trace.join(","));
    }
    if let Some(d) = &report.cgmm {
        line += &format!(
            " low_mass={} invalid_prior={} underflow={} singular={}",
            d.low_mass_components, d.invalid_prior_bins, d.underflow_bins, d.singular_covariances
        );
    }
    line += &format!(
        " mvdr_fallback={} covariance_fallback={} eigen_unconverged={}",
        report.mvdr_fallback_bins, report.covariance_fallback_bins, report.unconverged_eigen_bins
    );
    line
}

pub fn cmd_beamform(args: &BeamformArgs) -> Result<()> {
    let mut cfg = resolve_config(args)?;
    let audio = read_wav(&args.input)?;
    cfg.pipeline.stft.sample_rate = audio.sample_rate();
    let masks = load_masks(&cfg.masks, &cfg)?;

    let start = Instant::now();
    let out = run_pipeline(&audio, &cfg.pipeline, &masks)?;
    let elapsed = start.elapsed().as_secs_f64();

    for report in &out.blocks {
        println!("{}", format_block(report));
    }
    let clipped = write_wav(&args.output, &out.audio, args.codec)?;
    if let Some(path) = &args.posterior_out {
        match &out.posteriors {
            Some(post) => write_mask(path, post)?,
            None => bail!("--posterior-out needs a CGMM beamformer"),
        }
    }
    println!(
        "elapsed_s={elapsed:.4} duration_s={:.4} rtf={:.4} clipped={clipped}",
        audio.duration_s(),
        elapsed / audio.duration_s()
    );
    if clipped > 0 {
        eprintln!("warning: {clipped} output samples clipped to [-1, 1]");
    }
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = SceneConfig {
        mic_positions: uniform_linear_array(args.mics, args.spacing),
        num_speakers: args.speakers,
        azimuths_deg: [args.target_azimuth, args.interferer_azimuth],
        delays: None,
        snr_db: args.snr_db,
        sir_db: args.sir_db,
        sample_rate: args.sample_rate,
        duration_s: args.duration,
        seed: args.seed,
        noise_kind: args.noise,
        reference_channel: args.reference_channel,
        ..SceneConfig::default()
    };
    let scene = synthesize_scene(&cfg)?;
    let [target, interference, noise] =
        oracle_irm(&scene, &StftConfig::with_sample_rate(args.sample_rate))?;
    let speech = noise.complement();

    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = vec![("mixture", "mixture.wav"), ("target_image", "target.wav")];
    write_wav(&dir.join("mixture.wav"), &scene.mixture, args.codec)?;
    write_wav(&dir.join("target.wav"), &scene.images[0], args.codec)?;
    if scene.images.len() > 1 {
        write_wav(&dir.join("interference.wav"), &scene.images[1], args.codec)?;
        files.push(("interference_image", "interference.wav"));
    }
    write_wav(&dir.join("noise.wav"), &scene.noise, args.codec)?;
    files.push(("noise_image", "noise.wav"));
    write_mask(
        &dir.join("masks.msk"),
        &[target.clone(), interference.clone(), noise.clone()],
    )?;
    for (name, mask) in [
        ("target.msk", &target),
        ("interference.msk", &interference),
        ("noise.msk", &noise),
        ("speech.msk", &speech),
    ] {
        write_mask(&dir.join(name), std::slice::from_ref(mask))?;
    }
    files.extend([
        ("masks", "masks.msk"),
        ("target_mask", "target.msk"),
        ("interference_mask", "interference.msk"),
        ("noise_mask", "noise.msk"),
        ("se_mask", "speech.msk"),
    ]);

    let mut manifest: Vec<(String, String)> = vec![
        ("mics".into(), args.mics.to_string()),
        ("spacing_m".into(), args.spacing.to_string()),
        ("speakers".into(), args.speakers.to_string()),
        ("target_azimuth_deg".into(), args.target_azimuth.to_string()),
        ("interferer_azimuth_deg".into(), args.interferer_azimuth.to_string()),
        ("snr_db".into(), args.snr_db.to_string()),
        ("sir_db".into(), args.sir_db.to_string()),
        ("sample_rate".into(), args.sample_rate.to_string()),
        ("duration_s".into(), args.duration.to_string()),
        ("seed".into(), args.seed.to_string()),
        ("noise".into(), args.noise.to_string()),
        ("reference_channel".into(), args.reference_channel.to_string()),
    ];
    for (k, tau) in scene.delays.iter().enumerate() {
        let list: Vec<String> = tau.iter().map(|t| format!("{t:.9e}")).collect();
        manifest.push((format!("delays_s_source{k}"), list.join(",")));
    }
    for (k, v) in &files {
        manifest.push(((*k).into(), (*v).into()));
    }
    write_atomic(
        &dir.join("manifest.txt"),
        format_key_values(&manifest).as_bytes(),
    )?;
    println!("wrote {} files to {}", files.len() + 1, dir.display());
    Ok(())
}

/// Renders masks as one 8-bit grayscale image: masks stacked top to bottom,
/// frequency increasing upwards within each, time to the right.
pub fn render_masks_png(masks: &[MaskTensor]) -> Result<Vec<u8>> {
    let first = masks.first().context("no masks to render")?;
    let (bins, frames) = (first.num_bins(), first.num_frames());
    let height = bins * masks.len();
    let mut pixels = Vec::with_capacity(height * frames);
    for m in masks {
        m.check_shape(bins, frames)?;
        for f in (0..bins).rev() {
            pixels.extend(m.row(f).iter().map(|v| (v * 255.0).round() as u8));
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, frames as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&pixels)?;
    writer.finish()?;
    Ok(out)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if args.reference.is_none() && args.mask_png.is_none() {
        bail!("nothing to do: give --ref/--est and/or --mask-png/--png-out");
    }
    if let (Some(r), Some(e)) = (&args.reference, &args.est) {
        let reference = read_wav(r)?;
        let estimate = read_wav(e)?;
        for (audio, ch, flag) in [
            (&reference, args.ref_channel, "--ref-channel"),
            (&estimate, args.est_channel, "--est-channel"),
        ] {
            if ch >= audio.num_channels() {
                bail!("{flag} {ch} out of range for {} channels", audio.num_channels());
            }
        }
        if reference.len() != estimate.len() {
            bail!(
                "length mismatch: reference has {} samples, estimate {}",
                reference.len(),
                estimate.len()
            );
        }
        let value = si_snr(
            reference.channel(args.ref_channel),
            estimate.channel(args.est_channel),
        )?;
        println!("si_snr_db={value:.4}");
    }
    if let (Some(input), Some(output)) = (&args.mask_png, &args.png_out) {
        let masks = read_mask(input)?;
        write_atomic(output, &render_masks_png(&masks)?)?;
        println!("wrote {}", output.display());
    }
    Ok(())
}
