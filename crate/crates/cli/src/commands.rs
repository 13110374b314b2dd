use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use hdrplus_core::burst_io::{
    derive_noise_params, load_burst, read_metadata, read_raw16, save_burst, write_gray16, write_metadata, write_raw16,
    write_rgb8,
};
use hdrplus_core::finish::finish_pipeline;
use hdrplus_core::merge::MergeConfig;
use hdrplus_core::pipeline::{align_and_merge, AlignMergeOutput};
use hdrplus_core::synthbench::{evaluate_pipeline, synthesize_burst, SynthReport, SynthSpec};
use hdrplus_core::{BayerFrame, BurstMetadata, RawBurst};

use crate::config::{parse_config, PipelineConfig};
use crate::{BenchArgs, Command, Common};

pub const MERGED_FILE: &str = "merged.pgm";
pub const FINAL_FILE: &str = "final.png";
pub const METADATA_FILE: &str = "burst.json";
pub const LOG_FILE: &str = "reproducibility.toml";
pub const REPORT_FILE: &str = "synthbench.txt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const DUMP_DIR: &str = "intermediates";

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Merge { common, .. }
        | Command::Finish { common, .. }
        | Command::Full { common, .. }
        | Command::Synthbench { common, .. } => common,
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    let common = common(cmd);
    let cfg = parse_config(common.config.as_deref(), common.settings())?;
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(|| dispatch(cmd, cfg.clone())),
        None => dispatch(cmd, cfg),
    }
}

fn dispatch(cmd: &Command, cfg: PipelineConfig) -> Result<()> {
    let out = &common(cmd).output;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cmd {
        Command::Merge { burst_dir, .. } => {
            let (cfg, burst) = load(burst_dir, cfg)?;
            write_log(out, "merge", &burst_dir.display().to_string(), &cfg)?;
            merge_to(out, &burst, &cfg)?;
        }
        Command::Full { burst_dir, .. } => {
            let (cfg, burst) = load(burst_dir, cfg)?;
            write_log(out, "full", &burst_dir.display().to_string(), &cfg)?;
            let merged = merge_to(out, &burst, &cfg)?;
            finish_to(out, &merged, burst.meta(), &cfg)?;
        }
        Command::Finish { mosaic, metadata, .. } => {
            let meta_path = match metadata {
                Some(p) => p.clone(),
                None => mosaic.parent().unwrap_or(Path::new(".")).join(METADATA_FILE),
            };
            let meta = read_metadata(&meta_path)?;
            let frame = read_raw16(mosaic, meta.cfa)?;
            let args = format!("{} --metadata {}", mosaic.display(), meta_path.display());
            write_log(out, "finish", &args, &cfg)?;
            finish_to(out, &frame, &meta, &cfg)?;
        }
        Command::Synthbench { bench, .. } => synthbench(out, bench, &cfg)?,
    }
    Ok(())
}

/// Load a burst and pin the reference: flag or config, else metadata.
fn load(dir: &Path, mut cfg: PipelineConfig) -> Result<(PipelineConfig, RawBurst)> {
    let burst = load_burst(dir)?;
    let index = cfg.ref_index.unwrap_or(burst.meta().ref_index);
    cfg.ref_index = Some(index);
    Ok((cfg, burst.with_ref_index(index)?))
}

/// `args` are the subcommand's own arguments; everything else is in the config.
fn write_log(out: &Path, subcommand: &str, args: &str, cfg: &PipelineConfig) -> Result<()> {
    let path = out.join(LOG_FILE);
    let text = format!(
        "# hdrplus {} {subcommand}\n# re-run: hdrplus {subcommand} {args} --config {} -o {}\n{}",
        env!("CARGO_PKG_VERSION"),
        path.display(),
        out.display(),
        cfg.to_toml()
    );
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn merge_to(out: &Path, burst: &RawBurst, cfg: &PipelineConfig) -> Result<BayerFrame> {
    let np = derive_noise_params(burst.meta(), cfg.baseline);
    let result = align_and_merge(burst, &cfg.align, &cfg.merge, &np)?;
    write_raw16(&result.merged, out.join(MERGED_FILE))?;
    // the merged mosaic is a one-frame burst with the same levels and color data
    let meta = BurstMetadata {
        ref_index: 0,
        ..burst.meta().clone()
    };
    write_metadata(&meta, out.join(METADATA_FILE))?;
    if cfg.dump_intermediates {
        dump_intermediates(&out.join(DUMP_DIR), burst, &result)?;
    }
    Ok(result.merged)
}

fn finish_to(out: &Path, frame: &BayerFrame, meta: &BurstMetadata, cfg: &PipelineConfig) -> Result<()> {
    let rgb = finish_pipeline(frame, meta, &cfg.finish)?;
    write_rgb8(&rgb, out.join(FINAL_FILE))?;
    Ok(())
}

/// Pyramid levels as 16-bit PGM, motion fields as CSV and HSV-coded PNG.
/// Files are named by original frame index.
fn dump_intermediates(dir: &Path, burst: &RawBurst, result: &AlignMergeOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let order = burst.processing_order();
    for (&k, pyramid) in order.iter().zip(&result.pyramids) {
        for (l, level) in pyramid.levels().iter().enumerate() {
            let path = dir.join(format!("pyramid_frame{k}_level{l}.pgm"));
            write_gray16(level.width(), level.height(), level.data(), path)?;
        }
    }
    for (&k, levels) in order[1..].iter().zip(&result.fields) {
        for (l, field) in levels.iter().enumerate() {
            field.write_csv(dir.join(format!("motion_frame{k}_level{l}.csv")))?;
            write_rgb8(&field.to_hsv_image(), dir.join(format!("motion_frame{k}_level{l}.png")))?;
        }
    }
    Ok(())
}

fn bench_spec(bench: &BenchArgs, frames: usize) -> SynthSpec {
    let spec = SynthSpec {
        width: bench.width,
        height: bench.height,
        seed: bench.seed,
        ..SynthSpec::default()
    }
    .with_frames(frames);
    if bench.static_scene {
        spec.static_scene()
    } else {
        spec
    }
}

fn synthbench(out: &Path, bench: &BenchArgs, cfg: &PipelineConfig) -> Result<()> {
    let spec = bench_spec(bench, bench.frames);
    let mut args = format!(
        "--n {} --seed {} --width {} --height {}",
        bench.frames, bench.seed, bench.width, bench.height
    );
    if bench.static_scene {
        args += " --static";
    }
    write_log(out, "synthbench", &args, cfg)?;
    let report = evaluate_pipeline(&spec, &cfg.align, &cfg.merge)?;
    let mut text = format!(
        "width={}\nheight={}\nseed={}\ntau={}\ns={}\n",
        spec.width, spec.height, spec.seed, cfg.merge.tau, cfg.merge.spatial_strength
    );
    text += &report.to_key_value();
    let path = out.join(REPORT_FILE);
    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");

    if let Some(dir) = &bench.emit_burst {
        emit_burst(dir, &spec)?;
    }
    if bench.sweep {
        sweep(&out.join(SWEEP_FILE), bench, cfg)?;
    }
    Ok(())
}

fn emit_burst(dir: &Path, spec: &SynthSpec) -> Result<()> {
    let synth = synthesize_burst(spec)?;
    save_burst(&synth.burst, dir)?;
    let meta = synth.burst.meta();
    let clean: Vec<u16> = synth.clean.data().iter().map(|&v| meta.denormalize(v)).collect();
    let frame = BayerFrame::new(spec.width, spec.height, spec.cfa, clean)?;
    write_raw16(&frame, dir.join("clean.pgm"))?;
    Ok(())
}

fn sweep(path: &Path, bench: &BenchArgs, cfg: &PipelineConfig) -> Result<()> {
    let mut csv = String::from("frames,tau,s,psnr_ref,psnr_merged,gain_db,alignment_accuracy\n");
    for &n in &bench.sweep_n {
        let spec = bench_spec(bench, n);
        for &tau in &bench.sweep_tau {
            for &s in &bench.sweep_s {
                let merge = MergeConfig {
                    tau,
                    spatial_strength: s,
                    ..cfg.merge
                };
                let SynthReport {
                    psnr_ref,
                    psnr_merged,
                    gain_db,
                    alignment_accuracy,
                    ..
                } = evaluate_pipeline(&spec, &cfg.align, &merge)?;
                writeln!(
                    csv,
                    "{n},{tau},{s},{psnr_ref:.6},{psnr_merged:.6},{gain_db:.6},{alignment_accuracy:.6}"
                )
                .expect("writing to a String");
            }
        }
    }
    fs::write(path, csv).with_context(|| format!("writing {}", path.display()))
}
