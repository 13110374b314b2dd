use hdrplus_core::align::{AlignmentConfig, MotionField, TileGrid};
use hdrplus_core::burst_io::{derive_noise_params, read_raw16, write_raw16};
use hdrplus_core::finish::{finish_pipeline, FinishConfig};
use hdrplus_core::merge::{merge_burst, MergeConfig};
use hdrplus_core::pipeline::align_and_merge;
use hdrplus_core::synthbench::{psnr, synthesize_burst, SynthSpec};
use hdrplus_core::{BayerFrame, NoiseParams, RawBurst, Rgb8Image};

fn spec() -> SynthSpec {
    SynthSpec {
        width: 384,
        height: 256,
        ..SynthSpec::default()
    }
    .with_frames(6)
}

fn rgb_psnr(a: &Rgb8Image, b: &Rgb8Image) -> f64 {
    let f = |i: &Rgb8Image| i.data.iter().map(|&v| v as f64 / 255.0).collect::<Vec<_>>();
    psnr(&f(a), &f(b), 1.0)
}

#[test]
fn tiny_tau_returns_the_reference() {
    let synth = synthesize_burst(&spec()).unwrap();
    let cfg = MergeConfig {
        tau: 1e-12,
        ..Default::default()
    };
    let np = derive_noise_params(synth.burst.meta(), NoiseParams::DEFAULT_BASELINE);
    let strict = MergeConfig {
        spatial_strength: 0.0,
        ..cfg
    };
    let out = align_and_merge(&synth.burst, &AlignmentConfig::default(), &strict, &np).unwrap();
    assert_eq!(&out.merged, synth.burst.reference());
}

#[test]
fn remerging_a_written_result_with_itself_is_idempotent() {
    let synth = synthesize_burst(&spec()).unwrap();
    let meta = synth.burst.meta().clone();
    let np = derive_noise_params(&meta, NoiseParams::DEFAULT_BASELINE);
    let out = align_and_merge(&synth.burst, &AlignmentConfig::default(), &MergeConfig::default(), &np).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("merged.pgm");
    write_raw16(&out.merged, &path).unwrap();
    let reloaded = read_raw16(&path, meta.cfa).unwrap();
    assert_eq!(reloaded, out.merged);

    let stack = RawBurst::new(vec![reloaded.clone(); 4], meta).unwrap();
    let grid = TileGrid::covering(reloaded.width() / 2, reloaded.height() / 2, 16, 3);
    let fields = vec![MotionField::zeros(grid); 3];
    let cfg = MergeConfig {
        tau: 1e-12,
        spatial_strength: 0.0,
        ..Default::default()
    };
    assert_eq!(merge_burst(&stack, &fields, &np, &cfg).unwrap(), reloaded);
}

#[test]
fn finishing_keeps_the_merge_advantage() {
    let synth = synthesize_burst(&spec()).unwrap();
    let meta = synth.burst.meta();
    let np = derive_noise_params(meta, NoiseParams::DEFAULT_BASELINE);
    let out = align_and_merge(&synth.burst, &AlignmentConfig::default(), &MergeConfig::default(), &np).unwrap();
    let clean_raw: Vec<u16> = synth.clean.data().iter().map(|&v| meta.denormalize(v)).collect();
    let clean = BayerFrame::new(spec().width, spec().height, meta.cfa, clean_raw).unwrap();
    for cfg in [
        FinishConfig::default(),
        FinishConfig {
            minimal: true,
            ..Default::default()
        },
    ] {
        let truth = finish_pipeline(&clean, meta, &cfg).unwrap();
        let reference = finish_pipeline(synth.burst.reference(), meta, &cfg).unwrap();
        let merged = finish_pipeline(&out.merged, meta, &cfg).unwrap();
        let (pr, pm) = (rgb_psnr(&reference, &truth), rgb_psnr(&merged, &truth));
        assert!(pm > pr, "minimal={} ref {pr:.2} dB merged {pm:.2} dB", cfg.minimal);
    }
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let synth = synthesize_burst(&spec()).unwrap();
    let np = derive_noise_params(synth.burst.meta(), NoiseParams::DEFAULT_BASELINE);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let out =
                    align_and_merge(&synth.burst, &AlignmentConfig::default(), &MergeConfig::default(), &np).unwrap();
                let rgb = finish_pipeline(&out.merged, synth.burst.meta(), &FinishConfig::default()).unwrap();
                (out.merged, out.fields, rgb)
            })
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(1));
}
