//! Acceptance suite: one test per criterion, each printing a PASS line when
//! it holds (run with `cargo test --test acceptance -- --nocapture` to see
//! them). Training-based criteria share one desk-scale run per application.

use std::sync::OnceLock;

use fpcnet::color_constancy::{
    angular_error, apply_cast, cc_metrics, CcDataset, CcSampleSource, IlluminantEstimate,
};
use fpcnet::dehazing::{
    dcp_patch_mse, dcp_transmission, estimate_atmospheric_light, psnr, recover_clear,
    synthesize_hazy_image, transmission_map, transmission_mse, AtmosphericLight, DhDataset,
    DhSampleSource, TransmissionMap, DCP_OMEGA, DCP_WINDOW, T_MIN,
};
use fpcnet::ensemble::sample_ensembles;
use fpcnet::equivalence::{sweep_equivalence, verify_equivalence};
use fpcnet::inspect::{
    min_channel_histogram, reproject, weighted_chroma_histogram, ActivationWeights,
};
use fpcnet::models::{
    build_basenet, build_fpcnet_cc, build_fpcnet_cc_scaled, build_fpcnet_dh, count_flops,
    count_params, init_params, InitScheme, NetworkSpec,
};
use fpcnet::nn::KernelWeights;
use fpcnet::rng;
use fpcnet::synthetic;
use fpcnet::trainer::{grad_check, train, TrainConfig};
use fpcnet::{ParamStore, Tensor};
use rand::Rng;

fn round_3sig(v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    let mag = v.abs().log10().floor();
    let scale = 10f64.powf(mag - 2.0);
    (v / scale).round() * scale
}

#[test]
fn criterion_1_architecture_accounting() {
    let cases = [
        (build_fpcnet_dh(), 288usize, 24_624usize, 2.88e2, 2.46e4),
        (build_fpcnet_cc(), 116_880, 3_318_000, 1.17e5, 3.32e6),
        (build_basenet(), 928_920, 8_294_520, 9.29e5, 8.29e6),
    ];
    for (spec, params, flops, params_3sig, flops_3sig) in cases {
        assert_eq!(count_params(&spec), params, "{} params", spec.name);
        assert_eq!(count_flops(&spec).unwrap(), flops, "{} flops", spec.name);
        assert_eq!(round_3sig(params as f64), params_3sig, "{}", spec.name);
        assert_eq!(round_3sig(flops as f64), flops_3sig, "{}", spec.name);
    }
    println!("[PASS] criterion 1: architecture accounting (288/24624, 116880/3318000, 928920/8294520)");
}

#[test]
fn criterion_2_shape_conformance() {
    // Expected output shape of every tabulated layer. Activation layers are
    // interleaved in the builders and leave shapes unchanged.
    let expect = |spec: &NetworkSpec, rows: &[(&str, (usize, usize, usize))]| {
        let trace = spec.shape_trace().unwrap();
        for &(id, shape) in rows {
            let got = trace
                .iter()
                .find(|(n, _)| n == id)
                .unwrap_or_else(|| panic!("{}: no layer {id}", spec.name));
            assert_eq!(got.1, shape, "{}: layer {id}", spec.name);
        }
    };

    expect(
        &build_fpcnet_cc(),
        &[
            ("conv1_1", (240, 32, 32)),
            ("maxpool1_1", (240, 4, 4)),
            ("conv1_2", (240, 32, 32)),
            ("maxpool1_2", (240, 4, 4)),
            ("concat1", (480, 4, 4)),
            ("conv2_r", (80, 4, 4)),
            ("maxpool2_r", (80, 1, 1)),
            ("conv3_r", (1, 1, 1)),
            ("conv2_g", (80, 4, 4)),
            ("maxpool2_g", (80, 1, 1)),
            ("conv3_g", (1, 1, 1)),
            ("conv2_b", (80, 4, 4)),
            ("maxpool2_b", (80, 1, 1)),
            ("conv3_b", (1, 1, 1)),
        ],
    );
    expect(
        &build_basenet(),
        &[
            ("conv1_1x1", (240, 32, 32)),
            ("conv1_3x3", (240, 32, 32)),
            ("concat1", (480, 32, 32)),
            ("maxpool1", (480, 4, 4)),
            ("conv2_r", (40, 1, 1)),
            ("conv3_r", (1, 1, 1)),
            ("conv2_g", (40, 1, 1)),
            ("conv3_g", (1, 1, 1)),
            ("conv2_b", (40, 1, 1)),
            ("conv3_b", (1, 1, 1)),
        ],
    );
    expect(
        &build_fpcnet_dh(),
        &[
            ("conv1", (16, 16, 16)),
            ("maxout", (4, 16, 16)),
            ("maxpool1", (4, 8, 8)),
            ("conv2", (48, 8, 8)),
            ("maxpool2", (48, 1, 1)),
            ("conv3", (1, 1, 1)),
            ("brelu", (1, 1, 1)),
        ],
    );
    println!("[PASS] criterion 2: layer-by-layer shapes match all table rows");
}

#[test]
fn criterion_3_kernel_collapse_oracle() {
    // (a) constant inputs are exact to 1e-12 for k in {2,3,5}, 100 random
    // kernels each.
    for k in [2usize, 3, 5] {
        for trial in 0..100u64 {
            let mut r = rng::stream2(1000, k as u64, trial);
            let mu = [r.gen::<f64>(), r.gen::<f64>(), r.gen::<f64>()];
            let mut input = Tensor::zeros(3, 2 * k - 1, 2 * k - 1);
            for (c, v) in mu.iter().enumerate() {
                input.channel_mut(c).fill(*v);
            }
            let weights = (0..3 * k * k).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();
            let kernel = KernelWeights::new(1, 3, k, k, weights, vec![0.0]).unwrap();
            let rep = verify_equivalence(&input, &kernel).unwrap();
            assert!(
                rep.abs_diff < 1e-12,
                "k={k} trial={trial}: diff {}",
                rep.abs_diff
            );
        }
    }

    // (b) paired comparison on a textured image: 1000 shuffled 5x5
    // ensembles (k=3) vs 1000 structured 5x5 patches, same kernels.
    let image = synthetic::textured_image::<f64>(128, 128, 42);
    let rows = sweep_equivalence(&image, &[3], 1000, 4242).unwrap();
    let row = &rows[0];
    assert!(
        row.shuffled_mean_diff < row.unshuffled_mean_diff,
        "shuffled {} !< unshuffled {}",
        row.shuffled_mean_diff,
        row.unshuffled_mean_diff
    );
    println!(
        "[PASS] criterion 3: kernel collapse exact on constants; shuffled diff {:.4} < unshuffled {:.4} over 1000 paired trials",
        row.shuffled_mean_diff, row.unshuffled_mean_diff
    );
}

#[test]
fn criterion_4_gradient_correctness() {
    for (spec, seed) in [
        (build_fpcnet_dh(), 31u64),
        (build_fpcnet_cc(), 32),
        (build_basenet(), 33),
    ] {
        let params = init_params::<f64>(&spec, InitScheme::UniformFanIn, seed).unwrap();
        let mut r = rng::stream(seed, 5);
        let (c, h, w) = spec.input_shape;
        let input = Tensor::new(c, h, w, (0..c * h * w).map(|_| r.gen::<f64>()).collect()).unwrap();
        let target: Vec<f64> = (0..spec.output_len().unwrap())
            .map(|_| 0.1 + 0.8 * r.gen::<f64>())
            .collect();
        let report = grad_check(&spec, &params, &input, &target, 200, 1e-4, seed).unwrap();
        assert!(report.checked >= 200, "{}: {}", spec.name, report.checked);
        assert!(
            report.max_rel_err < 1e-4,
            "{}: max rel err {}",
            spec.name,
            report.max_rel_err
        );
        println!(
            "[PASS] criterion 4: {} gradients match finite differences (max rel err {:.2e} over {} weights)",
            spec.name, report.max_rel_err, report.checked
        );
    }
}

// --- Shared desk-scale dehazing run (criteria 5 and 6) ----------------------

struct DhArtifacts {
    spec: NetworkSpec,
    params: ParamStore,
    model_mse: f64,
    dcp_mse: f64,
}

static DH_RUN: OnceLock<DhArtifacts> = OnceLock::new();

fn dh_run() -> &'static DhArtifacts {
    DH_RUN.get_or_init(|| {
        let images: Vec<Tensor> = (0..100)
            .map(|i| synthetic::clear_image(96, 96, rng::mix(0xD0, i)))
            .collect();
        // 30,000 patches, default ranges t in [0.1,1], A in [0.7,1].
        let data = DhDataset::synthesize(
            &images,
            30_000,
            16,
            10,
            (0.1, 1.0),
            (0.7, 1.0),
            5,
            0xD1,
        )
        .unwrap();
        let spec = build_fpcnet_dh();
        let mut params = init_params(&spec, InitScheme::UniformFanIn, 0xD2).unwrap();
        let source = DhSampleSource::new(&data, data.train_indices()).unwrap();
        let cfg = TrainConfig::new(50_000, 0xD3);
        let report = train(&spec, &mut params, &source, None, &cfg).unwrap();
        assert!(report.final_loss.is_finite());
        let test = data.test_indices();
        let model_mse = transmission_mse(&spec, &params, &data, &test).unwrap();
        let dcp_mse = dcp_patch_mse(&data, &test, DCP_OMEGA).unwrap();
        DhArtifacts {
            spec,
            params,
            model_mse,
            dcp_mse,
        }
    })
}

#[test]
fn criterion_5_dehazing_desk_scale_training() {
    let run = dh_run();
    assert!(
        run.model_mse <= 2.5e-2,
        "held-out transmission MSE {} > 2.5e-2",
        run.model_mse
    );
    assert!(
        run.model_mse < run.dcp_mse,
        "model MSE {} not below DCP baseline {}",
        run.model_mse,
        run.dcp_mse
    );
    println!(
        "[PASS] criterion 5: 50k-iteration desk-scale training; held-out MSE {:.4} <= 0.025 and < DCP {:.4}",
        run.model_mse, run.dcp_mse
    );
}

#[test]
fn criterion_6_dehazing_round_trip() {
    let run = dh_run();
    let mut model_wins = 0;
    for i in 0..10u64 {
        let seed = rng::mix(0xD6, i);
        // Outdoor scenes (guaranteed bright band), moderate haze, airlight
        // inside the regime where the shared estimator stays accurate.
        let clear: Tensor = synthetic::outdoor_scene(96, 96, rng::mix(seed, 1));
        let t_field: Tensor = synthetic::smooth_field(96, 96, 0.25, 0.85, rng::mix(seed, 2));
        let mut r = rng::stream(rng::mix(seed, 3), 0);
        let a = AtmosphericLight::uniform(rng::uniform(&mut r, 0.75, 0.85));
        let hazy = synthesize_hazy_image(&clear, &t_field, &a).unwrap();

        // Ground-truth inputs invert the haze model above the floor.
        let gt = recover_clear(
            &hazy,
            &TransmissionMap {
                field: t_field.clone(),
            },
            &a,
            T_MIN,
        )
        .unwrap()
        .map(|v| v.clamp(0.0, 1.0));
        let gt_psnr = psnr(&clear, &gt).unwrap();
        assert!(gt_psnr > 60.0, "image {i}: ground-truth recovery {gt_psnr} dB");

        // Estimated pipeline: model vs dark-channel, same estimated airlight.
        let a_est = estimate_atmospheric_light(&hazy);
        let t_model = transmission_map(&hazy, &run.spec, &run.params, 16, 8).unwrap();
        let model = recover_clear(&hazy, &t_model, &a_est, T_MIN)
            .unwrap()
            .map(|v| v.clamp(0.0, 1.0));
        let t_dcp = dcp_transmission(&hazy, &a_est, DCP_OMEGA, DCP_WINDOW).unwrap();
        let dcp = recover_clear(&hazy, &t_dcp, &a_est, T_MIN)
            .unwrap()
            .map(|v| v.clamp(0.0, 1.0));
        let p_model = psnr(&clear, &model).unwrap();
        let p_dcp = psnr(&clear, &dcp).unwrap();
        if p_model > p_dcp {
            model_wins += 1;
        }
    }
    assert!(
        model_wins >= 7,
        "model pipeline beat the DCP pipeline on only {model_wins}/10 images"
    );
    println!(
        "[PASS] criterion 6: ground-truth recovery > 60 dB; model pipeline beat DCP on {model_wins}/10 images"
    );
}

#[test]
fn criterion_7_color_constancy_desk_scale() {
    let images: Vec<(String, Tensor)> = (0..60)
        .map(|i| {
            (
                format!("img{i:04}.ppm"),
                synthetic::clear_image(96, 96, rng::mix(0xC0, i)),
            )
        })
        .collect();
    let data = CcDataset::synthesize(images, 8, (0.4, 2.5), 0xC1).unwrap();
    let (train_images, test_images) = data.split(5);
    let spec = build_fpcnet_cc_scaled(4).unwrap();
    let mut params = init_params(&spec, InitScheme::UniformFanIn, 0xC2).unwrap();
    let source = CcSampleSource::new(&data, train_images, (32, 32), 64, false, 0xC3).unwrap();
    let cfg = TrainConfig::new(20_000, 0xC4);
    let report = train(&spec, &mut params, &source, None, &cfg).unwrap();
    assert!(report.final_loss.is_finite());

    let (model_errors, gw_errors) =
        fpcnet::color_constancy::eval_cc(&data, &test_images, &spec, &params, 128, 0xC5).unwrap();
    let model_mean = cc_metrics(&model_errors).unwrap().mean;
    let gw_mean = cc_metrics(&gw_errors).unwrap().mean;
    assert!(
        model_mean < gw_mean,
        "model mean angular error {model_mean} not below gray-world {gw_mean}"
    );
    println!(
        "[PASS] criterion 7: reduced-width 20k-iteration training; mean angular error {model_mean:.2} deg < gray-world {gw_mean:.2} deg"
    );
}

#[test]
fn criterion_8_metric_conventions() {
    let m = cc_metrics(&[0.0f64, 1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(m.mean, 2.0);
    assert_eq!(m.median, 2.0);
    assert_eq!(m.trimean, 2.0);

    let err = angular_error(&[1.0f64, 1.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
    assert!((err - 35.264).abs() <= 0.001, "{err}");

    // MSE exactly 0.01: one squared error of 0.25 over 25 elements.
    let a = Tensor::zeros(1, 5, 5);
    let mut b = Tensor::zeros(1, 5, 5);
    *b.at_mut(0, 0, 0) = 0.5;
    let p = psnr(&a, &b).unwrap();
    assert!((p - 20.0).abs() < 1e-9, "psnr {p}");

    println!("[PASS] criterion 8: metric conventions (trimean/median, 35.264 deg, 20 dB)");
}

#[test]
fn criterion_9_cli_determinism() {
    let bin = env!("CARGO_BIN_EXE_fpcnet");
    let root = std::env::temp_dir().join("fpcnet-acceptance-determinism");
    let _ = std::fs::remove_dir_all(&root);

    let run_all = |dir: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        std::fs::create_dir_all(dir).unwrap();
        let run = |args: &[&str]| {
            let out = std::process::Command::new(bin)
                .args(["--threads", "1"])
                .args(args)
                .current_dir(dir)
                .output()
                .unwrap();
            assert!(
                out.status.success(),
                "fpcnet {:?} failed: {}",
                args,
                String::from_utf8_lossy(&out.stderr)
            );
        };
        // End-to-end script: synthesize, train briefly, evaluate, apply,
        // inspect, sweep.
        run(&["synth-cc", "--out", "cc", "--generate", "12", "--size", "48x48",
              "--casts-per-image", "2", "--seed", "5"]);
        run(&["train-cc", "--data", "cc", "--out", "cc.json", "--iters", "30",
              "--width-divisor", "8", "--ensembles-per-cast", "4", "--seed", "5"]);
        run(&["eval-cc", "--data", "cc", "--model", "cc.json", "--ensembles", "8",
              "--seed", "5", "--out", "cc-metrics.csv"]);
        run(&["synth-dh", "--out", "dh.bin", "--generate", "10", "--size", "48x48",
              "--patches", "600", "--seed", "5"]);
        run(&["train-dh", "--data", "dh.bin", "--out", "dh.json", "--iters", "40",
              "--seed", "5"]);
        run(&["eval-dh", "--data", "dh.bin", "--model", "dh.json", "--out",
              "dh-metrics.csv"]);
        run(&["verify-equivalence", "--k", "2,3", "--trials", "60", "--seed", "5",
              "--out", "equiv.csv"]);
        run(&["correct", "--in", "cc/clear/img0000.ppm", "--model", "cc.json",
              "--out", "corrected.ppm", "--ensembles", "8", "--seed", "5"]);
        run(&["dehaze", "--in", "cc/clear/img0001.ppm", "--model", "dh.json",
              "--out", "dehazed.ppm"]);
        run(&["inspect-cc", "--data", "cc", "--model", "cc.json", "--out-prefix",
              "chroma", "--ensembles", "2", "--seed", "5"]);
        run(&["inspect-dh", "--generate", "4", "--size", "48x48", "--model",
              "dh.json", "--out-prefix", "minch", "--patches-per-image", "8",
              "--seed", "5"]);

        // Hash every primary output (reports carry wall-clock and are
        // diagnostics, not primary outputs).
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(dir).unwrap().display().to_string();
                    if rel.ends_with(".report.json") {
                        continue;
                    }
                    files.push((rel, std::fs::read(&path).unwrap()));
                }
            }
        }
        files.sort();
        files
    };

    let a = run_all(&root.join("a"));
    let b = run_all(&root.join("b"));
    assert_eq!(a.len(), b.len());
    for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "output {name_a} differs between runs");
    }
    println!(
        "[PASS] criterion 9: {} CLI outputs byte-identical across two scripted runs",
        a.len()
    );
}

#[test]
fn criterion_10_inspection_properties() {
    // Mass conservation through reproject, to 1e-12.
    let image = synthetic::clear_image::<f64>(40, 40, 77);
    let ensembles = sample_ensembles(&image, 4, (16, 16), 78).unwrap();
    for (i, e) in ensembles.iter().enumerate() {
        let mut r = rng::stream(79 + i as u64, 0);
        let values: Vec<f64> = (0..e.len()).map(|_| r.gen::<f64>()).collect();
        let total_in: f64 = values.iter().sum();
        let map = reproject(&ActivationWeights { values }, e).unwrap();
        let total_out: f64 = map.data().iter().sum();
        assert!((total_in - total_out).abs() < 1e-12);
    }

    // All-gray corrected image: all chroma mass in the bin containing (1,1).
    let gray = Tensor::filled(3, 24, 24, 0.42);
    let weights = Tensor::filled(1, 24, 24, 1.5);
    let hist = weighted_chroma_histogram(&[(&gray, &weights)], 64, 2.0).unwrap();
    let total = hist.total_mass();
    assert!(total > 0.0 && hist.skipped == 0);
    // Bin 31 covers (0.96875, 1.0].
    assert_eq!(hist.mass[31 * 64 + 31], total);

    // Min-channel cumulative distribution: nondecreasing, ends at total.
    let img = synthetic::clear_image::<f64>(32, 32, 80);
    let ones = Tensor::filled(1, 32, 32, 1.0);
    let mh = min_channel_histogram(&[(&img, &ones)], 64).unwrap();
    let cumulative = mh.cumulative().unwrap();
    for w in cumulative.windows(2) {
        assert!(w[1] >= w[0]);
    }
    assert!((cumulative.last().unwrap() - mh.total_mass()).abs() < 1e-12);

    println!("[PASS] criterion 10: inspection properties (mass conservation, center bin, monotone cumulative)");
}

// Sanity for the intermediate values the criteria rely on.
#[test]
fn cast_synthesis_recovers_targets() {
    let img = synthetic::clear_image::<f64>(64, 64, 5);
    let gt = IlluminantEstimate::new([0.59, 1.0, 0.83]).unwrap();
    let casted = apply_cast(&img, &gt).unwrap();
    // Dividing by the cast recovers the drawn reflectance exactly.
    let back = fpcnet::color_constancy::correct_image(&casted, &gt).unwrap();
    for (a, b) in img.data().iter().zip(back.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}
