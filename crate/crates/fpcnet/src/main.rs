//! Command-line front end: dataset synthesis, training, evaluation,
//! dehazing, equivalence sweeps, parameter counting, and inspection.
//!
//! Every run writes its fully resolved configuration (defaults filled in,
//! seed included) to a sidecar JSON next to its primary output, so any
//! result can be reproduced from the sidecar alone. Exit codes: 0 success,
//! 1 usage error, 2 data error, 3 numeric abort (non-finite loss).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fpcnet::color_constancy::{
    apply_cast, cc_metrics, correct_image, estimate_angular_error, estimate_illuminant,
    CcDataset, CcSampleSource, IlluminantEstimate, CC_METRICS_CSV_HEADER,
};
use fpcnet::dehazing::{
    dcp_patch_mse, dcp_transmission, estimate_atmospheric_light, psnr, recover_clear, ssim,
    synthesize_hazy_image, transmission_map, transmission_mse, AtmosphericLight, DhDataset,
    DhSampleSource, DCP_OMEGA, DCP_WINDOW, T_MIN,
};
use fpcnet::ensemble::{patch_ensemble, sample_ensembles};
use fpcnet::equivalence::{sweep_csv, sweep_equivalence};
use fpcnet::error::Error;
use fpcnet::inspect::{
    activation_weights, curve_svg, heatmap_svg, min_channel_histogram, reproject,
    weighted_chroma_histogram, WeightedHistogram,
};
use fpcnet::models::{
    build_basenet, build_fpcnet_cc, build_fpcnet_cc_scaled, build_fpcnet_dh, count_flops,
    count_params, init_params, load_model, save_model, InitScheme, NetworkSpec,
};
use fpcnet::netpbm::{pgm_write, ppm_read, ppm_write};
use fpcnet::nn::LayerKind;
use fpcnet::rng;
use fpcnet::synthetic;
use fpcnet::trainer::{grad_check, train, TrainConfig, TrainReport};
use fpcnet::{ParamStore, Tensor};

#[derive(Parser, Serialize)]
#[command(name = "fpcnet", version, about = "Fully point-wise CNN pipelines")]
struct Cli {
    /// Worker threads (default: FPCNET_THREADS env var, else all cores).
    /// Results are identical for any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the sidecar config path.
    #[arg(long, global = true)]
    sidecar: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Serialize)]
enum Cmd {
    /// Print "name params flops" for the built-in architectures.
    Count(CountArgs),
    /// Kernel-collapse sweep: shuffled vs unshuffled diff per kernel size.
    VerifyEquivalence(VerifyArgs),
    /// Build a synthetic-cast color constancy dataset directory.
    SynthCc(SynthCcArgs),
    /// Train the color constancy network on a dataset directory.
    TrainCc(TrainCcArgs),
    /// Angular-error metrics on held-out images vs the gray-world baseline.
    EvalCc(EvalCcArgs),
    /// Estimate the cast of one image and write the corrected image.
    Correct(CorrectArgs),
    /// Build a synthetic hazy-patch dataset file.
    SynthDh(SynthDhArgs),
    /// Train the dehazing network on a dataset file.
    TrainDh(TrainDhArgs),
    /// Held-out transmission MSE vs the dark-channel baseline.
    EvalDh(EvalDhArgs),
    /// Dehaze one image: estimate airlight, predict transmission, recover.
    Dehaze(DehazeArgs),
    /// Weighted chroma histogram of what the CC network attends to.
    InspectCc(InspectCcArgs),
    /// Weighted min-channel histograms: network vs plain dark-channel.
    InspectDh(InspectDhArgs),
    /// Analytic vs finite-difference gradients on a built-in network.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Serialize)]
struct CountArgs {
    /// fpcnet-cc | fpcnet-dh | basenet | all
    #[arg(long, default_value = "all")]
    model: String,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    /// Kernel sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2,3,5")]
    k: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Source image (PPM). Defaults to a built-in textured test image.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Also write the CSV here (always printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SynthCcArgs {
    /// Output dataset directory (clear/*.ppm + casts.csv).
    #[arg(long)]
    out: PathBuf,
    /// Directory of clear PPM images to use as reflectance.
    #[arg(long, conflicts_with = "generate")]
    images: Option<PathBuf>,
    /// Generate this many synthetic clear images instead.
    #[arg(long)]
    generate: Option<usize>,
    /// Generated image size as HxW.
    #[arg(long, default_value = "96x96")]
    size: String,
    #[arg(long, default_value_t = 8)]
    casts_per_image: usize,
    #[arg(long, default_value_t = 0.4)]
    e_min: f64,
    #[arg(long, default_value_t = 2.5)]
    e_max: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct CommonTrainArgs {
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// lr multiplier applied every lr-decay-interval iterations.
    #[arg(long, default_value_t = 0.5)]
    lr_decay: f64,
    /// Decay interval; 0 = a quarter of the run.
    #[arg(long, default_value_t = 0)]
    lr_decay_interval: u64,
    /// Evaluation interval; 0 = a tenth of the run.
    #[arg(long, default_value_t = 0)]
    eval_interval: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl CommonTrainArgs {
    fn config(&self, iterations: u64) -> Result<TrainConfig, Error> {
        if self.lr <= 0.0 {
            return Err(Error::Config("--lr must be > 0".into()));
        }
        let mut cfg = TrainConfig::new(iterations, self.seed);
        cfg.batch_size = self.batch;
        cfg.learning_rate = self.lr;
        cfg.momentum = self.momentum;
        cfg.lr_decay_factor = self.lr_decay;
        cfg.lr_decay_interval = if self.lr_decay_interval == 0 {
            (iterations / 4).max(1)
        } else {
            self.lr_decay_interval
        };
        cfg.eval_interval = if self.eval_interval == 0 {
            (iterations / 10).max(1)
        } else {
            self.eval_interval
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Serialize)]
struct TrainCcArgs {
    /// Dataset directory from synth-cc.
    #[arg(long)]
    data: PathBuf,
    /// Output model JSON path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    iters: u64,
    /// Divide all conv widths by this (1 = the full-width architecture).
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
    /// Add gradient-magnitude (edge) ensembles as extra training data.
    #[arg(long, default_value_t = false)]
    edge_augment: bool,
    /// Virtual ensembles per (image, cast) pair per epoch.
    #[arg(long, default_value_t = 64)]
    ensembles_per_cast: usize,
    /// Every n-th image (sorted) is held out.
    #[arg(long, default_value_t = 5)]
    test_every: usize,
    #[command(flatten)]
    train: CommonTrainArgs,
}

#[derive(Args, Serialize)]
struct EvalCcArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 128)]
    ensembles: usize,
    #[arg(long, default_value_t = 5)]
    test_every: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Also write the metrics CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct CorrectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    ensembles: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct SynthDhArgs {
    /// Output dataset file (binary records).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "generate")]
    images: Option<PathBuf>,
    #[arg(long)]
    generate: Option<usize>,
    #[arg(long, default_value = "96x96")]
    size: String,
    #[arg(long, default_value_t = 30_000)]
    patches: usize,
    #[arg(long, default_value_t = 10)]
    haze_levels: usize,
    #[arg(long, default_value_t = 16)]
    patch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    t_min: f64,
    #[arg(long, default_value_t = 1.0)]
    t_max: f64,
    #[arg(long, default_value_t = 0.7)]
    a_min: f64,
    #[arg(long, default_value_t = 1.0)]
    a_max: f64,
    #[arg(long, default_value_t = 5)]
    test_every: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct TrainDhArgs {
    /// Dataset file from synth-dh.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50_000)]
    iters: u64,
    #[command(flatten)]
    train: CommonTrainArgs,
}

#[derive(Args, Serialize)]
struct EvalDhArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Also evaluate full-image PSNR/SSIM on this many synthetic scenes.
    #[arg(long, default_value_t = 0)]
    full: usize,
    #[arg(long, default_value_t = 13)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct DehazeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Transmission map output (PGM); default <out>.tmap.pgm.
    #[arg(long)]
    tmap: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    patch: usize,
    #[arg(long, default_value_t = 8)]
    stride: usize,
}

#[derive(Args, Serialize)]
struct InspectCcArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output prefix for <prefix>.csv and <prefix>.svg.
    #[arg(long)]
    out_prefix: String,
    /// Pooling layer to probe; default: the model's first max pool.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    /// Upper edge of the (0, hi] chroma range.
    #[arg(long, default_value_t = 2.0)]
    range: f64,
    #[arg(long, default_value_t = 8)]
    ensembles: usize,
    #[arg(long, default_value_t = 5)]
    test_every: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct InspectDhArgs {
    #[arg(long, conflicts_with = "generate")]
    images: Option<PathBuf>,
    /// Generate this many synthetic clear images instead.
    #[arg(long)]
    generate: Option<usize>,
    #[arg(long, default_value = "96x96")]
    size: String,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_prefix: String,
    /// Pooling layer to probe; default: the model's last max pool.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[arg(long, default_value_t = 32)]
    patches_per_image: usize,
    #[arg(long, default_value_t = 19)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    /// fpcnet-cc | fpcnet-dh | basenet
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 3)]
    seed: u64,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code would be 2; the contract here is 1 for
            // usage errors, 0 for --help/--version.
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let threads = cli.threads.or_else(|| {
        std::env::var("FPCNET_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            eprintln!("fpcnet: thread pool already initialized");
        }
    }
    if let Err(e) = run(&cli) {
        eprintln!("fpcnet: {e}");
        let code = match e {
            Error::NonFiniteLoss { .. } => 3,
            Error::Config(_) => 1,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.cmd {
        Cmd::Count(args) => {
            write_sidecar(cli, args, None)?;
            cmd_count(args)
        }
        Cmd::VerifyEquivalence(args) => {
            write_sidecar(cli, args, args.out.as_deref())?;
            cmd_verify(args)
        }
        Cmd::SynthCc(args) => {
            write_sidecar(cli, args, Some(&args.out))?;
            cmd_synth_cc(args)
        }
        Cmd::TrainCc(args) => {
            write_sidecar(cli, args, Some(&args.out))?;
            cmd_train_cc(args)
        }
        Cmd::EvalCc(args) => {
            write_sidecar(cli, args, args.out.as_deref())?;
            cmd_eval_cc(args)
        }
        Cmd::Correct(args) => {
            write_sidecar(cli, args, Some(&args.out))?;
            cmd_correct(args)
        }
        Cmd::SynthDh(args) => {
            write_sidecar(cli, args, Some(&args.out))?;
            cmd_synth_dh(args)
        }
        Cmd::TrainDh(args) => {
            write_sidecar(cli, args, Some(&args.out))?;
            cmd_train_dh(args)
        }
        Cmd::EvalDh(args) => {
            write_sidecar(cli, args, args.out.as_deref())?;
            cmd_eval_dh(args)
        }
        Cmd::Dehaze(args) => {
            write_sidecar(cli, args, Some(&args.out))?;
            cmd_dehaze(args)
        }
        Cmd::InspectCc(args) => {
            let p = PathBuf::from(format!("{}.csv", args.out_prefix));
            write_sidecar(cli, args, Some(&p))?;
            cmd_inspect_cc(args)
        }
        Cmd::InspectDh(args) => {
            let p = PathBuf::from(format!("{}_model.csv", args.out_prefix));
            write_sidecar(cli, args, Some(&p))?;
            cmd_inspect_dh(args)
        }
        Cmd::Gradcheck(args) => {
            write_sidecar(cli, args, None)?;
            cmd_gradcheck(args)
        }
    }
}

/// Sidecar JSON: the fully resolved arguments for this run. Written next to
/// the primary output (or ./fpcnet-<command>.run.json when there is none).
fn write_sidecar<A: Serialize>(cli: &Cli, args: &A, primary: Option<&Path>) -> Result<(), Error> {
    let path = cli.sidecar.clone().unwrap_or_else(|| match primary {
        Some(p) => {
            let mut s = p.as_os_str().to_owned();
            s.push(".run.json");
            PathBuf::from(s)
        }
        None => PathBuf::from(format!("fpcnet-{}.run.json", command_name(&cli.cmd))),
    });
    #[derive(Serialize)]
    struct Sidecar<'a, A> {
        command: &'a str,
        threads: Option<usize>,
        args: &'a A,
    }
    let body = serde_json::to_string_pretty(&Sidecar {
        command: command_name(&cli.cmd),
        threads: cli.threads,
        args,
    })?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, body)?;
    Ok(())
}

fn command_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Count(_) => "count",
        Cmd::VerifyEquivalence(_) => "verify-equivalence",
        Cmd::SynthCc(_) => "synth-cc",
        Cmd::TrainCc(_) => "train-cc",
        Cmd::EvalCc(_) => "eval-cc",
        Cmd::Correct(_) => "correct",
        Cmd::SynthDh(_) => "synth-dh",
        Cmd::TrainDh(_) => "train-dh",
        Cmd::EvalDh(_) => "eval-dh",
        Cmd::Dehaze(_) => "dehaze",
        Cmd::InspectCc(_) => "inspect-cc",
        Cmd::InspectDh(_) => "inspect-dh",
        Cmd::Gradcheck(_) => "gradcheck",
    }
}

fn build_by_name(name: &str) -> Result<NetworkSpec, Error> {
    match name {
        "fpcnet-cc" => Ok(build_fpcnet_cc()),
        "fpcnet-dh" => Ok(build_fpcnet_dh()),
        "basenet" => Ok(build_basenet()),
        other => Err(Error::Config(format!(
            "unknown model {other}; expected fpcnet-cc, fpcnet-dh, or basenet"
        ))),
    }
}

fn cmd_count(args: &CountArgs) -> Result<(), Error> {
    let names: Vec<&str> = match args.model.as_str() {
        "all" => vec!["fpcnet-dh", "fpcnet-cc", "basenet"],
        other => vec![other],
    };
    for name in names {
        let spec = build_by_name(name)?;
        println!("{name} {} {}", count_params(&spec), count_flops(&spec)?);
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), Error> {
    let image: Tensor = match &args.image {
        Some(path) => ppm_read(path)?,
        None => synthetic::textured_image(128, 128, args.seed),
    };
    let rows = sweep_equivalence(&image, &args.k, args.trials, args.seed)?;
    let csv = sweep_csv(&rows);
    print!("{csv}");
    if let Some(out) = &args.out {
        std::fs::write(out, csv)?;
    }
    Ok(())
}

fn parse_size(text: &str) -> Result<(usize, usize), Error> {
    let (h, w) = text
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("size {text} must look like 96x96")))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| Error::Config(format!("bad size component {v}")))
    };
    let (h, w) = (parse(h)?, parse(w)?);
    if h < 16 || w < 16 {
        return Err(Error::Config(
            "generated images must be at least 16x16".into(),
        ));
    }
    Ok((h, w))
}

fn load_or_generate_images(
    images: &Option<PathBuf>,
    generate: Option<usize>,
    size: &str,
    seed: u64,
) -> Result<Vec<(String, Tensor)>, Error> {
    match (images, generate) {
        (Some(dir), None) => {
            let mut names: Vec<String> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(".ppm"))
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(Error::Empty("ppm images in directory"));
            }
            names
                .into_iter()
                .map(|n| Ok((n.clone(), ppm_read(dir.join(&n))?)))
                .collect()
        }
        (None, Some(count)) => {
            if count == 0 {
                return Err(Error::Empty("generated images"));
            }
            let (h, w) = parse_size(size)?;
            Ok((0..count)
                .map(|i| {
                    (
                        format!("img{i:04}.ppm"),
                        synthetic::clear_image(h, w, rng::mix(seed, i as u64)),
                    )
                })
                .collect())
        }
        _ => Err(Error::Config(
            "exactly one of --images or --generate is required".into(),
        )),
    }
}

fn cmd_synth_cc(args: &SynthCcArgs) -> Result<(), Error> {
    if args.casts_per_image == 0 {
        return Err(Error::Config("--casts-per-image must be >= 1".into()));
    }
    let images = load_or_generate_images(&args.images, args.generate, &args.size, args.seed)?;
    let data = CcDataset::synthesize(
        images,
        args.casts_per_image,
        (args.e_min, args.e_max),
        args.seed,
    )?;
    data.save_dir(&args.out)?;
    println!(
        "wrote {} images x {} casts to {}",
        data.images.len(),
        args.casts_per_image,
        args.out.display()
    );
    Ok(())
}

fn write_train_outputs(
    out: &Path,
    spec: &NetworkSpec,
    params: &ParamStore,
    report: &TrainReport,
) -> Result<(), Error> {
    save_model(spec, params, out)?;
    let mut csv_path = out.as_os_str().to_owned();
    csv_path.push(".report.csv");
    std::fs::write(PathBuf::from(csv_path), report.to_csv())?;
    let mut json_path = out.as_os_str().to_owned();
    json_path.push(".report.json");
    std::fs::write(
        PathBuf::from(json_path),
        serde_json::to_string_pretty(report)?,
    )?;
    Ok(())
}

fn cmd_train_cc(args: &TrainCcArgs) -> Result<(), Error> {
    let data: CcDataset<f64> = CcDataset::load_dir(&args.data)?;
    let (train_images, test_images) = data.split(args.test_every);
    let spec = build_fpcnet_cc_scaled(args.width_divisor)?;
    let mut params = init_params(&spec, InitScheme::UniformFanIn, args.train.seed)?;
    let source = CcSampleSource::new(
        &data,
        train_images,
        (spec.input_shape.1, spec.input_shape.2),
        args.ensembles_per_cast,
        args.edge_augment,
        rng::mix(args.train.seed, 0xCC),
    )?;
    let cfg = args.train.config(args.iters)?;
    // Cheap progress metric: mean angular error over a few held-out images.
    let eval_images: Vec<usize> = test_images.iter().copied().take(4).collect();
    let eval_seed = rng::mix(args.train.seed, 0xEE);
    let eval_fn = |p: &ParamStore| -> f64 {
        let mut errs = Vec::new();
        for (n, &i) in eval_images.iter().enumerate() {
            let gt = IlluminantEstimate::new(data.casts[i][0]).expect("positive casts");
            let casted = apply_cast(&data.images[i].1, &gt).expect("3-channel");
            if let Ok(est) =
                estimate_illuminant(&casted, &spec, p, 16, rng::mix(eval_seed, n as u64))
            {
                if let Ok(err) = estimate_angular_error(&est, &gt) {
                    errs.push(err);
                }
            }
        }
        if errs.is_empty() {
            f64::NAN
        } else {
            errs.iter().sum::<f64>() / errs.len() as f64
        }
    };
    let eval = if eval_images.is_empty() {
        None
    } else {
        Some(&eval_fn as &dyn Fn(&ParamStore) -> f64)
    };
    let report = train(&spec, &mut params, &source, eval, &cfg)?;
    write_train_outputs(&args.out, &spec, &params, &report)?;
    println!(
        "trained {} for {} iterations; final loss {:.6}; wrote {}",
        spec.name,
        args.iters,
        report.final_loss,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval_cc(args: &EvalCcArgs) -> Result<(), Error> {
    let data: CcDataset<f64> = CcDataset::load_dir(&args.data)?;
    let (_, test_images) = data.split(args.test_every);
    if test_images.is_empty() {
        return Err(Error::Empty("held-out images"));
    }
    let (spec, params) = load_model::<f64>(&args.model)?;
    let (model_errors, gw_errors) = fpcnet::color_constancy::eval_cc(
        &data,
        &test_images,
        &spec,
        &params,
        args.ensembles,
        args.seed,
    )?;
    let mut csv = String::from(CC_METRICS_CSV_HEADER);
    csv.push('\n');
    csv.push_str(&cc_metrics(&model_errors)?.csv_row(&spec.name));
    csv.push('\n');
    csv.push_str(&cc_metrics(&gw_errors)?.csv_row("gray-world"));
    csv.push('\n');
    print!("{csv}");
    if let Some(out) = &args.out {
        std::fs::write(out, csv)?;
    }
    Ok(())
}

fn cmd_correct(args: &CorrectArgs) -> Result<(), Error> {
    let image: Tensor = ppm_read(&args.input)?;
    let (spec, params) = load_model::<f64>(&args.model)?;
    let est = estimate_illuminant(&image, &spec, &params, args.ensembles, args.seed)?;
    let corrected = correct_image(&image, &est)?;
    ppm_write(&corrected.map(|v| v.clamp(0.0, 1.0)), &args.out)?;
    let rgb = est.rgb();
    println!("estimated cast (unit L2): {} {} {}", rgb[0], rgb[1], rgb[2]);
    Ok(())
}

fn cmd_synth_dh(args: &SynthDhArgs) -> Result<(), Error> {
    let images = load_or_generate_images(&args.images, args.generate, &args.size, args.seed)?;
    let tensors: Vec<Tensor> = images.into_iter().map(|(_, t)| t).collect();
    let data = DhDataset::synthesize(
        &tensors,
        args.patches,
        args.patch_size,
        args.haze_levels,
        (args.t_min, args.t_max),
        (args.a_min, args.a_max),
        args.test_every,
        args.seed,
    )?;
    data.save_bin(&args.out)?;
    println!(
        "wrote {} hazy patches ({} train / {} test) to {}",
        data.records.len(),
        data.train_indices().len(),
        data.test_indices().len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train_dh(args: &TrainDhArgs) -> Result<(), Error> {
    let data: DhDataset<f64> = DhDataset::load_bin(&args.data)?;
    let spec = build_fpcnet_dh();
    if data.patch_size != spec.input_shape.1 {
        return Err(Error::Dimension {
            axis: "dataset patch size",
            expected: spec.input_shape.1,
            actual: data.patch_size,
        });
    }
    let mut params = init_params(&spec, InitScheme::UniformFanIn, args.train.seed)?;
    let source = DhSampleSource::new(&data, data.train_indices())?;
    let cfg = args.train.config(args.iters)?;
    let eval_indices: Vec<usize> = data.test_indices().into_iter().take(2000).collect();
    let eval_fn = |p: &ParamStore| -> f64 {
        transmission_mse(&spec, p, &data, &eval_indices).unwrap_or(f64::NAN)
    };
    let eval = if eval_indices.is_empty() {
        None
    } else {
        Some(&eval_fn as &dyn Fn(&ParamStore) -> f64)
    };
    let report = train(&spec, &mut params, &source, eval, &cfg)?;
    write_train_outputs(&args.out, &spec, &params, &report)?;
    println!(
        "trained {} for {} iterations; final loss {:.6}; wrote {}",
        spec.name,
        args.iters,
        report.final_loss,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval_dh(args: &EvalDhArgs) -> Result<(), Error> {
    let data: DhDataset<f64> = DhDataset::load_bin(&args.data)?;
    let (spec, params) = load_model::<f64>(&args.model)?;
    let test = data.test_indices();
    let model_mse = transmission_mse(&spec, &params, &data, &test)?;
    let dcp_mse = dcp_patch_mse(&data, &test, DCP_OMEGA)?;
    let mut csv = String::from("method,mse_x100\n");
    csv.push_str(&format!("dcp,{}\n", dcp_mse * 100.0));
    csv.push_str(&format!("{},{}\n", spec.name, model_mse * 100.0));
    print!("{csv}");

    if args.full > 0 {
        let mut full_csv = String::from("image,psnr_model,ssim_model,psnr_dcp,ssim_dcp\n");
        for i in 0..args.full {
            let (j, hazy, _, _) = synthetic_hazy_scene(rng::mix(args.seed, i as u64));
            let a_est = estimate_atmospheric_light(&hazy);
            let t_model = transmission_map(&hazy, &spec, &params, data.patch_size, 8)?;
            let model = recover_clear(&hazy, &t_model, &a_est, T_MIN)?.map(|v| v.clamp(0.0, 1.0));
            let t_dcp = dcp_transmission(&hazy, &a_est, DCP_OMEGA, DCP_WINDOW)?;
            let dcp = recover_clear(&hazy, &t_dcp, &a_est, T_MIN)?.map(|v| v.clamp(0.0, 1.0));
            full_csv.push_str(&format!(
                "{i},{},{},{},{}\n",
                psnr(&j, &model)?,
                ssim(&j, &model)?,
                psnr(&j, &dcp)?,
                ssim(&j, &dcp)?
            ));
        }
        print!("{full_csv}");
        csv.push_str(&full_csv);
    }
    if let Some(out) = &args.out {
        std::fs::write(out, csv)?;
    }
    Ok(())
}

/// One synthetic hazy scene: clear image, hazy image, t-field, airlight.
fn synthetic_hazy_scene(seed: u64) -> (Tensor, Tensor, Tensor, AtmosphericLight<f64>) {
    let clear = synthetic::outdoor_scene(96, 96, rng::mix(seed, 1));
    let t_field = synthetic::smooth_field(96, 96, 0.25, 0.85, rng::mix(seed, 2));
    let mut r = rng::stream(rng::mix(seed, 3), 0);
    let a = AtmosphericLight::uniform(rng::uniform(&mut r, 0.75, 0.85));
    let hazy = synthesize_hazy_image(&clear, &t_field, &a).expect("shapes match");
    (clear, hazy, t_field, a)
}

fn cmd_dehaze(args: &DehazeArgs) -> Result<(), Error> {
    let hazy: Tensor = ppm_read(&args.input)?;
    let (spec, params) = load_model::<f64>(&args.model)?;
    let a = estimate_atmospheric_light(&hazy);
    let t_map = transmission_map(&hazy, &spec, &params, args.patch, args.stride)?;
    let clear = recover_clear(&hazy, &t_map, &a, T_MIN)?;
    ppm_write(&clear.map(|v| v.clamp(0.0, 1.0)), &args.out)?;
    let tmap_path = args.tmap.clone().unwrap_or_else(|| {
        let mut s = args.out.as_os_str().to_owned();
        s.push(".tmap.pgm");
        PathBuf::from(s)
    });
    pgm_write(&t_map.field, &tmap_path)?;
    println!(
        "airlight {} {} {}; wrote {} and {}",
        a.rgb[0],
        a.rgb[1],
        a.rgb[2],
        args.out.display(),
        tmap_path.display()
    );
    Ok(())
}

fn find_pool_layer(
    spec: &NetworkSpec,
    requested: &Option<String>,
    last: bool,
) -> Result<String, Error> {
    if let Some(id) = requested {
        return Ok(id.clone());
    }
    let mut pools = spec
        .nodes
        .iter()
        .filter(|n| matches!(n.layer.kind, LayerKind::MaxPool | LayerKind::AvgPool));
    let node = if last { pools.next_back() } else { pools.next() };
    node.map(|n| n.id.clone())
        .ok_or_else(|| Error::Layer("model has no pooling layer to probe".into()))
}

fn cmd_inspect_cc(args: &InspectCcArgs) -> Result<(), Error> {
    let data: CcDataset<f64> = CcDataset::load_dir(&args.data)?;
    let (_, test_images) = data.split(args.test_every);
    if test_images.is_empty() {
        return Err(Error::Empty("held-out images"));
    }
    let (spec, params) = load_model::<f64>(&args.model)?;
    let layer = find_pool_layer(&spec, &args.layer, false)?;
    let (eh, ew) = (spec.input_shape.1, spec.input_shape.2);

    let mut hist: Option<WeightedHistogram<f64>> = None;
    for (n, &i) in test_images.iter().enumerate() {
        let gt = IlluminantEstimate::new(data.casts[i][0])?;
        let casted = apply_cast(&data.images[i].1, &gt)?;
        let ensembles = sample_ensembles(
            &casted,
            args.ensembles,
            (eh, ew),
            rng::mix(args.seed, n as u64),
        )?;
        // Weights come from the casted ensembles; chroma is measured on the
        // intrinsic (clear) image the weights re-project onto.
        let mut weight_map = Tensor::zeros(1, data.images[i].1.height(), data.images[i].1.width());
        for e in &ensembles {
            let w = activation_weights(&spec, &params, e, &layer)?;
            let map = reproject(&w, e)?;
            for (acc, v) in weight_map.data_mut().iter_mut().zip(map.data()) {
                *acc += *v;
            }
        }
        let part =
            weighted_chroma_histogram(&[(&data.images[i].1, &weight_map)], args.bins, args.range)?;
        match &mut hist {
            Some(h) => h.merge(&part)?,
            slot => *slot = Some(part),
        }
    }
    let hist = hist.expect("at least one test image");
    std::fs::write(format!("{}.csv", args.out_prefix), hist.to_csv())?;
    std::fs::write(
        format!("{}.svg", args.out_prefix),
        heatmap_svg(&hist, Some((1.0, 1.0))),
    )?;
    println!(
        "chroma histogram: total mass {:.3}, skipped {} pixels; wrote {}.csv and {}.svg",
        hist.total_mass(),
        hist.skipped,
        args.out_prefix,
        args.out_prefix
    );
    Ok(())
}

fn cmd_inspect_dh(args: &InspectDhArgs) -> Result<(), Error> {
    let images = load_or_generate_images(&args.images, args.generate, &args.size, args.seed)?;
    let (spec, params) = load_model::<f64>(&args.model)?;
    let layer = find_pool_layer(&spec, &args.layer, true)?;
    let patch = spec.input_shape.1;

    let mut model_hist: Option<WeightedHistogram<f64>> = None;
    let mut plain_hist: Option<WeightedHistogram<f64>> = None;
    for (n, (_, image)) in images.iter().enumerate() {
        let mut r = rng::stream2(args.seed, 6, n as u64);
        let mut weight_map = Tensor::zeros(1, image.height(), image.width());
        for _ in 0..args.patches_per_image {
            let top = (rng::uniform::<f64>(&mut r, 0.0, (image.height() - patch + 1) as f64)
                as usize)
                .min(image.height() - patch);
            let left = (rng::uniform::<f64>(&mut r, 0.0, (image.width() - patch + 1) as f64)
                as usize)
                .min(image.width() - patch);
            let e = patch_ensemble(image, top, left, patch, patch)?;
            let w = activation_weights(&spec, &params, &e, &layer)?;
            let map = reproject(&w, &e)?;
            for (acc, v) in weight_map.data_mut().iter_mut().zip(map.data()) {
                *acc += *v;
            }
        }
        let part = min_channel_histogram(&[(image, &weight_map)], args.bins)?;
        let ones = Tensor::filled(1, image.height(), image.width(), 1.0);
        let plain = min_channel_histogram(&[(image, &ones)], args.bins)?;
        match &mut model_hist {
            Some(h) => h.merge(&part)?,
            slot => *slot = Some(part),
        }
        match &mut plain_hist {
            Some(h) => h.merge(&plain)?,
            slot => *slot = Some(plain),
        }
    }
    let model_hist = model_hist.expect("images nonempty");
    let plain_hist = plain_hist.expect("images nonempty");
    for (name, hist) in [("model", &model_hist), ("dcp", &plain_hist)] {
        std::fs::write(format!("{}_{name}.csv", args.out_prefix), hist.to_csv_1d()?)?;
        let cumulative = hist.cumulative()?;
        let total = *cumulative.last().expect("bins nonempty");
        let points: Vec<(f64, f64)> = cumulative
            .iter()
            .enumerate()
            .map(|(i, &c)| (hist.x_center(i), if total > 0.0 { c / total } else { 0.0 }))
            .collect();
        std::fs::write(
            format!("{}_{name}.svg", args.out_prefix),
            curve_svg(&points),
        )?;
    }
    println!(
        "min-channel histograms written to {}_model.csv/svg and {}_dcp.csv/svg",
        args.out_prefix, args.out_prefix
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), Error> {
    let spec = build_by_name(&args.model)?;
    let params = init_params::<f64>(&spec, InitScheme::UniformFanIn, args.seed)?;
    let mut r = rng::stream(args.seed, 1);
    let (c, h, w) = spec.input_shape;
    let input = Tensor::new(
        c,
        h,
        w,
        (0..c * h * w)
            .map(|_| rng::uniform(&mut r, 0.0, 1.0))
            .collect(),
    )?;
    let heads = spec.output_len()?;
    let target: Vec<f64> = (0..heads).map(|_| rng::uniform(&mut r, 0.1, 0.9)).collect();
    let report = grad_check(
        &spec,
        &params,
        &input,
        &target,
        args.samples,
        args.step,
        args.seed,
    )?;
    println!(
        "{}: max relative error {:.3e} over {} sampled parameters (tolerance {:.1e})",
        args.model, report.max_rel_err, report.checked, args.tolerance
    );
    if report.max_rel_err >= args.tolerance {
        return Err(Error::Config(format!(
            "gradient check failed: {:.3e} >= {:.1e}",
            report.max_rel_err, args.tolerance
        )));
    }
    println!("PASS");
    Ok(())
}
