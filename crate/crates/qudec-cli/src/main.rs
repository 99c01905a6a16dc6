//! Command-line surface for the de-raining toolkit.
//!
//! Exit codes: 0 success, 1 usage/data errors, 2 contract violations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use qudec_core::checkpoint;
use qudec_core::data::{
    load_image, load_pair_directory, procedural_corpus, save_image, synthesize_rain, ConcatSide,
    DatasetLayout, RainPair, SyntheticRainConfig,
};
use qudec_core::inference::{
    cycle_spin_derain, derain, evaluate_dataset, export_maps, CycleSpinConfig, EvalOptions,
};
use qudec_core::labeling::{
    build_gln_dataset, calibrate_thresholds, generate_label_map, ThresholdConfig,
};
use qudec_core::metrics::MetricMode;
use qudec_core::model::{ModelConfig, QudecModel};
use qudec_core::niqe::{fit_pristine_model, niqe_score, PristineModel};
use qudec_core::training::{gln_label_map, train_gln, train_qudec, LabelSourceChoice, TrainConfig};

#[derive(Parser)]
#[command(
    name = "qudec",
    version,
    about = "Confidence-guided multi-scale single-image de-raining toolkit"
)]
struct Cli {
    /// Training configuration file (flat key = value text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model checkpoint archive.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (file or directory depending on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Paired,
    Concat,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    RainyLeft,
    RainyRight,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "paired")]
    layout: LayoutArg,
    #[arg(long, value_enum, default_value = "rainy-left")]
    side: SideArg,
}

impl DataArgs {
    fn load(&self) -> qudec_core::Result<Vec<RainPair>> {
        let layout = match self.layout {
            LayoutArg::Paired => DatasetLayout::PairedDirs,
            LayoutArg::Concat => DatasetLayout::Concatenated,
        };
        let side = match self.side {
            SideArg::RainyLeft => ConcatSide::RainyLeft,
            SideArg::RainyRight => ConcatSide::RainyRight,
        };
        load_pair_directory(&self.data, layout, side)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the de-raining network.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Pristine model file for score-based labels (bundled when omitted).
        #[arg(long)]
        pristine: Option<PathBuf>,
        /// Checkpoint providing a trained label classifier (for gln labels).
        #[arg(long)]
        gln_checkpoint: Option<PathBuf>,
        /// Label thresholds T1 T2 (published defaults when omitted).
        #[arg(long, num_args = 2)]
        thresholds: Option<Vec<f64>>,
        /// Resume from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Use the narrow test-width model.
        #[arg(long)]
        micro: bool,
    },
    /// Train the patch label classifier on score-derived labels.
    GlnTrain {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        pristine: Option<PathBuf>,
        #[arg(long, num_args = 2)]
        thresholds: Option<Vec<f64>>,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 0.0002)]
        lr: f64,
        #[arg(long)]
        micro: bool,
    },
    /// De-rain one image.
    Derain {
        #[arg(long = "in")]
        input: PathBuf,
        /// Average over circularly shifted copies.
        #[arg(long)]
        cycle_spin: bool,
        /// Also write residual/confidence/label maps next to the output.
        #[arg(long)]
        export_maps: bool,
    },
    /// Evaluate a checkpoint over a paired dataset (PSNR/SSIM report).
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        cycle_spin: bool,
        /// Evaluate on float [0,1] values instead of 8-bit quantized.
        #[arg(long)]
        float_metrics: bool,
        /// Luminance PSNR instead of RGB.
        #[arg(long)]
        luminance: bool,
        /// Append published full-scale reference targets as context.
        #[arg(long)]
        full_scale_context: bool,
    },
    /// Score-label one rainy image (text map + color rendering).
    Label {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        pristine: Option<PathBuf>,
        #[arg(long, num_args = 2)]
        thresholds: Option<Vec<f64>>,
    },
    /// Fit the pristine scorer model on a clean corpus.
    NiqeFit {
        /// Directory of clean images.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Fit on N procedural clean images instead.
        #[arg(long)]
        procedural: Option<usize>,
        #[arg(long, default_value_t = 384)]
        size: usize,
    },
    /// Calibrate label thresholds from the score distribution of a corpus.
    Calibrate {
        /// Directory of rainy images.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        pristine: Option<PathBuf>,
    },
    /// Generate a synthetic rainy/clean dataset.
    Synth {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 600.0)]
        density: f64,
        #[arg(long, default_value_t = 0.4)]
        intensity: f64,
        /// Rain-ify images from this directory instead of procedural ones.
        #[arg(long)]
        clean: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version print to stdout and exit 0; real usage errors exit 1
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<qudec_core::Error>() {
                Some(qudec_core::Error::Contract(_)) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn load_pristine(path: &Option<PathBuf>) -> anyhow::Result<PristineModel> {
    match path {
        Some(p) => Ok(PristineModel::load(p)?),
        None => Ok(PristineModel::bundled()?),
    }
}

fn thresholds_from(arg: &Option<Vec<f64>>) -> anyhow::Result<ThresholdConfig> {
    match arg {
        Some(v) if v.len() == 2 => Ok(ThresholdConfig::new(v[0], v[1], 0.2)?),
        Some(_) => Err(anyhow!("--thresholds takes exactly two values")),
        None => Ok(ThresholdConfig::published_default()),
    }
}

fn load_checkpoint(path: &Option<PathBuf>) -> anyhow::Result<QudecModel> {
    let p = path
        .as_ref()
        .ok_or_else(|| anyhow!("--checkpoint is required for this command"))?;
    let (model, _, _) = checkpoint::load_model(p)?;
    Ok(model)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let train_cfg = || -> anyhow::Result<TrainConfig> {
        let mut cfg = match &cli.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                TrainConfig::from_text(&text)?
            }
            None => TrainConfig::desk(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    };

    match cli.cmd {
        Cmd::Train {
            data,
            pristine,
            gln_checkpoint,
            thresholds,
            resume,
            micro,
        } => {
            let cfg = train_cfg()?;
            let pairs = data.load()?;
            let model_cfg = if micro {
                ModelConfig::micro()
            } else {
                ModelConfig::default()
            };
            let labels = match cfg.label_source {
                LabelSourceChoice::NiqeDirect => {
                    let pm = load_pristine(&pristine)?;
                    let tc = thresholds_from(&thresholds)?;
                    let mut out = Vec::with_capacity(pairs.len());
                    for p in &pairs {
                        out.push(generate_label_map(&p.rainy, &pm, &tc)?);
                    }
                    out
                }
                LabelSourceChoice::Gln => {
                    let p = gln_checkpoint.as_ref().ok_or_else(|| {
                        anyhow!(
                            "label_source = gln requires --gln-checkpoint \
                             (or set label_source = niqe)"
                        )
                    })?;
                    let (mut gm, _, _) = checkpoint::load_model(p)?;
                    let mut out = Vec::with_capacity(pairs.len());
                    for pair in &pairs {
                        out.push(gln_label_map(&mut gm, &pair.rainy)?);
                    }
                    out
                }
            };
            let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
            let run = train_qudec(
                &pairs,
                &labels,
                model_cfg,
                &cfg,
                Some(&out_dir),
                resume.as_deref(),
            )?;
            println!(
                "trained {} steps over {} epochs; lambda1 = {}; checkpoints in {}",
                run.steps,
                cfg.epochs,
                run.state.lambda1,
                out_dir.display()
            );
        }
        Cmd::GlnTrain {
            data,
            pristine,
            thresholds,
            epochs,
            lr,
            micro,
        } => {
            let pairs = data.load()?;
            let pm = load_pristine(&pristine)?;
            let tc = thresholds_from(&thresholds)?;
            let rainy: Vec<_> = pairs.iter().map(|p| p.rainy.clone()).collect();
            let seed = cli.seed.unwrap_or(0);
            let dataset = build_gln_dataset(&rainy, &pm, &tc, seed)?;
            let model_cfg = if micro {
                ModelConfig::micro()
            } else {
                ModelConfig::default()
            };
            let mut model = QudecModel::new(model_cfg, seed);
            let report = train_gln(&mut model, &dataset, epochs, lr, seed)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("gln.ckpt"));
            checkpoint::save_model(
                &out,
                &model,
                serde_json::json!({
                    "gln_epochs": epochs,
                    "gln_lr": lr,
                    "final_accuracy": report.epoch_accuracy.last(),
                }),
                &[],
            )?;
            println!(
                "label classifier: {} pairs, final training accuracy {:.3}; saved {}",
                dataset.pairs.len(),
                report.epoch_accuracy.last().copied().unwrap_or(0.0),
                out.display()
            );
        }
        Cmd::Derain {
            input,
            cycle_spin,
            export_maps: export,
        } => {
            let mut model = load_checkpoint(&cli.checkpoint)?;
            let y = load_image(&input)?;
            let out_path = cli.out.clone().unwrap_or_else(|| {
                let stem = input.file_stem().unwrap_or_default().to_string_lossy();
                input.with_file_name(format!("{stem}_derained.png"))
            });
            if cycle_spin {
                let x = cycle_spin_derain(&mut model, &y, &CycleSpinConfig::default())?;
                save_image(&out_path, &x)?;
            } else {
                let out = derain(&mut model, &y)?;
                save_image(&out_path, &out.derained)?;
                if export {
                    let prefix = out_path.with_extension("");
                    for p in export_maps(&out, &prefix)? {
                        println!("wrote {}", p.display());
                    }
                }
            }
            println!("wrote {}", out_path.display());
        }
        Cmd::Eval {
            data,
            cycle_spin,
            float_metrics,
            luminance,
            full_scale_context,
        } => {
            let mut model = load_checkpoint(&cli.checkpoint)?;
            let pairs = data.load()?;
            let opts = EvalOptions {
                cycle_spin: cycle_spin.then(CycleSpinConfig::default),
                metric_mode: MetricMode {
                    eight_bit: !float_metrics,
                    luminance_psnr: luminance,
                },
                dataset_name: data.data.display().to_string(),
                full_scale_context,
            };
            let report = evaluate_dataset(&mut model, &pairs, &opts)?;
            print!("{}", report.to_table());
            if let Some(out) = &cli.out {
                std::fs::write(out, report.to_csv())?;
                println!("wrote {}", out.display());
            }
        }
        Cmd::Label {
            input,
            pristine,
            thresholds,
        } => {
            let pm = load_pristine(&pristine)?;
            let tc = thresholds_from(&thresholds)?;
            let img = load_image(&input)?;
            let map = generate_label_map(&img, &pm, &tc)?;
            let stem = cli.out.clone().unwrap_or_else(|| {
                let stem = input.file_stem().unwrap_or_default().to_string_lossy();
                input.with_file_name(format!("{stem}_labels"))
            });
            let txt = stem.with_extension("txt");
            let png = stem.with_extension("png");
            std::fs::write(&txt, map.to_text())?;
            map.to_png(&png, Some(&tc))?;
            println!("wrote {} and {}", txt.display(), png.display());
        }
        Cmd::NiqeFit {
            input,
            procedural,
            size,
        } => {
            let (corpus, descriptor) = match (&input, procedural) {
                (Some(dir), None) => {
                    let files = image_files(dir)?;
                    let mut imgs = Vec::with_capacity(files.len());
                    for f in &files {
                        imgs.push(load_image(f)?);
                    }
                    (imgs, format!("clean corpus at {}", dir.display()))
                }
                (None, Some(n)) => {
                    let seed = cli.seed.unwrap_or(1234);
                    (
                        procedural_corpus(n, size, size, seed),
                        format!("procedural corpus n={n} size={size} seed={seed}"),
                    )
                }
                _ => return Err(anyhow!("use exactly one of --in <dir> or --procedural <n>")),
            };
            let model = fit_pristine_model(&corpus, &descriptor)?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("pristine.model"));
            model.save(&out)?;
            println!("fitted pristine model ({descriptor}) -> {}", out.display());
        }
        Cmd::Calibrate { input, pristine } => {
            let pm = load_pristine(&pristine)?;
            let files = image_files(&input)?;
            let mut scores = Vec::new();
            for f in &files {
                let img = load_image(f)?;
                let (patches, _) = qudec_core::data::extract_patches(&img, 128, 128);
                for p in &patches {
                    scores.push(niqe_score(p, &pm)?.value);
                }
            }
            let tc = calibrate_thresholds(&scores)?;
            println!(
                "calibrated on {} patch scores: T1 = {:.4}, T2 = {:.4}, margin = {}",
                scores.len(),
                tc.t1,
                tc.t2,
                tc.margin
            );
            if let Some(out) = &cli.out {
                std::fs::write(out, format!("{} {} {}\n", tc.t1, tc.t2, tc.margin))?;
                println!("wrote {}", out.display());
            }
        }
        Cmd::Synth {
            count,
            size,
            density,
            intensity,
            clean,
        } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
            std::fs::create_dir_all(out.join("rainy"))?;
            std::fs::create_dir_all(out.join("clean"))?;
            let seed = cli.seed.unwrap_or(0);
            let cleans: Vec<(String, qudec_core::tensor::Tensor<f64>)> = match &clean {
                Some(dir) => {
                    let files = image_files(dir)?;
                    let mut v = Vec::new();
                    for f in files.iter().take(count) {
                        v.push((
                            f.file_stem()
                                .unwrap_or_default()
                                .to_string_lossy()
                                .into_owned(),
                            load_image(f)?,
                        ));
                    }
                    v
                }
                None => (0..count)
                    .map(|i| {
                        (
                            format!("{i:03}"),
                            qudec_core::data::procedural_clean_image(
                                size,
                                size,
                                seed.wrapping_add(i as u64),
                            ),
                        )
                    })
                    .collect(),
            };
            for (i, (name, x)) in cleans.iter().enumerate() {
                let pair = synthesize_rain(
                    x,
                    &SyntheticRainConfig {
                        density_per_mpx: density,
                        intensity,
                        seed: seed.wrapping_add(1000 + i as u64),
                        ..Default::default()
                    },
                );
                save_image(&out.join(format!("rainy/{name}.png")), &pair.rainy)?;
                save_image(&out.join(format!("clean/{name}.png")), &pair.clean)?;
            }
            println!("wrote {count} pairs under {}", out.display());
        }
    }
    Ok(())
}

fn image_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                    Some(ref e) if matches!(e.as_str(), "png" | "jpg" | "jpeg")
                )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(
            qudec_core::Error::data(format!("no images found in {}", dir.display())).into(),
        );
    }
    Ok(files)
}
