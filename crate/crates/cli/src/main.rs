//! `msi`: batch driver for the msi-core pipeline.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 I/O failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::Value;

use msi_core::devicelink::{self, LinkConfig};
use msi_core::divergence::{self, ScalarFeature};
use msi_core::features::{self, DataMatrix};
use msi_core::harness::{self, Reduction, StudyConfig, TrainedPipeline};
use msi_core::models::{self, ModelKind, Split};
use msi_core::sample_io::{load_dataset, load_sample, save_dataset, save_sample};
use msi_core::synth::{self, CaseStudyKind};
use msi_core::{preprocess, Dataset, Error, Mode, Result, Sample};

const DEFAULT_SEED: u64 = harness::DEFAULT_SEED;

#[derive(Parser)]
#[command(name = "msi", version, about = "Dual-mode multispectral imaging pipeline")]
struct Cli {
    /// JSON file merged over the subcommand's default configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Turmeric,
    CoconutOil,
    ColorChart,
}

impl From<KindArg> for CaseStudyKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Turmeric => CaseStudyKind::Turmeric,
            KindArg::CoconutOil => CaseStudyKind::CoconutOil,
            KindArg::ColorChart => CaseStudyKind::ColorChart,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReductionArg {
    Pca,
    Lda,
    None,
}

impl From<ReductionArg> for Reduction {
    fn from(r: ReductionArg) -> Self {
        match r {
            ReductionArg::Pca => Reduction::Pca,
            ReductionArg::Lda => Reduction::Lda,
            ReductionArg::None => Reduction::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassifierArg {
    Knn,
    DecisionTree,
    RandomForest,
    Logistic,
    LinearSvm,
}

impl From<ClassifierArg> for ModelKind {
    fn from(c: ClassifierArg) -> Self {
        match c {
            ClassifierArg::Knn => ModelKind::Knn,
            ClassifierArg::DecisionTree => ModelKind::DecisionTree,
            ClassifierArg::RandomForest => ModelKind::RandomForest,
            ClassifierArg::Logistic => ModelKind::Logistic,
            ClassifierArg::LinearSvm => ModelKind::LinearSvm,
        }
    }
}

/// Dataset inputs of the matrix-building commands.
#[derive(Args)]
struct MatrixInput {
    /// Dataset directory (one sample directory per capture).
    #[arg(long)]
    dataset: PathBuf,
    /// Transmittance dataset to merge with a reflectance `--dataset`.
    #[arg(long)]
    merge: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic case-study dataset with white references.
    Synth {
        #[arg(long, value_enum, default_value = "turmeric")]
        kind: KindArg,
    },
    /// Apply dark, flat-field, spectral and bilateral corrections.
    Preprocess {
        /// Study whose defaults (crop, bilateral stage) apply.
        #[arg(long, value_enum, default_value = "turmeric")]
        kind: KindArg,
        #[arg(long)]
        dataset: PathBuf,
        /// White reference sample directory of the same mode.
        #[arg(long)]
        white: PathBuf,
        /// Dark subtraction and crop only.
        #[arg(long)]
        no_corrections: bool,
    },
    /// Build the superpixel data matrix and write it as CSV.
    Matrix {
        #[command(flatten)]
        input: MatrixInput,
    },
    /// Fit normalizer, projection and classifier on the training split.
    Train {
        #[command(flatten)]
        input: MatrixInput,
        #[arg(long, value_enum, default_value = "knn")]
        classifier: ClassifierArg,
        #[arg(long, value_enum, default_value = "lda")]
        reduction: ReductionArg,
    },
    /// Score a trained model; restricted to the test ids of `--split`.
    Eval {
        #[command(flatten)]
        input: MatrixInput,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// KL adulteration curve and its linear map.
    KlRegress {
        /// Preprocessed transmittance dataset; the synthetic oil study
        /// when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Use one band instead of the first LDA component.
        #[arg(long)]
        band: Option<u32>,
    },
    /// Colour-chart validation study (PCA and LDA pipelines).
    Colorcheck,
    /// Full case study with accuracy tables and plot data.
    Study {
        #[arg(long, value_enum, default_value = "turmeric")]
        kind: KindArg,
    },
    /// Flat-field and spectral-distortion report of a white target.
    Consistency {
        /// White capture used to fit the gains; synthetic when omitted.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Capture the gains are evaluated on; a second synthetic white
        /// when omitted.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Band-mean deviation over repeated captures of one target.
    Repeatability {
        /// Dataset directory holding the repeated captures; synthetic
        /// when omitted.
        #[arg(long)]
        series: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        captures: usize,
        /// Peak relative intensity drift of the synthetic series.
        #[arg(long, default_value_t = harness::DEFAULT_DRIFT)]
        drift: f64,
    },
    /// Simulate the controller/camera capture handshake.
    ProtocolSim {
        /// Band index for a single capture; all bands when omitted.
        #[arg(long)]
        band: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 3 } else { 2 })
        }
    }
}

fn read_overrides(path: Option<&Path>) -> Result<Value> {
    match path {
        None => Ok(Value::Object(Default::default())),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::Json {
                path: p.to_path_buf(),
                source: e,
            })?;
            if !v.is_object() {
                return Err(Error::InvalidParameter(format!(
                    "{}: config must be a JSON object",
                    p.display()
                )));
            }
            Ok(v)
        }
    }
}

fn study_config(cli: &Cli, kind: CaseStudyKind) -> Result<StudyConfig> {
    StudyConfig::with_overrides(kind, &read_overrides(cli.config.as_deref())?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Raw captures are dark-subtracted; saved preprocessed captures carry a
/// zero dark frame, so this only rescales them.
fn normalized(samples: Vec<Sample>) -> Result<Vec<Sample>> {
    samples
        .into_iter()
        .map(|s| {
            let cube = preprocess::subtract_dark(&s.cube)?;
            Ok(Sample { cube, ..s })
        })
        .collect()
}

fn load_matrix(input: &MatrixInput, block: usize) -> Result<DataMatrix> {
    let first = normalized(load_dataset(&input.dataset)?.into_samples())?;
    let mode = first.first().ok_or(Error::EmptyData)?.mode();
    let m = features::build_matrix(&first, mode, block)?;
    match &input.merge {
        None => Ok(m),
        Some(dir) => {
            let second = normalized(load_dataset(dir)?.into_samples())?;
            let t = features::build_matrix(&second, Mode::Transmittance, block)?;
            features::merge(&m, &t)
        }
    }
}

/// Kind defaults for commands that work on loaded data.
fn generic_config(cli: &Cli) -> Result<StudyConfig> {
    study_config(cli, CaseStudyKind::Turmeric)
}

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    match &cli.command {
        Command::Synth { kind } => {
            let kind = CaseStudyKind::from(*kind);
            let cfg = study_config(cli, kind)?;
            let data = synth::generate_case_study(kind, &cfg.data, cli.seed)?;
            create_dir(out)?;
            for &mode in kind.modes() {
                save_dataset(data.dataset(mode), &out.join(mode.as_str()))?;
                let white = data.white(mode).expect("white rendered per mode");
                save_sample(white, &out.join("white").join(&white.id))?;
                println!("{}: {} samples", mode, data.dataset(mode).len());
            }
        }
        Command::Preprocess {
            kind,
            dataset,
            white,
            no_corrections,
        } => {
            let cfg = study_config(cli, CaseStudyKind::from(*kind))?;
            let samples = load_dataset(dataset)?.into_samples();
            let white = load_sample(white)?;
            let prepared = harness::prepare_samples(&samples, &white, !no_corrections, &cfg)?;
            save_dataset(&Dataset::new(prepared)?, out)?;
            println!("preprocessed {} samples into {}", samples.len(), out.display());
        }
        Command::Matrix { input } => {
            let cfg = generic_config(cli)?;
            let m = load_matrix(input, cfg.block)?;
            create_dir(out)?;
            m.save_csv(&out.join("matrix.csv"))?;
            println!("matrix {} x {}", m.n_rows(), m.n_cols());
        }
        Command::Train {
            input,
            classifier,
            reduction,
        } => {
            let cfg = generic_config(cli)?;
            let m = load_matrix(input, cfg.block)?;
            let split = models::stratified_split(&m, cfg.split_fraction, cli.seed, cfg.granularity)?;
            let (train, _) = split.apply(&m);
            let pipeline = TrainedPipeline::fit(
                &train,
                Reduction::from(*reduction),
                ModelKind::from(*classifier),
                &cfg,
                cli.seed,
            )?;
            create_dir(out)?;
            pipeline.save(&out.join("model.json"))?;
            write_json(&out.join("split.json"), &split)?;
            println!(
                "trained {} on {} rows ({} samples)",
                pipeline.model.kind,
                train.n_rows(),
                split.train_ids.len()
            );
        }
        Command::Eval { input, model, split } => {
            let cfg = generic_config(cli)?;
            let mut m = load_matrix(input, cfg.block)?;
            if let Some(path) = split {
                let split: Split = read_json(path)?;
                let rows: Vec<usize> = (0..m.n_rows())
                    .filter(|&i| split.test_ids.contains(&m.row_meta()[i].sample_id))
                    .collect();
                m = m.select_rows(&rows);
            }
            let pipeline = TrainedPipeline::load(model)?;
            let report = pipeline.evaluate(&m)?;
            create_dir(out)?;
            write_json(&out.join("evaluation.json"), &report)?;
            println!("accuracy {:.4} on {} rows", report.accuracy, m.n_rows());
        }
        Command::KlRegress { dataset, band } => {
            let cfg = study_config(cli, CaseStudyKind::CoconutOil)?;
            let samples = match dataset {
                Some(dir) => normalized(load_dataset(dir)?.into_samples())?,
                None => {
                    let data = synth::generate_case_study(CaseStudyKind::CoconutOil, &cfg.data, cli.seed)?;
                    harness::prepare_mode(&data, Mode::Transmittance, true, &cfg)?
                }
            };
            let kl = match band {
                None => harness::kl_report(&samples, cfg.block, &cfg.curve, cfg.lda_gamma_scale)?,
                Some(nm) => {
                    let feature = ScalarFeature::Band { wavelength_nm: *nm };
                    harness::kl_report_with(&samples, &feature, &cfg.curve)?
                }
            };
            create_dir(out)?;
            divergence::save_curve_csv(&kl.points, &out.join("kl_curve.csv"))?;
            write_json(&out.join("kl_map.json"), &kl.map)?;
            println!(
                "KL = {:.4} * level {:+.4}  (R^2 = {:.4}, Spearman = {:.3})",
                kl.map.slope, kl.map.intercept, kl.map.r_squared, kl.spearman_medians
            );
        }
        Command::Colorcheck => run_study(cli, CaseStudyKind::ColorChart)?,
        Command::Study { kind } => run_study(cli, CaseStudyKind::from(*kind))?,
        Command::Consistency { reference, target } => {
            let cfg = generic_config(cli)?;
            let reference = match reference {
                Some(p) => load_sample(p)?,
                None => synth::render(&harness::white_scene(Mode::Reflectance, cfg.data.width, cli.seed)?)?,
            };
            let target = match target {
                Some(p) => load_sample(p)?,
                None => {
                    let seed = cli.seed.wrapping_add(1);
                    synth::render(&harness::white_scene(reference.mode(), reference.cube.width(), seed)?)?
                }
            };
            let options = harness::study_options(reference.mode(), true, &cfg);
            let report =
                harness::spatial_consistency_report(&reference, &target, &options, &cfg.spatial_fit, cfg.block)?;
            report.write(out)?;
            let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
            println!(
                "band RSD {:.2}% -> {:.2}%, inter-band spread {:.2}% -> {:.2}%",
                100.0 * max(&report.before.band_rsd),
                100.0 * max(&report.after_spatial.band_rsd),
                100.0 * report.before.interband_spread,
                100.0 * report.after_spectral.interband_spread
            );
        }
        Command::Repeatability {
            series,
            captures,
            drift,
        } => {
            let samples = match series {
                Some(dir) => load_dataset(dir)?.into_samples(),
                None => harness::repeatability_fixture(cli.seed, *captures, *drift)?,
            };
            let report = harness::repeatability_report(&samples)?;
            report.write(out)?;
            println!(
                "max deviation {:.3}% over {} captures",
                report.max_deviation_pct, report.n_captures
            );
        }
        Command::ProtocolSim { band } => {
            let cfg: LinkConfig = {
                let overrides = read_overrides(cli.config.as_deref())?;
                serde_json::from_value(overrides).map_err(|e| Error::InvalidParameter(format!("link config: {e}")))?
            };
            let session = match band {
                Some(b) if *b >= cfg.n_bands => {
                    return Err(Error::InvalidParameter(format!("band {b} outside 0..{}", cfg.n_bands)))
                }
                Some(b) => devicelink::capture_handshake(&cfg, *b),
                None => devicelink::sequential_capture(&cfg),
            };
            let text = session.transcript.render();
            create_dir(out)?;
            write_text(&out.join("transcript.txt"), &text)?;
            print!("{text}");
            match &session.outcome {
                Ok(()) => println!("outcome: ok"),
                Err(e) => println!("outcome: {e}"),
            }
        }
    }
    Ok(())
}

fn run_study(cli: &Cli, kind: CaseStudyKind) -> Result<()> {
    let cfg = study_config(cli, kind)?;
    info!("running {} study with seed {}", kind.name(), cli.seed);
    let report = harness::run_case_study(kind, &cfg, cli.seed)?;
    report.write(&cli.out)?;
    print!("{}", report.accuracy_csv());
    if let Some(kl) = &report.kl {
        println!(
            "KL map: slope {:.4}, intercept {:.4}, R^2 {:.4}",
            kl.map.slope, kl.map.intercept, kl.map.r_squared
        );
    }
    Ok(())
}
