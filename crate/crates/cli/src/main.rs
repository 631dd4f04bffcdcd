use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advseg::advsegloss::StepReport;
use advseg::data::{coco_category, export_coco_split, validate_dataset, CocoIndex, DatasetSpec, Split};
use advseg::edges::{extract_sketch_dir, EdgeBackend};
use advseg::eval::{compute_fid, load_extractor};
use advseg::run::{self, RunManifest, TrainOptions};
use advseg::{Scheme, TrainConfig};
use clap::{Arg, ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

const EXIT_ERROR: u8 = 1;
const EXIT_EMPTY_REPORT: u8 = 3;
const EXIT_PARTIAL_ABLATION: u8 = 4;

const DEVICE_VAR: &str = "ADVSEG_DEVICE";

/// Sketch colorization GANs with adversarial segmentation losses.
#[derive(Parser)]
#[command(name = "advseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Curate a COCO category into a dataset root and validate the layout.
    PrepareData {
        #[arg(long)]
        dataset: String,
        /// COCO instance annotations for one split.
        #[arg(long, requires = "images")]
        coco_annotations: Option<PathBuf>,
        /// Directory holding the images named in the annotation file.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "unpaired")]
        scheme: Scheme,
    },
    /// Extract sketches from every image in a directory.
    PrepareSketches {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long, default_value = "xdog")]
        backend: String,
        /// `key = value` parameter file; defaults apply when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Train a run; every config key can be overridden with `--<key> <value>`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs, leaving the run resumable.
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        skip_generation: bool,
    },
    /// FID between two image directories.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        /// `random[:seed]` or a feature-extractor weights file.
        #[arg(long)]
        extractor: String,
        #[arg(long, default_value = "fid_report.json")]
        report: PathBuf,
    },
    /// Sweep w_b = w_m over a grid, training and evaluating one run per value.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1.0,5.0,10.0")]
        grid: Vec<f64>,
        #[arg(long)]
        extractor: String,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render a sketch/output grid from a run checkpoint.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        sketches: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epoch: Option<usize>,
        #[arg(long, default_value_t = 4)]
        columns: usize,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// FID table of runs arranged as dataset x model.
    Report {
        manifests: Vec<PathBuf>,
        /// Real images for every run instead of each dataset's test colors.
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        extractor: String,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Copy the generations of two runs into a survey content directory.
    SurveyExport {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        ours: PathBuf,
        #[arg(long)]
        content: PathBuf,
    },
}

fn config_args() -> Vec<Arg> {
    TrainConfig::keys()
        .iter()
        .map(|&k| Arg::new(k).long(k).value_name("VALUE").help_heading("Config overrides"))
        .collect()
}

fn cli_command() -> clap::Command {
    Cli::command()
        .mut_subcommand("train", |c| c.args(config_args()))
        .mut_subcommand("ablate", |c| c.args(config_args()))
}

fn resolve_config(file: Option<&Path>, overrides: &ArgMatches) -> advseg::Result<TrainConfig> {
    let mut cfg = match file {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for &k in TrainConfig::keys() {
        if let Some(v) = overrides.get_one::<String>(k) {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_device() -> Result<(), String> {
    match std::env::var(DEVICE_VAR) {
        Err(_) => Ok(()),
        Ok(v) if v.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(v) => Err(format!("{DEVICE_VAR}={v:?}: only the cpu device is available in this build")),
    }
}

fn print_progress(epoch: usize, r: &StepReport) {
    if r.step % 50 == 0 {
        eprintln!("epoch {epoch} step {} total {:.4} (g {:.4} b {:.4} m {:.4})", r.step, r.total, r.l_g, r.l_b, r.l_m);
    }
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand required");
    match cli.command {
        Command::PrepareData { dataset, coco_annotations, images, split, out, scheme } => {
            if let Some(ann) = coco_annotations {
                let category = coco_category(&dataset)
                    .ok_or_else(|| format!("dataset {dataset:?} is not curated from COCO"))?;
                let split = match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                };
                let index = CocoIndex::load(&ann)?;
                let images = images.expect("clap enforces --images");
                let r = export_coco_split(&index, category, &images, &out, split)?;
                println!("{dataset} {split}: {} selected, {} copied", r.selected, r.copied);
                for m in &r.missing {
                    eprintln!("warning: missing image {m}");
                }
            }
            let report = validate_dataset(&DatasetSpec::new(&dataset, &out, scheme))?;
            for (dir, n) in &report.counts {
                println!("{dir}: {n}");
            }
            for v in &report.violations {
                eprintln!("warning: {v}");
            }
        }
        Command::PrepareSketches { src, dst, backend, params } => {
            let text = match &params {
                Some(p) => std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
                None => String::new(),
            };
            let backend = EdgeBackend::from_params(&backend, &text)?;
            let r = extract_sketch_dir(&src, &dst, &backend)?;
            println!("wrote {} sketches to {}", r.written, dst.display());
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Train { config, resume, max_epochs, skip_generation } => {
            let cfg = resolve_config(config.as_deref(), sub)?;
            let opts = TrainOptions { resume, max_epochs, skip_generation, progress: Some(print_progress) };
            let m = run::train(&cfg, &opts)?;
            println!("{}", RunManifest::path(&m.run_dir()).display());
        }
        Command::Evaluate { real, fake, extractor, report } => {
            let ex = load_extractor(&extractor)?;
            let r = compute_fid(&real, &fake, ex.as_ref())?;
            std::fs::write(&report, serde_json::to_vec_pretty(&r)?).map_err(|e| format!("{}: {e}", report.display()))?;
            println!("{}", r.fid);
        }
        Command::Ablate { config, grid, extractor, csv } => {
            let cfg = resolve_config(config.as_deref(), sub)?;
            let ex = load_extractor(&extractor)?;
            let table = run::ablate(&cfg, &grid, ex.as_ref())?;
            print!("{}", table.to_markdown());
            if let Some(p) = csv {
                std::fs::write(&p, table.to_csv()).map_err(|e| format!("{}: {e}", p.display()))?;
            }
            if table.rows.iter().any(|r| r.fid.is_none()) {
                return Ok(ExitCode::from(EXIT_PARTIAL_ABLATION));
            }
        }
        Command::Sample { manifest, sketches, out, epoch, columns, limit } => {
            let m = RunManifest::load(&manifest)?;
            let (rows, cols) = run::sample(&m, epoch, &sketches, &out, columns, limit)?;
            println!("{} ({rows}x{cols})", out.display());
        }
        Command::Report { manifests, real, extractor, format, out } => {
            let ex = load_extractor(&extractor)?;
            let table = run::report(&manifests, real.as_deref(), ex.as_ref())?;
            let text = match format {
                Format::Markdown => table.to_markdown(),
                Format::Csv => table.to_csv(),
            };
            match out {
                Some(p) => std::fs::write(&p, &text).map_err(|e| format!("{}: {e}", p.display()))?,
                None => print!("{text}"),
            }
            for n in &table.notes {
                eprintln!("absent: {n}");
            }
            if table.is_empty() {
                eprintln!("no runs to report");
                return Ok(ExitCode::from(EXIT_EMPTY_REPORT));
            }
        }
        Command::SurveyExport { baseline, ours, content } => {
            let n = run::survey_export(&RunManifest::load(&baseline)?, &RunManifest::load(&ours)?, &content)?;
            println!("exported {n} pairs to {}", content.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = cli_command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Err(e) = check_device() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_ERROR);
    }
    match run(cli, &matches) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
