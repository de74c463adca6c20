use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sucode_core::ablation::{ablate_classes, ablate_codebook_size, ablate_mask, parse_range, AblationTable, ClassScheme};
use sucode_core::checkpoint::{load_checkpoint, resolve_checkpoint_dir};
use sucode_core::config::{parse_config, RunConfig};
use sucode_core::data::{list_ids, load_image, save_image};
use sucode_core::error::{Error, Result};
use sucode_core::inspect::inspect_codebooks;
use sucode_core::metrics::evaluate_dataset;
use sucode_core::synth::{build_dataset, DegradationParams, SceneSpec};
use sucode_core::trainer::{count_cost, run_stage, Enhancer, RunOptions};

#[derive(Parser)]
#[command(name = "sucode", version, about = "Semantic-aware codebook underwater image enhancement")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => parse_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Verb {
    /// Writes synthetic raw/mask/ref triplets.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Canvas side in pixels (default: configured image size).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 3)]
        objects: usize,
    },
    /// Trains one stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Dataset root with raw/, mask/ and ref/.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint (or run directory) of the previous stage.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Continue from `<out>/checkpoint` when present.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Enhances one image or every PNG of a directory.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores predictions, optionally against references.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        /// Report UCIQE multiplied by 100.
        #[arg(long)]
        uciqe_x100: bool,
    },
    /// Ablation sweeps, each training all three stages per setting.
    Ablate {
        #[command(subcommand)]
        kind: AblateKind,
    },
    /// Codebook usage statistics, nearest-patch grids and model cost.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        top_k: usize,
        /// Input side for the parameter and multiply-add count.
        #[arg(long)]
        cost_size: Option<usize>,
    },
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum AblateKind {
    /// Codebook shapes given as ENTRIESxDIM.
    CodebookSize {
        #[command(flatten)]
        args: AblateArgs,
        #[arg(long, num_args = 1.., default_values = ["128x128", "256x256", "512x512"])]
        sizes: Vec<String>,
    },
    /// Erosion/dilation radius ranges given as N or LO-HI.
    Mask {
        #[command(flatten)]
        args: AblateArgs,
        #[arg(long, num_args = 1.., default_values = ["0", "1-5", "6-10"])]
        ranges: Vec<String>,
    },
    /// Class schemes: the configured class count, `identity`, `6` or `4`.
    Classes {
        #[command(flatten)]
        args: AblateArgs,
        #[arg(long, num_args = 1.., default_values = ["8", "6", "4"])]
        schemes: Vec<String>,
    },
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::ConfigInvalid { field: "sizes".into(), reason: format!("`{text}` is not ENTRIESxDIM") };
    let (n, d) = text.split_once('x').ok_or_else(bad)?;
    Ok((n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { context: format!("creating {}", dir.display()), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { context: format!("writing {}", path.display()), source: e })
}

fn emit_table(table: &AblationTable, out: &Path, json: bool) -> Result<()> {
    let text = if json { table.to_json() } else { table.to_csv() };
    let name = if json { "ablation.json" } else { "ablation.csv" };
    write_text(&out.join(name), &text)?;
    print!("{text}");
    Ok(())
}

fn run(verb: Verb) -> Result<()> {
    match verb {
        Verb::Synth { common, count, out, size, objects } => {
            let cfg = common.load()?;
            let spec = SceneSpec {
                canvas_size: size.unwrap_or(cfg.model.image_size),
                object_count: objects,
                class_count: cfg.model.class_count,
                seed: cfg.seed,
            };
            let rows = build_dataset(count, &spec, &DegradationParams::default(), &out)?;
            log::info!("wrote {} triplets to {}", rows.len(), out.display());
        }
        Verb::Train { common, stage, data, out, init_from, resume, max_steps } => {
            let mut cfg = common.load()?;
            if max_steps.is_some() {
                cfg.train.max_steps = max_steps;
            }
            run_stage(stage, &cfg, &data, init_from.as_deref(), &out, &RunOptions { resume })?;
            log::info!("stage {stage} checkpoint written to {}", out.join("checkpoint").display());
        }
        Verb::Enhance { common: _, ckpt, input, out } => {
            let bundle = load_checkpoint(resolve_checkpoint_dir(&ckpt))?;
            let mut enhancer = Enhancer::new(&bundle)?;
            if input.is_dir() {
                let ids = list_ids(&input)?;
                if ids.is_empty() {
                    return Err(Error::EvalEmpty(format!("no PNG images in {}", input.display())));
                }
                fs::create_dir_all(&out).map_err(|e| Error::Io { context: format!("creating {}", out.display()), source: e })?;
                for id in ids {
                    let file = format!("{id}.png");
                    let img = enhancer.enhance(&load_image(&input.join(&file))?)?;
                    save_image(&img, &out.join(&file))?;
                }
            } else {
                let img = enhancer.enhance(&load_image(&input)?)?;
                if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| Error::Io { context: format!("creating {}", dir.display()), source: e })?;
                }
                save_image(&img, &out)?;
            }
        }
        Verb::Eval { common: _, pred, reference, out, json, uciqe_x100 } => {
            let mut report = evaluate_dataset(&pred, reference.as_deref())?;
            if uciqe_x100 {
                report = report.with_scaled_uciqe();
            }
            let text = if json { report.to_json() } else { report.to_csv() };
            match out {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Verb::Ablate { kind } => match kind {
            AblateKind::CodebookSize { args, sizes } => {
                let sizes = sizes.iter().map(|s| parse_size(s)).collect::<Result<Vec<_>>>()?;
                let table = ablate_codebook_size(&args.common.load()?, &args.data, &args.out, &sizes)?;
                emit_table(&table, &args.out, args.json)?;
            }
            AblateKind::Mask { args, ranges } => {
                let ranges = ranges.iter().map(|r| parse_range(r)).collect::<Result<Vec<_>>>()?;
                let table = ablate_mask(&args.common.load()?, &args.data, &args.out, &ranges)?;
                emit_table(&table, &args.out, args.json)?;
            }
            AblateKind::Classes { args, schemes } => {
                let cfg = args.common.load()?;
                let schemes = schemes
                    .iter()
                    .map(|s| ClassScheme::parse(s, cfg.model.class_count))
                    .collect::<Result<Vec<_>>>()?;
                let table = ablate_classes(&cfg, &args.data, &args.out, &schemes)?;
                emit_table(&table, &args.out, args.json)?;
            }
        },
        Verb::Inspect { common: _, ckpt, data, out, top_k, cost_size } => {
            let bundle = load_checkpoint(resolve_checkpoint_dir(&ckpt))?;
            fs::create_dir_all(&out).map_err(|e| Error::Io { context: format!("creating {}", out.display()), source: e })?;
            if let Some(data) = data {
                let inspection = inspect_codebooks(&bundle, &data, &out, top_k)?;
                print!("{}", inspection.summary_csv());
            }
            let size = cost_size.unwrap_or(bundle.config.model.image_size);
            let (params, mult_adds) = count_cost(&bundle, size)?;
            let text = format!("input_size,params,mult_adds\n{size},{params},{mult_adds}\n");
            write_text(&out.join("cost.csv"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let level = std::env::var("SUCODE_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
