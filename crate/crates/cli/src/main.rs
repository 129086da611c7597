use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use grlb_core::baseline::{run_onestage, train_onestage, OneStageConfig};
use grlb_core::eval::{compare, eval_report, format_table, EvalOptions, EvalReport};
use grlb_core::io::{ensure_dir, write_atomic, write_json};
use grlb_core::pipeline::{ablate, predict_split, remove_objects, AblateConfig, Geometry, Predictor, RemovalOptions};
use grlb_core::scenegen::{gen_dataset, read_manifest, CorruptMode, GenConfig, Manifest, Split};
use grlb_core::stage1::{train_stage1, Stage1Config};
use grlb_core::stage2::{panel_triptych, render_appearance, train_stage2, Stage2Config};
use grlb_core::train::{load_checkpoint, Checkpoint};
use grlb_core::{CoreError, DepthMap, Image, Mask};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Gate(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(CoreError::Config(_)) => 1,
            CliError::Core(_) => 2,
            CliError::Gate(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "grlb", version, about = "Geometry-aware object removal on procedural scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FailureArg {
    FlattenToInput,
    Blur,
}

impl From<FailureArg> for CorruptMode {
    fn from(f: FailureArg) -> Self {
        match f {
            FailureArg::FlattenToInput => CorruptMode::FlattenToInput,
            FailureArg::Blur => CorruptMode::Blur,
        }
    }
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(clap::Args, Debug)]
struct SamplingArgs {
    /// Reverse-diffusion steps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the configured sample count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the depth-space removal model.
    TrainStage1(TrainArgs),
    /// Train the geometry-conditioned renderer.
    TrainStage2(TrainArgs),
    /// Train the single-stage baseline.
    TrainOnestage(TrainArgs),
    /// Remove an object: geometry removal then rendering.
    Remove {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        /// Fill the mask with local maximum depth when the geometry stage
        /// leaves it nearly unchanged.
        #[arg(long)]
        fill_in: bool,
        /// Replace the geometry-stage result with a corrupted input depth.
        #[arg(long, value_enum)]
        simulate_failure: Option<FailureArg>,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the object-removed depth map.
        #[arg(long)]
        depth_out: Option<PathBuf>,
        /// Also write the [target depth | source depth | output] triptych.
        #[arg(long)]
        panel_export: Option<PathBuf>,
    },
    /// Render the image for a new depth map.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        depth_src: PathBuf,
        #[arg(long)]
        depth_tgt: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        panel_export: Option<PathBuf>,
    },
    /// Remove an object with the single-stage baseline.
    RunOnestage {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a pipeline over a dataset split, writing a run directory.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long, requires = "stage2", conflicts_with = "onestage")]
        stage1: Option<PathBuf>,
        #[arg(long)]
        stage2: Option<PathBuf>,
        #[arg(long)]
        onestage: Option<PathBuf>,
        #[arg(long)]
        fill_in: bool,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Only the first N samples of the split.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a run directory; writes report.json and report.txt into it.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Also report the within-region residue score.
        #[arg(long)]
        both_iou: bool,
        /// Only the first N samples of the split.
        #[arg(long)]
        limit: Option<usize>,
        /// JSON evaluation options, including gates.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Delta table between two evaluated runs (second minus first).
    Compare { a: PathBuf, b: PathBuf },
    /// Train and evaluate the full ablation grid.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn manifest(path: &Path) -> Result<Manifest> {
    Ok(read_manifest(path)?)
}

fn checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(load_checkpoint(path)?)
}

/// Writes the resolved options next to a single-file output.
fn echo_options<T: Serialize>(out: &Path, options: &T) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".json");
    Ok(write_json(Path::new(&name), options)?)
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(ensure_dir(p)?),
        _ => Ok(()),
    }
}

fn report_path(run: &Path) -> PathBuf {
    run.join("report.json")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed, count } => {
            let mut cfg: GenConfig = load_config(config.as_deref())?;
            if let Some(n) = count {
                cfg.count = n;
            }
            let m = gen_dataset(&cfg, seed, &out)?;
            println!("wrote {} samples to {}", m.entries.len(), out.display());
        }
        Command::TrainStage1(a) => {
            let cfg: Stage1Config = load_config(a.config.as_deref())?;
            let t = train_stage1(&manifest(&a.manifest)?, &cfg, &a.out, a.resume)?;
            println!("stage1 checkpoint at step {} in {}", t.checkpoint.meta.step, a.out.display());
        }
        Command::TrainStage2(a) => {
            let cfg: Stage2Config = load_config(a.config.as_deref())?;
            let t = train_stage2(&manifest(&a.manifest)?, &cfg, &a.out, a.resume)?;
            println!("stage2 checkpoint at step {} in {}", t.checkpoint.meta.step, a.out.display());
        }
        Command::TrainOnestage(a) => {
            let cfg: OneStageConfig = load_config(a.config.as_deref())?;
            let t = train_onestage(&manifest(&a.manifest)?, &cfg, &a.out, a.resume)?;
            println!("onestage checkpoint at step {} in {}", t.checkpoint.meta.step, a.out.display());
        }
        Command::Remove {
            image,
            depth,
            mask,
            stage1,
            stage2,
            fill_in,
            simulate_failure,
            sampling,
            out,
            depth_out,
            panel_export,
        } => {
            let img = Image::load_png(&image)?;
            let d = DepthMap::load_png(&depth)?;
            let m = Mask::load_png(&mask)?;
            let opts = RemovalOptions {
                steps: sampling.steps,
                seed: sampling.seed,
                fill_in,
                simulate_failure: simulate_failure.map(Into::into),
                ..RemovalOptions::default()
            };
            let (s1, s2) = (checkpoint(&stage1)?, checkpoint(&stage2)?);
            let r = remove_objects(&s1, &s2, &[(&img, &d, &m)], &opts, &[sampling.seed])?.remove(0);
            parent_dir(&out)?;
            r.image.save_png(&out)?;
            echo_options(&out, &opts)?;
            if r.filled {
                println!("geometry stage left the mask unchanged; applied local max fill-in");
            }
            if let Some(p) = depth_out {
                parent_dir(&p)?;
                r.depth.save_png(&p)?;
            }
            if let Some(p) = panel_export {
                parent_dir(&p)?;
                panel_triptych(&r.image, &d, &r.depth)?.save_png(&p)?;
            }
            println!("wrote {}", out.display());
        }
        Command::Render {
            input,
            depth_src,
            depth_tgt,
            stage2,
            sampling,
            out,
            panel_export,
        } => {
            let img = Image::load_png(&input)?;
            let (src, tgt) = (DepthMap::load_png(&depth_src)?, DepthMap::load_png(&depth_tgt)?);
            let result = render_appearance(&checkpoint(&stage2)?, &img, &src, &tgt, sampling.steps, sampling.seed)?;
            parent_dir(&out)?;
            result.save_png(&out)?;
            echo_options(&out, &serde_json::json!({ "steps": sampling.steps, "seed": sampling.seed }))?;
            if let Some(p) = panel_export {
                parent_dir(&p)?;
                panel_triptych(&result, &src, &tgt)?.save_png(&p)?;
            }
            println!("wrote {}", out.display());
        }
        Command::RunOnestage {
            image,
            depth,
            mask,
            checkpoint: ck,
            sampling,
            out,
        } => {
            let img = Image::load_png(&image)?;
            let d = DepthMap::load_png(&depth)?;
            let m = Mask::load_png(&mask)?;
            let result = run_onestage(&checkpoint(&ck)?, &img, &d, &m, sampling.steps, sampling.seed)?;
            parent_dir(&out)?;
            result.save_png(&out)?;
            echo_options(&out, &serde_json::json!({ "steps": sampling.steps, "seed": sampling.seed }))?;
            println!("wrote {}", out.display());
        }
        Command::Predict {
            manifest: mpath,
            split,
            stage1,
            stage2,
            onestage,
            fill_in,
            sampling,
            limit,
            out,
        } => {
            let m = manifest(&mpath)?;
            let opts = RemovalOptions {
                steps: sampling.steps,
                seed: sampling.seed,
                fill_in,
                ..RemovalOptions::default()
            };
            let summary = match (stage1, stage2, onestage) {
                (Some(s1), Some(s2), None) => {
                    let (s1, s2) = (checkpoint(&s1)?, checkpoint(&s2)?);
                    let p = Predictor::TwoStage {
                        geometry: Geometry::Model(&s1),
                        stage2: &s2,
                    };
                    predict_split(&m, split.into(), &p, &opts, limit, &out)?
                }
                (None, None, Some(one)) => {
                    let one = checkpoint(&one)?;
                    predict_split(&m, split.into(), &Predictor::OneStage(&one), &opts, limit, &out)?
                }
                _ => return Err(CliError::Usage("predict needs --stage1 and --stage2, or --onestage".into())),
            };
            println!("wrote {} outputs to {}", summary.count, out.display());
        }
        Command::Eval {
            run,
            manifest: mpath,
            split,
            both_iou,
            limit,
            config,
        } => {
            let mut opts: EvalOptions = load_config(config.as_deref())?;
            opts.both_iou |= both_iou;
            let report = eval_report(&run, &manifest(&mpath)?, split.into(), limit, &opts)?;
            write_json(&report_path(&run), &report)?;
            let table = format_table(&report);
            write_atomic(&run.join("report.txt"), table.as_bytes())?;
            print!("{table}");
            if !report.missing.is_empty() {
                return Err(CoreError::data(&run, format!("{} outputs missing: {}", report.missing.len(), report.missing.join(", "))).into());
            }
            if !report.gates_passed() {
                let failed: Vec<_> = report.gates.iter().filter(|g| !g.passed).map(|g| g.name.as_str()).collect();
                return Err(CliError::Gate(format!("gates failed: {}", failed.join(", "))));
            }
        }
        Command::Compare { a, b } => {
            let load = |dir: &Path| -> Result<EvalReport> { Ok(grlb_core::io::read_json(&report_path(dir))?) };
            let (ra, rb) = (load(&a)?, load(&b)?);
            print!("{}", compare(&ra, &rb, &a.display().to_string(), &b.display().to_string()));
        }
        Command::Ablate { manifest: mpath, config, out } => {
            let cfg: AblateConfig = load_config(config.as_deref())?;
            ablate(&manifest(&mpath)?, &cfg, &out)?;
            print!("{}", fs::read_to_string(out.join("ablation.txt")).map_err(|e| CoreError::io(&out, e))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let threads = grlb_core::parallel::init_from_env();
    log::debug!("using {threads} worker threads");
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
