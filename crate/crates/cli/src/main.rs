//! `geokp`: command-line driver for synthesis, geodesic preprocessing,
//! training, inference and evaluation.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors (with a
//! single `error: <subcommand>: <message>` line on stderr). Existing outputs
//! are left untouched unless `--force` is given. Randomness is controlled by
//! `--seed`, which defaults to 0.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use geokp::geodesy::{cache_write, geodesics_with_retry, shortcut_diagnostic, ShortcutOptions, DEFAULT_K};
use geokp::io::{format_points, read_cloud, write_atomic, write_sequence, ManifestFile};
use geokp::metrics::{evaluate, perturb, EvalOptions, Protocol, DEFAULT_DELTA};
use geokp::nnet::load_checkpoint;
use geokp::synth::{generate, DeformSpec, Generator};
use geokp::trainer::{infer, train_from_config, TrainConfig};

type Result<T> = std::result::Result<T, Box<dyn Error + Send + Sync>>;

/// Neighbour-count retries when a k-NN graph is disconnected.
const KNN_RETRIES: usize = 3;

#[derive(Parser)]
#[command(name = "geokp", version, about = "Self-supervised geodesic-consistent keypoints on deforming point clouds")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic deforming sequence (frames, correspondences, manifest).
    Synth(SynthArgs),
    /// Compute geodesic caches for every frame of a manifest and register them in it.
    Preprocess(PreprocessArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Score a checkpoint on a sequence under a perturbation protocol.
    Eval(EvalArgs),
    /// Predict keypoints for one point cloud.
    Infer(InferArgs),
    /// Write a perturbed copy of a sequence.
    Perturb(PerturbArgs),
    /// Flag point pairs whose geodesic distance changes sharply between two frames.
    DiagnoseGeodesics(DiagnoseArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// bend, chain or breathe.
    #[arg(long)]
    generator: Generator,
    #[arg(long)]
    frames: usize,
    #[arg(long)]
    points: usize,
    /// Deformation amplitude in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    amplitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Neighbours per point; raised by 2 up to 3 times if the graph is disconnected.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Directory for the `.gkpd` cache files.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON document mirroring the training configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// clean, noise:<variance> or fps:<ratio>.
    #[arg(long, default_value = "clean")]
    protocol: Protocol,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    /// PCK curve CSV (`tau,pck`); defaults to the report path with a `.pck.csv` extension.
    #[arg(long)]
    pck_csv: Option<PathBuf>,
    /// Inclusivity distance threshold at unit scale.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Point cloud, one `x y z` line per point.
    #[arg(long)]
    input: PathBuf,
    /// Keypoint output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// clean, noise:<variance> or fps:<ratio>.
    #[arg(long)]
    protocol: Protocol,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Reference frame.
    #[arg(long, default_value_t = 0)]
    frame_a: usize,
    /// Compared frame (default: last).
    #[arg(long)]
    frame_b: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Minimum relative geodesic change reported.
    #[arg(long, default_value_t = ShortcutOptions::default().threshold)]
    threshold: f64,
    /// Ignore pairs shorter than this fraction of the geodesic diameter.
    #[arg(long, default_value_t = ShortcutOptions::default().min_fraction)]
    min_fraction: f64,
    /// JSON report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Preprocess(_) => "preprocess",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Infer(_) => "infer",
            Command::Perturb(_) => "perturb",
            Command::DiagnoseGeodesics(_) => "diagnose-geodesics",
        }
    }
}

/// True when every output exists and `force` is off; a note goes to stderr.
fn skip_existing(force: bool, outputs: &[PathBuf]) -> bool {
    let skip = !force && !outputs.is_empty() && outputs.iter().all(|p| p.exists());
    if skip {
        eprintln!("outputs exist, skipping (use --force to overwrite): {}", outputs[0].display());
    }
    skip
}

fn write_json<T: serde::Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_atomic(p, text.as_bytes())?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn synth(args: SynthArgs, force: bool) -> Result<()> {
    if skip_existing(force, &[args.out.join("manifest.json")]) {
        return Ok(());
    }
    let seq = generate(&DeformSpec {
        generator: args.generator,
        n_points: args.points,
        n_frames: args.frames,
        amplitude: args.amplitude,
        seed: args.seed,
    })?;
    let path = write_sequence(&args.out, &seq)?;
    println!("{}", path.display());
    Ok(())
}

fn preprocess(args: PreprocessArgs, force: bool) -> Result<()> {
    let mut file = ManifestFile::load(&args.manifest)?;
    let frames = file.frame_paths();
    let outputs: Vec<PathBuf> = frames
        .iter()
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy();
            args.out_dir.join(format!("{stem}.gkpd"))
        })
        .collect();
    fs::create_dir_all(&args.out_dir)?;
    let computed = frames
        .par_iter()
        .zip(&outputs)
        .enumerate()
        .map(|(t, (frame, out))| -> Result<bool> {
            if !force && out.exists() {
                return Ok(false);
            }
            let cloud = read_cloud(frame, t)?;
            let (d, used_k) = geodesics_with_retry(&cloud, args.k, KNN_RETRIES)?;
            if used_k != args.k {
                eprintln!("frame {t}: graph disconnected at k={}, used k={used_k}", args.k);
            }
            cache_write(&d, out)?;
            Ok(true)
        })
        .collect::<Result<Vec<_>>>()?;
    // cache paths are stored relative to the manifest when possible
    let base = file.base_dir();
    let base = fs::canonicalize(if base.as_os_str().is_empty() { Path::new(".") } else { &base })?;
    let out_dir = fs::canonicalize(&args.out_dir)?;
    file.manifest.geodesics = Some(
        outputs
            .iter()
            .map(|p| {
                let abs = out_dir.join(p.file_name().expect("cache file name"));
                abs.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(abs)
            })
            .collect(),
    );
    file.save()?;
    let n = computed.iter().filter(|&&c| c).count();
    println!("{n} computed, {} reused", computed.len() - n);
    Ok(())
}

fn train(args: TrainArgs, force: bool) -> Result<()> {
    let text = fs::read_to_string(&args.config).map_err(|e| format!("{}: {e}", args.config.display()))?;
    let mut config: TrainConfig =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", args.config.display()))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(dir) = args.out_dir {
        config.out_dir = dir;
    }
    // relative data paths resolve against the config file
    let base = args.config.parent().unwrap_or(Path::new("")).to_path_buf();
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    config.train = config.train.iter().map(resolve).collect();
    config.val = config.val.iter().map(resolve).collect();
    let outputs = ["train_log.csv", "best.gkpm", "last.gkpm"].map(|f| config.out_dir.join(f));
    if skip_existing(force, &outputs) {
        return Ok(());
    }
    if !force && outputs[0].exists() {
        return Err(format!("{} exists from an incomplete run (use --force)", outputs[0].display()).into());
    }
    let outcome = train_from_config(&config)?;
    let last = outcome.log.last().map_or(f64::NAN, |l| l.total);
    println!(
        "{} epochs, final loss {last:.6}, best epoch {}, outputs in {}",
        outcome.log.len(),
        outcome.best_epoch,
        config.out_dir.display()
    );
    Ok(())
}

fn eval(args: EvalArgs, force: bool) -> Result<()> {
    let pck_path = args.pck_csv.clone().unwrap_or_else(|| args.out.with_extension("pck.csv"));
    if skip_existing(force, &[args.out.clone(), pck_path.clone()]) {
        return Ok(());
    }
    let params = load_checkpoint(&args.checkpoint)?;
    let seq = ManifestFile::load(&args.manifest)?.load_sequence()?;
    let options = EvalOptions {
        delta: args.delta,
        knn_k: args.k,
        seed: args.seed,
    };
    let report = evaluate(&params, &seq, args.protocol, options)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_json(Some(&args.out), &report)?;
    report.write_pck_csv(&pck_path)?;
    println!(
        "T_con {:.2}, inclusivity {:.2}, coverage {:.2}, recon_err {:.6}, gd_err {:.6}",
        report.t_con, report.inclusivity, report.coverage, report.recon_err, report.gd_err.value
    );
    Ok(())
}

fn infer_cmd(args: InferArgs, force: bool) -> Result<()> {
    if let Some(out) = &args.out {
        if skip_existing(force, std::slice::from_ref(out)) {
            return Ok(());
        }
    }
    let params = load_checkpoint(&args.checkpoint)?;
    let cloud = read_cloud(&args.input, 0)?;
    let out = infer(&params, &cloud)?;
    let text = format_points(out.keypoints.positions());
    match &args.out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn perturb_cmd(args: PerturbArgs, force: bool) -> Result<()> {
    if skip_existing(force, &[args.out.join("manifest.json")]) {
        return Ok(());
    }
    let seq = ManifestFile::load(&args.manifest)?.load_sequence()?;
    let out = perturb(&seq, args.protocol, args.seed)?;
    let path = write_sequence(&args.out, &out)?;
    println!("{}", path.display());
    Ok(())
}

fn diagnose(args: DiagnoseArgs, force: bool) -> Result<()> {
    if let Some(out) = &args.out {
        if skip_existing(force, std::slice::from_ref(out)) {
            return Ok(());
        }
    }
    let seq = ManifestFile::load(&args.manifest)?.load_sequence()?;
    let (a, b) = (args.frame_a, args.frame_b.unwrap_or(seq.len() - 1));
    if a >= seq.len() || b >= seq.len() {
        return Err(format!("frame index out of range (sequence has {} frames)", seq.len()).into());
    }
    // frame a -> frame b: invert the map from frame 0 to a, then follow 0 -> b;
    // without correspondences the frames are taken to share point order
    let n = seq.n_points();
    let map = match (seq.map_from_first(a), seq.map_from_first(b)) {
        (Some(to_a), Some(to_b)) => {
            let mut from_a = vec![0; n];
            for (i, &j) in to_a.iter().enumerate() {
                from_a[j] = i;
            }
            from_a.iter().map(|&i| to_b[i]).collect()
        }
        _ => (0..n).collect::<Vec<_>>(),
    };
    let options = ShortcutOptions {
        k: args.k,
        threshold: args.threshold,
        min_fraction: args.min_fraction,
    };
    let frames = seq.frames();
    let report = shortcut_diagnostic(&frames[a], &frames[b], &map, options)?;
    eprintln!(
        "{} of {} pairs changed by more than {:.0}%",
        report.pairs.len(),
        report.pairs_considered,
        100.0 * args.threshold
    );
    write_json(args.out.as_deref(), &report)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global()?;
    }
    let force = cli.force;
    match cli.command {
        Command::Synth(a) => synth(a, force),
        Command::Preprocess(a) => preprocess(a, force),
        Command::Train(a) => train(a, force),
        Command::Eval(a) => eval(a, force),
        Command::Infer(a) => infer_cmd(a, force),
        Command::Perturb(a) => perturb_cmd(a, force),
        Command::DiagnoseGeodesics(a) => diagnose(a, force),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {name}: {msg}");
            ExitCode::from(2)
        }
    }
}
