use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use p2pgen::checkpoint;
use p2pgen::curves::{self, Analysis, CurveTable, SweepEntry};
use p2pgen::datasets::{self, DatasetKind, DatasetSpec, SequenceSet, Split};
use p2pgen::metrics::{self, MetricKind, MetricsReport};
use p2pgen::model::{time_counter, LatentPath, P2PModel};
use p2pgen::objective::Ablation;
use p2pgen::trainer::{self, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "p2pgen", version, about = "Point-to-point sequence generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// S-Best / S-Div / S-CPC / R-Best over a test split.
    Eval(EvalArgs),
    /// Sample sequences between a start and an end frame.
    Generate(GenerateArgs),
    /// Chain clips through several control points.
    Stitch(StitchArgs),
    /// Sample a sequence that returns to its first frame.
    Loop(LoopArgs),
    /// Emit plot data as CSV.
    Curves(CurvesArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write train and test splits as sequence files.
    Gen(DatasetGenArgs),
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "P2P_OUT_DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct DatasetGenArgs {
    /// Take the dataset section of a run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `bouncing` or `skeleton` (ignored with --config).
    #[arg(long, default_value = "bouncing")]
    kind: String,
    #[arg(long, default_value_t = 16)]
    len: usize,
    #[arg(long, default_value_t = 1000)]
    train_count: usize,
    #[arg(long, default_value_t = 64)]
    test_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    /// Replace the config's ablation.
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequence file holding the test split.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = metrics::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value = "mse")]
    kind: MetricKind,
    /// Evaluation length; defaults to the shortest test sequence.
    #[arg(long)]
    len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct FrameSource {
    /// Sequence file supplying control frames (first sequence).
    #[arg(long)]
    frames: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated start frame.
    #[arg(long, allow_hyphen_values = true)]
    start: Option<String>,
    /// Comma-separated end frame.
    #[arg(long, allow_hyphen_values = true)]
    end: Option<String>,
    #[command(flatten)]
    source: FrameSource,
    #[arg(long)]
    len: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct StitchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Control points as comma-separated frames joined by `;`.
    #[arg(long, allow_hyphen_values = true)]
    points: Option<String>,
    #[command(flatten)]
    source: FrameSource,
    /// Comma-separated clip lengths, one per consecutive pair of points.
    #[arg(long, value_delimiter = ',')]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct LoopArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated anchor frame.
    #[arg(long, allow_hyphen_values = true)]
    frame: Option<String>,
    #[command(flatten)]
    source: FrameSource,
    #[arg(long)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct CurvesArgs {
    #[arg(long)]
    analysis: Analysis,
    /// `name=path`; for the weight sweep `prior@10=path` or `posterior@10=path`.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<String>,
    #[arg(long)]
    dataset: PathBuf,
    /// Length grid for cpc_vs_length.
    #[arg(long, value_delimiter = ',', default_values_t = [8, 12, 16, 20])]
    lengths: Vec<usize>,
    /// Evaluation length for the other analyses.
    #[arg(long, default_value_t = 12)]
    len: usize,
    #[arg(long, default_value_t = metrics::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value = "mse")]
    kind: MetricKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutDir,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Dataset {
            command: DatasetCommand::Gen(a),
        } => dataset_gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Generate(a) => generate(a),
        Command::Stitch(a) => stitch(a),
        Command::Loop(a) => loop_cmd(a),
        Command::Curves(a) => curves_cmd(a),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest over the command's inputs: its canonical argument record plus the
/// bytes of every input file.
fn input_digest(record: &serde_json::Value, files: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(record.to_string().as_bytes());
    for f in files {
        h.update(fs::read(f).with_context(|| format!("reading {}", f.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_frame(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| anyhow!("bad frame value `{v}`: {e}"))
        })
        .collect()
}

fn first_sequence(path: &Path) -> Result<Vec<Vec<f64>>> {
    let set = datasets::read_sequences(path).with_context(|| format!("reading {}", path.display()))?;
    set.sequences
        .into_iter()
        .next()
        .ok_or_else(|| anyhow!("{} holds no sequences", path.display()))
}

fn load_model(path: &Path) -> Result<P2PModel> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn check_dim(model: &P2PModel, frames: &[Vec<f64>]) -> Result<()> {
    let d = model.arch.frame_dim;
    if let Some(f) = frames.iter().find(|f| f.len() != d) {
        bail!("frame has {} values, checkpoint expects {d}", f.len());
    }
    Ok(())
}

fn timestamps(len: usize) -> Result<Vec<serde_json::Value>> {
    (1..=len)
        .map(|t| Ok(json!({ "t": t, "tau": time_counter(t, len)? })))
        .collect()
}

fn dataset_gen(a: DatasetGenArgs) -> Result<()> {
    let spec = match &a.config {
        Some(p) => RunConfig::load(p)?.dataset,
        None => {
            let kind: DatasetKind = serde_json::from_value(json!({ "kind": a.kind }))
                .map_err(|_| anyhow!("unknown dataset kind `{}`", a.kind))?;
            DatasetSpec {
                kind,
                len: a.len,
                train_count: a.train_count,
                test_count: a.test_count,
                seed: a.seed,
            }
        }
    };
    spec.validate()?;
    fs::create_dir_all(&a.out.out)?;
    for (split, name) in [(Split::Train, "train.p2pseq"), (Split::Test, "test.p2pseq")] {
        datasets::write_sequences(&a.out.out.join(name), &spec.generate(split)?)?;
    }
    let spec_json = serde_json::to_value(spec)?;
    write_json(
        &a.out.out.join("dataset.json"),
        &json!({
            "seed": spec.seed,
            "config_digest": sha256_hex(spec_json.to_string().as_bytes()),
            "dataset": spec_json,
            "dim": spec.dim(),
        }),
    )?;
    println!(
        "wrote {} train / {} test sequences to {}",
        spec.train_count,
        spec.test_count,
        a.out.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(ab) = a.ablation {
        cfg.ablation = ab;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(&a.out.out)?;
    fs::write(a.out.out.join("run.toml"), cfg.to_toml())?;
    let summary = trainer::train(&cfg, &a.out.out)?;
    let ckpt = fs::read(&summary.checkpoint)?;
    write_json(
        &a.out.out.join("run.json"),
        &json!({
            "seed": cfg.seed,
            "config_digest": cfg.digest(),
            "ablation": cfg.ablation.name(),
            "steps": summary.steps,
            "checkpoint_sha256": sha256_hex(&ckpt),
            "first": summary.first.map(|l| l.total),
            "last": summary.last.map(|l| l.total),
        }),
    )?;
    if let Some(l) = summary.last {
        println!(
            "step {} total {:.6} (recon {:.6}, kl {:.4}, cpc {:.6})",
            summary.steps, l.total, l.recon, l.kl, l.cpc
        );
    }
    println!("checkpoint {}", summary.checkpoint.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let test = datasets::read_sequences(&a.dataset).with_context(|| format!("reading {}", a.dataset.display()))?;
    let len = a.len.unwrap_or_else(|| test.min_len());
    let report = metrics::evaluate(&model, &test, len, a.samples, a.kind, a.seed)?;
    let record = json!({ "cmd": "eval", "samples": a.samples, "kind": a.kind.name(), "len": len, "seed": a.seed });
    let digest = input_digest(&record, &[&a.checkpoint, &a.dataset])?;
    fs::create_dir_all(&a.out.out)?;
    fs::write(
        a.out.out.join("metrics.csv"),
        format!(
            "# seed={} config_digest={digest}\n{}\n{}\n",
            a.seed,
            MetricsReport::CSV_HEADER,
            report.csv_row()
        ),
    )?;
    write_json(
        &a.out.out.join("metrics.json"),
        &json!({ "seed": a.seed, "config_digest": digest, "report": report }),
    )?;
    println!("{}\n{}", MetricsReport::CSV_HEADER, report.csv_row());
    Ok(())
}

/// Writes `seqs` plus a sidecar carrying the seed, digest, per-frame time
/// stamps and control-point indices.
fn write_generated(
    out: &Path,
    stem: &str,
    seqs: Vec<Vec<Vec<f64>>>,
    record: serde_json::Value,
    checkpoint: &Path,
    control_points: &[usize],
    seed: u64,
) -> Result<()> {
    let len = seqs[0].len();
    let dim = seqs[0][0].len();
    fs::create_dir_all(out)?;
    let path = out.join(format!("{stem}.p2pseq"));
    datasets::write_sequences(&path, &SequenceSet::new(dim, seqs)?)?;
    write_json(
        &out.join(format!("{stem}.json")),
        &json!({
            "seed": seed,
            "config_digest": input_digest(&record, &[checkpoint])?,
            "command": record,
            "frames": len,
            "timestamps": timestamps(len)?,
            "control_points": control_points,
        }),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (start, end) = match (&a.start, &a.end, &a.source.frames) {
        (Some(s), Some(e), None) => (parse_frame(s)?, parse_frame(e)?),
        (None, None, Some(p)) => {
            let seq = first_sequence(p)?;
            (seq[0].clone(), seq[seq.len() - 1].clone())
        }
        _ => bail!("give either --start and --end, or --frames"),
    };
    check_dim(&model, &[start.clone(), end.clone()])?;
    if a.count == 0 {
        bail!("--count must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let seqs = (0..a.count)
        .map(|_| model.sample_sequence(&start, &end, a.len, &mut rng))
        .collect::<p2pgen::Result<Vec<_>>>()?;
    let record =
        json!({ "cmd": "generate", "start": start, "end": end, "len": a.len, "count": a.count, "seed": a.seed });
    write_generated(
        &a.out.out,
        "generated",
        seqs,
        record,
        &a.checkpoint,
        &[0, a.len - 1],
        a.seed,
    )
}

fn stitch(a: StitchArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let points = match (&a.points, &a.source.frames) {
        (Some(p), None) => p.split(';').map(parse_frame).collect::<Result<Vec<_>>>()?,
        (None, Some(p)) => first_sequence(p)?,
        _ => bail!("give either --points or --frames"),
    };
    check_dim(&model, &points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let seq = model.stitch_generate(&points, &a.lengths, &mut rng)?;
    let bounds = P2PModel::stitch_boundaries(&a.lengths);
    let record = json!({ "cmd": "stitch", "points": points, "lengths": a.lengths, "seed": a.seed });
    write_generated(
        &a.out.out,
        "stitched",
        vec![seq],
        record,
        &a.checkpoint,
        &bounds,
        a.seed,
    )
}

fn loop_cmd(a: LoopArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let frame = match (&a.frame, &a.source.frames) {
        (Some(f), None) => parse_frame(f)?,
        (None, Some(p)) => first_sequence(p)?.swap_remove(0),
        _ => bail!("give either --frame or --frames"),
    };
    check_dim(&model, std::slice::from_ref(&frame))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let seq = model.loop_generate(&frame, a.len, &mut rng)?;
    let record = json!({ "cmd": "loop", "frame": frame, "len": a.len, "seed": a.seed });
    write_generated(
        &a.out.out,
        "loop",
        vec![seq],
        record,
        &a.checkpoint,
        &[0, a.len - 1],
        a.seed,
    )
}

struct NamedCheckpoint {
    name: String,
    path: PathBuf,
    model: P2PModel,
}

fn curves_cmd(a: CurvesArgs) -> Result<()> {
    let mut loaded = Vec::new();
    for spec in &a.checkpoints {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("checkpoint `{spec}` is not name=path"))?;
        let path = PathBuf::from(path);
        if !path.exists() {
            bail!("missing checkpoint {}", path.display());
        }
        loaded.push(NamedCheckpoint {
            name: name.to_string(),
            model: load_model(&path)?,
            path,
        });
    }
    let test = datasets::read_sequences(&a.dataset).with_context(|| format!("reading {}", a.dataset.display()))?;
    let models: Vec<(&str, &P2PModel)> = loaded.iter().map(|c| (c.name.as_str(), &c.model)).collect();
    let (table, file): (CurveTable, &str) = match a.analysis {
        Analysis::CpcVsLength => (
            curves::cpc_vs_length(&models, &test, &a.lengths, a.samples, a.kind, a.seed)?,
            "cpc_vs_length.csv",
        ),
        Analysis::DivThroughTime => (
            curves::div_through_time(&models, &test, a.len, a.samples, a.kind, a.seed)?,
            "div_through_time.csv",
        ),
        Analysis::QualityThroughTime => (
            curves::quality_through_time(&models, &test, a.len, a.samples, a.kind, a.seed)?,
            "quality_through_time.csv",
        ),
        Analysis::CpcWeightSweep => {
            let entries = loaded
                .iter()
                .map(|c| {
                    let (path, weight) = c
                        .name
                        .split_once('@')
                        .ok_or_else(|| anyhow!("sweep checkpoint `{}` is not placement@weight", c.name))?;
                    let path = match path {
                        "prior" => LatentPath::Prior,
                        "posterior" => LatentPath::Posterior,
                        other => bail!("unknown placement `{other}`"),
                    };
                    Ok(SweepEntry {
                        path,
                        weight: weight.parse().with_context(|| format!("bad weight in `{}`", c.name))?,
                        model: &c.model,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut weights: Vec<f64> = entries.iter().map(|e| e.weight).collect();
            weights.sort_by(f64::total_cmp);
            weights.dedup();
            curves::check_grid(&weights)?;
            (
                curves::cpc_weight_sweep(&entries, &test, a.len, a.samples, a.kind, a.seed)?,
                "cpc_weight_sweep.csv",
            )
        }
    };
    let record = json!({
        "cmd": "curves",
        "analysis": a.analysis,
        "checkpoints": a.checkpoints,
        "lengths": a.lengths,
        "len": a.len,
        "samples": a.samples,
        "kind": a.kind.name(),
        "seed": a.seed,
    });
    let mut files: Vec<&Path> = loaded.iter().map(|c| c.path.as_path()).collect();
    files.push(&a.dataset);
    let digest = input_digest(&record, &files)?;
    fs::create_dir_all(&a.out.out)?;
    let path = a.out.out.join(file);
    fs::write(
        &path,
        format!("# seed={} config_digest={digest}\n{}", a.seed, table.to_csv()),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}
