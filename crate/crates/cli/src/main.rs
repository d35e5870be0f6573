//! `voxdepth` command-line front end.
//!
//! Exit codes: 0 success, 2 config or usage error, 3 I/O error, 4 pipeline
//! failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use voxdepth::io::{self, DatasetError, FrameFile, MetricsRecord, SequenceManifest};
use voxdepth::metrics::{self, format_psnr, psnr_serde};
use voxdepth::pipeline::{self, Method, PipelineError, RunReport, StageStats};
use voxdepth::synth::{self, SynthError};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Pipeline(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Pipeline(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Pipeline(m) => write!(f, "pipeline error: {m}"),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Dataset(d) => d.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Dataset(d) => d.into(),
            PipelineError::Sink(m) => CliError::Io(m),
            PipelineError::Config(_) => CliError::Config(e.to_string()),
            PipelineError::Metric(voxdepth::metrics::MetricError::RequiresGroundTruth) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Pipeline(other.to_string()),
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "voxdepth", version, about = "Depth map rectification for RGB-D sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config with optional `scene`, `noise` and `pipeline` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path override, e.g. `pipeline.fusion.window=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with ground truth and hole masks.
    Synth {
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Correct a sequence and write frames, metrics and a report.
    Run {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value = "voxdepth")]
        method: Method,
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        pipelined: Option<bool>,
        /// Require hole masks and report masked RMSE.
        #[arg(long)]
        masked_rmse: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score predicted frames against a dataset's ground truth.
    Eval {
        /// Dataset directory with ground truth.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory of `corrected_NNNNNN.png` files; the raw frames when omitted.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        masked_rmse: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Parameter sweeps: fusion frequency, window size, hole fraction, work size.
    Study {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Forced re-fusion periods; `never` fuses once.
        #[arg(long, value_delimiter = ',', default_value = "15,20,30,50,never")]
        frequencies: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8,10")]
        windows: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.15,0.2")]
        hole_fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "100,150,200,300,400")]
        work_sizes: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-component latency and end-to-end throughput.
    Bench {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        pipelined: Option<bool>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Run { common, .. }
            | Command::Eval { common, .. }
            | Command::Study { common, .. }
            | Command::Bench { common, .. } => common,
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("--{flag} is required")))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(io_error(path))
}

fn remove_stale(path: &Path) -> Result<(), CliError> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io_error(path)(e)),
        _ => Ok(()),
    }
}

fn write_rows(path: &Path, rows: &[MetricsRecord]) -> Result<(), CliError> {
    remove_stale(path)?;
    for r in rows {
        io::append_metrics(path, r)?;
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

fn open_dataset(input: &Path) -> Result<SequenceManifest, CliError> {
    Ok(io::load_sequence(input)?)
}

fn require_masks(m: &SequenceManifest) -> Result<(), CliError> {
    if !m.has_hole_masks {
        return Err(CliError::Config("--masked-rmse needs hole masks, and the dataset has none".into()));
    }
    for i in 0..m.frame_count() {
        let p = m.path(i, FrameFile::HoleMask);
        if !p.is_file() {
            return Err(CliError::Config(format!("--masked-rmse: missing mask file {}", p.display())));
        }
    }
    Ok(())
}

fn cmd_synth(output: &Option<PathBuf>, cfg: &config::AppConfig) -> Result<(), CliError> {
    let out = required(output, "output")?;
    let spec = cfg.scene.to_spec();
    let summary = synth::write_dataset(out, &spec, &cfg.noise)?;
    println!(
        "wrote {} frames ({}x{}) to {}: mean hole ratio {:.4}, mean raw PSNR {} dB",
        summary.frames,
        summary.width,
        summary.height,
        out.display(),
        summary.mean_hole_ratio,
        format_psnr(summary.mean_raw_psnr_db)
    );
    Ok(())
}

fn frame_rows(report: &RunReport, masked: bool) -> Vec<MetricsRecord> {
    report
        .records
        .iter()
        .map(|r| {
            let mut row = MetricsRecord::new()
                .with("frame", r.frame)
                .with("psnr_db", if r.psnr_db.is_nan() { String::new() } else { format_psnr(r.psnr_db) });
            if masked {
                row = row.with("masked_rmse", opt(r.masked_rmse));
            }
            row.with("hole_ratio", format!("{:.6}", r.hole_ratio))
                .with("raw", r.raw)
                .with("epoch", r.epoch)
                .with("good_count", r.good_count.map(|g| g.to_string()).unwrap_or_default())
        })
        .collect()
}

fn cmd_run(
    input: &Option<PathBuf>,
    output: &Option<PathBuf>,
    method: Method,
    masked: bool,
    cfg: &config::AppConfig,
) -> Result<(), CliError> {
    let manifest = open_dataset(required(input, "input")?)?;
    if masked {
        require_masks(&manifest)?;
    }
    let out = required(output, "output")?.to_path_buf();
    create_dir(&out)?;
    let report = pipeline::run_method(&manifest, &cfg.pipeline, method, &mut |i, img| {
        io::write_depth(out.join(format!("corrected_{i:06}.png")), img).map_err(|e| PipelineError::Sink(e.to_string()))
    })?;
    let masked_col = masked || manifest.has_hole_masks;
    write_rows(&out.join("metrics.csv"), &frame_rows(&report, masked_col))?;
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("config.json"), cfg)?;
    println!(
        "{}: {} frames, {:.2} fps, {} switches, mean PSNR {} dB{}",
        method,
        report.frames,
        report.throughput_fps,
        report.switches,
        format_psnr(report.mean_psnr_db),
        match report.masked_rmse {
            Some(r) => format!(", masked RMSE {r:.2}"),
            None => String::new(),
        }
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    frames: usize,
    #[serde(with = "psnr_serde")]
    mean_psnr_db: f64,
    masked_rmse: Option<f64>,
    mean_hole_ratio: f64,
}

fn cmd_eval(
    input: &Option<PathBuf>,
    predictions: &Option<PathBuf>,
    output: &Option<PathBuf>,
    masked: bool,
) -> Result<(), CliError> {
    let manifest = open_dataset(required(input, "input")?)?;
    if !manifest.has_ground_truth {
        return Err(CliError::Config("dataset has no ground truth".into()));
    }
    if masked {
        require_masks(&manifest)?;
    }
    let mut rows = Vec::new();
    let (mut psnrs, mut holes) = (Vec::new(), 0.0);
    let (mut sq, mut px) = (0.0, 0usize);
    for i in 0..manifest.frame_count() {
        let pred = match predictions {
            Some(dir) => io::read_depth(dir.join(format!("corrected_{i:06}.png")))?,
            None => io::read_frame(&manifest, i)?.depth,
        };
        let gt = io::read_ground_truth(&manifest, i)?.expect("manifest has ground truth");
        let p = metrics::psnr(&pred, &gt).map_err(|e| CliError::Io(format!("frame {i}: {e}")))?;
        let h = metrics::hole_ratio(&pred);
        let mut row = MetricsRecord::new().with("frame", i).with("psnr_db", format_psnr(p));
        if masked {
            let mask = io::read_hole_mask(&manifest, i)?.expect("masks checked");
            let (s, n) = metrics::masked_sq_error(&pred, &gt, &mask).map_err(|e| CliError::Io(e.to_string()))?;
            sq += s;
            px += n;
            row = row.with("masked_rmse", opt((n > 0).then(|| (s / n as f64).sqrt())));
        }
        rows.push(row.with("hole_ratio", format!("{h:.6}")));
        psnrs.push(p);
        holes += h;
    }
    let n = manifest.frame_count();
    let summary = EvalSummary {
        frames: n,
        mean_psnr_db: metrics::mean_psnr(psnrs),
        masked_rmse: (masked && px > 0).then(|| (sq / px as f64).sqrt()),
        mean_hole_ratio: holes / n as f64,
    };
    let mut agg = MetricsRecord::new()
        .with("frame", "mean")
        .with("psnr_db", format_psnr(summary.mean_psnr_db));
    if masked {
        agg = agg.with("masked_rmse", opt(summary.masked_rmse));
    }
    rows.push(agg.with("hole_ratio", format!("{:.6}", summary.mean_hole_ratio)));
    if let Some(out) = output {
        create_dir(out)?;
        write_rows(&out.join("eval.csv"), &rows)?;
        write_json(&out.join("eval.json"), &summary)?;
    }
    println!(
        "{n} frames: mean PSNR {} dB, hole ratio {:.4}{}",
        format_psnr(summary.mean_psnr_db),
        summary.mean_hole_ratio,
        summary.masked_rmse.map(|r| format!(", masked RMSE {r:.4}")).unwrap_or_default()
    );
    Ok(())
}

fn parse_frequency(s: &str) -> Result<Option<usize>, CliError> {
    match s.trim() {
        "never" | "inf" => Ok(None),
        t => t
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("bad fusion frequency `{t}`"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_study(
    input: &Option<PathBuf>,
    output: &Option<PathBuf>,
    frequencies: &[String],
    windows: &[usize],
    hole_fractions: &[f64],
    work_sizes: &[usize],
    cfg: &config::AppConfig,
) -> Result<(), CliError> {
    let manifest = open_dataset(required(input, "input")?)?;
    if !manifest.has_ground_truth {
        return Err(CliError::Config("study needs a dataset with ground truth".into()));
    }
    let out = required(output, "output")?;
    create_dir(out)?;
    let freqs = frequencies.iter().map(|s| parse_frequency(s)).collect::<Result<Vec<_>, _>>()?;
    let mut pc = cfg.pipeline.clone();
    pc.pipelined = false;

    let sweep_rows = |rows: &[pipeline::SweepRow], key: &str| -> Vec<MetricsRecord> {
        rows.iter()
            .map(|r| {
                MetricsRecord::new()
                    .with(key, r.value.map(|v| v.to_string()).unwrap_or_else(|| "never".into()))
                    .with("mean_psnr_db", format_psnr(r.mean_psnr_db))
                    .with("switches", r.switches)
            })
            .collect()
    };
    let freq = pipeline::sweep_fusion_frequency(&manifest, &pc, &freqs)?;
    write_rows(&out.join("fusion_frequency.csv"), &sweep_rows(&freq, "refusion_every"))?;
    let win = pipeline::sweep_init_window(&manifest, &pc, windows)?;
    write_rows(&out.join("init_window.csv"), &sweep_rows(&win, "window"))?;

    let curve = pipeline::sweep_hole_fraction(&manifest, hole_fractions, cfg.noise.seed, 0.05)?;
    let rows: Vec<_> = curve
        .iter()
        .map(|b| {
            MetricsRecord::new()
                .with("hole_ratio", format!("{:.2}", b.hole_ratio))
                .with("frames", b.frames)
                .with("mean_psnr_db", format_psnr(b.mean_psnr_db))
        })
        .collect();
    write_rows(&out.join("hole_curve.csv"), &rows)?;

    let resize = pipeline::sweep_work_size(&manifest, &pc, work_sizes)?;
    let rows: Vec<_> = resize
        .iter()
        .map(|r| {
            MetricsRecord::new()
                .with("work_size", r.work_size)
                .with("mean_psnr_db", format_psnr(r.mean_psnr_db))
                .with("mean_good_count", format!("{:.2}", r.mean_good_count))
                .with("transform_mean_ms", format!("{:.3}", r.transform_mean_ms))
        })
        .collect();
    write_rows(&out.join("resize.csv"), &rows)?;
    println!("wrote fusion_frequency.csv, init_window.csv, hole_curve.csv and resize.csv to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct ComponentRow {
    component: &'static str,
    #[serde(flatten)]
    stats: StageStats,
}

#[derive(Serialize)]
struct BenchTotal {
    frames: usize,
    mean_ms_per_frame: f64,
    fps: f64,
}

#[derive(Serialize)]
struct BenchReport {
    pipelined: bool,
    components: Vec<ComponentRow>,
    total: BenchTotal,
    switches: usize,
    templates_built: usize,
    #[serde(with = "psnr_serde")]
    mean_psnr_db: f64,
}

fn cmd_bench(input: &Option<PathBuf>, output: &Option<PathBuf>, cfg: &config::AppConfig) -> Result<(), CliError> {
    let manifest = open_dataset(required(input, "input")?)?;
    let report = pipeline::run_sequence(&manifest, &cfg.pipeline)?;
    let t = &report.timings;
    let bench = BenchReport {
        pipelined: report.pipelined,
        components: vec![
            ComponentRow { component: "fusion", stats: t.fusion },
            ComponentRow { component: "inpainting", stats: t.inpainting },
            ComponentRow { component: "transform", stats: t.transform },
            ComponentRow { component: "combine", stats: t.combine },
        ],
        total: BenchTotal {
            frames: report.frames,
            mean_ms_per_frame: if report.frames == 0 { 0.0 } else { report.wall_time_ms / report.frames as f64 },
            fps: report.throughput_fps,
        },
        switches: report.switches,
        templates_built: report.templates_built,
        mean_psnr_db: report.mean_psnr_db,
    };
    println!("{:<12} {:>8} {:>10} {:>10}", "component", "samples", "mean ms", "p95 ms");
    for c in &bench.components {
        println!(
            "{:<12} {:>8} {:>10.3} {:>10.3}",
            c.component, c.stats.samples, c.stats.mean_ms, c.stats.p95_ms
        );
    }
    println!(
        "{:<12} {:>8} {:>10.3} {:>10}",
        "total", bench.total.frames, bench.total.mean_ms_per_frame,
        format!("{:.2} fps", bench.total.fps)
    );
    if let Some(out) = output {
        create_dir(out)?;
        write_json(&out.join("bench.json"), &bench)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = cli.command.common().clone();
    let mut cfg = config::load(common.config.as_deref(), &common.sets, common.seed)?;
    match &cli.command {
        Command::Run { pipelined: Some(p), .. } | Command::Bench { pipelined: Some(p), .. } => {
            cfg.pipeline.pipelined = *p;
        }
        _ => {}
    }
    if common.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    match &cli.command {
        Command::Synth { output, .. } => cmd_synth(output, &cfg),
        Command::Run {
            input,
            output,
            method,
            masked_rmse,
            ..
        } => cmd_run(input, output, *method, *masked_rmse, &cfg),
        Command::Eval {
            input,
            predictions,
            output,
            masked_rmse,
            ..
        } => cmd_eval(input, predictions, output, *masked_rmse),
        Command::Study {
            input,
            output,
            frequencies,
            windows,
            hole_fractions,
            work_sizes,
            ..
        } => cmd_study(input, output, frequencies, windows, hole_fractions, work_sizes, &cfg),
        Command::Bench { input, output, .. } => cmd_bench(input, output, &cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("voxdepth: {e}");
            ExitCode::from(e.code())
        }
    }
}
