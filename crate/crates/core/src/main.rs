use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use mccm::builder::build;
use mccm::composer::compose;
use mccm::descriptors::{bundled, CnnModel, FpgaPlatform};
use mccm::dse::{explore, write_points_csv, DesignSpaceConfig, Family, Metric};
use mccm::notation::{parse_accelerator, parse_for_depth, AcceleratorSketch};
use mccm::report::{breakdown, explore_summary, validation, EvalOutput, Provenance};
use mccm::sim::{simulate, DEFAULT_CAP_MACS};
use mccm::{analysis, Error, Result};

#[derive(Parser)]
#[command(
    name = "mccm",
    version,
    about = "Cost model and explorer for multiple-CE CNN accelerators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one accelerator sketch.
    Eval(EvalArgs),
    /// Evaluate the baseline families and a sample of custom designs.
    Explore(ExploreArgs),
    /// Compare the analytical model with the event simulator.
    Validate(ValidateArgs),
    /// Print a sketch in canonical form.
    Fmt(FmtArgs),
}

#[derive(Args)]
struct Inputs {
    /// CNN descriptor: a JSON file or a bundled model name.
    cnn: String,
    /// Platform descriptor: a JSON file or a bundled board name.
    platform: String,
    /// Override the platform clock in Hz.
    #[arg(long)]
    clock_hz: Option<u64>,
    /// Override the on-chip memory budget in bytes.
    #[arg(long)]
    on_chip_bytes: Option<u64>,
    /// Run segments one input at a time instead of overlapping them.
    #[arg(long)]
    no_inter_seg_pipelining: bool,
    /// Record the wall-clock time in the output.
    #[arg(long)]
    timestamp: bool,
    /// Write the main output here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Sketch text such as "{L1-Last: CE1-CE2}", or a file holding one.
    sketch: String,
    /// Add time, access, utilization and buffer breakdowns.
    #[arg(long)]
    breakdown: bool,
    /// Also write the built accelerator as JSON.
    #[arg(long, value_name = "FILE")]
    emit_accelerator: Option<PathBuf>,
    /// Print per-segment CSV instead of JSON.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct ExploreArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// JSON exploration config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    min_ces: Option<usize>,
    #[arg(long)]
    max_ces: Option<usize>,
    /// Comma-separated: segmented, segmentedrr, hybrid, custom.
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<String>>,
    /// Number of custom designs to sample.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Two of latency, throughput, buffer, accesses.
    #[arg(long, value_delimiter = ',')]
    objectives: Option<Vec<String>>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Print the point list as CSV instead of the JSON summary.
    #[arg(long)]
    csv: bool,
    /// Also write the point list as CSV.
    #[arg(long, value_name = "FILE")]
    points: Option<PathBuf>,
    /// Also write the JSON summary.
    #[arg(long, value_name = "FILE")]
    pareto: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    inputs: Inputs,
    sketch: String,
    /// Largest network, in MACs, the simulator accepts.
    #[arg(long, default_value_t = DEFAULT_CAP_MACS)]
    cap: u64,
    /// Write the simulator's event trace as CSV.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct FmtArgs {
    sketch: String,
    /// Resolve `Last` against this CNN.
    #[arg(long)]
    cnn: Option<String>,
    /// Resolve `Last` against this many layers.
    #[arg(long, conflicts_with = "cnn")]
    depth: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ExploreFile {
    ce_count_range: Option<[usize; 2]>,
    families: Option<Vec<String>>,
    sample_size: Option<usize>,
    rng_seed: Option<u64>,
    objectives: Option<[String; 2]>,
    inter_segment_pipelining: Option<bool>,
}

/// A failed run with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_infeasible() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Text of a descriptor given as a path, a name under `MCCM_DATA_DIR` or a
/// bundled name.
fn resolve(arg: &str, kind: &str, bundled: &[(&str, &str)]) -> Result<String> {
    let path = Path::new(arg);
    if path.is_file() {
        return read(path);
    }
    let stem = arg.strip_suffix(".json").unwrap_or(arg);
    if let Some(dir) = std::env::var_os("MCCM_DATA_DIR") {
        let dir = PathBuf::from(dir);
        for candidate in [
            dir.join(kind).join(format!("{stem}.json")),
            dir.join(format!("{stem}.json")),
        ] {
            if candidate.is_file() {
                return read(&candidate);
            }
        }
    }
    bundled
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(stem))
        .map(|(_, text)| text.to_string())
        .ok_or_else(|| Error::Io {
            path: path.to_path_buf(),
            source: io::Error::new(io::ErrorKind::NotFound, format!("no such file or bundled {kind} name")),
        })
}

fn sketch_text(arg: &str) -> Result<String> {
    let path = Path::new(arg);
    if !arg.trim_start().starts_with('{') && path.is_file() {
        return Ok(read(path)?.trim().to_string());
    }
    Ok(arg.to_string())
}

struct Loaded {
    cnn: Arc<CnnModel>,
    platform: FpgaPlatform,
    cnn_text: String,
    platform_text: String,
}

fn load(inputs: &Inputs) -> Result<Loaded> {
    let cnn_text = resolve(&inputs.cnn, "cnns", &bundled::CNNS)?;
    let platform_text = resolve(&inputs.platform, "platforms", &bundled::PLATFORMS)?;
    let cnn = CnnModel::from_json_str(&cnn_text)?;
    let mut platform = FpgaPlatform::from_json_str(&platform_text)?;
    if let Some(hz) = inputs.clock_hz {
        if hz == 0 {
            return Err(Error::Config("--clock-hz must be positive".into()));
        }
        platform = platform.with_clock(hz);
    }
    if let Some(bytes) = inputs.on_chip_bytes {
        platform = platform.with_on_chip_bytes(bytes);
    }
    Ok(Loaded {
        cnn: Arc::new(cnn),
        platform,
        cnn_text,
        platform_text,
    })
}

fn settings(inputs: &Inputs, extra: &str) -> String {
    format!(
        "clock_hz={:?};on_chip_bytes={:?};inter_seg={};{extra}",
        inputs.clock_hz, inputs.on_chip_bytes, !inputs.no_inter_seg_pipelining
    )
}

fn provenance(inputs: &Inputs, loaded: &Loaded, parts: &[&[u8]]) -> Provenance {
    let mut all: Vec<&[u8]> = vec![loaded.cnn_text.as_bytes(), loaded.platform_text.as_bytes()];
    all.extend_from_slice(parts);
    let stamp = inputs.timestamp.then(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    });
    Provenance::new(&all, stamp)
}

fn write_out(target: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match target {
        Some(path) => fs::write(path, bytes).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        }),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)
                .and_then(|_| out.flush())
                .map_err(|source| Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })
        }
    }
}

fn json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("output serializes");
    v.push(b'\n');
    v
}

fn sketch_for(text: &str, loaded: &Loaded, inputs: &Inputs) -> CliResult<AcceleratorSketch> {
    let sketch = parse_sketch(text, &loaded.cnn)?;
    Ok(if inputs.no_inter_seg_pipelining {
        sketch.with_inter_segment_pipelining(false)
    } else {
        sketch
    })
}

/// Parse error with a caret under the offending column.
fn parse_sketch(text: &str, cnn: &CnnModel) -> CliResult<AcceleratorSketch> {
    parse_accelerator(text, cnn).map_err(|e| sketch_failure(text, e))
}

fn sketch_failure(text: &str, e: Error) -> Failure {
    let mut f = Failure::from(e);
    if let Some(col) = f
        .message
        .strip_prefix("syntax error at column ")
        .and_then(|r| r.split(':').next())
    {
        if let Ok(col) = col.parse::<usize>() {
            // columns count non-blank characters
            let mut seen = 0;
            let pos = text
                .char_indices()
                .find(|(_, c)| {
                    if c.is_whitespace() {
                        return false;
                    }
                    seen += 1;
                    seen == col
                })
                .map(|(i, _)| text[..i].chars().count())
                .unwrap_or(text.chars().count());
            f.message = format!("{}\n  {text}\n  {}^", f.message, " ".repeat(pos));
        }
    }
    f
}

fn run_eval(args: EvalArgs) -> CliResult<()> {
    let loaded = load(&args.inputs)?;
    let text = sketch_text(&args.sketch)?;
    let sketch = sketch_for(&text, &loaded, &args.inputs)?;
    let acc = build(&sketch, loaded.cnn.clone(), &loaded.platform)?;
    if let Some(path) = &args.emit_accelerator {
        write_out(Some(path), format!("{}\n", acc.to_json()).as_bytes())?;
    }
    let report = compose(&acc);
    if args.csv {
        let mut buf = Vec::new();
        analysis::write_segment_csv(&report, &mut buf)?;
        write_out(args.inputs.output.as_deref(), &buf)?;
        return Ok(());
    }
    let canonical = sketch.to_string();
    let flags = settings(&args.inputs, "");
    let out = EvalOutput {
        provenance: provenance(&args.inputs, &loaded, &[canonical.as_bytes(), flags.as_bytes()]),
        cnn: loaded.cnn.name.clone(),
        platform: loaded.platform.name.clone(),
        breakdown: args.breakdown.then(|| breakdown(&report)),
        report,
    };
    write_out(args.inputs.output.as_deref(), &json(&out))?;
    Ok(())
}

fn explore_config(args: &ExploreArgs) -> Result<(DesignSpaceConfig, String)> {
    let (file, file_text) = match &args.config {
        Some(path) => {
            let text = read(path)?;
            let parsed: ExploreFile =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            (parsed, text)
        }
        None => (ExploreFile::default(), String::new()),
    };
    let mut cfg = DesignSpaceConfig::default();
    if let Some([lo, hi]) = file.ce_count_range {
        cfg.min_ces = lo;
        cfg.max_ces = hi;
    }
    let families = args.families.clone().or(file.families);
    if let Some(list) = families {
        cfg.families = list.iter().map(|f| f.trim().parse::<Family>()).collect::<Result<_>>()?;
    }
    let objectives = args.objectives.clone().or(file.objectives.map(Vec::from));
    if let Some(list) = objectives {
        if list.len() != 2 {
            return Err(Error::Config("exactly two objectives are needed".into()));
        }
        cfg.objectives = (list[0].trim().parse::<Metric>()?, list[1].trim().parse::<Metric>()?);
    }
    cfg.min_ces = args.min_ces.unwrap_or(cfg.min_ces);
    cfg.max_ces = args.max_ces.unwrap_or(cfg.max_ces);
    cfg.sample_size = args.samples.or(file.sample_size).unwrap_or(cfg.sample_size);
    cfg.seed = args.seed.or(file.rng_seed).unwrap_or(cfg.seed);
    cfg.inter_segment_pipelining =
        file.inter_segment_pipelining.unwrap_or(true) && !args.inputs.no_inter_seg_pipelining;
    cfg.validate()?;
    Ok((cfg, file_text))
}

fn run_explore(args: ExploreArgs) -> CliResult<()> {
    let loaded = load(&args.inputs)?;
    let (cfg, file_text) = explore_config(&args)?;
    let started = Instant::now();
    let ex = explore(&cfg, loaded.cnn.clone(), &loaded.platform, args.jobs)?;
    let elapsed = started.elapsed();

    let mut csv = Vec::new();
    write_points_csv(&ex.points, &mut csv)?;
    let flags = settings(&args.inputs, &format!("{cfg:?}"));
    let summary = explore_summary(
        provenance(&args.inputs, &loaded, &[file_text.as_bytes(), flags.as_bytes()]),
        &ex,
    );
    let summary = json(&summary);
    if let Some(path) = &args.points {
        write_out(Some(path), &csv)?;
    }
    if let Some(path) = &args.pareto {
        write_out(Some(path), &summary)?;
    }
    write_out(args.inputs.output.as_deref(), if args.csv { &csv } else { &summary })?;
    eprintln!(
        "{} designs in {:.2} s, {:.3} ms per design",
        ex.points.len(),
        elapsed.as_secs_f64(),
        elapsed.as_secs_f64() * 1e3 / ex.points.len() as f64
    );
    Ok(())
}

fn run_validate(args: ValidateArgs) -> CliResult<bool> {
    let loaded = load(&args.inputs)?;
    let text = sketch_text(&args.sketch)?;
    let sketch = sketch_for(&text, &loaded, &args.inputs)?;
    let acc = build(&sketch, loaded.cnn.clone(), &loaded.platform)?;
    let report = compose(&acc);
    let sim = simulate(&acc, args.cap, args.trace.is_some())?;
    if let Some(path) = &args.trace {
        let file = fs::File::create(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        sim.write_trace_csv(io::BufWriter::new(file))?;
    }
    let canonical = sketch.to_string();
    let flags = settings(&args.inputs, &format!("cap={}", args.cap));
    let out = validation(
        provenance(&args.inputs, &loaded, &[canonical.as_bytes(), flags.as_bytes()]),
        &report,
        &sim,
    );
    write_out(args.inputs.output.as_deref(), &json(&out))?;
    Ok(out.agrees)
}

/// Largest explicit layer number, used as the depth when none is given.
fn implied_depth(text: &str) -> usize {
    let mut best = 1;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == 'L' || c == 'l' {
            let mut digits = String::new();
            while let Some(d) = chars.peek().filter(|d| d.is_ascii_digit()) {
                digits.push(*d);
                chars.next();
            }
            if let Ok(v) = digits.parse::<usize>() {
                best = best.max(v);
            }
        }
    }
    best
}

fn run_fmt(args: FmtArgs) -> CliResult<()> {
    let text = sketch_text(&args.sketch)?;
    let depth = match (&args.cnn, args.depth) {
        (Some(cnn), _) => CnnModel::from_json_str(&resolve(cnn, "cnns", &bundled::CNNS)?)?.num_layers(),
        (None, Some(d)) => d,
        (None, None) => implied_depth(&text),
    };
    let sketch = parse_for_depth(&text, depth).map_err(|e| sketch_failure(&text, e))?;
    write_out(None, format!("{sketch}\n").as_bytes())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Explore(a) => run_explore(a).map(|_| true),
        Command::Validate(a) => run_validate(a),
        Command::Fmt(a) => run_fmt(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("analytical and simulated results disagree");
            ExitCode::from(1)
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
