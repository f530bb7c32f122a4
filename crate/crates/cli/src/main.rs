//! `muxnet` command-line tool.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input error,
//! 3 configuration error.

mod config;

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use muxnet::artifact::{self, ArtifactError};
use muxnet::compiler::{compile, CompileError, CompiledModel};
use muxnet::costmodel::{memory_cost, model_cost, write_cost_rows, CSV_HEADER};
use muxnet::frontend::{check_loop_config, run_closed_loop, FrontendError, SignalStream, SyntheticSource};
use muxnet::model::{default_desk_model, DeskModelShape, FloatModel};
use muxnet::pipeline::{summarize, write_report, InputQuantizer, ModelClassifier, PipelineError, SegmentClassifier};
use muxnet::static_table::StaticTable;
use muxnet::verify::{self, Fault};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Config(String),
    Verify(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Input(_) => 2,
            CliError::Config(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Config(m) | CliError::Verify(m) => f.write_str(m),
        }
    }
}

impl From<ArtifactError> for CliError {
    fn from(e: ArtifactError) -> Self {
        let tag = match e {
            ArtifactError::BadArtifact(_) => "BadArtifact",
            ArtifactError::CorruptArtifact(_) => "CorruptArtifact",
        };
        CliError::Input(format!("{tag}: {e}"))
    }
}

impl From<CompileError> for CliError {
    fn from(e: CompileError) -> Self {
        CliError::Config(format!("compile: {e}"))
    }
}

impl From<FrontendError> for CliError {
    fn from(e: FrontendError) -> Self {
        match e {
            FrontendError::LoopConfigError(_) | FrontendError::CicConfig(_) => {
                CliError::Config(format!("LoopConfigError: {e}"))
            }
            FrontendError::Pipeline(PipelineError::Config(_)) => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        FrontendError::Pipeline(e).into()
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "muxnet", version, about = "Multiplier-free inference compiler, engine and closed-loop simulator")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the full default configuration and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded desk-scale float model (.muxf).
    GenModel {
        #[arg(long)]
        out: PathBuf,
        /// Zero every weight and bias the last layer toward this class.
        #[arg(long)]
        constant_class: Option<u32>,
    },
    /// Compile a float model (.muxf) into a table-index artifact (.muxn).
    Compile {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print per-layer memory accounting.
        #[arg(long)]
        report: bool,
    },
    /// Run the bit-exactness suites.
    Verify {
        /// Compiled model for the whole-model suite; defaults to the desk model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Corrupt one static-table entry first (the suites should fail).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Run the closed loop over a signal file or a synthetic source.
    Loop {
        #[arg(long)]
        model: PathBuf,
        /// Raw signal (.muxs); channel 0 is classified.
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        signal: Option<PathBuf>,
        /// Generate the configured synthetic stages from this seed.
        #[arg(long)]
        synthetic: Option<u64>,
        /// JSON-lines run log; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated classes that trigger stimulation channel 0.
        #[arg(long)]
        trigger_classes: Option<String>,
        /// CSV of every segment classification and its logits.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score a model against a labeled signal.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        signal: PathBuf,
        /// One class id per epoch, one per line.
        #[arg(long)]
        labels: PathBuf,
        /// Per-epoch CSV report; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic signal (.muxs) and its epoch labels.
    GenSignal {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Cost CSV for a compiled model, or a sweep over the configured n values.
    Cost {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a static table as `index : entries`.
    DumpTable {
        #[arg(long)]
        n: u32,
        #[arg(long)]
        m: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p).map_err(io_err(p))?)),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(io_err(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn load_compiled(path: &Path) -> Result<CompiledModel, CliError> {
    Ok(artifact::deserialize(&read(path)?)?)
}

fn desk_model(cfg: &RunConfig, seed: u64) -> Result<FloatModel, CliError> {
    let shape = DeskModelShape {
        input_len: cfg.model.input_len,
        classes: cfg.model.classes,
    };
    if !(1..=10).contains(&shape.classes) || shape.input_len < 20 {
        return Err(CliError::Config(format!(
            "model shape: {} classes, input length {}",
            shape.classes, shape.input_len
        )));
    }
    Ok(default_desk_model(seed, shape))
}

fn compile_float(mut model: FloatModel, cfg: &RunConfig) -> Result<CompiledModel, CliError> {
    for layer in model.layers.iter_mut() {
        layer.spec.n = cfg.compile.n;
    }
    Ok(compile(&model, &cfg.compile)?)
}

fn parse_classes(s: &str) -> Result<BTreeSet<u32>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| CliError::Config(format!("trigger class {t:?} is not a number")))
        })
        .collect()
}

fn flush(mut w: Box<dyn Write>) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::Input(e.to_string()))
}

fn cmd_gen_model(cfg: &RunConfig, seed: u64, out: &Path, constant: Option<u32>) -> Result<(), CliError> {
    let mut model = desk_model(cfg, seed)?;
    if let Some(c) = constant {
        if c >= cfg.model.classes {
            return Err(CliError::Config(format!("class {c} outside 0..{}", cfg.model.classes)));
        }
        for layer in model.layers.iter_mut() {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        model.layers.last_mut().expect("layers").bias[c as usize] = 1.0;
    }
    write(out, &artifact::serialize_float(&model))?;
    eprintln!("wrote {} ({} layers)", out.display(), model.layers.len());
    Ok(())
}

fn cmd_compile(cfg: &RunConfig, model: &Path, out: &Path, report: bool) -> Result<(), CliError> {
    let float = artifact::deserialize_float(&read(model)?)?;
    let compiled = compile_float(float, cfg)?;
    write(out, &artifact::serialize(&compiled))?;
    let n = compiled.header.n;
    let (mut mux, mut lut) = (0, 0);
    if report {
        println!("layer,kind,m,chunks,weight_memory_bits,lut_memory_bits");
    }
    for (i, l) in compiled.layers.iter().enumerate() {
        let (a, b) = memory_cost(n, l.mode_m, l.chunk_count());
        mux += a;
        lut += b;
        if report {
            let kind = match l.kind {
                muxnet::model::LayerKind::Conv1d { .. } => "conv1d",
                muxnet::model::LayerKind::Linear => "linear",
            };
            println!("{i},{kind},{},{},{a},{b}", l.mode_m, l.chunk_count());
        }
    }
    debug_assert_eq!(mux, compiled.weight_memory_bits());
    println!("weight_memory_bits={} lut_memory_bits={lut}", compiled.weight_memory_bits());
    Ok(())
}

fn cmd_verify(cfg: &RunConfig, seed: u64, model: Option<&Path>, fault: bool) -> Result<(), CliError> {
    let compiled = match model {
        Some(p) => load_compiled(p)?,
        None => compile_float(desk_model(cfg, seed)?, cfg)?,
    };
    let mut vcfg = cfg.verify_config(seed);
    if fault {
        vcfg.fault = Some(Fault::default_small());
    }
    let results = verify::run_all(&vcfg, Some(&compiled));
    let mut failed = 0;
    for r in &results {
        println!("{r}");
        failed += (!r.passed()) as usize;
    }
    let cases: u64 = results.iter().map(|r| r.cases).sum();
    println!("{} suites, {cases} cases, {failed} failed", results.len());
    if failed > 0 {
        return Err(CliError::Verify(format!("{failed} suite(s) found mismatches")));
    }
    Ok(())
}

/// Model classifier that also records every classification.
struct Recording<'a> {
    inner: ModelClassifier<'a>,
    rows: Option<Vec<(u32, Vec<i64>)>>,
}

impl SegmentClassifier for Recording<'_> {
    fn classify(&mut self, samples: &[i64]) -> Result<u32, PipelineError> {
        let logits = self.inner.logits(samples)?;
        let class = muxnet::inference::argmax(&logits) as u32;
        if let Some(rows) = self.rows.as_mut() {
            rows.push((class, logits));
        }
        Ok(class)
    }
}

fn synthetic(cfg: &RunConfig, seed: u64) -> Result<Vec<i64>, CliError> {
    let s = &cfg.synthetic;
    if !(2..=32).contains(&s.input_bits) {
        return Err(CliError::Config(format!("synthetic input_bits {}", s.input_bits)));
    }
    let seg = cfg.segment();
    let src = SyntheticSource {
        seed,
        sample_rate_hz: cfg.input_rate_hz,
        noise_amplitude: s.noise_amplitude,
        ..SyntheticSource::default()
    };
    Ok(src.generate(&s.stages, seg.segment_seconds * seg.votes_per_epoch as f64, s.input_bits))
}

fn load_signal(path: &Path, cfg: &mut RunConfig) -> Result<Vec<i64>, CliError> {
    let stream = SignalStream::from_bytes(&read(path)?).map_err(|e| CliError::Input(e.to_string()))?;
    cfg.input_rate_hz = stream.sample_rate_hz as f64;
    Ok(stream.channel(0))
}

struct LoopArgs<'a> {
    model: &'a Path,
    signal: Option<&'a Path>,
    synthetic: Option<u64>,
    out: Option<&'a Path>,
    trigger_classes: Option<&'a str>,
    trace: Option<&'a Path>,
}

fn cmd_loop(mut cfg: RunConfig, seed: u64, args: LoopArgs<'_>) -> Result<(), CliError> {
    let LoopArgs {
        model,
        signal,
        synthetic: synth,
        out,
        trigger_classes: triggers,
        trace,
    } = args;
    let compiled = load_compiled(model)?;
    if let Some(t) = triggers {
        let classes = parse_classes(t)?;
        match cfg.channels.iter_mut().find(|c| c.channel == 0) {
            Some(ch) => ch.trigger_classes = classes,
            None => return Err(CliError::Config("no stimulation channel 0 configured".into())),
        }
    }
    let source = match (signal, synth) {
        (Some(p), _) => load_signal(p, &mut cfg)?,
        (None, Some(s)) => synthetic(&cfg, s)?,
        (None, None) => synthetic(&cfg, seed)?,
    };
    let lc = cfg.loop_config();
    let classes = compiled.header.class_count;
    let mut classifier = Recording {
        inner: ModelClassifier::new(&compiled, InputQuantizer { shift: cfg.input_shift })?,
        rows: trace.map(|_| Vec::new()),
    };
    check_loop_config(&lc, classes, Some(classifier.inner.segment_len()))?;
    let log = run_closed_loop(&source, &mut classifier, classes, &lc)?;
    let mut w = output(out)?;
    log.write_jsonl(&mut w).map_err(|e| CliError::Input(e.to_string()))?;
    flush(w)?;
    if let (Some(p), Some(rows)) = (trace, classifier.rows.as_ref()) {
        let mut t = output(Some(p))?;
        let mut text = String::from("classification,class");
        for c in 0..classes {
            text.push_str(&format!(",logit_{c}"));
        }
        text.push('\n');
        for (i, (class, logits)) in rows.iter().enumerate() {
            text.push_str(&format!("{i},{class}"));
            for l in logits {
                text.push_str(&format!(",{l}"));
            }
            text.push('\n');
        }
        t.write_all(text.as_bytes()).map_err(io_err(p))?;
        flush(t)?;
    }
    let used: u32 = log.epochs.iter().map(|e| e.classifications_used).sum();
    eprintln!(
        "{} epochs, {} classifications, {} pulses",
        log.epochs.len(),
        used,
        log.pulses.len()
    );
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, model: &Path, signal: &Path, labels: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let compiled = load_compiled(model)?;
    let source = load_signal(signal, &mut cfg)?;
    let text = fs::read_to_string(labels).map_err(io_err(labels))?;
    let labels: Vec<u32> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse().map_err(|_| CliError::Input(format!("label {l:?} is not a class id"))))
        .collect::<Result<_, _>>()?;
    cfg.channels.iter_mut().for_each(|c| c.trigger_classes.clear());
    let lc = cfg.loop_config();
    let classes = compiled.header.class_count;
    let mut classifier = ModelClassifier::new(&compiled, InputQuantizer { shift: cfg.input_shift })?;
    check_loop_config(&lc, classes, Some(classifier.segment_len()))?;
    let log = run_closed_loop(&source, &mut classifier, classes, &lc)?;
    if log.epochs.len() != labels.len() {
        return Err(CliError::Input(format!(
            "{} labels for {} complete epochs",
            labels.len(),
            log.epochs.len()
        )));
    }
    let votes = lc.segment.votes_per_epoch;
    let mut w = output(out)?;
    write_report(&mut w, &log.epochs, votes).map_err(|e| CliError::Input(e.to_string()))?;
    flush(w)?;
    let s = summarize(&log.epochs, &labels, classes, votes);
    eprintln!(
        "epochs={} accuracy={:.4} classifications_saved={:.4}",
        s.epochs,
        s.accuracy(),
        s.saved_fraction()
    );
    for (label, row) in s.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        eprintln!("confusion[{label}] = {}", cells.join(" "));
    }
    Ok(())
}

fn cmd_gen_signal(cfg: &RunConfig, seed: u64, out: &Path, labels: Option<&Path>) -> Result<(), CliError> {
    let samples = synthetic(cfg, seed)?;
    let rate = cfg.input_rate_hz;
    if rate.fract() != 0.0 || rate <= 0.0 || rate > u32::MAX as f64 {
        return Err(CliError::Config(format!("input rate {rate} is not a whole number of Hz")));
    }
    let stream = SignalStream {
        sample_rate_hz: rate as u32,
        bits: cfg.synthetic.input_bits as u8,
        channels: 1,
        samples: samples.iter().map(|&s| s as i32).collect(),
    };
    write(out, &stream.to_bytes())?;
    if let Some(p) = labels {
        let text: String = cfg.synthetic.stages.iter().map(|s| format!("{s}\n")).collect();
        write(p, text.as_bytes())?;
    }
    Ok(())
}

fn cmd_cost(cfg: &RunConfig, seed: u64, model: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let models = match model {
        Some(p) => vec![load_compiled(p)?],
        None => {
            if cfg.cost.n_values.is_empty() {
                return Err(CliError::Config("cost.n_values is empty".into()));
            }
            let base = desk_model(cfg, seed)?;
            cfg.cost
                .n_values
                .iter()
                .map(|&n| {
                    let mut c = cfg.clone();
                    c.compile.n = n;
                    compile_float(base.clone(), &c)
                })
                .collect::<Result<_, _>>()?
        }
    };
    let mut w = output(out)?;
    let io = |e: io::Error| CliError::Input(e.to_string());
    writeln!(w, "{CSV_HEADER}").map_err(io)?;
    for m in &models {
        let cost = model_cost(m, &cfg.cost.energy);
        write_cost_rows(&mut w, &cost).map_err(io)?;
    }
    flush(w)
}

fn cmd_dump_table(n: u32, m: u32, out: Option<&Path>) -> Result<(), CliError> {
    if n * m > 16 {
        return Err(CliError::Config(format!("n*m = {} is too large to dump", n * m)));
    }
    let table = StaticTable::build(n, m, muxnet::static_table::FieldSign::Signed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut w = output(out)?;
    table.dump(&mut w).map_err(|e| CliError::Input(e.to_string()))?;
    flush(w)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    let Some(command) = cli.command else {
        return Err(CliError::Input("no command given (see --help)".into()));
    };
    match command {
        Command::GenModel { out, constant_class } => cmd_gen_model(&cfg, seed, &out, constant_class),
        Command::Compile { model, out, report } => cmd_compile(&cfg, &model, &out, report),
        Command::Verify { model, inject_fault } => cmd_verify(&cfg, seed, model.as_deref(), inject_fault),
        Command::Loop {
            model,
            signal,
            synthetic,
            out,
            trigger_classes,
            trace,
        } => cmd_loop(
            cfg,
            seed,
            LoopArgs {
                model: &model,
                signal: signal.as_deref(),
                synthetic,
                out: out.as_deref(),
                trigger_classes: trigger_classes.as_deref(),
                trace: trace.as_deref(),
            },
        ),
        Command::Eval {
            model,
            signal,
            labels,
            out,
        } => cmd_eval(cfg, &model, &signal, &labels, out.as_deref()),
        Command::GenSignal { out, labels } => cmd_gen_signal(&cfg, seed, &out, labels.as_deref()),
        Command::Cost { model, out } => cmd_cost(&cfg, seed, model.as_deref(), out.as_deref()),
        Command::DumpTable { n, m, out } => cmd_dump_table(n, m, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
