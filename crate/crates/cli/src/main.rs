use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edgeformer::ablate::{ffn_load_entries, render_table, sharing_entries, ReportScale, Sweep};
use edgeformer::checkpoint;
use edgeformer::cost::{cost_report, FlopsShape};
use edgeformer::decode::{beam_search, greedy, DecodeConfig, DecodePath};
use edgeformer::train::{format_dataset, parse_tokens, TaskKind, TaskSpec, Trainer};
use edgeformer::{
    build_plan, AdaptSpec, DecoderStyle, ModelConfig, PlanSpec, RunConfig, SharingPlan,
};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<edgeformer::Error> for CliError {
    fn from(e: edgeformer::Error) -> Self {
        if e.is_config_error() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "edgeformer",
    version,
    about = "Parameter-efficient seq2seq Transformer toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOPS accounting for a model and sharing plan.
    Report(ReportArgs),
    /// Train from a run config; writes a checkpoint and a metrics log.
    Train(TrainArgs),
    /// Decode a file of token sequences with a trained checkpoint.
    Decode(DecodeArgs),
    /// Run a sweep of sharing plans.
    Ablate(AblateArgs),
    /// Write synthetic task examples in dataset format.
    Data(DataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Universal,
    Edgeformer,
    SharedEncoder,
    SharedDecoder,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Kv,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    /// Take model, plan and adaptation from a run config instead of flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "edgeformer")]
    preset: Preset,
    /// Sharing plan in text form; overrides --preset.
    #[arg(long)]
    plan_file: Option<PathBuf>,
    /// Encoder and decoder depth as `M+N`.
    #[arg(long, default_value = "12+2")]
    layers: String,
    #[arg(long, default_value_t = 512)]
    d: usize,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    enc_ffn: Option<usize>,
    #[arg(long)]
    dec_ffn: Option<usize>,
    /// Encoder FFN groups (edgeformer preset).
    #[arg(long)]
    ffn_groups: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long, default_value_t = 30)]
    src_len: u64,
    #[arg(long, default_value_t = 30)]
    tgt_len: u64,
    #[arg(long)]
    bias_la: bool,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long, value_enum, default_value = "table")]
    format: ReportFormat,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_examples: Option<usize>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Where to write the checkpoint (rewritten at every evaluation).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Metrics log file; stdout when absent.
    #[arg(long)]
    metrics_log: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Search {
    /// Greedy for beam 1, beam search otherwise.
    Auto,
    Greedy,
    Beam,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Run config the checkpoint must match.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Output length limit; defaults to the model's max_len.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "auto")]
    search: Search,
    /// Recompute the whole prefix every step instead of using the cache.
    #[arg(long)]
    recompute: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Sweep definition (JSON).
    #[arg(long, conflicts_with_all = ["ffn_load", "sharing"])]
    sweep: Option<PathBuf>,
    /// Built-in FFN-group/load sweep.
    #[arg(long)]
    ffn_load: bool,
    /// Built-in shared-encoder versus shared-decoder sweep at 6+6.
    #[arg(long)]
    sharing: bool,
    /// Base run config for the built-in sweeps.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: bool,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Emit one JSON object per row instead of a table.
    #[arg(long)]
    jsonl: bool,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    start: u64,
    /// Draw from the held-out index range.
    #[arg(long)]
    eval: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
    let result = match cli.cmd {
        Command::Report(a) => report(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Ablate(a) => ablate(a),
        Command::Data(a) => data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    RunConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn parse_layers(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Config(format!("--layers expects M+N, got `{s}`"));
    let (m, n) = s.split_once('+').ok_or_else(bad)?;
    Ok((
        m.trim().parse().map_err(|_| bad())?,
        n.trim().parse().map_err(|_| bad())?,
    ))
}

fn report(a: ReportArgs) -> CliResult {
    let (model, plan, adapt): (ModelConfig, SharingPlan, AdaptSpec) = match &a.config {
        Some(p) => {
            let c = load_config(p)?;
            let plan = c.sharing_plan()?;
            (c.model, plan, c.adapt)
        }
        None => {
            let (m, n) = parse_layers(&a.layers)?;
            let mut model = ModelConfig::vanilla(m, n, a.d);
            if matches!(a.preset, Preset::Edgeformer) {
                model.decoder_style = DecoderStyle::Interleaved;
                model.dec_ffn_dim = (a.d / 4).max(1);
            }
            if let Some(h) = a.heads {
                model.heads = h;
            }
            if let Some(f) = a.enc_ffn {
                model.enc_ffn_dim = f;
            }
            if let Some(f) = a.dec_ffn {
                model.dec_ffn_dim = f;
            }
            if let Some(v) = a.vocab {
                model.vocab_size = v;
            }
            model.validate()?;
            let spec = match (&a.plan_file, a.preset) {
                (Some(p), _) => PlanSpec::Custom {
                    spec: fs::read_to_string(p)
                        .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
                },
                (None, Preset::Full) => PlanSpec::Full,
                (None, Preset::Universal) => PlanSpec::Universal,
                (None, Preset::SharedEncoder) => PlanSpec::SharedEncoder,
                (None, Preset::SharedDecoder) => PlanSpec::SharedDecoder,
                (None, Preset::Edgeformer) => PlanSpec::Edgeformer {
                    ffn_groups: a.ffn_groups,
                    ffn_assignment: None,
                },
            };
            if a.ffn_groups.is_some() && !matches!(a.preset, Preset::Edgeformer) {
                return Err(CliError::Config(
                    "--ffn-groups applies to the edgeformer preset only".into(),
                ));
            }
            let plan = build_plan(&spec, &model)?;
            let adapt = AdaptSpec {
                bias: a.bias_la,
                lora_rank: a.lora_rank,
                prompt_len: a.prompt_len,
            };
            (model, plan, adapt)
        }
    };
    if let Some(r) = adapt.lora_rank {
        if r == 0 || r >= model.model_dim {
            return Err(CliError::Config(format!(
                "lora rank must satisfy 0 < r < d (r={r}, d={})",
                model.model_dim
            )));
        }
    }
    if a.src_len == 0 || a.tgt_len == 0 {
        return Err(CliError::Config("sequence lengths must be positive".into()));
    }
    let shape = FlopsShape {
        src_len: a.src_len,
        tgt_len: a.tgt_len,
        vocab: a.vocab.unwrap_or(if a.config.is_some() {
            model.vocab_size
        } else {
            32_000
        }) as u64,
    };
    let r = cost_report(&model, &plan, &adapt, shape);
    match a.format {
        ReportFormat::Table => print!("{}", r.render_table()),
        ReportFormat::Kv => print!("{}", r.render_kv()),
        ReportFormat::Json => println!(
            "{}",
            serde_json::to_string_pretty(&r).expect("report serializes")
        ),
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(&a.config)?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    macro_rules! set {
        ($($flag:ident),*) => { $( if let Some(v) = a.$flag { cfg.train.$flag = v; } )* };
    }
    set!(
        max_steps,
        lr,
        warmup,
        batch_size,
        dropout,
        label_smoothing,
        eval_every,
        eval_examples
    );
    if a.train_data.is_some() {
        cfg.paths.train_data = a.train_data;
    }
    if a.eval_data.is_some() {
        cfg.paths.eval_data = a.eval_data;
    }
    if a.checkpoint.is_some() {
        cfg.paths.checkpoint = a.checkpoint;
    }
    if a.metrics_log.is_some() {
        cfg.paths.metrics_log = a.metrics_log;
    }
    cfg.validate()?;

    let data = cfg.train_data()?;
    let eval = cfg.eval_data()?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.header.digest != cfg.digest()? {
                return Err(CliError::Config(format!(
                    "{} was not produced by this config (digest mismatch)",
                    p.display()
                )));
            }
            let opt = ck.optimizer.ok_or_else(|| {
                CliError::Runtime(format!("{} holds no optimizer state", p.display()))
            })?;
            Trainer::resume(ck.model, opt, ck.header.step, cfg.train_config(), data)?
        }
        None => Trainer::new(cfg.build_model()?, cfg.train_config(), data)?,
    };

    let mut sink: Box<dyn Write> = match &cfg.paths.metrics_log {
        Some(p) => Box::new(
            OpenOptions::new()
                .create(true)
                .write(true)
                .append(a.resume.is_some())
                .truncate(a.resume.is_none())
                .open(p)?,
        ),
        None => Box::new(std::io::stdout()),
    };
    let decode = DecodeConfig::greedy(cfg.model.max_len);
    let mut io_err = None;
    while trainer.step < cfg.train.max_steps {
        trainer.run_until(cfg.train.max_steps, &eval, &decode, &mut |line| {
            if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err.take() {
            return Err(e.into());
        }
        if let Some(p) = &cfg.paths.checkpoint {
            checkpoint::save(p, &trainer.model, trainer.step, Some(&trainer.opt))?;
        }
    }
    Ok(())
}

fn decode(a: DecodeArgs) -> CliResult {
    let ck = checkpoint::load(&a.checkpoint)?;
    if let Some(p) = &a.config {
        let cfg = load_config(p)?;
        if cfg.digest()? != ck.header.digest {
            return Err(CliError::Config(format!(
                "config {} does not match checkpoint {} (digest mismatch)",
                p.display(),
                a.checkpoint.display()
            )));
        }
    }
    let model = ck.model;
    let vocab = model.config().vocab_size;
    let eos = model.specials().eos;
    let cfg = DecodeConfig {
        beam: a.beam,
        max_len: a.max_len.unwrap_or(model.config().max_len),
        alpha: a.alpha,
    };
    if cfg.beam == 0 {
        return Err(CliError::Config("--beam must be at least 1".into()));
    }
    if a.search == Search::Greedy && cfg.beam != 1 {
        return Err(CliError::Config("--search greedy needs --beam 1".into()));
    }
    let path = if a.recompute {
        DecodePath::Recompute
    } else {
        DecodePath::Incremental
    };
    let text = fs::read_to_string(&a.input)?;
    let mut out = String::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let src = match parse_tokens(line, vocab) {
            Ok(mut ids) => {
                ids.push(eos);
                ids
            }
            Err(msg) => {
                errors.push(format!("line {}: {msg}", i + 1));
                continue;
            }
        };
        let hyp = if a.search == Search::Greedy || (a.search == Search::Auto && cfg.beam == 1) {
            greedy(&model, &src, cfg.max_len, path)
        } else {
            beam_search(&model, &src, &cfg, path).map(|mut h| h.remove(0))
        };
        match hyp {
            Ok(h) => {
                let toks: Vec<String> = h.content(eos).iter().map(usize::to_string).collect();
                out.push_str(&toks.join(" "));
                out.push('\n');
            }
            Err(e) => errors.push(format!("line {}: {e}", i + 1)),
        }
    }
    if !errors.is_empty() {
        return Err(CliError::Runtime(errors.join("\n")));
    }
    fs::write(&a.output, out)?;
    Ok(())
}

fn ablate(a: AblateArgs) -> CliResult {
    let mut sweep = match &a.sweep {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let s: Sweep = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            s
        }
        None => {
            if !a.ffn_load && !a.sharing {
                return Err(CliError::Config(
                    "give --sweep FILE, --ffn-load or --sharing".into(),
                ));
            }
            let base = match &a.config {
                Some(p) => load_config(p)?,
                None => {
                    let mut c = RunConfig::toy(TaskSpec::new(TaskKind::Cipher, 1, 8), 1);
                    c.model.encoder_layers = 12;
                    c.train.max_steps = 1500;
                    c
                }
            };
            let mut entries = Vec::new();
            if a.ffn_load {
                entries.extend(ffn_load_entries(&base.model));
            }
            if a.sharing {
                entries.extend(sharing_entries(6, base.model.model_dim));
            }
            Sweep {
                base,
                entries,
                train: false,
                seeds: vec![1],
                report_scale: Some(ReportScale {
                    model_dim: 512,
                    vocab_size: 32_000,
                }),
            }
        }
    };
    sweep.train |= a.train;
    if let Some(s) = a.seeds {
        sweep.seeds = s;
    }
    if let Some(n) = a.max_steps {
        sweep.base.train.max_steps = n;
    }
    if sweep.seeds.is_empty() {
        return Err(CliError::Config("at least one seed is required".into()));
    }
    let rows = sweep.run();
    if a.jsonl {
        for r in &rows {
            println!("{}", serde_json::to_string(r).expect("row serializes"));
        }
    } else {
        print!("{}", render_table(&rows));
    }
    Ok(())
}

fn data(a: DataArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let task = cfg
        .task()?
        .ok_or_else(|| CliError::Config("config has no `task` section".into()))?;
    let start = if a.eval {
        edgeformer::train::tasks::EVAL_OFFSET + a.start
    } else {
        a.start
    };
    let examples = task.examples(start, a.count);
    let mut f = File::create(&a.out)?;
    f.write_all(format_dataset(&examples, cfg.model.vocab_size).as_bytes())?;
    Ok(())
}
