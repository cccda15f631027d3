//! The `dov` command line: toy pretraining, serving, decoder training,
//! verification and the evaluation grid.
//!
//! Exit codes: 0 legal (or success), 10 illegal, 11 usage, 12 input files,
//! 13 provider or transport, 14 computation failure.

pub mod config;
pub mod error;
pub mod grid;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use dovmm::data::synthetic::{generate_range, FamilyId};
use dovmm::data::{self, load_dataset, Dataset, Role};
use dovmm::decoder::{self, DecoderModel};
use dovmm::eaas::{conformance_suite, remote_provider, serve, CheckOutcome};
use dovmm::encoder::{pretrain_toy, ContextMode, EmbeddingProvider, ProviderMode, ToyEncoder};
use dovmm::verify::{run_verification, DecoderSource, TestObject};
use serde::Serialize;

use config::{load_or_default, required, set, Artifact};
pub use error::{CliError, EXIT_FAILED, EXIT_ILLEGAL, EXIT_INPUT, EXIT_LEGAL, EXIT_PROVIDER, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "dov", version, about = "Dataset ownership verification for masked-model encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset to a tensor file.
    GenData(GenDataArgs),
    /// Pretrain a toy masked encoder.
    Pretrain(PretrainArgs),
    /// Serve an encoder checkpoint over HTTP until interrupted.
    Serve(ServeArgs),
    /// Train the embedding reconstruction decoder on the public training split.
    TrainDecoder(TrainDecoderArgs),
    /// Decide whether an encoder was pretrained on a public dataset.
    Verify(VerifyArgs),
    /// Run the suspect x dataset grid and report classification metrics.
    EvalGrid(EvalGridArgs),
    /// Check that an embedding service speaks the protocol.
    Conformance(ConformanceArgs),
}

fn parse_context(s: &str) -> Result<ContextMode, String> {
    match s {
        "mean" => Ok(ContextMode::Mean),
        "concat" => Ok(ContextMode::Concat),
        _ => Err(format!("unknown context {s:?} (mean, concat)")),
    }
}

fn parse_mode(s: &str) -> Result<ProviderMode, String> {
    match s {
        "token" => Ok(ProviderMode::Token),
        "vector" => Ok(ProviderMode::Vector),
        _ => Err(format!("unknown mode {s:?} (token, vector)")),
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: Option<String>) -> Result<Option<Vec<T>>, CliError>
where
    T::Err: std::fmt::Display,
{
    let Some(s) = s else { return Ok(None) };
    if s.trim().is_empty() {
        return Ok(Some(Vec::new()));
    }
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| CliError::Usage(format!("--{flag}: {e}"))))
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub family: Option<FamilyId>,
    #[arg(long)]
    pub family_seed: Option<u64>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub offset: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

impl DataArgs {
    fn apply(self, d: &mut data::DatasetSpec) {
        set(&mut d.family.family, self.family);
        set(&mut d.family.seed, self.family_seed);
        set(&mut d.count, self.count);
        set(&mut d.offset, self.offset);
        set(&mut d.family.noise, self.noise);
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training data (tensor file or JSON spec) instead of a generated family.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub dataset: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub token_dim: Option<usize>,
    #[arg(long, value_parser = parse_context)]
    pub context: Option<ContextMode>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Bind address, e.g. `127.0.0.1:8707`.
    #[arg(long, conflicts_with = "port")]
    pub addr: Option<String>,
    /// Port on 127.0.0.1.
    #[arg(long)]
    pub port: Option<u16>,
}

#[derive(Debug, Args)]
pub struct TrainDecoderArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path or service URL.
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long = "pub")]
    pub public: Option<PathBuf>,
    #[arg(long)]
    pub dt_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden widths, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<String>,
    /// Trained decoder; trained inline when omitted.
    #[arg(long)]
    pub decoder: Option<PathBuf>,
    #[arg(long = "pub")]
    pub public: Option<PathBuf>,
    #[arg(long)]
    pub pvt: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub object: Option<TestObject>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ProviderMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dt_size: Option<usize>,
    /// Epochs of the inline decoder.
    #[arg(long)]
    pub decoder_epochs: Option<usize>,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalGridArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Comma-separated families.
    #[arg(long)]
    pub families: Option<String>,
    /// Pretraining epochs of every suspect.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub decoder_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ConformanceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub url: Option<String>,
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_LEGAL };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<i32, CliError> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Serve(a) => serve_cmd(a),
        Command::TrainDecoder(a) => train_decoder(a),
        Command::Verify(a) => verify(a),
        Command::EvalGrid(a) => eval_grid(a),
        Command::Conformance(a) => conformance(a),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s
}

/// `path` with `.json` appended to the file name.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_dataset(path: &Path, role: Role) -> Result<Dataset, CliError> {
    load_dataset(path, role).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// A checkpoint path or an `http(s)://` service.
pub fn open_encoder(spec: &str) -> Result<Box<dyn EmbeddingProvider>, CliError> {
    if spec.starts_with("http://") || spec.starts_with("https://") {
        Ok(Box::new(remote_provider(spec)?))
    } else {
        let enc = ToyEncoder::load(Path::new(spec)).map_err(|e| CliError::Input(format!("{spec}: {e}")))?;
        Ok(Box::new(enc))
    }
}

fn gen_data(a: GenDataArgs) -> Result<i32, CliError> {
    let mut cfg: config::GenDataRun = load_or_default(a.config.as_deref())?;
    a.data.apply(&mut cfg.dataset);
    set(&mut cfg.out, a.out.map(Some));
    let out = required(&cfg.out, "out")?;
    let spec = &cfg.dataset;
    let d = generate_range(&spec.family, spec.offset, spec.count, spec.shape.unwrap_or_default())?;
    d.save(&out).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
    eprintln!("wrote {} samples of {} to {}", d.len(), d.name, out.display());
    Ok(EXIT_LEGAL)
}

fn pretrain(a: PretrainArgs) -> Result<i32, CliError> {
    let mut cfg: config::PretrainRun = load_or_default(a.config.as_deref())?;
    set(&mut cfg.data, a.data.map(Some));
    a.dataset.apply(&mut cfg.dataset);
    let p = &mut cfg.pretrain;
    set(&mut p.epochs, a.epochs);
    set(&mut p.seed, a.seed);
    set(&mut p.encoder.hidden, a.hidden);
    set(&mut p.encoder.token_dim, a.token_dim);
    set(&mut p.encoder.context, a.context);
    set(&mut p.batch_size, a.batch_size);
    set(&mut p.lr, a.lr);
    set(&mut p.ratio, a.ratio);
    set(&mut cfg.out, a.out.map(Some));
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("encoder.dovm"));

    let d = match &cfg.data {
        Some(path) => read_dataset(path, Role::Pub)?,
        None => {
            let s = &cfg.dataset;
            generate_range(&s.family, s.offset, s.count, s.shape.unwrap_or_default())?
        }
    };
    let enc = pretrain_toy(&cfg.pretrain, &d)?;
    let bytes = enc.to_bytes().map_err(|e| CliError::Failed(e.to_string()))?;
    write_bytes(&out, &bytes)?;

    #[derive(Serialize)]
    struct Body<'a> {
        id: &'a str,
        log: &'a dovmm::encoder::PretrainLog,
    }
    let art = Artifact {
        command: "pretrain",
        config: &cfg,
        body: Body {
            id: &enc.info().id,
            log: enc.log(),
        },
    };
    write_bytes(&sidecar(&out), to_json(&art).as_bytes())?;
    eprintln!("wrote encoder {} to {}", enc.info().id, out.display());
    Ok(EXIT_LEGAL)
}

fn serve_cmd(a: ServeArgs) -> Result<i32, CliError> {
    let mut cfg: config::ServeRun = load_or_default(a.config.as_deref())?;
    set(&mut cfg.model, a.model.map(Some));
    set(&mut cfg.addr, a.addr);
    set(&mut cfg.addr, a.port.map(|p| format!("127.0.0.1:{p}")));
    let model = required(&cfg.model, "model")?;
    let enc = ToyEncoder::load(&model).map_err(|e| CliError::Input(format!("{}: {e}", model.display())))?;
    let handle = serve(Arc::new(enc), &cfg.addr).map_err(|e| match e {
        dovmm::eaas::ServeError::AddrInUse { .. } | dovmm::eaas::ServeError::Bind { .. } => CliError::Usage(e.to_string()),
        _ => CliError::Failed(e.to_string()),
    })?;
    println!("listening on {}", handle.url());
    handle.wait_for_signal().map_err(|e| CliError::Failed(e.to_string()))?;
    eprintln!("shut down");
    Ok(EXIT_LEGAL)
}

fn train_decoder(a: TrainDecoderArgs) -> Result<i32, CliError> {
    let mut cfg: config::TrainDecoderRun = load_or_default(a.config.as_deref())?;
    set(&mut cfg.encoder, a.encoder.map(Some));
    set(&mut cfg.public, a.public.map(Some));
    set(&mut cfg.verification.dt_size, a.dt_size);
    set(&mut cfg.verification.seed, a.seed);
    set(&mut cfg.decoder.seed, a.seed);
    set(&mut cfg.decoder.epochs, a.epochs);
    set(&mut cfg.decoder.hidden, parse_list("hidden", a.hidden)?);
    set(&mut cfg.decoder.lr, a.lr);
    set(&mut cfg.decoder.batch_size, a.batch_size);
    set(&mut cfg.out, a.out.map(Some));
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("decoder.dovm"));
    let provider = open_encoder(&required(&cfg.encoder, "encoder")?)?;
    let public = read_dataset(&required(&cfg.public, "pub")?, Role::Pub)?;
    let spec = cfg.verification.split_spec();
    if spec.train_size >= public.len() {
        return Err(CliError::Usage(format!(
            "--dt-size {} must be smaller than the {} public samples",
            spec.train_size,
            public.len()
        )));
    }
    let parts = data::split(&public, &spec)?;
    let mut model = decoder::train_decoder(provider.as_ref(), &parts.train, &cfg.decoder)?;
    model.set_split(spec);
    let bytes = model.to_bytes().map_err(|e| CliError::Failed(e.to_string()))?;
    write_bytes(&out, &bytes)?;

    #[derive(Serialize)]
    struct Body<'a> {
        encoder_id: &'a str,
        log: &'a decoder::DecoderLog,
    }
    let art = Artifact {
        command: "train-decoder",
        config: &cfg,
        body: Body {
            encoder_id: model.provider_id(),
            log: &model.metadata().log,
        },
    };
    write_bytes(&sidecar(&out), to_json(&art).as_bytes())?;
    eprintln!("wrote decoder for encoder {} to {}", model.provider_id(), out.display());
    Ok(EXIT_LEGAL)
}

fn verify(a: VerifyArgs) -> Result<i32, CliError> {
    let mut cfg: config::VerifyRun = load_or_default(a.config.as_deref())?;
    set(&mut cfg.encoder, a.encoder.map(Some));
    set(&mut cfg.decoder_path, a.decoder.map(Some));
    set(&mut cfg.public, a.public.map(Some));
    set(&mut cfg.private, a.pvt.map(Some));
    let v = &mut cfg.verification;
    set(&mut v.k, a.k);
    set(&mut v.n, a.n);
    set(&mut v.ratio, a.ratio);
    set(&mut v.alpha, a.alpha);
    set(&mut v.object, a.object);
    set(&mut v.mode, a.mode.map(Some));
    set(&mut v.seed, a.seed);
    set(&mut v.dt_size, a.dt_size);
    set(&mut cfg.decoder.seed, a.seed);
    set(&mut cfg.decoder.epochs, a.decoder_epochs);
    set(&mut cfg.json, a.json.map(Some));

    let provider = open_encoder(&required(&cfg.encoder, "encoder")?)?;
    let public = read_dataset(&required(&cfg.public, "pub")?, Role::Pub)?;
    let private = read_dataset(&required(&cfg.private, "pvt")?, Role::Pvt)?;
    let loaded;
    let source = match &cfg.decoder_path {
        Some(path) => {
            loaded = DecoderModel::load(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            DecoderSource::Trained(&loaded)
        }
        None => DecoderSource::Train(cfg.decoder.clone()),
    };
    let verdict = run_verification(&public, &private, provider.as_ref(), source, &cfg.verification)?;

    #[derive(Serialize)]
    struct Body<'a> {
        verdict: &'a dovmm::Verdict,
    }
    let report = to_json(&Artifact {
        command: "verify",
        config: &cfg,
        body: Body { verdict: &verdict },
    });
    match &cfg.json {
        Some(path) => write_bytes(path, report.as_bytes())?,
        None => print!("{report}"),
    }
    eprintln!(
        "{}: t = {:.4}, p = {:.4e} (alpha {})",
        if verdict.is_illegal() { "illegal" } else { "legal" },
        verdict.test.t,
        verdict.test.p,
        cfg.verification.alpha
    );
    Ok(if verdict.is_illegal() { EXIT_ILLEGAL } else { EXIT_LEGAL })
}

fn eval_grid(a: EvalGridArgs) -> Result<i32, CliError> {
    let mut cfg: config::GridConfig = load_or_default(a.config.as_deref())?;
    set(&mut cfg.out, a.out.map(Some));
    set(&mut cfg.seeds, parse_list("seeds", a.seeds)?);
    set(&mut cfg.families, parse_list("families", a.families)?);
    set(&mut cfg.pretrain.epochs, a.epochs);
    set(&mut cfg.decoder.epochs, a.decoder_epochs);
    let run = grid::run_grid(&cfg)?;
    let m = &run.report.metrics;
    let report = to_json(&Artifact {
        command: "eval-grid",
        config: &cfg,
        body: &run.report,
    });
    match &cfg.out {
        Some(path) => write_bytes(path, report.as_bytes())?,
        None => print!("{report}"),
    }
    eprintln!(
        "sensitivity {:.2}, specificity {:.2}, AUROC {:.2} over {} cells",
        m.sensitivity,
        m.specificity,
        m.auroc,
        run.report.cells.len()
    );
    Ok(EXIT_LEGAL)
}

fn conformance(a: ConformanceArgs) -> Result<i32, CliError> {
    let mut cfg: config::ConformanceRun = load_or_default(a.config.as_deref())?;
    set(&mut cfg.url, a.url.map(Some));
    let report = conformance_suite(&required(&cfg.url, "url")?);
    print!("{}", to_json(&report));
    if report.passed() {
        Ok(EXIT_LEGAL)
    } else if report.checks.iter().any(|c| c.outcome == CheckOutcome::Transport) {
        Err(CliError::Provider(format!("service unreachable: {}", cfg.url.unwrap_or_default())))
    } else {
        Err(CliError::Failed(format!("failed checks: {}", report.failed().join(", "))))
    }
}
