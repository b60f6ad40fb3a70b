//! `skt` command-line front end and HTTP chat service.

pub mod config;
pub mod server;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use skt_core::corpus::{
    generate_synthetic, load_episodes, write_episodes, CorpusFormat, EncodedEpisode, Episode, Split,
};
use skt_core::evaluator::evaluate_split;
use skt_core::model::InferenceOptions;
use skt_core::service::{ChatEngine, SessionStore};
use skt_core::trainer::{load_checkpoint, save_checkpoint, train};

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(String),
}

impl From<skt_core::Error> for CliError {
    fn from(e: skt_core::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "skt", version, about = "Knowledge-grounded dialogue with sequential knowledge selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic episode corpus.
    Synth(SynthArgs),
    /// Validate a corpus and rewrite it as episode JSON lines.
    Prepare(PrepareArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Talk to a checkpoint on the terminal.
    Chat(ChatArgs),
    /// Serve the chat HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub test_episodes: Option<usize>,
    #[arg(long)]
    pub turns: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub multimodality: Option<usize>,
    #[arg(long)]
    pub copy_rate: Option<f64>,
    #[arg(long)]
    pub history_dependent: bool,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `wow` or `holle`.
    #[arg(long, default_value = "wow")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value = "wow")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Keep only episodes of this split.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
    /// Condition perplexity on the gold knowledge.
    #[arg(long)]
    pub gold_knowledge_ppl: bool,
    #[arg(long)]
    pub json: bool,
    #[arg(long, default_value = "wow")]
    pub format: String,
    /// Accepted for interface uniformity; evaluation is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus providing per-topic knowledge pools.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub topic: Option<String>,
    /// Knowledge pool file, one sentence per line.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn format(s: &str) -> Result<CorpusFormat, CliError> {
    s.parse().map_err(|e: skt_core::Error| CliError::Usage(e.to_string()))
}

fn split_filter(eps: Vec<Episode>, split: Option<&str>) -> Result<Vec<Episode>, CliError> {
    let Some(s) = split else { return Ok(eps) };
    let want = Split::parse(s).ok_or_else(|| CliError::Usage(format!("unknown split `{s}`")))?;
    Ok(eps.into_iter().filter(|e| e.split == want).collect())
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?.synth;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(seed, episodes, test_episodes, turns, pool_size, multimodality, copy_rate);
    cfg.history_dependent |= a.history_dependent;
    let eps = generate_synthetic(&cfg)?;
    write_episodes(&a.out, &eps)?;
    writeln!(out, "wrote {} episodes to {}", eps.len(), a.out.display()).ok();
    Ok(())
}

fn prepare(a: &PrepareArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let eps = load_episodes(&a.data, format(&a.format)?)?;
    for s in [Split::Train, Split::Valid, Split::TestSeen, Split::TestUnseen] {
        let sel: Vec<&Episode> = eps.iter().filter(|e| e.split == s).collect();
        if !sel.is_empty() {
            let turns: usize = sel.iter().map(|e| e.turns.len()).sum();
            writeln!(out, "{:<12} episodes {:>7}  turns {:>8}", s.as_str(), sel.len(), turns).ok();
        }
    }
    write_episodes(&a.out, &eps)?;
    writeln!(out, "wrote {} episodes to {}", eps.len(), a.out.display()).ok();
    Ok(())
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let all = load_episodes(&a.data, format(&a.format)?)?;
    let has_train = all.iter().any(|e| e.split == Split::Train);
    let eps: Vec<Episode> = all
        .into_iter()
        .filter(|e| !has_train || e.split == Split::Train)
        .collect();
    writeln!(out, "training on {} episodes", eps.len()).ok();
    let trained = train(&eps, &cfg.model, &cfg.train, |m| {
        writeln!(
            out,
            "epoch {:>3}  loss {:.4}  nll {:.4}  kl {:.4}  knowledge {:.4}  grad {:.3}",
            m.epoch + 1,
            m.total,
            m.nll,
            m.kl,
            m.knowledge_loss,
            m.grad_norm
        )
        .ok();
    })?;
    save_checkpoint(&a.ckpt, &trained.model, &trained.vocab, Some(&cfg.train), Some(&trained.optimizer))?;
    writeln!(out, "saved {}", a.ckpt.display()).ok();
    Ok(())
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.ckpt)?;
    let eps = split_filter(load_episodes(&a.data, format(&a.format)?)?, a.split.as_deref())?;
    let data = EncodedEpisode::encode_all(&eps, &ck.vocab);
    let opts = InferenceOptions {
        max_len: a.max_len,
        gold_knowledge_ppl: a.gold_knowledge_ppl,
        ..InferenceOptions::default()
    };
    let name = a.split.clone().unwrap_or_else(|| "all".into());
    let report = evaluate_split(&ck.model, &ck.vocab, &data, &name, &opts)?;
    if a.json {
        writeln!(out, "{}", report.to_json()).ok();
    } else {
        write!(out, "{}", report.to_table()).ok();
    }
    Ok(())
}

fn engine(ckpt: &Path, data: Option<&Path>, max_len: usize) -> Result<ChatEngine, CliError> {
    let ck = load_checkpoint(ckpt)?;
    let mut e = ChatEngine::new(ck.model, ck.vocab);
    if let Some(d) = data {
        e = e.with_corpus(&load_episodes(d, CorpusFormat::WowJsonl)?);
    }
    e.max_len = max_len;
    Ok(e)
}

/// Terminal conversation; one apprentice utterance per input line.
pub fn chat(a: &ChatArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), CliError> {
    let store = SessionStore::new(Arc::new(engine(&a.ckpt, a.data.as_deref(), a.max_len)?));
    let pool = match &a.pool {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| CliError::Failed(format!("cannot read pool {}: {e}", p.display())))?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    let topic = a
        .topic
        .clone()
        .or_else(|| pool.is_none().then(|| store.engine().topics.keys().next().cloned()).flatten());
    let info = store.create_session(topic.as_deref(), pool.as_deref())?;
    writeln!(out, "topic: {}", info.topic).ok();
    for (i, s) in info.pool.iter().enumerate() {
        writeln!(out, "  [{i}] {s}").ok();
    }
    let mut line = String::new();
    loop {
        write!(out, "> ").ok();
        out.flush().ok();
        line.clear();
        if input.read_line(&mut line).map_err(|e| CliError::Failed(e.to_string()))? == 0 {
            break;
        }
        let text = line.trim();
        if text == ":quit" {
            break;
        }
        if text.is_empty() {
            continue;
        }
        let r = store.post_message(&info.id, text)?;
        writeln!(out, "wizard: {}", r.response).ok();
        writeln!(
            out,
            "  knowledge [{}] p={:.3}: {}",
            r.knowledge_index, r.prior[r.knowledge_index], r.knowledge_sentence
        )
        .ok();
    }
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<(), CliError> {
    let store = Arc::new(SessionStore::new(Arc::new(engine(&a.ckpt, a.data.as_deref(), a.max_len)?)));
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Failed(e.to_string()))?;
    rt.block_on(server::serve(store, &a.host, a.port))
        .map_err(|e| CliError::Failed(format!("server: {e}")))
}

/// Execute one parsed command.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Prepare(a) => prepare(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Chat(a) => chat(a, &mut std::io::stdin().lock(), out),
        Command::Serve(a) => serve_cmd(a),
    }
}

/// Parse `argv`, run, and return the process exit code.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if e.use_stderr() {
                write!(err, "{e}").ok();
            } else {
                write!(out, "{e}").ok();
            }
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let (CliError::Usage(m) | CliError::Failed(m)) = &e;
            writeln!(err, "error: {m}").ok();
            e.exit_code()
        }
    }
}
