//! Subcommand definitions and their implementations.

use std::fs;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, ensure, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use negotiator::agents::{run_dialogue, Policy, Transcript};
use negotiator::corpus::{
    build_vocab, examples_of, format_corpus, import_released_line, parse_records,
    records_from_examples, synth_corpus, DialogueRecord, Speaker, Vocabulary,
};
use negotiator::env::{sample_scenario, GeneratorConfig, Scenario, Selection};
use negotiator::eval::{corpus_stats, evaluate_pairing, EvalConfig, MetricsReport};
use negotiator::model::{EncodedExample, NegotiationModel};
use negotiator::train::{perplexity, train_rl, train_supervised};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::FileConfig;
use crate::live::{LiveSession, SessionState};
use crate::service::{router, AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "negotiator", version, about = "Train, evaluate and play negotiation dialogue agents")]
pub struct Cli {
    /// Master random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with model, training and engine settings.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dialogue corpus.
    GenData(GenData),
    /// Build a vocabulary file from a corpus.
    BuildVocab(BuildVocab),
    /// Supervised training on a corpus.
    TrainSv(TrainSv),
    /// Self-play reinforcement fine-tuning against a frozen copy.
    TrainRl(TrainRl),
    /// Play two agents against each other and report scores.
    Eval(Eval),
    /// Dump self-play transcripts.
    Selfplay(Selfplay),
    /// Negotiate against an agent in the terminal.
    Chat(Chat),
    /// Serve live negotiation sessions over HTTP.
    Serve(Serve),
    /// Summary statistics of a corpus.
    Stats(Stats),
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Number of dialogues.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildVocab {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Drop words seen fewer times than this.
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
}

#[derive(Debug, Args)]
pub struct TrainSv {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    /// Vocabulary file; built from the training corpus when omitted.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Directory receiving sv-best.ckpt, vocab.txt and sv-report.txt.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainRl {
    /// Supervised checkpoint; both the learner and the frozen partner
    /// start from it.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Corpus for the interleaved supervised updates.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    /// `likelihood`, `rollout` or `rollout:C,S`.
    #[arg(long, default_value = "likelihood")]
    pub policy_a: Policy,
    #[arg(long, default_value = "likelihood")]
    pub policy_b: Policy,
    /// Total dialogues; with role swapping each scenario is played twice.
    #[arg(long, default_value_t = 400)]
    pub dialogues: usize,
    /// Play every scenario once, agent A opening.
    #[arg(long)]
    pub no_swap: bool,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Selfplay {
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value = "likelihood")]
    pub policy_a: Policy,
    #[arg(long, default_value = "likelihood")]
    pub policy_b: Policy,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Chat {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value = "likelihood")]
    pub policy: Policy,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value = "likelihood")]
    pub policy: Policy,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value_t = 1000)]
    pub max_sessions: usize,
}

#[derive(Debug, Args)]
pub struct Stats {
    #[arg(long)]
    pub data: PathBuf,
    /// Input uses the public release's one-perspective-per-line format.
    #[arg(long)]
    pub released: bool,
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_records(path: &Path) -> anyhow::Result<Vec<DialogueRecord>> {
    let examples = parse_records(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    records_from_examples(&examples).with_context(|| format!("pairing records in {}", path.display()))
}

fn load_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    Vocabulary::from_text(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<NegotiationModel> {
    NegotiationModel::load(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

fn load_model_with_vocab(model: &Path, vocab: &Path) -> anyhow::Result<(NegotiationModel, Vocabulary)> {
    let m = load_model(model)?;
    let v = load_vocab(vocab)?;
    ensure!(
        m.config().vocab_size == v.len(),
        "{} expects {} words but {} has {}",
        model.display(),
        m.config().vocab_size,
        vocab.display(),
        v.len()
    );
    Ok((m, v))
}

fn encode(records: &[DialogueRecord], vocab: &Vocabulary) -> anyhow::Result<Vec<EncodedExample>> {
    Ok(EncodedExample::encode_all(&examples_of(records)?, vocab))
}

fn scenarios(n: usize, seed: u64) -> anyhow::Result<Vec<Scenario>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Ok(sample_scenario(&mut rng, &GeneratorConfig::default())?))
        .collect()
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    match cli.command {
        Command::GenData(a) => gen_data(a, &file, seed),
        Command::BuildVocab(a) => {
            let records = load_records(&a.train)?;
            let vocab = build_vocab(&examples_of(&records)?, a.min_count);
            write(&a.out, &vocab.to_text())
        }
        Command::TrainSv(a) => train_sv(a, &file, seed),
        Command::TrainRl(a) => train_rl_cmd(a, &file, seed),
        Command::Eval(a) => eval(a, &file, seed),
        Command::Selfplay(a) => selfplay(a, &file, seed),
        Command::Chat(a) => chat(a, &file, seed),
        Command::Serve(a) => serve(a, &file, seed),
        Command::Stats(a) => stats(a),
    }
}

fn gen_data(a: GenData, file: &FileConfig, seed: u64) -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = synth_corpus(&mut rng, a.n, &file.synth());
    write(&a.out, &format_corpus(&records)?)
}

fn train_sv(a: TrainSv, file: &FileConfig, seed: u64) -> anyhow::Result<()> {
    let train = load_records(&a.train)?;
    let valid = load_records(&a.valid)?;
    let vocab = match &a.vocab {
        Some(p) => load_vocab(p)?,
        None => build_vocab(&examples_of(&train)?, 1),
    };
    let mut cfg = file.supervised();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let train = encode(&train, &vocab)?;
    let valid = encode(&valid, &vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = NegotiationModel::new(file.model(vocab.len())?, &mut rng);
    let report = train_supervised(&mut model, &train, &valid, &cfg, &mut rng)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write(&a.out_dir.join("sv-best.ckpt"), &model.save())?;
    write(&a.out_dir.join("vocab.txt"), &vocab.to_text())?;
    write(&a.out_dir.join("sv-report.txt"), &report.to_string())?;
    info!("best validation perplexity {:.4} at epoch {}", report.best_valid_ppl, report.best_epoch);
    Ok(())
}

fn train_rl_cmd(a: TrainRl, file: &FileConfig, seed: u64) -> anyhow::Result<()> {
    let (partner, vocab) = load_model_with_vocab(&a.model, &a.vocab)?;
    let sup = encode(&load_records(&a.train)?, &vocab)?;
    let mut cfg = file.rl();
    if let Some(e) = a.episodes {
        cfg.episodes = e;
    }
    let mut model = partner.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = train_rl(&mut model, &partner, &GeneratorConfig::default(), &sup, &cfg, &mut rng)?;
    ensure!(
        report.partner_checksum_before == report.partner_checksum_after,
        "partner parameters changed during training"
    );
    let ppl = perplexity(&model, &sup)?;
    info!("training-corpus perplexity after RL {ppl:.4}");
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write(&a.out_dir.join("rl-final.ckpt"), &model.save())?;
    write(&a.out_dir.join("rl-report.txt"), &report.to_string())
}

fn eval(a: Eval, file: &FileConfig, seed: u64) -> anyhow::Result<()> {
    let ma = load_model(&a.model_a)?;
    let mb = load_model(&a.model_b)?;
    ensure!(a.dialogues > 0, "--dialogues must be positive");
    let n = if a.no_swap { a.dialogues } else { a.dialogues.div_ceil(2) };
    let cfg = EvalConfig {
        engine: file.engine(),
        role_swap: !a.no_swap,
        seed,
    };
    let (report, _) = evaluate_pairing((&ma, a.policy_a), (&mb, a.policy_b), &scenarios(n, seed)?, &cfg)?;
    let text = format!(
        "{}\n{}\n\n{}",
        MetricsReport::TABLE_HEADER,
        report.table_row(&a.policy_a.to_string().to_uppercase(), &a.policy_b.to_string().to_uppercase()),
        report.to_kv()
    );
    emit(a.out.as_deref(), &text)
}

fn selfplay(a: Selfplay, file: &FileConfig, seed: u64) -> anyhow::Result<()> {
    let (ma, vocab) = load_model_with_vocab(&a.model_a, &a.vocab)?;
    let (mb, _) = load_model_with_vocab(&a.model_b, &a.vocab)?;
    let engine = file.engine();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for s in scenarios(a.n, seed)? {
        let t: Transcript = {
            let mut sa = engine.session(&ma, negotiator::corpus::goal_of(&s.pool, &s.valuation_a), a.policy_a)?;
            let mut sb = engine.session(&mb, negotiator::corpus::goal_of(&s.pool, &s.valuation_b), a.policy_b)?;
            run_dialogue(&mut sa, &mut sb, &s, Speaker::A, engine.max_turns, &mut rng)?
        };
        text.push_str(&t.to_text(&vocab)?);
    }
    emit(a.out.as_deref(), &text)
}

fn parse_take(line: &str) -> anyhow::Result<Selection> {
    let line = line.trim();
    if line == "no_agreement" || line == "none" {
        return Ok(Selection::NoAgreement);
    }
    let nums: Vec<u32> = line
        .split_whitespace()
        .map(|w| w.parse().with_context(|| format!("{w:?} is not a count")))
        .collect::<anyhow::Result<_>>()?;
    let take: [u32; 3] = nums
        .try_into()
        .map_err(|_| anyhow::anyhow!("enter three counts (books hats balls) or no_agreement"))?;
    Ok(Selection::claim(take))
}

fn chat(a: Chat, file: &FileConfig, seed: u64) -> anyhow::Result<()> {
    let (model, vocab) = load_model_with_vocab(&a.model, &a.vocab)?;
    let scenario = scenarios(1, seed)?[0];
    let mut session = LiveSession::new(
        "chat".into(),
        &model,
        &vocab,
        scenario,
        a.policy,
        &file.engine(),
        seed,
        Instant::now(),
    )?;
    let v = session.view();
    let mut out = std::io::stdout().lock();
    writeln!(out, "items (books hats balls): {:?}", v.pool)?;
    writeln!(out, "your values:              {:?}", v.values)?;
    writeln!(out, "end your message with <choose> once you have a deal")?;
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    loop {
        match session.state() {
            SessionState::HumanTurn => {
                write!(out, "you> ")?;
                out.flush()?;
                let Some(line) = lines.next() else { break };
                match session.post_message(&line?, Instant::now()) {
                    Ok(events) => {
                        for e in events {
                            writeln!(out, "agent> {}", e.text)?;
                        }
                    }
                    Err(e) => writeln!(out, "error: {e}")?,
                }
            }
            SessionState::AwaitingSelections => {
                write!(out, "your share (books hats balls, or no_agreement)> ")?;
                out.flush()?;
                let Some(line) = lines.next() else { break };
                let res = parse_take(&line?).and_then(|t| Ok(session.post_selection(t, Instant::now())?));
                if let Err(e) = res {
                    writeln!(out, "error: {e}")?;
                }
            }
            SessionState::Done => {
                let o = session.outcome().expect("finished sessions have an outcome");
                writeln!(out, "agent values: {:?}", o.agent_values)?;
                if o.agreed {
                    writeln!(out, "deal: you {} points, agent {} points", o.reward_human, o.reward_agent)?;
                } else {
                    writeln!(out, "no deal: 0 points each")?;
                }
                return Ok(());
            }
            SessionState::AgentTurn => bail!("agent turn left unfinished"),
        }
    }
    bail!("input ended before the negotiation finished")
}

fn serve(a: Serve, file: &FileConfig, seed: u64) -> anyhow::Result<()> {
    let (model, vocab) = load_model_with_vocab(&a.model, &a.vocab)?;
    let state = Arc::new(AppState::new(
        Box::leak(Box::new(model)),
        Box::leak(Box::new(vocab)),
        ServiceConfig {
            policy: a.policy,
            engine: file.engine(),
            generator: GeneratorConfig::default(),
            seed,
            max_sessions: a.max_sessions,
        },
    ));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                tokio::signal::ctrl_c().await.ok();
            })
            .await?;
        Ok(())
    })
}

fn stats(a: Stats) -> anyhow::Result<()> {
    let text = read(&a.data)?;
    let records = if a.released {
        let examples = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| import_released_line(l).with_context(|| format!("{}:{}", a.data.display(), i + 1)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        records_from_examples(&examples)?
    } else {
        load_records(&a.data)?
    };
    print!("{}", corpus_stats(&records)?);
    Ok(())
}
