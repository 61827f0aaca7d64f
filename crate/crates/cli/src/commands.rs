use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use r2d2_client::Client;
use r2d2_core::agents::Algorithm;
use r2d2_core::alliance::{default_inventory, load_inventory, Inventory, Scale};
use r2d2_core::corpus::synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec};
use r2d2_core::corpus::{
    filter_condition, load_corpus, save_corpus, split_corpus, Condition, CorpusFormat, Session, Speaker,
};
use r2d2_core::recsys::{
    evaluate, evaluate_model, model_transitions, train, EvalCase, MetricsLine, Model, PipelineConfig,
};
use r2d2_core::service::{SessionEngine, WireMessage};
use r2d2_core::topics::ActionSpaceKind;

use crate::args::{pick, require, Cli, Command, FileConfig};
use crate::CliError;

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_HOST: &str = "127.0.0.1";

#[derive(Clone, Debug)]
pub struct SynthRun {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub out: PathBuf,
}

/// Generates and writes a synthetic corpus; returns it with its ground truth.
pub fn cmd_synth(run: &SynthRun) -> Result<SyntheticCorpus, CliError> {
    let corpus = generate_synthetic(&run.spec, run.seed).map_err(|e| CliError::data("synthesize", e))?;
    save_corpus(&run.out, &corpus.sessions, CorpusFormat::from_path(&run.out))
        .map_err(|e| CliError::data("write corpus", e))?;
    Ok(corpus)
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub corpus: PathBuf,
    pub inventory: Option<PathBuf>,
    /// Shared settings; algorithm and scale are overridden per grid cell.
    pub base: PipelineConfig,
    pub algorithms: Vec<Algorithm>,
    pub scales: Vec<Scale>,
    /// A file for a single model, a directory for a grid.
    pub checkpoint: PathBuf,
}

impl TrainRun {
    pub fn is_grid(&self) -> bool {
        self.algorithms.len() * self.scales.len() > 1
    }

    pub fn checkpoint_for(&self, algorithm: Algorithm, scale: Scale) -> PathBuf {
        if self.is_grid() {
            self.checkpoint.join(format!("{algorithm}-{scale}.json"))
        } else {
            self.checkpoint.clone()
        }
    }
}

pub fn read_corpus(path: &Path) -> Result<Vec<Session>, CliError> {
    load_corpus(path, CorpusFormat::from_path(path)).map_err(|e| CliError::data("load corpus", e))
}

pub fn read_inventory(path: Option<&Path>) -> Result<Inventory, CliError> {
    match path {
        Some(p) => load_inventory(p).map_err(|e| CliError::data("load inventory", e)),
        None => Ok(default_inventory()),
    }
}

pub fn read_model(path: &Path) -> Result<Model, CliError> {
    Model::load(path).map_err(|e| CliError::data("load checkpoint", e))
}

/// Trains one model per grid cell, evaluates each on the held-out split and
/// saves its checkpoint. Returns one metrics line per cell.
pub fn cmd_train(run: &TrainRun) -> Result<Vec<MetricsLine>, CliError> {
    let sessions = read_corpus(&run.corpus)?;
    let inventory = read_inventory(run.inventory.as_deref())?;
    let sessions = match run.base.condition {
        Some(c) => {
            let subset = filter_condition(&sessions, c);
            if subset.is_empty() {
                return Err(CliError::data("filter", format!("no sessions labeled {c}")));
            }
            subset
        }
        None => sessions,
    };
    let split =
        split_corpus(&sessions, run.base.test_fraction, run.base.seed).map_err(|e| CliError::data("split", e))?;
    if run.is_grid() {
        fs::create_dir_all(&run.checkpoint).map_err(|e| CliError::data("write checkpoint", e))?;
    }
    let mut lines = Vec::new();
    for &algorithm in &run.algorithms {
        for &scale in &run.scales {
            let mut config = run.base.clone();
            config.agent.algorithm = algorithm;
            config.scale = scale;
            let outcome = train(&config, &split.train, &inventory).map_err(|e| CliError::recsys("train", e))?;
            let metrics = evaluate_model(&outcome.model, &split.test).map_err(|e| CliError::recsys("evaluate", e))?;
            outcome
                .model
                .save(&run.checkpoint_for(algorithm, scale))
                .map_err(|e| CliError::data("write checkpoint", e))?;
            lines.push(MetricsLine::new(&config, &metrics));
        }
    }
    Ok(lines)
}

#[derive(Clone, Debug)]
pub struct EvalRun {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    /// Split seed; the training seed when `None`.
    pub seed: Option<u64>,
    pub expect_topics: Option<usize>,
    pub expect_embed_dim: Option<usize>,
    pub replay_truth: bool,
}

pub fn check_compatible(model: &Model, topics: Option<usize>, embed_dim: Option<usize>) -> Result<(), CliError> {
    if let Some(k) = topics.filter(|&k| k != model.topics.k()) {
        return Err(CliError::data(
            "compatibility",
            format!("checkpoint has {} topics, expected {k}", model.topics.k()),
        ));
    }
    if let Some(d) = embed_dim.filter(|&d| d != model.config.embed_dimension) {
        return Err(CliError::data(
            "compatibility",
            format!(
                "checkpoint embeds into {} dimensions, expected {d}",
                model.config.embed_dimension
            ),
        ));
    }
    Ok(())
}

/// Re-creates the training split and scores the checkpoint on its test side.
pub fn cmd_eval(run: &EvalRun) -> Result<MetricsLine, CliError> {
    let model = read_model(&run.checkpoint)?;
    check_compatible(&model, run.expect_topics, run.expect_embed_dim)?;
    let sessions = read_corpus(&run.corpus)?;
    let sessions = model.config.sessions(&sessions).into_owned();
    if sessions.is_empty() {
        return Err(CliError::data("filter", "no sessions match the checkpoint's condition"));
    }
    let seed = run.seed.unwrap_or(model.config.seed);
    let split = split_corpus(&sessions, model.config.test_fraction, seed).map_err(|e| CliError::data("split", e))?;
    let metrics = if run.replay_truth {
        let set = model_transitions(&model, &split.test).map_err(|e| CliError::recsys("transitions", e))?;
        let cases = EvalCase::from_transitions(&set);
        let mut truth = cases.iter().map(|c| c.target_action.clone());
        evaluate(
            |_| Ok(truth.next().expect("one action per case")),
            &cases,
            &model.action_space,
        )
    } else {
        evaluate_model(&model, &split.test)
    }
    .map_err(|e| CliError::recsys("evaluate", e))?;
    let mut config = model.config.clone();
    config.seed = seed;
    Ok(MetricsLine::new(&config, &metrics))
}

#[derive(Clone, Debug)]
pub struct SimulateRun {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub session_id: Option<String>,
    pub top_n: Option<usize>,
    pub log_dir: Option<PathBuf>,
    pub select_top: bool,
}

#[derive(Clone, Debug)]
pub struct SimulateOutcome {
    /// Every record the engine sent back, starting with the opening ack.
    pub transcript: Vec<WireMessage>,
    pub live_session_id: String,
    pub log_path: Option<PathBuf>,
}

pub fn pick_session(sessions: Vec<Session>, id: Option<&str>) -> Result<Session, CliError> {
    match id {
        Some(id) => sessions
            .into_iter()
            .find(|s| s.session_id == id)
            .ok_or_else(|| CliError::data("select session", format!("no session {id:?} in the corpus"))),
        None => sessions
            .into_iter()
            .next()
            .ok_or_else(|| CliError::data("select session", "corpus is empty")),
    }
}

fn protocol_error(stage: &'static str, message: &WireMessage) -> CliError {
    CliError::data(stage, message.to_line())
}

/// Streams a stored session through an in-process engine, turn by turn.
pub fn cmd_simulate(run: &SimulateRun) -> Result<SimulateOutcome, CliError> {
    let model = read_model(&run.checkpoint)?;
    let session = pick_session(read_corpus(&run.corpus)?, run.session_id.as_deref())?;
    let mut engine = SessionEngine::new(model);
    if let Some(dir) = &run.log_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::data("log directory", e))?;
        engine = engine.with_log_dir(dir);
    }
    let hello = WireMessage::Hello {
        inventory: None,
        top_n: run.top_n,
        condition: Some(session.condition),
    };
    let mut transcript = engine.handle(hello);
    let live_id = match transcript.first() {
        Some(WireMessage::Ack { session_id, .. }) => session_id.clone(),
        Some(other) => return Err(protocol_error("open session", other)),
        None => return Err(CliError::data("open session", "no reply")),
    };
    let send = |message: WireMessage, transcript: &mut Vec<WireMessage>| -> Result<(), CliError> {
        let replies = engine.handle(message);
        if let Some(error) = replies.iter().find(|m| matches!(m, WireMessage::Error { .. })) {
            return Err(protocol_error("stream session", error));
        }
        transcript.extend(replies);
        Ok(())
    };
    for turn in &session.turns {
        let before = transcript.len();
        send(
            WireMessage::Turn {
                session_id: live_id.clone(),
                speaker: turn.speaker,
                text: turn.text.clone(),
            },
            &mut transcript,
        )?;
        let selection = transcript[before..].iter().find_map(|m| match m {
            WireMessage::Recommendation { round, ranked, .. } if run.select_top => {
                ranked.first().map(|top| (*round, top.topic_id))
            }
            _ => None,
        });
        if let Some((round, topic_id)) = selection {
            send(
                WireMessage::Select {
                    session_id: live_id.clone(),
                    round,
                    topic_id,
                },
                &mut transcript,
            )?;
        }
    }
    send(
        WireMessage::End {
            session_id: live_id.clone(),
        },
        &mut transcript,
    )?;
    Ok(SimulateOutcome {
        log_path: engine.log_path(&live_id),
        transcript,
        live_session_id: live_id,
    })
}

#[derive(Clone, Debug)]
pub struct ServeRun {
    pub checkpoint: PathBuf,
    pub addr: SocketAddr,
    pub top_n: Option<usize>,
    pub log_dir: Option<PathBuf>,
    pub inventories: Vec<PathBuf>,
}

pub fn build_engine(run: &ServeRun) -> Result<SessionEngine, CliError> {
    let mut engine = SessionEngine::new(read_model(&run.checkpoint)?);
    if let Some(n) = run.top_n {
        engine = engine.with_top_n(n);
    }
    if let Some(dir) = &run.log_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::data("log directory", e))?;
        engine = engine.with_log_dir(dir);
    }
    for path in &run.inventories {
        let inventory = load_inventory(path).map_err(|e| CliError::data("load inventory", e))?;
        engine
            .register_inventory(inventory)
            .map_err(|e| CliError::data("load inventory", e))?;
    }
    Ok(engine)
}

pub fn cmd_serve(run: &ServeRun) -> Result<(), CliError> {
    let engine = Arc::new(build_engine(run)?);
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(run.addr)
            .await
            .map_err(|e| CliError::data("bind", e))?;
        let local = listener.local_addr().map_err(|e| CliError::data("bind", e))?;
        eprintln!("listening on http://{local}");
        r2d2_server::serve(listener, engine)
            .await
            .map_err(|e| CliError::data("serve", e))
    })
}

#[derive(Clone, Debug)]
pub struct ReplayRun {
    pub url: String,
    pub corpus: PathBuf,
    pub session_id: Option<String>,
    pub top_n: Option<usize>,
}

/// Streams a stored session to a running service over its live channel.
pub fn cmd_replay(run: &ReplayRun) -> Result<Vec<WireMessage>, CliError> {
    let session = pick_session(read_corpus(&run.corpus)?, run.session_id.as_deref())?;
    let turns: Vec<(Speaker, String)> = session.turns.iter().map(|t| (t.speaker, t.text.clone())).collect();
    let client = Client::new(run.url.clone());
    runtime()?.block_on(async move {
        let mut channel = client.connect().await.map_err(|e| CliError::data("connect", e))?;
        let id = channel
            .open(None, run.top_n, Some(session.condition))
            .await
            .map_err(|e| CliError::data("open session", e))?;
        let transcript = channel
            .replay(&id, &turns)
            .await
            .map_err(|e| CliError::data("stream session", e))?;
        channel.close().await.map_err(|e| CliError::data("close", e))?;
        Ok(transcript)
    })
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::data("runtime", e))
}

fn parse_list<T>(value: &str, all: &[T], what: &str) -> Result<Vec<T>, CliError>
where
    T: Copy + std::str::FromStr,
    T::Err: std::fmt::Display,
{
    if value.eq_ignore_ascii_case("all") {
        return Ok(all.to_vec());
    }
    value
        .split(',')
        .map(|v| v.trim().parse().map_err(|e| CliError::Usage(format!("--{what}: {e}"))))
        .collect()
}

fn resolve_train(args: crate::args::TrainArgs, file: &FileConfig) -> Result<TrainRun, CliError> {
    let mut base = PipelineConfig::default();
    if let Some(k) = pick(args.topics, file.topics) {
        base.topics = k;
    }
    if let Some(d) = pick(args.embed_dim, file.embed_dim) {
        base.embed_dimension = d;
    }
    if let Some(kind) = pick(args.action_space, file.action_space.clone()) {
        base.action_space = kind
            .parse::<ActionSpaceKind>()
            .map_err(|e| CliError::Usage(format!("--action-space: {e}")))?;
    }
    if let Some(n) = pick(args.epochs, file.epochs) {
        base.epochs = n;
    }
    base.seed = pick(args.seed, file.seed).unwrap_or(0);
    if let Some(f) = pick(args.test_fraction, file.test_fraction) {
        base.test_fraction = f;
    }
    if let Some(c) = pick(args.condition, file.condition.clone()) {
        base.condition = Some(
            c.parse::<Condition>()
                .map_err(|e| CliError::Usage(format!("--condition: {e}")))?,
        );
    }
    let algorithms = parse_list(
        &pick(args.algo, file.algo.clone()).unwrap_or_else(|| "ddpg".into()),
        &Algorithm::ALL,
        "algo",
    )?;
    let scales = parse_list(
        &pick(args.scale, file.scale.clone()).unwrap_or_else(|| "task".into()),
        &Scale::ALL,
        "scale",
    )?;
    Ok(TrainRun {
        corpus: require(pick(args.corpus, file.corpus.clone()), "corpus")?,
        inventory: pick(args.inventory, file.inventory.clone()),
        base,
        algorithms,
        scales,
        checkpoint: require(pick(args.checkpoint, file.checkpoint.clone()), "checkpoint")?,
    })
}

fn print_transcript(transcript: &[WireMessage]) {
    for message in transcript {
        println!("{}", message.to_line());
    }
}

/// Executes a parsed command line, printing reports to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(args) => {
            let mut spec = SyntheticSpec::default();
            if let Some(n) = pick(args.sessions, file.sessions) {
                spec.sessions = n;
            }
            if let Some(n) = pick(args.turns, file.turns) {
                spec.turns_per_session = n;
            }
            if let Some(k) = pick(args.topics, file.topics) {
                spec.topics = k;
            }
            let run = SynthRun {
                spec,
                seed: pick(args.seed, file.seed).unwrap_or(0),
                out: require(pick(args.out, file.out.clone()), "out")?,
            };
            let corpus = cmd_synth(&run)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": run.out,
                    "sessions": corpus.sessions.len(),
                    "topics": run.spec.topics,
                    "seed": run.seed,
                })
            );
        }
        Command::Train(args) => {
            for line in cmd_train(&resolve_train(args, &file)?)? {
                println!("{}", line.to_json_line());
            }
        }
        Command::Eval(args) => {
            let run = EvalRun {
                checkpoint: require(pick(args.checkpoint, file.checkpoint.clone()), "checkpoint")?,
                corpus: require(pick(args.corpus, file.corpus.clone()), "corpus")?,
                seed: pick(args.seed, file.seed),
                expect_topics: pick(args.topics, file.topics),
                expect_embed_dim: pick(args.embed_dim, file.embed_dim),
                replay_truth: args.replay_truth,
            };
            println!("{}", cmd_eval(&run)?.to_json_line());
        }
        Command::Serve(args) => {
            let host = pick(args.host, file.host.clone()).unwrap_or_else(|| DEFAULT_HOST.into());
            let port = pick(args.port, file.port).unwrap_or(DEFAULT_PORT);
            let addr = format!("{host}:{port}")
                .parse()
                .map_err(|e| CliError::Usage(format!("--host/--port: {e}")))?;
            let mut inventories = args.inventories;
            if inventories.is_empty() {
                inventories.extend(file.inventory.clone());
            }
            cmd_serve(&ServeRun {
                checkpoint: require(pick(args.checkpoint, file.checkpoint.clone()), "checkpoint")?,
                addr,
                top_n: pick(args.top_n, file.top_n),
                log_dir: pick(args.log_dir, file.log_dir.clone()),
                inventories,
            })?;
        }
        Command::Simulate(args) => {
            let outcome = cmd_simulate(&SimulateRun {
                checkpoint: require(pick(args.checkpoint, file.checkpoint.clone()), "checkpoint")?,
                corpus: require(pick(args.corpus, file.corpus.clone()), "corpus")?,
                session_id: args.session_id,
                top_n: pick(args.top_n, file.top_n),
                log_dir: pick(args.log_dir, file.log_dir.clone()),
                select_top: args.select_top,
            })?;
            print_transcript(&outcome.transcript);
        }
        Command::Replay(args) => {
            let transcript = cmd_replay(&ReplayRun {
                url: args.url,
                corpus: require(pick(args.corpus, file.corpus.clone()), "corpus")?,
                session_id: args.session_id,
                top_n: pick(args.top_n, file.top_n),
            })?;
            print_transcript(&transcript);
        }
    }
    Ok(())
}
