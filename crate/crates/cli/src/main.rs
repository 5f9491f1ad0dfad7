mod config;

use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use causalqa::data::{self, CueLexicon};
use causalqa::embed::{load_word_vectors, GraphEmbeddings, VectorTable};
use causalqa::eval::{self, SweepSetup};
use causalqa::graph::load_graph;
use causalqa::infer::{answer, AnswerReason, AnswerRecord, Decoding};
use causalqa::train::{Phase, Trainer};
use causalqa::{AgentParams, CausalGraph, Environment, Label, QAExample, Question, Split};
use clap::{Parser, Subcommand, ValueEnum};

use config::{ConfigArgs, RunConfig, UsageError, CONFIG_FILE};

#[derive(Parser, Debug)]
#[command(name = "causalqa", version, about = "Answer binary causal questions by walking a causality graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract binary causal questions from a JSONL question-answer corpus
    Extract {
        #[arg(long)]
        corpus: PathBuf,
        /// Dataset TSV to write
        #[arg(long)]
        output: PathBuf,
        /// Directory with cue_words.txt, question_words.txt and excluded_pos.txt
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Also report how many questions link to this graph
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Train an agent: writes a checkpoint, a metrics log and the resolved config
    Train {
        /// Output directory
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score checkpoints and the BFS baseline on the same questions
    Eval {
        /// One or more checkpoints; each uses the config saved next to it
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// Questions to score; default is the test split, or everything if it is empty
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// TSV table to write; stdout when absent
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Answer questions with a checkpoint, one JSON record per question
    Answer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A single question
        #[arg(long, conflicts_with = "questions")]
        question: Option<String>,
        /// A dataset TSV or a file with one question per line; stdin when neither is given
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Supervised-step and beam-width grids
    Sweep {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = SweepKind::All)]
        kind: SweepKind,
        #[arg(long, value_delimiter = ',', default_value = "0,100,200,300")]
        supervised_grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,50")]
        beam_widths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Score the test split every N RL steps during the supervised sweep (0 = never)
        #[arg(long, default_value_t = 0)]
        eval_every: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Supervised,
    Beam,
    All,
}

/// Graph, vectors and embeddings for one configuration.
struct Workspace {
    graph: CausalGraph,
    table: VectorTable,
    embeddings: GraphEmbeddings,
}

impl Workspace {
    /// `extra` phrases join the vocabulary of random vectors.
    fn load(cfg: &RunConfig, extra: &[&str]) -> Result<Workspace> {
        let path = cfg.graph_path()?;
        let graph = load_graph(path, cfg.inverse_edges).with_context(|| format!("loading graph {}", path.display()))?;
        let table = match &cfg.vectors {
            Some(v) => load_word_vectors(v, Some(cfg.agent.dim)).with_context(|| format!("loading vectors {}", v.display()))?,
            None => {
                let mut vocab: Vec<&str> = graph.entities().map(|e| graph.surface(e)).collect();
                vocab.extend((0..graph.provenance_count() as u32).map(|i| graph.provenance_by_id(causalqa::graph::ProvenanceId(i)).sentence.as_str()));
                vocab.extend_from_slice(extra);
                VectorTable::random(vocab, cfg.agent.dim, cfg.vector_seed)?
            }
        };
        let embeddings = GraphEmbeddings::build(&graph, &table);
        Ok(Workspace { graph, table, embeddings })
    }

    fn env(&self, cfg: &RunConfig) -> Environment<'_> {
        let mut env = Environment::new(&self.graph, &self.embeddings, cfg.agent.horizon);
        env.max_actions = cfg.agent.max_actions;
        env
    }
}

fn question_texts(examples: &[QAExample]) -> Vec<&str> {
    examples.iter().map(|e| e.question.as_str()).collect()
}

fn decoding(cfg: &RunConfig) -> Decoding {
    if cfg.greedy {
        Decoding::Greedy
    } else {
        Decoding::Beam(cfg.agent.beam_width)
    }
}

fn training_questions(ws: &Workspace, env: &Environment, examples: &[QAExample]) -> Result<Vec<Arc<Question>>> {
    let train = data::filter_training_set(&ws.graph, examples);
    if train.is_empty() {
        bail!("no positive training question links to the graph");
    }
    train.iter().map(|ex| Ok(Arc::new(env.question(&ws.table, ex)?))).collect()
}

fn test_split(examples: Vec<QAExample>, split: Option<SplitArg>) -> Vec<QAExample> {
    let want = match split {
        Some(SplitArg::All) => return examples,
        Some(SplitArg::Train) => Split::Train,
        Some(SplitArg::Validation) => Split::Validation,
        Some(SplitArg::Test) | None => Split::Test,
    };
    let chosen: Vec<QAExample> = examples.iter().filter(|e| e.split == want).cloned().collect();
    if chosen.is_empty() && split.is_none() {
        examples
    } else {
        chosen
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(f)
}

fn extract(corpus: &Path, output: &Path, lexicon: Option<&Path>, graph: Option<&Path>) -> Result<()> {
    let lexicon = match lexicon {
        Some(dir) => CueLexicon::load_dir(dir)?,
        None => CueLexicon::default(),
    };
    let records = data::read_corpus(corpus)?;
    let report = data::extract_questions(&records, &lexicon);
    data::write_dataset(output, &report.examples)?;
    let stats = data::corpus_stats(&report.examples);
    eprintln!(
        "extracted {} of {} records (no pattern {}, no answer {}, excluded POS {}, multi-cue {})",
        report.examples.len(),
        records.len(),
        report.no_pattern,
        report.no_answer,
        report.excluded_pos,
        report.multi_cue.len()
    );
    eprintln!("{}", serde_json::to_string(&stats)?);
    if let Some(g) = graph {
        let graph = load_graph(g, true)?;
        let train = data::filter_training_set(&graph, &report.examples);
        eprintln!("{} positive training questions link to the graph", train.len());
    }
    Ok(())
}

fn train(output: &Path, cfg: &RunConfig) -> Result<()> {
    let examples = data::read_dataset(cfg.dataset_path()?)?;
    let ws = Workspace::load(cfg, &question_texts(&examples))?;
    let env = ws.env(cfg);
    let questions = training_questions(&ws, &env, &examples)?;
    create_dir(output)?;
    cfg.save(&output.join(CONFIG_FILE))?;
    let hash = ws.graph.entity_hash();
    let metrics_path = output.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);

    let a = &cfg.agent;
    let every = a.log_every.max(1);
    let n_questions = questions.len();
    with_threads(cfg.threads, || {
        let mut trainer = Trainer::new(&env, questions, a)?;
        eprintln!(
            "{} questions, {} demonstrations ({} dropped)",
            n_questions,
            trainer.demonstrations().demos.len(),
            trainer.demonstrations().dropped
        );
        for k in 1..=a.supervised_steps {
            let Some(m) = trainer.supervised_step()? else { break };
            if k % every == 0 || k == a.supervised_steps {
                writeln!(metrics, "{}", serde_json::to_string(&m)?)?;
            }
        }
        for k in 1..=a.steps {
            let m = trainer.rl_step()?;
            debug_assert_eq!(m.phase, Phase::Rl);
            if k % every == 0 || k == a.steps {
                writeln!(metrics, "{}", serde_json::to_string(&m)?)?;
            }
            if a.checkpoint_every > 0 && k % a.checkpoint_every == 0 {
                trainer.agent().save(output.join(format!("checkpoint-{k}.bin")), hash)?;
            }
        }
        metrics.flush()?;
        trainer.agent().save(output.join("checkpoint.bin"), hash)?;
        Ok(())
    })?;
    eprintln!("wrote {}", output.display());
    Ok(())
}

fn evaluate(checkpoints: &[PathBuf], split: Option<SplitArg>, output: Option<&Path>, args: &ConfigArgs) -> Result<()> {
    let mut rows: Vec<eval::EvalRow> = Vec::new();
    for path in checkpoints {
        let cfg = args.resolve_for_checkpoint(path)?;
        let examples = data::read_dataset(cfg.dataset_path()?)?;
        let test = test_split(examples.clone(), split);
        let ws = Workspace::load(&cfg, &question_texts(&examples))?;
        let agent = AgentParams::load(path, Some(ws.graph.entity_hash())).with_context(|| format!("loading {}", path.display()))?;
        let new = with_threads(cfg.threads, || {
            Ok(eval::run_eval(
                &ws.graph,
                &ws.embeddings,
                &ws.table,
                &[(cfg.agent.horizon, &agent)],
                &test,
                decoding(&cfg),
                Some(cfg.agent.seed),
            )?)
        })?;
        for r in new {
            if !rows.contains(&r) {
                rows.push(r);
            }
        }
    }
    let mut groups: Vec<(String, usize)> = Vec::new();
    for r in &rows {
        let key = (r.method.clone(), r.hops);
        if r.seed.is_some() && !groups.contains(&key) {
            groups.push(key);
        }
    }
    for (method, hops) in groups {
        let same: Vec<eval::EvalRow> = rows.iter().filter(|r| r.method == method && r.hops == hops && r.seed.is_some()).cloned().collect();
        if same.len() > 1 {
            rows.extend(eval::mean_row(&same));
        }
    }
    let mut out = open_output(output)?;
    out.write_all(eval::format_table(&rows).as_bytes())?;
    out.flush()?;
    Ok(())
}

fn read_questions(question: Option<&str>, file: Option<&Path>) -> Result<Vec<String>> {
    if let Some(q) = question {
        return Ok(vec![q.to_string()]);
    }
    let lines: Vec<String> = match file {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?.lines().map(str::to_string).collect(),
        None => io::stdin().lock().lines().collect::<io::Result<_>>()?,
    };
    Ok(lines.into_iter().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
}

fn answer_questions(checkpoint: &Path, question: Option<&str>, file: Option<&Path>, output: Option<&Path>, args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve_for_checkpoint(checkpoint)?;
    let is_dataset = file.is_some_and(|p| std::fs::read_to_string(p).map(|t| t.starts_with("id\t")).unwrap_or(false));
    let lexicon = CueLexicon::default();
    // None marks a question with no recognizable cause and effect.
    let examples: Vec<(String, String, Option<QAExample>)> = if is_dataset {
        data::read_dataset(file.unwrap())?
            .into_iter()
            .map(|ex| (ex.id.clone(), ex.question.clone(), Some(ex)))
            .collect()
    } else {
        read_questions(question, file)?
            .into_iter()
            .enumerate()
            .map(|(i, text)| {
                let id = format!("q{}", i + 1);
                let ex = lexicon
                    .parse_question(&text)
                    .map(|(c, e)| QAExample::new(&id, &text, &c, &e, Label::No));
                (id, text, ex)
            })
            .collect()
    };
    let texts: Vec<&str> = examples.iter().map(|(_, t, _)| t.as_str()).collect();
    let ws = Workspace::load(&cfg, &texts)?;
    let agent = AgentParams::load(checkpoint, Some(ws.graph.entity_hash())).with_context(|| format!("loading {}", checkpoint.display()))?;
    let env = ws.env(&cfg);
    let mut out = open_output(output)?;
    for (id, text, ex) in &examples {
        let record = match ex {
            Some(ex) => {
                let a = answer(&agent, &env, &ws.table, ex, decoding(&cfg))?;
                AnswerRecord::new(&ws.graph, ex, &a)
            }
            None => AnswerRecord {
                id: id.clone(),
                question: text.clone(),
                verdict: Label::No,
                reason: AnswerReason::Unlinked,
                paths: Vec::new(),
            },
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    out.flush()?;
    Ok(())
}

struct SweepArgs<'a> {
    kind: SweepKind,
    supervised_grid: &'a [usize],
    beam_widths: &'a [usize],
    seeds: &'a [u64],
    eval_every: usize,
}

fn sweep(output: &Path, cfg: &RunConfig, s: &SweepArgs) -> Result<()> {
    let examples = data::read_dataset(cfg.dataset_path()?)?;
    let ws = Workspace::load(cfg, &question_texts(&examples))?;
    let env = ws.env(cfg);
    let questions = training_questions(&ws, &env, &examples)?;
    let test = test_split(examples, None);
    create_dir(output)?;
    cfg.save(&output.join(CONFIG_FILE))?;
    with_threads(cfg.threads, || {
        if s.kind != SweepKind::Beam {
            let setup = SweepSetup {
                env: &env,
                table: &ws.table,
                questions: &questions,
                eval_set: &test,
                eval_every: s.eval_every,
            };
            let points = eval::sweep_supervised(&setup, &cfg.agent, s.supervised_grid, s.seeds)?;
            std::fs::write(output.join("supervised.tsv"), eval::format_curves(&points))?;
        }
        if s.kind != SweepKind::Supervised {
            let mut rows = Vec::new();
            for &seed in s.seeds {
                let config = causalqa::AgentConfig { seed, ..cfg.agent.clone() };
                let (agent, _) = causalqa::train::train_loop(&env, questions.clone(), &config)?;
                for mut r in eval::sweep_beam_width(&agent, &env, &ws.table, &test, s.beam_widths)? {
                    r.seed = Some(seed);
                    rows.push(r);
                }
            }
            std::fs::write(output.join("beam.tsv"), eval::format_table(&rows))?;
        }
        Ok(())
    })?;
    eprintln!("wrote {}", output.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract { corpus, output, lexicon, graph } => extract(&corpus, &output, lexicon.as_deref(), graph.as_deref()),
        Command::Train { output, cfg } => train(&output, &cfg.resolve(RunConfig::default())?),
        Command::Eval { checkpoint, split, output, cfg } => evaluate(&checkpoint, split, output.as_deref(), &cfg),
        Command::Answer {
            checkpoint,
            question,
            questions,
            output,
            cfg,
        } => answer_questions(&checkpoint, question.as_deref(), questions.as_deref(), output.as_deref(), &cfg),
        Command::Sweep {
            output,
            kind,
            supervised_grid,
            beam_widths,
            seeds,
            eval_every,
            cfg,
        } => {
            if seeds.is_empty() || beam_widths.contains(&0) {
                return Err(UsageError("seeds must be non-empty and beam widths positive".into()).into());
            }
            let s = SweepArgs {
                kind,
                supervised_grid: &supervised_grid,
                beam_widths: &beam_widths,
                seeds: &seeds,
                eval_every,
            };
            sweep(&output, &cfg.resolve(RunConfig::default())?, &s)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
