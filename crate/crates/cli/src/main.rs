use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use eegrag::baseline::{make_baseline_runs, run_baseline, BaselineConfig};
use eegrag::corpus::{generate_synthetic, load_corpus, pad_trial, save_corpus, SubjectCorpus, SyntheticConfig};
use eegrag::decode::{AuditLog, Decoder, GroundTruth};
use eegrag::embedding::{load_cache, make_provider, save_cache, EmbeddingVector};
use eegrag::encoder::load_checkpoint;
use eegrag::pipeline::{
    emit_plots, load_offline_artifacts, load_subjects, report_bytes, run_full_experiment, run_offline,
    ExperimentConfig, PipelineError,
};
use eegrag::refine::{make_client, refine, ClientConfig, RefineRequest};
use eegrag::retrieval::{build_store, load_store, save_store, RetrievalResult};
use eegrag::stats::{
    boxplot_csv, build_report, dataset_analysis, group_scores, read_scores, render_table, subject_analysis,
    write_scores, EvalReport, PairedSample,
};

#[derive(Parser)]
#[command(name = "eegrag", version, about = "Sentence-level EEG-to-text decoding experiments")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    #[command(subcommand)]
    Corpus(CorpusCmd),
    #[command(subcommand)]
    Encoder(EncoderCmd),
    #[command(subcommand)]
    Index(IndexCmd),
    #[command(subcommand)]
    Refine(RefineCmd),
    #[command(subcommand)]
    Baseline(BaselineCmd),
    #[command(subcommand)]
    Stats(StatsCmd),
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Load and check a corpus directory (or a directory of subject corpora).
    Validate { path: PathBuf },
    /// Write a synthetic corpus.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        channels: usize,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 2.0)]
        snr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "SYN")]
        subject: String,
        /// Write this many subjects (S00, S01, ...) sharing one sentence set under `--out`.
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EncoderCmd {
    /// Offline stage for one subject with the configured hyperparameters.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline stage with the grid from the config.
    Gridsearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode every trial of a corpus into an embeddings cache.
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Build a vector store from an embeddings cache, restricted to the given ids.
    Build {
        #[arg(long)]
        embeddings: PathBuf,
        /// One id per line, or a JSON array.
        #[arg(long)]
        train_ids: PathBuf,
        /// Corpus supplying sentence texts.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the top-k hits for a query vector (JSON array of numbers).
    Query {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        vector_file: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value = "query")]
        id: String,
    },
}

#[derive(Subcommand)]
enum RefineCmd {
    /// Refine every retrieval result in a JSONL file.
    Run {
        #[arg(long)]
        store_results: PathBuf,
        /// Client config JSON; the offline refiner when omitted.
        #[arg(long)]
        client: Option<PathBuf>,
        /// JSONL output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BaselineCmd {
    /// Score temporally shuffled test trials against shuffled labels.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Subject corpus directory.
        #[arg(long)]
        corpus: PathBuf,
        /// Directory holding the subject's offline artifacts.
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[arg(long)]
        per_channel: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Paired tests and report from score files.
    Report {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// report.json; the table and box data go next to it.
        #[arg(long)]
        out: PathBuf,
        /// Subject id for records that carry none.
        #[arg(long, default_value = "S")]
        subject: String,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Offline stage, inference, baseline and report for every subject.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// CSV plot data from a report.
    Plots {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Validation(String),
    Stage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Validation(_) => 1,
            Self::Stage(_) => 2,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Validation(_) => Self::Validation(e.to_string()),
            PipelineError::Stage { .. } => Self::Stage(e.to_string()),
        }
    }
}

fn invalid(e: impl Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn failed(e: impl Display) -> Failure {
    Failure::Stage(e.to_string())
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are invalid input; help and version are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Corpus(c) => corpus(c),
        Command::Encoder(c) => encoder(c),
        Command::Index(c) => index(c),
        Command::Refine(c) => refine_cmd(c),
        Command::Baseline(c) => baseline(c),
        Command::Stats(c) => stats(c),
        Command::Experiment(c) => experiment(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Validation(m) | Failure::Stage(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn load_config(path: Option<&Path>, corpus: &Path, out: &Path) -> Result<ExperimentConfig, Failure> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(corpus, out),
    };
    config.corpus_path = corpus.to_path_buf();
    config.output_dir = out.to_path_buf();
    Ok(config)
}

fn corpus(cmd: CorpusCmd) -> Outcome {
    match cmd {
        CorpusCmd::Validate { path } => {
            for s in load_subjects(&path)? {
                let shape = s.trials.first().map_or((0, 0), |t| (t.channels(), t.samples()));
                println!(
                    "{}: {} trials, {} channels, {}..{} samples, {} Hz",
                    s.subject_id,
                    s.trials.len(),
                    shape.0,
                    s.trials.iter().map(|t| t.samples()).min().unwrap_or(0),
                    s.max_samples(),
                    s.sample_rate_hz
                );
            }
            Ok(())
        }
        CorpusCmd::Synth { n, channels, samples, snr, seed, subject, subjects, out } => {
            let cfg = SyntheticConfig::new(n, channels, samples, snr, seed);
            let targets: Vec<(String, PathBuf)> = match subjects {
                Some(k) => (0..k).map(|i| (format!("S{i:02}"), out.join(format!("S{i:02}")))).collect(),
                None => vec![(subject, out.clone())],
            };
            for (id, dir) in targets {
                let corpus = generate_synthetic(&cfg.clone().with_subject(id)).map_err(invalid)?;
                let manifest = save_corpus(&corpus, &dir).map_err(failed)?;
                println!("{}", manifest.display());
            }
            Ok(())
        }
    }
}

fn offline(config: ExperimentConfig, out: &Path) -> Outcome {
    config.validate()?;
    let corpus = load_corpus(&config.corpus_path).map_err(invalid)?;
    std::fs::create_dir_all(out).map_err(failed)?;
    let artifacts = run_offline(&config, &corpus, out)?;
    print_json(&artifacts.manifest);
    Ok(())
}

fn read_corpus(path: &Path) -> Result<SubjectCorpus, Failure> {
    load_corpus(path).map_err(invalid)
}

fn encoder(cmd: EncoderCmd) -> Outcome {
    match cmd {
        EncoderCmd::Train { config, corpus, out } => {
            let mut config = load_config(config.as_deref(), &corpus, &out)?;
            config.grid = None;
            offline(config, &out)
        }
        EncoderCmd::Gridsearch { config, corpus, out } => {
            let config = load_config(Some(&config), &corpus, &out)?;
            if config.grid.is_none() {
                return Err(invalid("config has no grid"));
            }
            offline(config, &out)
        }
        EncoderCmd::Embed { corpus, model, out } => {
            let corpus = read_corpus(&corpus)?;
            let model = load_checkpoint(&model).map_err(invalid)?;
            let (_, samples) = model.input_shape();
            let mut vectors = BTreeMap::new();
            for t in &corpus.trials {
                if t.samples() > samples {
                    return Err(invalid(format!("trial {} is longer than the model input ({samples})", t.sentence_id)));
                }
                let z = model.forward(&pad_trial(t, samples)).map_err(failed)?;
                vectors.insert(t.sentence_id.clone(), z);
            }
            save_cache(&out, "eeg-encoder", &vectors).map_err(failed)?;
            println!("{} embeddings -> {}", vectors.len(), out.display());
            Ok(())
        }
    }
}

fn read_ids(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())));
    }
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    let f = std::fs::File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?);
        }
    }
    Ok(out)
}

fn index(cmd: IndexCmd) -> Outcome {
    match cmd {
        IndexCmd::Build { embeddings, train_ids, corpus, out } => {
            let (_, vectors) = load_cache(&embeddings).map_err(invalid)?;
            let corpus = read_corpus(&corpus)?;
            let ids = read_ids(&train_ids)?;
            let mut entries = Vec::with_capacity(ids.len());
            for id in &ids {
                let z = vectors.get(id).ok_or_else(|| invalid(format!("no embedding for {id}")))?;
                let text = corpus.text(id).ok_or_else(|| invalid(format!("no sentence {id} in corpus")))?;
                entries.push((id.clone(), text.to_string(), z.clone()));
            }
            let allowed: BTreeSet<String> = ids.into_iter().collect();
            let store = build_store(entries, &allowed).map_err(failed)?;
            save_store(&store, &out).map_err(failed)?;
            println!("{} entries -> {}", store.len(), out.display());
            Ok(())
        }
        IndexCmd::Query { store, vector_file, k, id } => {
            let store = load_store(&store).map_err(invalid)?;
            let text = std::fs::read_to_string(&vector_file).map_err(|e| invalid(format!("{}: {e}", vector_file.display())))?;
            let values: Vec<f32> = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", vector_file.display())))?;
            let z = EmbeddingVector::new(values).map_err(invalid)?;
            let result = store.query(&id, &z, k).map_err(invalid)?;
            println!("{}", serde_json::to_string(&result).expect("serializable"));
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct RefinedLine {
    query_sentence_id: String,
    output_sentence: String,
    client_name: String,
    latency_ms: f64,
}

fn refine_cmd(cmd: RefineCmd) -> Outcome {
    let RefineCmd::Run { store_results, client, out } = cmd;
    let config: ClientConfig = match client {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => ClientConfig::offline(),
    };
    let results: Vec<RetrievalResult> = read_jsonl(&store_results)?;
    let client = make_client(&config).map_err(failed)?;
    let mut buf = Vec::new();
    for r in &results {
        let texts = r.hits.iter().map(|h| h.text.clone()).collect();
        let request = RefineRequest::new(texts, config.prompt_template.clone()).map_err(invalid)?;
        let refined = refine(client.as_ref(), &request, config.retries).map_err(failed)?;
        let line = RefinedLine {
            query_sentence_id: r.query_sentence_id.clone(),
            output_sentence: refined.output_sentence,
            client_name: refined.client_name,
            latency_ms: refined.latency_ms,
        };
        serde_json::to_writer(&mut buf, &line).expect("serializable");
        buf.push(b'\n');
    }
    match out {
        Some(p) => std::fs::write(&p, buf).map_err(failed),
        None => std::io::stdout().write_all(&buf).map_err(failed),
    }
}

fn baseline(cmd: BaselineCmd) -> Outcome {
    let BaselineCmd::Run { config, corpus, artifacts, seeds, seed_base, per_channel, out } = cmd;
    let config = load_config(config.as_deref(), &corpus, &artifacts)?;
    let corpus = read_corpus(&corpus)?;
    let art = load_offline_artifacts(&artifacts)?;
    let split = art.manifest.split.as_ref().ok_or_else(|| invalid("offline manifest has no split"))?;
    let samples = art.manifest.input_samples;
    let mut trials = Vec::with_capacity(split.test.len());
    let mut truth = BTreeMap::new();
    for id in &split.test {
        let t = corpus.trial(id).ok_or_else(|| invalid(format!("test id {id} missing from corpus")))?;
        trials.push(pad_trial(t, samples));
        let target = art.targets.get(id).ok_or_else(|| invalid(format!("no target embedding for {id}")))?;
        truth.insert(id.clone(), (corpus.text(id).unwrap_or_default().to_string(), target.clone()));
    }
    let provider = make_provider(&config.embedding).map_err(failed)?;
    let refiner = make_client(&config.refiner).map_err(failed)?;
    let decoder = Decoder {
        model: &art.model,
        store: &art.store,
        refiner: refiner.as_ref(),
        provider: provider.as_ref(),
        k: config.k,
        retries: config.refiner.retries,
        prompt_template: config.refiner.prompt_template.clone(),
    };
    let bc = BaselineConfig { n_seeds: seeds, seed_base, per_channel };
    let runs = make_baseline_runs(&trials, &split.test, &bc).map_err(invalid)?;
    let mut audit = AuditLog::default();
    let outcome =
        run_baseline(&runs, &decoder, &GroundTruth::new(truth), Some(&corpus.subject_id), &mut audit).map_err(failed)?;
    write_scores(&out, &outcome.scores).map_err(failed)?;
    println!("{} scores -> {}", outcome.scores.len(), out.display());
    Ok(())
}

fn stats(cmd: StatsCmd) -> Outcome {
    let StatsCmd::Report { real, baseline, out, subject } = cmd;
    let real = read_scores(&real).map_err(invalid)?;
    let base = read_scores(&baseline).map_err(invalid)?;
    let grouped = group_scores(&real, &base, &subject).map_err(invalid)?;
    let analyses = grouped
        .iter()
        .map(|g| subject_analysis(&g.subject_id, &g.real, &g.baseline))
        .collect::<Result<Vec<_>, _>>()
        .map_err(invalid)?;
    let dataset = if analyses.len() >= 2 {
        let pairs: Vec<PairedSample> = analyses
            .iter()
            .map(|a| PairedSample { label: a.label.clone(), real_score: a.real.mean, baseline_score: a.baseline.mean })
            .collect();
        Some(dataset_analysis(&pairs).map_err(failed)?)
    } else {
        None
    };
    let report = build_report(&analyses, dataset.as_ref()).map_err(failed)?;
    write_report(&report, &out)
}

fn write_report(report: &EvalReport, out: &Path) -> Outcome {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(failed)?;
    }
    let table = render_table(report);
    std::fs::write(out, report_bytes(report)).map_err(failed)?;
    std::fs::write(out.with_extension("txt"), &table).map_err(failed)?;
    std::fs::write(out.with_extension("boxplot.csv"), boxplot_csv(report)).map_err(failed)?;
    print!("{table}");
    Ok(())
}

fn experiment(cmd: ExperimentCmd) -> Outcome {
    match cmd {
        ExperimentCmd::Run { config, out, seed } => {
            let mut config = ExperimentConfig::load(&config)?;
            if let Some(out) = out {
                config.output_dir = out;
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let outcome = run_full_experiment(&config)?;
            print!("{}", render_table(&outcome.report));
            for n in &outcome.report.notices {
                println!("note: {n}");
            }
            println!("report {} -> {}", outcome.report_hash, config.output_dir.join("report.json").display());
            Ok(())
        }
        ExperimentCmd::Plots { report, out } => {
            let text = std::fs::read_to_string(&report).map_err(|e| invalid(format!("{}: {e}", report.display())))?;
            let report: EvalReport = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", report.display())))?;
            let files = emit_plots(&report, &out).map_err(failed)?;
            for f in [files.subject_boxes, files.dataset_boxes, files.lines] {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}
