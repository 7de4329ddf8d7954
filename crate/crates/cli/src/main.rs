//! `sparselex`: encode, mask, train, index, search, and evaluate a learned
//! sparse lexical retrieval pipeline from the command line.

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use config::{resolve_config_path, ExperimentConfig, ExperimentPaths, CONFIG_VERSION};
use sparselex::demo;
use sparselex::encoder::{encode, EncoderParams};
use sparselex::eval::{mrr_at_10, ndcg_at_10, read_qrels, read_run, write_run, RunEntry};
use sparselex::index::ImpactIndex;
use sparselex::sparsify::top_k_mask;
use sparselex::train::{train, write_history, write_triples};
use sparselex::vector::{read_vectors, write_vectors, SparseVector};

#[derive(Parser)]
#[command(name = "sparselex", version, about = "Learned sparse lexical retrieval pipeline")]
struct Cli {
    /// Cap worker parallelism (default: machine cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the bundled synthetic corpus, triples, qrels, and a config preset.
    Demo {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Encode a token-id corpus into JSONL sparse vectors.
    Encode {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Apply top-k masking to a JSONL vector file.
    Mask {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k: u32,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train encoder parameters from a triples file (config-driven).
    Train {
        /// Experiment config (TOML); SPARSELEX_CONFIG is the fallback.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the configured learning rate.
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured batch size.
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Build a quantized impact index from JSONL vectors.
    Index {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 100)]
        scale: u32,
    },
    /// Search an impact index with JSONL query vectors; writes a TREC run.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "sparselex")]
        tag: String,
    },
    /// Score a TREC run against qrels; prints mrr@10 and ndcg@10.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring thread pool")?;
    }
    match cli.command {
        Command::Demo { out_dir, seed } => cmd_demo(&out_dir, seed),
        Command::Encode {
            params,
            input,
            output,
        } => cmd_encode(&params, &input, &output),
        Command::Mask { input, k, output } => cmd_mask(&input, k, &output),
        Command::Train {
            config,
            epochs,
            learning_rate,
            seed,
            batch_size,
        } => cmd_train(config, epochs, learning_rate, seed, batch_size),
        Command::Index {
            input,
            output,
            scale,
        } => cmd_index(&input, &output, scale),
        Command::Search {
            index,
            queries,
            top_k,
            output,
            tag,
        } => cmd_search(&index, &queries, top_k, &output, &tag),
        Command::Eval { run, qrels } => cmd_eval(&run, &qrels),
    }
}

fn cmd_demo(out_dir: &std::path::Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let corpus = demo::generate(seed);

    let write_docs = |name: &str, docs: &[(String, sparselex::TokenSequence)]| -> Result<()> {
        let mut w = BufWriter::new(File::create(out_dir.join(name))?);
        demo::write_corpus(&mut w, docs)?;
        Ok(())
    };
    write_docs("corpus.jsonl", &corpus.passages)?;
    write_docs("queries_train.jsonl", &corpus.train_queries)?;
    write_docs("queries_eval.jsonl", &corpus.eval_queries)?;

    let mut w = BufWriter::new(File::create(out_dir.join("triples.jsonl"))?);
    write_triples(&mut w, &corpus.triples)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(out_dir.join("qrels.txt"))?);
    demo::write_qrels(&mut w, &corpus.qrel_rows())?;
    w.flush()?;

    let steps_per_epoch = (corpus.triples.len() as u32).div_ceil(8);
    let preset = ExperimentConfig {
        version: CONFIG_VERSION,
        vocab_size: demo::DEMO_VOCAB_SIZE,
        hidden: 32,
        scale: 100,
        mask_k: 32,
        paths: ExperimentPaths {
            params: "params.bin".into(),
            triples: "triples.jsonl".into(),
            history: "history.csv".into(),
            corpus: "corpus.jsonl".into(),
            queries: "queries_eval.jsonl".into(),
            qrels: "qrels.txt".into(),
            run: "run.txt".into(),
        },
        train: sparselex::train::TrainConfig {
            batch_size: 8,
            learning_rate: 0.05,
            epochs: 60,
            seed,
            freeze_projection: true,
            freeze_projection_bias: true,
            masking: sparselex::train::MaskingMode::Joint,
            schedule: Some(sparselex::sparsify::DecaySchedule::Exponential {
                r_decay: 0.2,
                steps_per_epoch,
                k_min: 32,
            }),
            lambda_kl: 1.0,
            stop_gradient_unmasked: false,
            optimizer: sparselex::train::Optimizer::Sgd,
        },
    };
    preset.save(&out_dir.join("config.toml"))?;
    eprintln!(
        "demo corpus written to {}: {} passages, {} train / {} eval queries, {} triples",
        out_dir.display(),
        corpus.passages.len(),
        corpus.train_queries.len(),
        corpus.eval_queries.len(),
        corpus.triples.len()
    );
    Ok(())
}

fn cmd_encode(params: &std::path::Path, input: &std::path::Path, output: &std::path::Path) -> Result<()> {
    let params = EncoderParams::load(params)
        .with_context(|| format!("loading encoder params {}", params.display()))?;
    let docs = demo::read_corpus(BufReader::new(
        File::open(input).with_context(|| format!("opening {}", input.display()))?,
    ))?;
    let vectors: Vec<(String, SparseVector)> = docs
        .par_iter()
        .map(|(id, seq)| Ok((id.clone(), encode(&params, seq)?)))
        .collect::<sparselex::Result<Vec<_>>>()?;
    let mut w = BufWriter::new(File::create(output)?);
    write_vectors(&mut w, &vectors)?;
    w.flush()?;
    Ok(())
}

fn cmd_mask(input: &std::path::Path, k: u32, output: &std::path::Path) -> Result<()> {
    let vectors = read_vectors(
        BufReader::new(File::open(input).with_context(|| format!("opening {}", input.display()))?),
        None,
    )?;
    let masked: Vec<(String, SparseVector)> = vectors
        .into_iter()
        .map(|(id, v)| Ok((id, top_k_mask(&v, k)?)))
        .collect::<sparselex::Result<Vec<_>>>()?;
    let mut w = BufWriter::new(File::create(output)?);
    write_vectors(&mut w, &masked)?;
    w.flush()?;
    Ok(())
}

fn cmd_train(
    config_flag: Option<PathBuf>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    seed: Option<u64>,
    batch_size: Option<usize>,
) -> Result<()> {
    let path = resolve_config_path(config_flag)?;
    let mut config = ExperimentConfig::load(&path)?;
    if let Some(e) = epochs {
        config.train.epochs = e;
    }
    if let Some(lr) = learning_rate {
        config.train.learning_rate = lr;
    }
    if let Some(s) = seed {
        config.train.seed = s;
    }
    if let Some(b) = batch_size {
        config.train.batch_size = b;
    }
    config.train.validate()?;

    let mut params = if config.paths.params.exists() {
        EncoderParams::load(&config.paths.params)?
    } else {
        EncoderParams::init(config.vocab_size, config.hidden, config.train.seed)?
    };
    let triples = sparselex::train::read_triples(BufReader::new(
        File::open(&config.paths.triples)
            .with_context(|| format!("opening {}", config.paths.triples.display()))?,
    ))?;
    let history = train(&mut params, &triples, &config.train)?;
    params.save(&config.paths.params)?;
    let mut w = BufWriter::new(File::create(&config.paths.history)?);
    write_history(&mut w, &history)?;
    w.flush()?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        eprintln!(
            "trained {} steps: combined loss {:.6} -> {:.6}",
            history.len(),
            first.combined,
            last.combined
        );
    } else {
        eprintln!("no training steps performed (epochs = 0); params initialized");
    }
    Ok(())
}

fn cmd_index(input: &std::path::Path, output: &std::path::Path, scale: u32) -> Result<()> {
    let vectors = read_vectors(
        BufReader::new(File::open(input).with_context(|| format!("opening {}", input.display()))?),
        None,
    )?;
    let mut index = ImpactIndex::build(vectors, scale)?;
    index.save(output)?;
    let stats = index.stats();
    eprintln!(
        "indexed {} docs, {} postings, avg nnz {:.2}, {} bytes on disk",
        stats.doc_count, stats.total_postings, stats.avg_nnz, stats.on_disk_size
    );
    Ok(())
}

fn cmd_search(
    index_path: &std::path::Path,
    queries: &std::path::Path,
    top_k: usize,
    output: &std::path::Path,
    tag: &str,
) -> Result<()> {
    if top_k == 0 {
        anyhow::bail!("--top-k must be >= 1");
    }
    let index = ImpactIndex::load(index_path)
        .with_context(|| format!("loading index {}", index_path.display()))?;
    let queries = read_vectors(
        BufReader::new(
            File::open(queries).with_context(|| format!("opening {}", queries.display()))?,
        ),
        None,
    )?;
    let mut entries = Vec::new();
    for (qid, qv) in &queries {
        for (rank, (doc_id, score)) in index.search(qv, top_k).into_iter().enumerate() {
            entries.push(RunEntry {
                query_id: qid.clone(),
                doc_id,
                rank: rank as u32 + 1,
                score: score as f64,
                tag: tag.to_string(),
            });
        }
    }
    let mut w = BufWriter::new(File::create(output)?);
    write_run(&mut w, &entries)?;
    w.flush()?;
    Ok(())
}

fn cmd_eval(run: &std::path::Path, qrels: &std::path::Path) -> Result<()> {
    let run = read_run(BufReader::new(
        File::open(run).with_context(|| format!("opening {}", run.display()))?,
    ))?;
    let qrels = read_qrels(BufReader::new(
        File::open(qrels).with_context(|| format!("opening {}", qrels.display()))?,
    ))?;
    println!(
        "mrr@10={:.6} ndcg@10={:.6}",
        mrr_at_10(&run, &qrels),
        ndcg_at_10(&run, &qrels)
    );
    Ok(())
}
