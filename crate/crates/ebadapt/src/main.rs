use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ebadapt::config::{resolve_threads, PipelineConfig};
use ebadapt::error::{Context, Error, Result};
use ebadapt::formats::checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
use ebadapt::formats::index::{load_index, save_index};
use ebadapt::formats::tables::{format_adapt_curve, format_finetune_curve, load_comparison, save_comparison, Comparison};
use ebadapt::formats::trec::{load_qrels, load_run, save_run};
use ebadapt::formats::{
    load_jsonl, load_tokenizer, print, read_text, save_jsonl, save_tokenizer, sha256_hex, write_file, PairRecord, TextRecord,
};
use ebadapt::manifest::RunManifest;
use ebadapt::pipeline::{self, CorpusFiles, EmbedOpts, DOCS_FILE, TRAIN_FILE};
use ebadapt_core::adapt::run_adaptation;
use ebadapt_core::compression::CompressionDescriptor;
use ebadapt_core::lexical::lexical_similarity_report;
use ebadapt_core::prompt::SchemePair;
use ebadapt_core::synth::gen_synthetic;
use ebadapt_core::tokenizer::Tokenizer;

#[derive(Parser)]
#[command(name = "ebadapt", version, about = "Embedding adaptation and retrieval pipeline for small decoder-only models")]
struct Cli {
    /// JSON pipeline config; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for embedding (default: EBADAPT_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Model {
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic task into a directory.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build a vocabulary from every text of a task.
    BuildTokenizer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// EBAE + EBAR adaptation; starts from a fresh model without --checkpoint.
    Adapt {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive fine-tuning with mined hard negatives.
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        model: Model,
        /// Training pairs (default: train.jsonl of the corpus).
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<SchemePair>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Learn a projection to this width jointly.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a document collection into an index file.
    Embed {
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        scheme: Option<SchemePair>,
        /// Keep only the N largest-magnitude entries per vector.
        #[arg(long, conflicts_with = "compression")]
        sparse_n: Option<usize>,
        /// Compression descriptor written by `compress` or `finetune --dim`.
        #[arg(long)]
        compression: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank indexed documents for each query into a TREC run.
    Search {
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        scheme: Option<SchemePair>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a TREC run against qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean BM25 between vocabulary projections of queries and answers.
    DiagnoseLexical {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        initial: PathBuf,
        #[arg(long)]
        adapted: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
        #[arg(long)]
        scheme: Option<SchemePair>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a sparse or distilled-projection compression descriptor.
    Compress {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        scheme: Option<SchemePair>,
        #[arg(long, required_unless_present = "sparse_n", conflicts_with = "sparse_n")]
        dim: Option<usize>,
        #[arg(long)]
        sparse_n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compression comparison table, plus a rendered lexical table if given.
    Report {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        scheme: Option<SchemePair>,
        #[arg(long)]
        lexical: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

const LEXICAL_CAPTION: &str = "mean BM25 over pairs between query and answer vocabulary projections";

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

struct Ctx {
    cfg: PipelineConfig,
    threads: usize,
}

impl Ctx {
    fn opts(&self, ck: &Checkpoint) -> EmbedOpts {
        EmbedOpts::for_checkpoint(ck, self.cfg.embed_batch.max(1), self.threads)
    }
}

fn load_model(m: &Model, manifest: &mut RunManifest) -> Result<(Tokenizer, Checkpoint, String)> {
    let tok = load_tokenizer(&m.tokenizer)?;
    let ck = load_checkpoint(&m.checkpoint)?;
    if ck.model.config.vocab_size != tok.vocab_size() {
        return Err(Error::format(
            &m.checkpoint,
            format!("vocabulary of {} does not match tokenizer of {}", ck.model.config.vocab_size, tok.vocab_size()),
        ));
    }
    manifest.input(&m.tokenizer)?;
    manifest.input(&m.checkpoint)?;
    let sum = sha256_hex(&encode_checkpoint(&ck));
    Ok((tok, ck, sum))
}

/// Flag, then the checkpoint's recorded scheme, then the configured route.
fn scheme_for(flag: Option<SchemePair>, ck: &Checkpoint, cfg: &PipelineConfig) -> SchemePair {
    flag.or(ck.model.scheme).unwrap_or_else(|| cfg.resolved_scheme())
}

fn load_descriptor(path: &Path) -> Result<CompressionDescriptor> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}

fn save_descriptor(path: &Path, d: &CompressionDescriptor) -> Result<()> {
    let mut s = serde_json::to_string(d).expect("descriptor serializes");
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load_or_default(cli.config.as_deref())?;
    let threads = resolve_threads(cli.threads)?;
    let mut ctx = Ctx { cfg, threads };
    let name = match &cli.cmd {
        Cmd::GenCorpus { .. } => "gen-corpus",
        Cmd::BuildTokenizer { .. } => "build-tokenizer",
        Cmd::Adapt { .. } => "adapt",
        Cmd::Finetune { .. } => "finetune",
        Cmd::Embed { .. } => "embed",
        Cmd::Search { .. } => "search",
        Cmd::Eval { .. } => "eval",
        Cmd::DiagnoseLexical { .. } => "diagnose-lexical",
        Cmd::Compress { .. } => "compress",
        Cmd::Report { .. } => "report",
    };
    match cli.cmd {
        Cmd::GenCorpus { out, seed } => {
            if let Some(s) = seed {
                ctx.cfg.synth.seed = s;
            }
            let mut m = RunManifest::new(name, &ctx.cfg);
            m.seed = Some(ctx.cfg.synth.seed);
            let corpus = gen_synthetic(&ctx.cfg.synth).context("synthetic task")?;
            for p in CorpusFiles::from_synth(&corpus).save(&out)? {
                m.output(&p);
            }
            m.save(&out)
        }
        Cmd::BuildTokenizer { corpus, out } => {
            let mut m = RunManifest::new(name, &ctx.cfg);
            let files = load_corpus(&corpus, &mut m)?;
            let tok = pipeline::build_tokenizer(&files, ctx.cfg.max_vocab);
            let path = out.join("tokenizer.json");
            save_tokenizer(&path, &tok)?;
            m.output(&path);
            eprintln!("vocabulary: {} entries", tok.vocab_size());
            m.save(&out)
        }
        Cmd::Adapt {
            corpus,
            tokenizer,
            checkpoint,
            steps,
            seed,
            out,
        } => adapt(&mut ctx, corpus, tokenizer, checkpoint, steps, seed, out),
        Cmd::Finetune {
            corpus,
            model,
            pairs,
            scheme,
            steps,
            seed,
            dim,
            out,
        } => finetune(&mut ctx, corpus, model, pairs, scheme, steps, seed, dim, out),
        Cmd::Embed {
            model,
            docs,
            scheme,
            sparse_n,
            compression,
            out,
        } => {
            let mut m = RunManifest::new(name, &ctx.cfg);
            let (tok, ck, sum) = load_model(&model, &mut m)?;
            let scheme = scheme_for(scheme, &ck, &ctx.cfg);
            m.option("scheme", scheme);
            m.input(&docs)?;
            let desc = match (sparse_n, compression) {
                (Some(n), _) => {
                    m.option("sparse_n", n);
                    Some(CompressionDescriptor::sparse(ck.model.config.d_model, n).context("--sparse-n")?)
                }
                (None, Some(p)) => {
                    m.input(&p)?;
                    Some(load_descriptor(&p)?)
                }
                (None, None) => None,
            };
            let recs: Vec<TextRecord> = load_jsonl(&docs)?;
            let docs_tok = pipeline::encode_texts(&tok, &recs);
            let index = pipeline::build_index(&ck.model, &tok.prompt_tokens(), &docs_tok, scheme, desc, &sum, ctx.opts(&ck))
                .context(docs.display())?;
            let path = out.join("index.bin");
            save_index(&path, &index)?;
            m.output(&path);
            m.save(&out)
        }
        Cmd::Search {
            model,
            index,
            queries,
            scheme,
            top_k,
            out,
        } => {
            let mut m = RunManifest::new(name, &ctx.cfg);
            let (tok, ck, sum) = load_model(&model, &mut m)?;
            m.input(&index)?;
            m.input(&queries)?;
            let idx = load_index(&index)?;
            if idx.meta().model_checksum != sum {
                return Err(Error::format(&index, "built from a different checkpoint"));
            }
            let scheme = scheme.unwrap_or(idx.meta().scheme);
            let k = top_k.unwrap_or(ctx.cfg.top_k);
            if k == 0 {
                return Err(Error::Usage("--top-k must be at least 1".into()));
            }
            m.option("scheme", scheme);
            m.option("top_k", k);
            let recs: Vec<TextRecord> = load_jsonl(&queries)?;
            let q = pipeline::encode_texts(&tok, &recs);
            let run = pipeline::search(&ck.model, &tok.prompt_tokens(), &idx, &q, scheme, k, ctx.opts(&ck)).context(index.display())?;
            let path = out.join("run.trec");
            save_run(&path, &run, "ebadapt")?;
            m.output(&path);
            m.save(&out)
        }
        Cmd::Eval { run, qrels, k, out } => {
            let k = k.unwrap_or(ctx.cfg.eval_k);
            if k == 0 {
                return Err(Error::Usage("--k must be at least 1".into()));
            }
            let metrics = pipeline::evaluate(&load_run(&run)?, &load_qrels(&qrels)?, k);
            let text = metrics.to_text();
            print(&text);
            if let Some(out) = out {
                let mut m = RunManifest::new(name, &ctx.cfg);
                m.input(&run)?;
                m.input(&qrels)?;
                m.option("k", k);
                let path = out.join("metrics.txt");
                write_file(&path, text.as_bytes())?;
                m.output(&path);
                m.save(&out)?;
            }
            Ok(())
        }
        Cmd::DiagnoseLexical {
            corpus,
            tokenizer,
            initial,
            adapted,
            finetuned,
            scheme,
            out,
        } => {
            let mut m = RunManifest::new(name, &ctx.cfg);
            let files = load_corpus(&corpus, &mut m)?;
            let tok = load_tokenizer(&tokenizer)?;
            m.input(&tokenizer)?;
            let mut models = Vec::new();
            for p in [&initial, &adapted, &finetuned] {
                m.input(p)?;
                models.push(load_checkpoint(p)?.model);
            }
            let scheme = scheme.or(models[2].scheme).unwrap_or_else(|| ctx.cfg.resolved_scheme());
            m.option("scheme", scheme);
            let pairs: Vec<(Vec<u32>, Vec<u32>)> = files
                .judged_pairs()?
                .into_iter()
                .map(|(q, a)| (tok.encode(q), tok.encode(a)))
                .collect();
            let refs: Vec<_> = models.iter().collect();
            let report = lexical_similarity_report(&refs, &tok.prompt_tokens(), scheme, &pairs, &ctx.cfg.lexical_ns)
                .context("lexical diagnostic")?;
            let table = Comparison {
                key: "N".into(),
                columns: vec!["initial".into(), "adapted".into(), "finetuned".into()],
                rows: report.ns.iter().copied().zip(report.scores).collect(),
            };
            let path = out.join("lexical.csv");
            save_comparison(&path, &table)?;
            m.output(&path);
            print(&table.render(LEXICAL_CAPTION));
            m.save(&out)
        }
        Cmd::Compress {
            corpus,
            model,
            scheme,
            dim,
            sparse_n,
            out,
        } => {
            let mut m = RunManifest::new(name, &ctx.cfg);
            let (tok, ck, _) = load_model(&model, &mut m)?;
            let d = ck.model.config.d_model;
            let desc = match (dim, sparse_n) {
                (_, Some(n)) => {
                    m.option("sparse_n", n);
                    CompressionDescriptor::sparse(d, n).context("--sparse-n")?
                }
                (Some(dim), None) => {
                    let scheme = scheme_for(scheme, &ck, &ctx.cfg);
                    m.option("dim", dim);
                    m.option("scheme", scheme);
                    let pairs_path = corpus.join(TRAIN_FILE);
                    m.input(&pairs_path)?;
                    let recs: Vec<PairRecord> = load_jsonl(&pairs_path)?;
                    let pairs = pipeline::train_pairs(&tok, &recs);
                    pipeline::distill(&ck.model, &tok.prompt_tokens(), &pairs, scheme, dim, &ctx.cfg).context("distillation")?
                }
                (None, None) => unreachable!("clap requires one of --dim, --sparse-n"),
            };
            let path = out.join("compression.json");
            save_descriptor(&path, &desc)?;
            m.output(&path);
            m.save(&out)
        }
        Cmd::Report {
            corpus,
            model,
            scheme,
            lexical,
            out,
        } => {
            let mut m = RunManifest::new(name, &ctx.cfg);
            let (tok, ck, _) = load_model(&model, &mut m)?;
            let files = load_corpus(&corpus, &mut m)?;
            let scheme = scheme_for(scheme, &ck, &ctx.cfg);
            m.option("scheme", scheme);
            if let Some(p) = &lexical {
                m.input(p)?;
                print(&load_comparison(p)?.render(LEXICAL_CAPTION));
                print("\n");
            }
            let table = pipeline::compression_report(
                &ck.model,
                &tok.prompt_tokens(),
                &pipeline::encode_texts(&tok, &files.docs),
                &pipeline::encode_texts(&tok, &files.queries),
                &files.qrels,
                &pipeline::train_pairs(&tok, &files.train),
                scheme,
                &ctx.cfg,
                ctx.opts(&ck),
            )
            .context("compression report")?;
            let path = out.join("compression.csv");
            save_comparison(&path, &table)?;
            m.output(&path);
            print(&table.render(&format!("MRR@{} by embedding budget", ctx.cfg.eval_k)));
            m.save(&out)
        }
    }
}

fn load_corpus(dir: &Path, m: &mut RunManifest) -> Result<CorpusFiles> {
    for p in CorpusFiles::paths(dir) {
        m.input(&p)?;
    }
    CorpusFiles::load(dir)
}

fn adapt(
    ctx: &mut Ctx,
    corpus: PathBuf,
    tokenizer: PathBuf,
    checkpoint: Option<PathBuf>,
    steps: Option<usize>,
    seed: Option<u64>,
    out: PathBuf,
) -> Result<()> {
    let cfg = &mut ctx.cfg;
    if let Some(s) = steps {
        cfg.adapt.steps = s;
    }
    if let Some(s) = seed {
        cfg.adapt.seed = s;
    }
    let mut m = RunManifest::new("adapt", cfg);
    m.seed = Some(cfg.adapt.seed);
    let tok = load_tokenizer(&tokenizer)?;
    m.input(&tokenizer)?;
    let path = corpus.join(pipeline::ADAPT_FILE);
    m.input(&path)?;
    let records = pipeline::adapt_records(&tok, &load_jsonl(&path)?);
    let start = match &checkpoint {
        Some(p) => {
            m.input(p)?;
            let ck = load_checkpoint(p)?;
            if ck.model.config.vocab_size != tok.vocab_size() {
                return Err(Error::format(p, "vocabulary does not match the tokenizer"));
            }
            ck
        }
        None => {
            let ck = Checkpoint::new(pipeline::init_model(cfg, &tok)?);
            let p = out.join("initial.ckpt");
            save_checkpoint(&p, &ck)?;
            m.output(&p);
            ck
        }
    };
    let prompts = tok.prompt_tokens();
    let outcome = run_adaptation(start.model, &prompts, &records, &cfg.adapt, |p| {
        if p.step % 100 == 0 {
            eprintln!("adapt step {:>5}  ebae {:.4}  ebar {:.4}", p.step, p.ebae, p.ebar);
        }
    })
    .context(path.display())?;
    let ck = Checkpoint {
        model: outcome.model,
        ..start
    };
    let ck_path = out.join("model.ckpt");
    save_checkpoint(&ck_path, &ck)?;
    let curve_path = out.join("loss.csv");
    write_file(&curve_path, format_adapt_curve(&outcome.curve).as_bytes())?;
    m.output(&ck_path);
    m.output(&curve_path);
    m.save(&out)
}

#[allow(clippy::too_many_arguments)]
fn finetune(
    ctx: &mut Ctx,
    corpus: PathBuf,
    model: Model,
    pairs: Option<PathBuf>,
    scheme: Option<SchemePair>,
    steps: Option<usize>,
    seed: Option<u64>,
    dim: Option<usize>,
    out: PathBuf,
) -> Result<()> {
    let cfg = &mut ctx.cfg;
    if let Some(s) = steps {
        cfg.finetune.steps = s;
    }
    if let Some(s) = seed {
        cfg.finetune.seed = s;
    }
    cfg.finetune.scheme = scheme.unwrap_or_else(|| cfg.resolved_scheme());
    let mut m = RunManifest::new("finetune", cfg);
    m.seed = Some(cfg.finetune.seed);
    if let Some(d) = dim {
        m.option("dim", d);
    }
    let (tok, ck, _) = load_model(&model, &mut m)?;
    let pairs_path = pairs.unwrap_or_else(|| corpus.join(TRAIN_FILE));
    let docs_path = corpus.join(DOCS_FILE);
    m.input(&pairs_path)?;
    m.input(&docs_path)?;
    let pair_recs: Vec<PairRecord> = load_jsonl(&pairs_path)?;
    let doc_recs: Vec<TextRecord> = load_jsonl(&docs_path)?;
    let prompts = tok.prompt_tokens();
    let (outcome, desc, mined) = pipeline::finetune(
        ck.model,
        &prompts,
        &pipeline::train_pairs(&tok, &pair_recs),
        &pipeline::encode_texts(&tok, &doc_recs),
        cfg,
        dim,
        |s, l| {
            if s % 100 == 0 {
                eprintln!("finetune step {s:>5}  loss {l:.4}");
            }
        },
    )
    .context(pairs_path.display())?;
    let out_ck = Checkpoint {
        model: outcome.model,
        separator_id: ck.separator_id,
        finetune: Some(cfg.finetune.clone()),
    };
    let ck_path = out.join("model.ckpt");
    save_checkpoint(&ck_path, &out_ck)?;
    m.output(&ck_path);
    let curve_path = out.join("loss.csv");
    write_file(&curve_path, format_finetune_curve(&outcome.curve).as_bytes())?;
    m.output(&curve_path);
    let mined_path = out.join("pairs.jsonl");
    save_jsonl(&mined_path, &pipeline::pair_records(&mined, &pair_recs, &doc_recs))?;
    m.output(&mined_path);
    if let Some(d) = desc {
        let p = out.join("compression.json");
        save_descriptor(&p, &d)?;
        m.output(&p);
    }
    m.save(&out)
}
