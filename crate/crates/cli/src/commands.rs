use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use topicnet_core::corpus::{load_corpus, split_tokens};
use topicnet_core::evaluation::{
    embedding_means_tsv, export_document_features, features_tsv, heldout_perplexity, taxonomy_alignment, topic_report,
    unigram_perplexity, PerplexityReport,
};
use topicnet_core::model::init_params;
use topicnet_core::taxonomy::{down_top_restrict, top_down_truncate, HypernymGraph, RestrictionReport};
use topicnet_core::{
    Architecture, Checkpoint, LogRecord, Mode, ModelParams, Phis, RunConfig, SparseCorpus, TopicTree, TrainOptions, Trainer,
    TreeIndex, Vocabulary,
};

/// A command-line combination that cannot work, reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn build_tree(taxonomy: &Path, vocab: &Path, depth: usize, out: &Path) -> Result<()> {
    let graph = HypernymGraph::load_tsv(taxonomy)?;
    let vocab = Vocabulary::load(vocab)?;
    let (full, warnings) = top_down_truncate(&graph, depth)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let tree = down_top_restrict(&full, &vocab)?;
    tree.save_json(out)?;
    println!("{}", RestrictionReport::of(&tree));
    Ok(())
}

/// Everything a run needs, loaded once from the config.
struct Workspace {
    cfg: RunConfig,
    vocab: Vocabulary,
    corpus: SparseCorpus,
    tree: Option<TreeIndex>,
}

impl Workspace {
    fn load(cfg: RunConfig, corpus_override: Option<&Path>) -> Result<Self> {
        let vocab = Vocabulary::load(&cfg.corpus.vocab)?;
        let path = corpus_override.unwrap_or(&cfg.corpus.path);
        let corpus = load_corpus(path, cfg.corpus.format, vocab.len())?;
        let tree = match &cfg.taxonomy {
            Some(t) => Some(TopicTree::load_json(&t.tree)?.index(&vocab)?),
            None => None,
        };
        if let (Some(sizes), Some(tree)) = (&cfg.model.layer_sizes, &tree) {
            if sizes[..] != tree.tree().layer_sizes()[1..] {
                return Err(topicnet_core::Error::Config(format!(
                    "layer_sizes {sizes:?} disagree with the tree's {:?}",
                    &tree.tree().layer_sizes()[1..]
                ))
                .into());
            }
        }
        Ok(Self {
            cfg,
            vocab,
            corpus,
            tree,
        })
    }

    fn architecture(&self) -> Result<Architecture> {
        let topics = match &self.tree {
            Some(t) => t.tree().layer_sizes()[1..].to_vec(),
            None => self.cfg.topic_sizes(),
        };
        let mut sizes = vec![self.vocab.len()];
        sizes.extend(topics);
        Ok(Architecture::new(sizes, self.cfg.model.embedding_dim, self.cfg.model.hidden)?)
    }

    /// The taxonomy prior only applies in topicnet mode.
    fn prior_tree(&self) -> Option<&TreeIndex> {
        match self.cfg.model.mode {
            Mode::Topicnet => self.tree.as_ref(),
            Mode::GaussSawetm => None,
        }
    }
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub max_steps: Option<u64>,
    pub learning_rate: Option<f64>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.jsonl";

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    let t = &mut cfg.training;
    t.seed = args.seed.unwrap_or(t.seed);
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.max_steps = args.max_steps.or(t.max_steps);
    t.learning_rate = args.learning_rate.unwrap_or(t.learning_rate);
    cfg.validate()?;
    let hash = cfg.hash();
    let ws = Workspace::load(cfg, None)?;
    let t = &ws.cfg.training;
    let split = split_tokens(&ws.corpus, t.train_fraction, t.split_seed)?;

    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let ck_path = args.out_dir.join(CHECKPOINT_FILE);
    let options = TrainOptions {
        learning_rate: t.learning_rate,
        batch_size: t.batch_size,
        epochs: t.epochs,
        max_steps: t.max_steps,
        seed: t.seed,
        shuffle: t.shuffle,
        checkpoint_every: t.checkpoint_every,
        checkpoint_path: Some(ck_path.clone()),
        config_hash: hash.clone(),
        split_seed: t.split_seed,
    };
    let mut objective = ws.cfg.objective.clone();
    if ws.cfg.model.mode == Mode::GaussSawetm {
        objective.beta = 0.0;
    }
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let arch = ws.architecture()?;
            if ck.layer_sizes != arch.layer_sizes {
                return Err(topicnet_core::Error::Checkpoint(format!(
                    "checkpoint has layer sizes {:?}, config implies {:?}",
                    ck.layer_sizes, arch.layer_sizes
                ))
                .into());
            }
            Trainer::resume(ck, objective, options)?
        }
        None => {
            let arch = ws.architecture()?;
            let params = init_params(&arch, &ws.cfg.init, &mut ChaCha8Rng::seed_from_u64(t.seed));
            Trainer::new(params, objective, options)
        }
    };
    let log_path = args.out_dir.join(LOG_FILE);
    let log_file = open_log(&log_path, args.resume.is_some().then(|| trainer.step()))?;
    let mut log = BufWriter::new(log_file);
    log::info!(
        "training {:?} on {} documents, config {}",
        trainer.params.arch.layer_sizes,
        split.train.num_docs(),
        &hash[..12]
    );
    trainer.run(&split.train, ws.prior_tree(), Some(&mut log), |_, loss, step| {
        if step % 100 == 0 {
            log::info!("step {step}: total {:.3}", loss.total);
        }
        Ok(())
    })?;
    println!("wrote {} at step {}", ck_path.display(), trainer.step());
    Ok(())
}

/// Opens the training log. When resuming from `step`, lines written after
/// that step by an interrupted run are dropped so the log has no repeats.
fn open_log(path: &Path, resume_step: Option<u64>) -> Result<fs::File> {
    let mut keep = String::new();
    if let (Some(step), Ok(text)) = (resume_step, fs::read_to_string(path)) {
        for line in text.lines() {
            let rec: LogRecord = serde_json::from_str(line).with_context(|| format!("reading {}", path.display()))?;
            if rec.step <= step {
                keep.push_str(line);
                keep.push('\n');
            }
        }
    }
    fs::write(path, keep).with_context(|| format!("writing {}", path.display()))?;
    fs::OpenOptions::new()
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))
}

pub struct EvalArgs {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub corpus: Option<PathBuf>,
    pub seed: u64,
}

fn load_for_eval(config: &Path, checkpoint: &Path, corpus: Option<&Path>) -> Result<(Workspace, Checkpoint)> {
    let ws = Workspace::load(RunConfig::load(config)?, corpus)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.params.vocab_size() != ws.corpus.vocab_size() {
        return Err(topicnet_core::Error::DimensionMismatch {
            expected: ck.params.vocab_size(),
            actual: ws.corpus.vocab_size(),
        })
        .context("checkpoint and corpus vocabularies differ");
    }
    Ok((ws, ck))
}

/// A JSON report stamped with the config hash that produced the model.
#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    step: u64,
    #[serde(flatten)]
    report: T,
}

fn write_json<T: Serialize>(path: &Path, ck: &Checkpoint, report: T) -> Result<()> {
    let stamped = Stamped {
        config_hash: &ck.config_hash,
        step: ck.step,
        report,
    };
    let text = serde_json::to_string_pretty(&stamped)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct PplOutput {
    #[serde(flatten)]
    model: PerplexityReport,
    unigram_perplexity: f64,
    train_fraction: f64,
}

pub fn eval_ppl(args: &EvalArgs) -> Result<()> {
    let (ws, ck) = load_for_eval(&args.config, &args.checkpoint, args.corpus.as_deref())?;
    let t = &ws.cfg.training;
    let split = split_tokens(&ws.corpus, t.train_fraction, t.split_seed)?;
    let report = heldout_perplexity(&ck.params, &split, t.eval_samples, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    println!("perplexity {:.3}", report.perplexity);
    let out = PplOutput {
        model: report,
        unigram_perplexity: unigram_perplexity(&split)?,
        train_fraction: t.train_fraction,
    };
    write_json(&args.out, &ck, out)
}

pub fn eval_topics(args: &EvalArgs, top_n: usize) -> Result<()> {
    let (ws, ck) = load_for_eval(&args.config, &args.checkpoint, args.corpus.as_deref())?;
    let t = &ws.cfg.training;
    let split = split_tokens(&ws.corpus, t.train_fraction, t.split_seed)?;
    let tree = ws.tree.as_ref().filter(|tr| tr.tree().layer_sizes()[1..] == ck.params.arch.layer_sizes[1..]);
    let report = topic_report(&ck.params, &split.train, Some(&ws.vocab), tree, top_n)?;
    for layer in &report.layers {
        println!(
            "layer {}: coherence {:.4} diversity {:.4} quality {:.4}",
            layer.layer, layer.coherence, layer.diversity, layer.quality
        );
    }
    write_json(&args.out, &ck, report)
}

pub fn eval_alignment(args: &EvalArgs, permutations: usize) -> Result<()> {
    let (ws, ck) = load_for_eval(&args.config, &args.checkpoint, args.corpus.as_deref())?;
    let tree = ws
        .tree
        .as_ref()
        .ok_or_else(|| UsageError("alignment needs a [taxonomy] tree in the config".into()))?;
    let report = taxonomy_alignment(&ck.params, tree, ws.cfg.objective.gamma_threshold, permutations, args.seed)?;
    println!(
        "edges {:.4} vs non-edges {:.4} (p = {:.4})",
        report.edge_mean, report.non_edge_mean, report.p_value
    );
    write_json(&args.out, &ck, report)
}

pub fn eval_features(args: &EvalArgs) -> Result<()> {
    let (ws, ck) = load_for_eval(&args.config, &args.checkpoint, args.corpus.as_deref())?;
    let features = export_document_features(&ck.params, &ws.corpus)?;
    write_text(&args.out, &features_tsv(&features, &format!("config_hash={}", ck.config_hash)))?;
    println!("{} documents x {} features", features.nrows(), features.ncols());
    Ok(())
}

fn tree_for(ws: &Workspace, params: &ModelParams) -> Option<TreeIndex> {
    ws.tree
        .clone()
        .filter(|tr| tr.tree().layer_sizes()[1..] == params.arch.layer_sizes[1..])
}

pub fn export_embeddings(config: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let (ws, ck) = load_for_eval(config, checkpoint, None)?;
    let tree = tree_for(&ws, &ck.params);
    let header = format!("config_hash={}", ck.config_hash);
    write_text(out, &embedding_means_tsv(&ck.params, Some(&ws.vocab), tree.as_ref(), &header))
}

/// Each `Φ^(t)` as a block of `layer<TAB>row<TAB>column weights...` lines.
pub fn export_loadings(config: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let (_, ck) = load_for_eval(config, checkpoint, None)?;
    let phis = Phis::compute(&ck.params);
    let mut text = format!("# config_hash={}\n", ck.config_hash);
    for t in 1..=ck.params.depth() {
        for (r, row) in phis.layer(t).rows().into_iter().enumerate() {
            let _ = write!(text, "{t}\t{r}");
            for v in row {
                let _ = write!(text, "\t{v}");
            }
            text.push('\n');
        }
    }
    write_text(out, &text)
}
