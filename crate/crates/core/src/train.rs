//! Minibatch training loop with JSONL logging, checkpoints and resume.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{minibatches, Document, SparseCorpus};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::objective::{optimizer_step, total_loss_and_gradients, AdamState, LossBreakdown, ObjectiveConfig};
use crate::taxonomy::TreeIndex;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub shuffle: bool,
    pub checkpoint_every: Option<u64>,
    pub checkpoint_path: Option<PathBuf>,
    pub config_hash: String,
    pub split_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 200,
            epochs: 1,
            max_steps: None,
            seed: 0,
            shuffle: true,
            checkpoint_every: None,
            checkpoint_path: None,
            config_hash: String::new(),
            split_seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub nll: f64,
    pub kl: Vec<f64>,
    pub prior: f64,
    pub total: f64,
    pub wallclock: f64,
}

pub struct Trainer {
    pub params: ModelParams,
    pub adam: AdamState,
    pub objective: ObjectiveConfig,
    pub options: TrainOptions,
    step: u64,
    epoch: usize,
    batch_in_epoch: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, objective: ObjectiveConfig, options: TrainOptions) -> Self {
        let adam = AdamState::new(&params);
        Self {
            params,
            adam,
            objective,
            options,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
        }
    }

    /// Continues from a checkpoint; the config hash must match unless the
    /// options carry an empty hash.
    pub fn resume(ck: Checkpoint, objective: ObjectiveConfig, options: TrainOptions) -> Result<Self> {
        if !options.config_hash.is_empty() && options.config_hash != ck.config_hash {
            return Err(Error::Checkpoint("checkpoint was written under a different config".into()));
        }
        Ok(Self {
            params: ck.params,
            adam: ck.adam,
            objective,
            options,
            step: ck.step,
            epoch: ck.epoch,
            batch_in_epoch: ck.batch_in_epoch,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.params.clone(),
            self.adam.clone(),
            self.step,
            self.epoch,
            self.batch_in_epoch,
            self.options.config_hash.clone(),
            self.options.seed,
            self.options.split_seed,
        )
    }

    fn save_checkpoint(&self) -> Result<()> {
        if let Some(path) = &self.options.checkpoint_path {
            self.checkpoint().save(path)?;
            log::info!("checkpoint at step {} written to {}", self.step, path.display());
        }
        Ok(())
    }

    /// Step RNG derived from the seed and the step number, so a resumed run
    /// draws the same noise as an uninterrupted one.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed);
        rng.set_stream(self.step);
        rng
    }

    fn done(&self) -> bool {
        self.epoch >= self.options.epochs || self.options.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Trains until the epoch or step budget is spent. `log` receives one JSON
    /// line per step; `on_step` sees the parameters after every update.
    /// A non-finite loss or gradient aborts without touching the last
    /// checkpoint.
    pub fn run<F>(&mut self, corpus: &SparseCorpus, tree: Option<&TreeIndex>, mut log: Option<&mut dyn Write>, mut on_step: F) -> Result<()>
    where
        F: FnMut(&ModelParams, &LossBreakdown, u64) -> Result<()>,
    {
        if corpus.vocab_size() != self.params.vocab_size() {
            return Err(Error::DimensionMismatch {
                expected: self.params.vocab_size(),
                actual: corpus.vocab_size(),
            });
        }
        let start = Instant::now();
        while !self.done() {
            let batches = minibatches(
                corpus.num_docs(),
                self.options.batch_size,
                self.options.seed.wrapping_add(self.epoch as u64),
                self.options.shuffle,
            )?;
            while self.batch_in_epoch < batches.len() {
                if self.done() {
                    return self.save_checkpoint();
                }
                let batch: Vec<&Document> = batches[self.batch_in_epoch].iter().map(|&i| corpus.doc(i)).collect();
                let mut rng = self.step_rng();
                let (loss, grads) = total_loss_and_gradients(&self.params, &batch, tree, &self.objective, &mut rng)
                    .map_err(|e| {
                        log::error!("aborting at step {}: {e}", self.step + 1);
                        e
                    })?;
                let mut next = self.params.clone();
                optimizer_step(&mut next, &grads, &mut self.adam, self.options.learning_rate);
                if let Some((name, _)) = next.tensors().into_iter().find(|(_, s)| s.iter().any(|v| !v.is_finite())) {
                    return Err(Error::non_finite(format!("parameter {name} after step {}", self.step + 1)));
                }
                self.params = next;
                self.step += 1;
                self.batch_in_epoch += 1;
                if let Some(w) = log.as_deref_mut() {
                    let rec = LogRecord {
                        step: self.step,
                        epoch: self.epoch,
                        nll: loss.neg_log_likelihood,
                        kl: loss.kl_per_layer.clone(),
                        prior: loss.prior_loss,
                        total: loss.total,
                        wallclock: start.elapsed().as_secs_f64(),
                    };
                    writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io("training log", e))?;
                }
                on_step(&self.params, &loss, self.step)?;
                if self.options.checkpoint_every.is_some_and(|n| self.step.is_multiple_of(n)) {
                    self.save_checkpoint()?;
                }
            }
            self.epoch += 1;
            self.batch_in_epoch = 0;
        }
        self.save_checkpoint()
    }
}
