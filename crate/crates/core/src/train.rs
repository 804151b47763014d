//! Training loop, evaluation and metrics files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{KlMode, Noise};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{generate_synthetic, make_batches, Batch, Dataset, SynthConfig, Vocab, EOS, PAD, SOS};
use crate::decode::{beam_search, DecodeSpec, ModelScorer};
use crate::error::{Error, Result};
use crate::featfile::read_features;
use crate::graph::{Graph, Var};
use crate::losses::{cross_entropy, ctc_loss, joint_ctc_ce, total_loss, LossParts, TrainSchedule};
use crate::metrics::{cer, wer};
use crate::model::{Model, Pass};
use crate::optim::Optimizer;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Stream of the noise generator, kept apart from the initialization stream.
const NOISE_STREAM: u64 = 1;

/// Shuffle seed of a given epoch.
pub fn epoch_shuffle_seed(seed: u64, epoch: u32) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// One optimizer step as written to the metrics files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u32,
    pub kl_raw: f64,
    pub kl_weight: f64,
    pub kl_weighted: f64,
    pub ctc: f64,
    pub ce: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: u64, epoch: u32, p: &LossParts) -> Self {
        Self {
            step,
            epoch,
            kl_raw: p.kl_raw,
            kl_weight: p.kl_weight,
            kl_weighted: p.kl_weighted,
            ctc: p.ctc,
            ce: p.ce,
            total: p.total,
        }
    }
}

/// Per-epoch summary: means over the epoch's steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub steps: usize,
    /// `⌊epoch/divisor⌋` and `⌊n_e/divisor⌋`, the arguments of the KL weight.
    pub e_index: u32,
    pub n_e_index: u32,
    pub kl_weight: f64,
    pub kl_raw: f64,
    pub kl_weighted: f64,
    pub ctc: f64,
    pub ce: f64,
    pub total: f64,
}

/// Append-only writer for `steps.jsonl`, `steps.csv` and `epochs.jsonl`.
pub struct MetricsSink {
    steps_json: BufWriter<File>,
    steps_csv: BufWriter<File>,
    epochs_json: BufWriter<File>,
}

pub const STEPS_JSONL: &str = "steps.jsonl";
pub const STEPS_CSV: &str = "steps.csv";
pub const EPOCHS_JSONL: &str = "epochs.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bsck";
pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";

impl MetricsSink {
    /// Opens the files in `dir`, appending when `append` is set (resumed runs).
    pub fn open(dir: &Path, append: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<(BufWriter<File>, bool)> {
            let path = dir.join(name);
            let existed = append && path.exists();
            let file = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(path)?;
            Ok((BufWriter::new(file), existed))
        };
        let (steps_json, _) = open(STEPS_JSONL)?;
        let (mut steps_csv, existed) = open(STEPS_CSV)?;
        if !existed {
            writeln!(steps_csv, "step,epoch,kl_raw,kl_weight,kl_weighted,ctc,ce,total")?;
        }
        let (epochs_json, _) = open(EPOCHS_JSONL)?;
        Ok(Self {
            steps_json,
            steps_csv,
            epochs_json,
        })
    }

    pub fn step(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.steps_json, "{}", serde_json::to_string(r).expect("plain record"))?;
        writeln!(
            self.steps_csv,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.step, r.epoch, r.kl_raw, r.kl_weight, r.kl_weighted, r.ctc, r.ce, r.total
        )?;
        Ok(())
    }

    pub fn epoch(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.epochs_json, "{}", serde_json::to_string(r).expect("plain record"))?;
        self.flush()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.steps_json.flush()?;
        self.steps_csv.flush()?;
        self.epochs_json.flush()?;
        Ok(())
    }
}

/// Reads a JSON-lines file written by [`MetricsSink`].
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| {
                Error::Contract(format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

/// Decoder input `[sos] + y` and output `y + [eos]`.
pub fn teacher_forcing(target: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(target.len() + 1);
    input.push(SOS);
    input.extend_from_slice(target);
    let mut output = target.to_vec();
    output.push(EOS);
    (input, output)
}

/// Records the batch-mean CTC and CE losses on the pass's graph.
///
/// Both are averaged over the utterances of the batch; each utterance uses its
/// own unpadded frames and tokens.
pub fn batch_data_losses(
    model: &Model,
    pass: &mut Pass<'_, '_>,
    features: &[&Tensor],
    targets: &[&[usize]],
) -> Result<(Var, Var)> {
    let b = features.len();
    let memory = model.encode(pass, features)?;
    let log_probs = model.ctc_log_probs(pass, &memory)?;
    let (inputs, outputs): (Vec<_>, Vec<_>) = targets.iter().map(|t| teacher_forcing(t)).unzip();
    let sources: Vec<usize> = (0..b).collect();
    let logits = model.decode_forward(pass, &memory, &inputs, &sources)?;
    let blank = model.blank_id();
    let mut ctc_terms = Vec::with_capacity(b);
    let mut ce_terms = Vec::with_capacity(b);
    for i in 0..b {
        ctc_terms.push(ctc_loss(pass.graph, log_probs[i], targets[i], blank)?);
        let keep = vec![true; outputs[i].len()];
        ce_terms.push(cross_entropy(pass.graph, logits[i], &outputs[i], &keep)?);
    }
    let mean = |g: &mut Graph, terms: &[Var]| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(g.scale(acc, 1.0 / terms.len() as f64))
    };
    let ctc = mean(pass.graph, &ctc_terms)?;
    let ce = mean(pass.graph, &ce_terms)?;
    Ok((ctc, ce))
}

/// Variant of [`batch_data_losses`] reading padded batch storage.
pub fn padded_batch_losses(model: &Model, pass: &mut Pass<'_, '_>, batch: &Batch) -> Result<(Var, Var)> {
    let features: Vec<Tensor> = (0..batch.len())
        .map(|i| batch.sample_features(i))
        .collect::<Result<_>>()?;
    let feats: Vec<&Tensor> = features.iter().collect();
    let targets: Vec<&[usize]> = (0..batch.len()).map(|i| batch.sample_target(i)).collect();
    batch_data_losses(model, pass, &feats, &targets)
}

/// Owns the model, optimizer and noise generator of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: Optimizer,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed optimizer steps.
    pub step: u64,
    schedule: TrainSchedule,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = Model::init(config.model.clone(), &mut store, &mut init_rng)?;
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(NOISE_STREAM);
        Ok(Self {
            schedule: config.schedule()?,
            config,
            model,
            store,
            optimizer,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    /// Continues from a checkpoint. The checkpoint's model configuration wins.
    pub fn resume(mut config: TrainConfig, checkpoint: Checkpoint) -> Result<Self> {
        config.model = checkpoint.model_config.clone();
        config.validate()?;
        let model = checkpoint.model()?;
        if checkpoint.optimizer.kind() != config.optimizer {
            return Err(Error::Config(
                "optimizer kind differs from the checkpoint".into(),
            ));
        }
        Ok(Self {
            schedule: config.schedule()?,
            config,
            model,
            store: checkpoint.params,
            optimizer: checkpoint.optimizer,
            rng: checkpoint.rng,
            epoch: checkpoint.epoch,
            step: checkpoint.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config.clone(),
            params: self.store.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
        }
    }

    pub fn schedule(&self) -> &TrainSchedule {
        &self.schedule
    }

    /// One sampled forward pass, backward pass and optimizer update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossParts> {
        let kl_weight = self.schedule.kl_weight(self.epoch)?;
        let step = self.step as usize;
        if let Some((name, _)) = self.store.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite {
                tensor: format!("param.{name}"),
                step,
            });
        }
        let mut graph = Graph::new();
        let (loss, parts, bound) = {
            let mut pass = Pass::new(
                &mut graph,
                &self.store,
                Noise::Gaussian(&mut self.rng),
                self.config.kl_mode,
            );
            pass.kl.reset();
            // log and sqrt inputs are positive by construction; a domain error
            // here means the forward pass overflowed.
            let (ctc, ce) = padded_batch_losses(&self.model, &mut pass, batch).map_err(|e| match e {
                Error::Domain { op, .. } => Error::NonFinite {
                    tensor: format!("forward.{op}"),
                    step,
                },
                e => e,
            })?;
            let (loss, parts) = total_loss(
                pass.graph,
                &pass.kl,
                ctc,
                ce,
                kl_weight,
                self.config.joint_weights(),
            )?;
            (loss, parts, pass.params)
        };
        for (name, v) in [
            ("kl_raw", parts.kl_raw),
            ("ctc", parts.ctc),
            ("ce", parts.ce),
            ("total", parts.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    tensor: format!("loss.{name}"),
                    step,
                });
            }
        }
        let grads = graph.backward(loss)?;
        self.store.store_grads(&bound, &grads);
        for (name, t) in self.store.iter() {
            if !t.grad().is_some_and(|g| g.iter().all(|v| v.is_finite())) {
                return Err(Error::NonFinite {
                    tensor: format!("grad.{name}"),
                    step,
                });
            }
        }
        self.optimizer.step(&mut self.store)?;
        self.store.clear_grads();
        if let Some((name, _)) = self.store.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite {
                tensor: format!("param.{name}"),
                step,
            });
        }
        self.step += 1;
        Ok(parts)
    }

    /// Trains one full epoch over `data`.
    pub fn train_epoch(&mut self, data: &Dataset, mut sink: Option<&mut MetricsSink>) -> Result<EpochRecord> {
        let batches = make_batches(
            data,
            self.config.batch_size,
            epoch_shuffle_seed(self.config.seed, self.epoch),
        )?;
        if batches.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let mut sum = [0.0; 5];
        for batch in &batches {
            let parts = self.train_step(batch)?;
            if let Some(s) = sink.as_deref_mut() {
                s.step(&StepRecord::new(self.step - 1, self.epoch, &parts))?;
            }
            for (acc, v) in sum
                .iter_mut()
                .zip([parts.kl_raw, parts.kl_weighted, parts.ctc, parts.ce, parts.total])
            {
                *acc += v;
            }
        }
        let n = batches.len() as f64;
        let (e_index, n_e_index) = self.schedule.indices(self.epoch);
        let record = EpochRecord {
            epoch: self.epoch,
            steps: batches.len(),
            e_index,
            n_e_index,
            kl_weight: self.schedule.kl_weight(self.epoch)?,
            kl_raw: sum[0] / n,
            kl_weighted: sum[1] / n,
            ctc: sum[2] / n,
            ce: sum[3] / n,
            total: sum[4] / n,
        };
        if let Some(s) = sink {
            s.epoch(&record)?;
        }
        self.epoch += 1;
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are complete or `limit` more have run.
    pub fn run(
        &mut self,
        data: &Dataset,
        limit: Option<u32>,
        mut sink: Option<&mut MetricsSink>,
    ) -> Result<Vec<EpochRecord>> {
        let end = match limit {
            Some(k) => (self.epoch + k).min(self.config.epochs),
            None => self.config.epochs,
        };
        let mut records = Vec::new();
        while self.epoch < end {
            records.push(self.train_epoch(data, sink.as_deref_mut())?);
        }
        Ok(records)
    }

    /// Writes the resolved configuration, vocabulary and checkpoint to `dir`.
    pub fn save_run(&self, dir: &Path, vocab: &Vocab) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.config.save(&dir.join(CONFIG_FILE))?;
        vocab.save(&dir.join(VOCAB_FILE))?;
        self.checkpoint().save(&dir.join(CHECKPOINT_FILE))
    }
}

/// Decoding and scoring settings for [`evaluate`].
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub beam_width: usize,
    pub length_norm: bool,
    pub max_len: usize,
    /// Draw ε per utterance instead of decoding with posterior means.
    pub sampled: bool,
    pub seed: u64,
    pub kl_mode: KlMode,
}

impl EvalOptions {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            beam_width: c.beam_width,
            length_norm: c.length_norm,
            max_len: c.max_decode_len,
            sampled: c.sampled_eval,
            seed: c.eval_seed,
            kl_mode: c.kl_mode,
        }
    }
}

/// One decoded utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub index: usize,
    pub reference: String,
    pub hypothesis: String,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub truncated: bool,
}

/// Aggregate evaluation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub beam_width: usize,
    pub wer: f64,
    pub cer: f64,
    /// Mean of `0.3·ctc + 0.7·ce` per utterance (posterior-mean pass).
    pub loss: f64,
    pub mean_log_prob: f64,
    #[serde(skip)]
    pub transcripts: Vec<Transcript>,
}

impl EvalReport {
    /// Summary fields as one JSON object (transcripts excluded).
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain record")
    }
}

/// Checks that every dataset token fits the model's vocabulary.
pub fn check_compatible(model: &Model, vocab: &Vocab, data: &Dataset) -> Result<()> {
    if vocab.size() != model.config.vocab_size {
        return Err(Error::Contract(format!(
            "vocabulary has {} ids but the model expects {}",
            vocab.size(),
            model.config.vocab_size
        )));
    }
    if data.feature_dim != model.config.feature_dim {
        return Err(Error::Contract(format!(
            "dataset has {} features per frame but the model expects {}",
            data.feature_dim, model.config.feature_dim
        )));
    }
    data.check_vocab(vocab)
}

pub fn decode_spec(model: &Model, max_len: usize) -> DecodeSpec {
    DecodeSpec {
        sos: SOS,
        eos: EOS,
        forbidden: vec![PAD, SOS, model.blank_id()],
        max_len,
    }
}

/// Beam-decodes every utterance (in parallel) and scores the result.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    vocab: &Vocab,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_compatible(model, vocab, data)?;
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let spec = decode_spec(model, opts.max_len);
    let weights = crate::losses::JointWeights::default();
    let results: Vec<(Transcript, f64)> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(index, sample)| -> Result<(Transcript, f64)> {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(index as u64);
            let noise = if opts.sampled {
                Noise::Gaussian(&mut rng)
            } else {
                Noise::Off
            };
            let mut scorer = ModelScorer::new(model, store, &sample.features, noise, opts.kl_mode)?;
            let decoded = beam_search(&mut scorer, &spec, opts.beam_width, opts.length_norm)?;
            let mut graph = Graph::new();
            let mut pass = Pass::new(&mut graph, store, Noise::Off, opts.kl_mode);
            let (ctc, ce) =
                batch_data_losses(model, &mut pass, &[&sample.features], &[&sample.target])?;
            let loss = joint_ctc_ce(
                pass.graph.value(ctc).item(),
                pass.graph.value(ce).item(),
                weights,
            );
            Ok((
                Transcript {
                    index,
                    reference: vocab.render(&sample.target),
                    hypothesis: vocab.render(&decoded.tokens),
                    tokens: decoded.tokens,
                    log_prob: decoded.log_prob,
                    truncated: decoded.truncated,
                },
                loss,
            ))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&str> = results.iter().map(|(t, _)| t.reference.as_str()).collect();
    let hyps: Vec<&str> = results.iter().map(|(t, _)| t.hypothesis.as_str()).collect();
    let n = results.len() as f64;
    Ok(EvalReport {
        samples: results.len(),
        beam_width: opts.beam_width,
        wer: wer(&refs, &hyps)?,
        cer: cer(&refs, &hyps)?,
        loss: results.iter().map(|(_, l)| l).sum::<f64>() / n,
        mean_log_prob: results.iter().map(|(t, _)| t.log_prob).sum::<f64>() / n,
        transcripts: results.into_iter().map(|(t, _)| t).collect(),
    })
}

/// Training set: the feature file if configured, else the synthetic task from `config.seed`.
pub fn train_set(config: &TrainConfig) -> Result<Dataset> {
    match &config.train_data {
        Some(path) => read_features(path),
        None => Ok(generate_synthetic(&config.synth, config.seed)?.0),
    }
}

/// Held-out set: the feature file if configured, else `eval_samples` synthetic
/// utterances from `eval_seed` with the training templates.
pub fn eval_set(config: &TrainConfig) -> Result<Dataset> {
    match &config.eval_data {
        Some(path) => read_features(path),
        None => {
            let synth = SynthConfig {
                num_samples: config.eval_samples,
                ..config.synth.clone()
            };
            Ok(generate_synthetic(&synth, config.eval_seed)?.0)
        }
    }
}

/// Paths of a training run's artifacts.
pub fn run_paths(dir: &Path) -> [PathBuf; 3] {
    [dir.join(CONFIG_FILE), dir.join(VOCAB_FILE), dir.join(CHECKPOINT_FILE)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_forcing_shifts_by_one() {
        let (i, o) = teacher_forcing(&[5, 6]);
        assert_eq!(i, vec![SOS, 5, 6]);
        assert_eq!(o, vec![5, 6, EOS]);
    }

    #[test]
    fn shuffle_seeds_differ_per_epoch() {
        assert_ne!(epoch_shuffle_seed(1, 0), epoch_shuffle_seed(1, 1));
    }
}
