//! Deterministic MLM pretraining, evaluation, and the feature-signal probe.
//!
//! Every random draw comes from an rng derived from the run seed and a
//! label, so a run is a pure function of (corpus, config) regardless of
//! worker threads, and resuming from a checkpoint replays the exact
//! uninterrupted trajectory.

use serde::{Deserialize, Serialize};

use crate::autograd::{AutogradError, Tape};
use crate::encoders::{
    encode_char, encode_sentence, EncodeError, EncodedSequence, FeatureAlphabets, Vocab,
    SPECIAL_TOKENS,
};
use crate::feature_tables::FeatureDictionary;
use crate::masking::{
    corrupt, select_positions, MaskError, MaskedRow, MaskingConfig, SynonymLexicon,
    IGNORE_LABEL,
};
use crate::model::{
    BatchInput, Checkpoint, FeatureKind, FusionEmbedderConfig, ModelError, StyleBertModel,
};
use crate::optim::{clip_global_norm, AdamWParams, OptimizerState};
use crate::tensor::Tensor;
use crate::util::{derive_rng, ordered_map, RngTrace};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("non-finite loss at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e})")]
    NonFinite { step: u64, lr: f64, grad_norm: f64 },
    #[error("probe setup failed: {0}")]
    Probe(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub max_len: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub masking: MaskingConfig,
    pub model: FusionEmbedderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 8,
            max_len: 32,
            learning_rate: 1e-4,
            warmup_steps: 10,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 50,
            masking: MaskingConfig::default(),
            model: FusionEmbedderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(TrainError::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.max_len < 3 || self.max_len > self.model.max_len {
            return Err(TrainError::Config(format!(
                "max_len {} must lie in [3, {}]",
                self.max_len, self.model.max_len
            )));
        }
        self.masking.validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// Linear warmup to `learning_rate`, then linear decay to zero.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else if self.steps == self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * (self.steps - step) as f64
                / (self.steps - self.warmup_steps) as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EvalRecord>,
    pub final_loss: f64,
    /// Digest over (step, lr, loss, accuracy) at every step; throughput is
    /// excluded so the digest is stable across machines.
    pub trace_digest: String,
}

impl TrainReport {
    pub fn render_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).unwrap());
            out.push('\n');
        }
        out
    }
}

/// Immutable assets shared by training and evaluation.
pub struct TrainInputs<'a> {
    pub lines: &'a [String],
    /// Per-line word lengths; required by WWM/NGRAM/MAC masking.
    pub segmentations: Option<&'a [Vec<usize>]>,
    pub vocab: &'a Vocab,
    pub dict: &'a FeatureDictionary,
    pub alphabets: &'a FeatureAlphabets,
    pub lexicon: Option<&'a SynonymLexicon>,
}

fn encode_corpus(
    inputs: &TrainInputs<'_>,
    max_len: usize,
    chaizi_capacity: usize,
) -> Result<Vec<(EncodedSequence, Vec<char>)>, TrainError> {
    if inputs.lines.is_empty() {
        return Err(TrainError::Config("corpus is empty".into()));
    }
    if let Some(segs) = inputs.segmentations {
        if segs.len() != inputs.lines.len() {
            return Err(TrainError::Config(format!(
                "segmentation sidecar has {} lines, corpus has {}",
                segs.len(),
                inputs.lines.len()
            )));
        }
    }
    let mut truncations = 0;
    let mut out = Vec::with_capacity(inputs.lines.len());
    for (i, line) in inputs.lines.iter().enumerate() {
        let wl = inputs.segmentations.map(|s| s[i].as_slice());
        let seq = encode_sentence(
            line,
            inputs.vocab,
            inputs.dict,
            inputs.alphabets,
            max_len,
            chaizi_capacity,
            wl,
            &mut truncations,
        )?;
        out.push((seq, line.chars().collect()));
    }
    Ok(out)
}

fn mask_row(
    encoded: &(EncodedSequence, Vec<char>),
    inputs: &TrainInputs<'_>,
    masking: &MaskingConfig,
    seed: u64,
    labels: [&str; 2],
    indices: &[u64],
) -> Result<MaskedRow, TrainError> {
    let (seq, chars) = encoded;
    let mut rng = derive_rng(seed, &[labels[0]], indices);
    let spans = select_positions(seq, masking, &mut rng)?;
    let mut rng = derive_rng(seed, &[labels[1]], indices);
    Ok(corrupt(
        seq,
        chars,
        &spans,
        inputs.vocab,
        inputs.dict,
        inputs.alphabets,
        inputs.lexicon,
        masking,
        &mut rng,
    ))
}

fn batch_metrics(
    model: &StyleBertModel,
    rows: &[MaskedRow],
) -> Result<(f64, u64, u64), TrainError> {
    let batch = BatchInput::from_masked(&crate::masking::MaskedBatch { rows: rows.to_vec() })?;
    let labels: Vec<i64> = rows.iter().flat_map(|r| r.labels.iter().copied()).collect();
    let tape = Tape::new();
    let pass = model.forward_mlm(&tape, &batch)?;
    let loss = pass.logits.cross_entropy(&labels)?.value().item();
    let logits = pass.logits.value();
    let (correct, total) = count_correct(&logits, &labels);
    Ok((loss, correct, total))
}

fn count_correct(logits: &Tensor, labels: &[i64]) -> (u64, u64) {
    let v = *logits.shape().last().unwrap();
    let mut correct = 0;
    let mut total = 0;
    for (i, &label) in labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        total += 1;
        let row = &logits.data()[i * v..(i + 1) * v];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if argmax as i64 == label {
            correct += 1;
        }
    }
    (correct, total)
}

/// Run MLM pretraining up to `config.steps` (or `pause_at`, when set, for
/// checkpoint-and-resume workflows). With `resume`, training continues
/// from the checkpoint's optimizer step; since the learning-rate schedule
/// and all rngs are functions of the global step, the resumed run replays
/// the uninterrupted trajectory exactly. Batches are assembled
/// round-robin: row `j` of step `t` is corpus line `(t*B + j) mod n`.
pub fn pretrain(
    inputs: &TrainInputs<'_>,
    config: &TrainConfig,
    threads: usize,
    resume: Option<Checkpoint>,
    pause_at: Option<u64>,
) -> Result<(StyleBertModel, OptimizerState, TrainReport), TrainError> {
    config.validate()?;
    let encoded = encode_corpus(inputs, config.max_len, config.model.chaizi_capacity)?;
    let n = encoded.len() as u64;
    let b = config.batch_size as u64;

    let (mut model, mut opt) = match resume {
        Some(ck) => {
            if ck.model.vocab_digest != inputs.vocab.digest() {
                return Err(TrainError::Config(
                    "checkpoint was built against a different vocab".into(),
                ));
            }
            if ck.model.config != config.model {
                return Err(TrainError::Config(
                    "checkpoint model config does not match train config".into(),
                ));
            }
            let shapes = ck.model.param_shapes();
            let opt = ck.optimizer.unwrap_or_else(|| {
                OptimizerState::new(adamw_params(config), &shapes)
            });
            (ck.model, opt)
        }
        None => {
            let model = StyleBertModel::new(
                config.model.clone(),
                inputs.vocab,
                inputs.alphabets,
                config.seed,
            )?;
            let shapes = model.param_shapes();
            (model, OptimizerState::new(adamw_params(config), &shapes))
        }
    };

    let mut trace = RngTrace::new();
    let mut records = Vec::new();
    let mut final_loss = f64::NAN;
    let start = opt.step;
    let stop = pause_at.map(|p| p.min(config.steps)).unwrap_or(config.steps);
    for step in start..stop {
        let row_ids: Vec<u64> = (0..b).map(|j| (step * b + j) % n).collect();
        let rows: Vec<Result<MaskedRow, TrainError>> = ordered_map(&row_ids, threads, |_, &line| {
            mask_row(
                &encoded[line as usize],
                inputs,
                &config.masking,
                config.seed,
                ["train-select", "train-corrupt"],
                &[step, line],
            )
        });
        let rows: Vec<MaskedRow> = rows.into_iter().collect::<Result<_, _>>()?;

        let batch = BatchInput::from_masked(&crate::masking::MaskedBatch { rows: rows.clone() })?;
        let labels: Vec<i64> =
            rows.iter().flat_map(|r| r.labels.iter().copied()).collect();
        let lr = config.lr_at(step);

        let step_start = std::time::Instant::now();
        let tape = Tape::new();
        let pass = model.forward_mlm(&tape, &batch)?;
        let loss_var = pass.logits.cross_entropy(&labels)?;
        let loss = loss_var.value().item();
        let grads_all = tape.backward(loss_var)?;
        let mut grads: Vec<Tensor> =
            pass.params.iter().map(|&p| grads_all.get(p)).collect();
        let grad_norm = clip_global_norm(&mut grads, 1.0);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(TrainError::NonFinite { step, lr, grad_norm });
        }
        opt.step(model.params_mut(), &grads, lr);

        let logits = pass.logits.value();
        let (correct, total) = count_correct(&logits, &labels);
        let accuracy = correct as f64 / total.max(1) as f64;
        trace.record(&["step"], &[step]);
        trace.record_f64(lr);
        trace.record_f64(loss);
        trace.record_f64(accuracy);
        final_loss = loss;

        if (step + 1) % config.eval_every.max(1) == 0 || step + 1 == config.steps {
            let real_tokens: usize = rows
                .iter()
                .map(|r| r.attention_mask.iter().filter(|&&m| m == 1).count())
                .sum();
            let secs = step_start.elapsed().as_secs_f64().max(1e-9);
            records.push(EvalRecord {
                step: step + 1,
                lr,
                loss,
                accuracy,
                tokens_per_sec: real_tokens as f64 / secs,
            });
        }
    }

    let report = TrainReport { records, final_loss, trace_digest: trace.digest() };
    Ok((model, opt, report))
}

fn adamw_params(config: &TrainConfig) -> AdamWParams {
    AdamWParams {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWParams::default()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub masked_positions: u64,
}

/// Fixed-seed masked evaluation over a corpus; no parameter mutation.
pub fn evaluate_mlm(
    model: &StyleBertModel,
    inputs: &TrainInputs<'_>,
    masking: &MaskingConfig,
    seed: u64,
    max_len: usize,
    batch_size: usize,
    threads: usize,
) -> Result<EvalMetrics, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    let encoded = encode_corpus(inputs, max_len, model.config.chaizi_capacity)?;
    let line_ids: Vec<u64> = (0..encoded.len() as u64).collect();
    let rows: Vec<Result<MaskedRow, TrainError>> = ordered_map(&line_ids, threads, |_, &line| {
        mask_row(
            &encoded[line as usize],
            inputs,
            masking,
            seed,
            ["eval-select", "eval-corrupt"],
            &[line],
        )
    });
    let rows: Vec<MaskedRow> = rows.into_iter().collect::<Result<_, _>>()?;

    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut total = 0;
    for chunk in rows.chunks(batch_size) {
        let (loss, c, t) = batch_metrics(model, chunk)?;
        loss_sum += loss * t as f64;
        correct += c;
        total += t;
    }
    Ok(EvalMetrics {
        loss: loss_sum / total.max(1) as f64,
        accuracy: correct as f64 / total.max(1) as f64,
        masked_positions: total,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Tone classification accuracy with the pinyin path enabled.
    pub tone_enabled: f64,
    /// Same task on the word-only model (all inputs are UNK).
    pub tone_word_only: f64,
    /// Chance level for the tone task (majority class prior).
    pub tone_chance: f64,
    pub radical_enabled: f64,
    pub radical_word_only: f64,
    pub radical_chance: f64,
    pub designated_radical: char,
    pub tone_chars: usize,
    pub radical_chars: usize,
}

/// Embed every dictionary character with a frozen random model and fit a
/// linear classifier: tone from pinyin, presence of a designated radical
/// from chaizi. Characters are absent from the vocab, so the word-only
/// control sees constant UNK inputs.
pub fn probe_feature_signal(
    dict: &FeatureDictionary,
    alphabets: &FeatureAlphabets,
    base: &FusionEmbedderConfig,
    seed: u64,
) -> Result<ProbeReport, TrainError> {
    let vocab = Vocab::parse(&(SPECIAL_TOKENS.join("\n") + "\n"))
        .expect("special tokens always parse");

    // tone task
    let mut tone_chars = Vec::new();
    let mut tone_labels = Vec::new();
    for c in dict.characters() {
        if let Some(p) = &dict.lookup(c).pinyin {
            tone_chars.push(c);
            tone_labels.push(p.tone as usize);
        }
    }
    let tone_labels = remap_labels(&tone_labels);
    check_balance("tone", &tone_labels)?;

    // radical task: pick the radical splitting the chaizi characters
    // closest to 50/50
    let mut rad_chars = Vec::new();
    for c in dict.characters() {
        if dict.lookup(c).chaizi.is_some() {
            rad_chars.push(c);
        }
    }
    let mut best: Option<(char, f64)> = None;
    for &r in alphabets.chaizi_radicals() {
        let with = rad_chars
            .iter()
            .filter(|&&c| dict.lookup(c).chaizi.unwrap().radicals.contains(&r))
            .count();
        let balance = (with as f64 / rad_chars.len().max(1) as f64 - 0.5).abs();
        if best.map(|(_, b)| balance < b).unwrap_or(true) {
            best = Some((r, balance));
        }
    }
    let designated =
        best.ok_or_else(|| TrainError::Probe("no chaizi radicals in dictionary".into()))?.0;
    let rad_labels: Vec<usize> = rad_chars
        .iter()
        .map(|&c| {
            usize::from(dict.lookup(c).chaizi.unwrap().radicals.contains(&designated))
        })
        .collect();
    check_balance("radical", &rad_labels)?;

    let embed = |enabled: Vec<FeatureKind>, chars: &[char]| -> Result<Vec<Vec<f64>>, TrainError> {
        let config = FusionEmbedderConfig { enabled_features: enabled, ..base.clone() };
        let model = StyleBertModel::new(config, &vocab, alphabets, seed)?;
        let mut trunc = 0;
        let tokens: Vec<crate::encoders::EncodedToken> = chars
            .iter()
            .map(|&c| {
                encode_char(c, &vocab, dict, alphabets, base.chaizi_capacity, &mut trunc)
            })
            .collect::<Result<_, _>>()?;
        let rows: Vec<(&[crate::encoders::EncodedToken], &[u8])> =
            tokens.chunks(1).map(|t| (t, &[1u8][..])).collect();
        let batch = BatchInput::from_token_rows(&rows)?;
        let tape = Tape::new();
        let pass = model.fuse_embeddings(&tape, &batch)?;
        let fused = pass.fused.value();
        let d = *fused.shape().last().unwrap();
        Ok((0..chars.len()).map(|i| fused.data()[i * d..(i + 1) * d].to_vec()).collect())
    };

    let tone_enabled = logistic_fit_accuracy(
        &embed(vec![FeatureKind::Pinyin], &tone_chars)?,
        &tone_labels,
    );
    let tone_word_only = logistic_fit_accuracy(&embed(vec![], &tone_chars)?, &tone_labels);
    let radical_enabled = logistic_fit_accuracy(
        &embed(vec![FeatureKind::Chaizi], &rad_chars)?,
        &rad_labels,
    );
    let radical_word_only = logistic_fit_accuracy(&embed(vec![], &rad_chars)?, &rad_labels);

    Ok(ProbeReport {
        tone_enabled,
        tone_word_only,
        tone_chance: majority_prior(&tone_labels),
        radical_enabled,
        radical_word_only,
        radical_chance: majority_prior(&rad_labels),
        designated_radical: designated,
        tone_chars: tone_chars.len(),
        radical_chars: rad_chars.len(),
    })
}

fn remap_labels(raw: &[usize]) -> Vec<usize> {
    let mut present: Vec<usize> = raw.to_vec();
    present.sort_unstable();
    present.dedup();
    raw.iter().map(|l| present.iter().position(|p| p == l).unwrap()).collect()
}

fn check_balance(task: &str, labels: &[usize]) -> Result<(), TrainError> {
    let classes = labels.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    if classes < 2 {
        return Err(TrainError::Probe(format!(
            "{task} task needs at least two classes, found {classes}"
        )));
    }
    for c in 0..classes {
        let count = labels.iter().filter(|&&l| l == c).count();
        if count < 2 {
            return Err(TrainError::Probe(format!(
                "{task} task class {c} has only {count} examples"
            )));
        }
    }
    Ok(())
}

fn majority_prior(labels: &[usize]) -> f64 {
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let max = (0..classes)
        .map(|c| labels.iter().filter(|&&l| l == c).count())
        .max()
        .unwrap_or(0);
    max as f64 / labels.len().max(1) as f64
}

/// Full-batch softmax regression with standardized features; returns the
/// fit accuracy. Deterministic: zero init, fixed schedule.
fn logistic_fit_accuracy(features: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = features.len();
    let d = features[0].len();
    let classes = labels.iter().copied().max().unwrap() + 1;

    // standardize each dimension
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for x in features {
        for j in 0..d {
            mean[j] += x[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    for x in features {
        for j in 0..d {
            std[j] += (x[j] - mean[j]).powi(2);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n as f64).sqrt().max(1e-12);
    }
    let xs: Vec<Vec<f64>> = features
        .iter()
        .map(|x| (0..d).map(|j| (x[j] - mean[j]) / std[j]).collect())
        .collect();

    // weights [d+1, C], last row is the bias
    let mut w = vec![0.0; (d + 1) * classes];
    let lr = 0.5;
    for _ in 0..500 {
        let mut grad = vec![0.0; (d + 1) * classes];
        for (x, &y) in xs.iter().zip(labels) {
            let mut logits: Vec<f64> = (0..classes)
                .map(|c| {
                    w[d * classes + c]
                        + (0..d).map(|j| x[j] * w[j * classes + c]).sum::<f64>()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                sum += *l;
            }
            for c in 0..classes {
                let p = logits[c] / sum - if c == y { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[j * classes + c] += p * x[j];
                }
                grad[d * classes + c] += p;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= lr * gi / n as f64;
        }
    }

    let mut correct = 0;
    for (x, &y) in xs.iter().zip(labels) {
        let pred = (0..classes)
            .map(|c| {
                w[d * classes + c] + (0..d).map(|j| x[j] * w[j * classes + c]).sum::<f64>()
            })
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        if pred == y {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}
