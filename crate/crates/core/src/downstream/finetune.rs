//! Supervised CTC fine-tuning of a pre-trained backbone.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ctc::{check_feasible, ctc_loss_on, BLANK};
use super::decode::greedy_decode;
use super::wer::{wer, EvalResult};
use crate::backbone::{encode, encode_on, ModelSnapshot};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds::mix;
use crate::tensor::{Adam, AdamConfig, BoundParams, Graph, ParamSet, Tensor, Var};
use crate::trainer::abort;

const BLANK_SYMBOL: &str = "<blank>";

/// Output symbols with the blank at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut tokens = vec![BLANK_SYMBOL.to_string()];
        for l in labels {
            if tokens.contains(&l) {
                return Err(Error::Contract(format!(
                    "duplicate or reserved symbol `{l}`"
                )));
            }
            tokens.push(l);
        }
        if tokens.len() < 2 {
            return Err(Error::Contract(
                "vocabulary needs at least one label".into(),
            ));
        }
        Ok(Self { tokens })
    }

    /// Labels `t1 … tn`.
    pub fn synthetic(n_labels: usize) -> Result<Self> {
        Self::new((1..=n_labels).map(|i| format!("t{i}")).collect())
    }

    pub fn blank_id(&self) -> usize {
        BLANK
    }

    /// Number of output classes including the blank.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledUtterance<T> {
    frames: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> LabeledUtterance<T> {
    pub fn new(frames: Tensor<T>, labels: Vec<usize>, vocab: &Vocab) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::Shape {
                op: "labeled_utterance",
                lhs: frames.shape().to_vec(),
                rhs: vec![],
            });
        }
        if labels.is_empty() {
            return Err(Error::Data("labeled utterance without labels".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= vocab.size()) {
            return Err(Error::Data(format!(
                "label id {bad} outside 1..{}",
                vocab.size()
            )));
        }
        check_feasible(frames.rows(), &labels)?;
        Ok(Self { frames, labels })
    }

    pub fn frames(&self) -> &Tensor<T> {
        &self.frames
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// All backbone weights train together with the CTC head.
    E2e,
    /// The backbone is a frozen feature extractor; only the head trains.
    Probe,
}

impl FinetuneMode {
    pub const ALL: [FinetuneMode; 2] = [FinetuneMode::E2e, FinetuneMode::Probe];

    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneMode::E2e => "e2e",
            FinetuneMode::Probe => "probe",
        }
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e2e" => Ok(FinetuneMode::E2e),
            "probe" => Ok(FinetuneMode::Probe),
            other => Err(Error::Config(format!("unknown fine-tune mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 40,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "fine-tune lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(
                "fine-tune batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A backbone with a linear CTC head on top.
#[derive(Clone, Debug)]
pub struct FinetunedModel<T> {
    pub backbone: ModelSnapshot<T>,
    /// `ctc.weight` `[d_model × V]` and `ctc.bias` `[V]`.
    pub head: ParamSet<T>,
    pub mode: FinetuneMode,
}

impl<T: Scalar> FinetunedModel<T> {
    pub fn head_weight(&self) -> &Tensor<T> {
        &self.head["ctc.weight"]
    }

    pub fn vocab_size(&self) -> usize {
        self.head_weight().cols()
    }

    /// Per-frame log-probabilities `[L × V]`.
    pub fn log_probs(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let reps = encode(&self.backbone, frames)?;
        let mut g = Graph::new();
        let h = g.bind(&self.head, false);
        let r = g.constant(reps.into_tensor());
        let lp = head_on(&mut g, &h, r)?;
        Ok(g.value(lp).clone())
    }

    pub fn transcribe(&self, frames: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(greedy_decode(&self.log_probs(frames)?))
    }
}

pub fn init_ctc_head<T: Scalar>(d_model: usize, vocab_size: usize, seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (d_model as f64).sqrt();
    let mut head = ParamSet::new();
    head.insert(
        "ctc.weight".into(),
        Tensor::uniform(&[d_model, vocab_size], bound, &mut rng),
    );
    head.insert("ctc.bias".into(), Tensor::zeros(&[vocab_size]));
    head
}

fn head_on<T: Scalar>(g: &mut Graph<T>, head: &BoundParams, reps: Var) -> Result<Var> {
    let logits = g.matmul(reps, head.get("ctc.weight"))?;
    let logits = g.add_bias(logits, head.get("ctc.bias"))?;
    g.log_softmax_rows(logits)
}

fn finetune<T: Scalar>(
    snapshot: &ModelSnapshot<T>,
    train: &[LabeledUtterance<T>],
    vocab: &Vocab,
    cfg: &FinetuneConfig,
    mode: FinetuneMode,
) -> Result<(FinetunedModel<T>, Vec<f64>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no labeled training data".into()));
    }
    let config = snapshot.config;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut head = init_ctc_head(config.d_model, vocab.size(), mix(&[cfg.seed, 7]));
    let mut backbone = snapshot.params.clone();
    let mut opt_head = Adam::new(adam);
    let mut opt_backbone = Adam::new(adam);

    // A frozen backbone maps each utterance to the same features every
    // epoch, so they are computed once.
    let features = match mode {
        FinetuneMode::Probe => Some(
            train
                .iter()
                .map(|u| encode(snapshot, &u.frames).map(|r| r.into_tensor()))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| abort(0, e))?,
        ),
        FinetuneMode::E2e => None,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 8]));
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut g = Graph::new();
            let hp = g.bind(&head, true);
            let bp = g.bind(&backbone, mode == FinetuneMode::E2e);
            let scale = T::lit(1.0 / batch.len() as f64);
            let mut total: Option<Var> = None;
            for &u in batch {
                let loss = (|| {
                    let reps = match &features {
                        Some(f) => g.constant(f[u].clone()),
                        None => {
                            let x = g.constant(train[u].frames.clone());
                            encode_on(&mut g, &config, &bp, x, None)?
                        }
                    };
                    let lp = head_on(&mut g, &hp, reps)?;
                    let l = ctc_loss_on(&mut g, lp, &train[u].labels)?;
                    let l = g.scale(l, scale)?;
                    match total {
                        Some(acc) => g.add(acc, l),
                        None => Ok(l),
                    }
                })()
                .map_err(|e| abort(step, e))?;
                total = Some(loss);
            }
            let loss = total.expect("batches are nonempty");
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::TrainingAbort {
                    step,
                    detail: "CTC loss is not finite".into(),
                });
            }
            epoch_sum += value * batch.len() as f64;
            let grads = g.backward(loss).map_err(|e| abort(step, e))?;
            opt_head
                .step(&mut head, &grads.for_params(&hp))
                .map_err(|e| abort(step, e))?;
            if mode == FinetuneMode::E2e {
                opt_backbone
                    .step(&mut backbone, &grads.for_params(&bp))
                    .map_err(|e| abort(step, e))?;
            }
        }
        curve.push(epoch_sum / train.len() as f64);
    }

    let backbone = ModelSnapshot {
        params: backbone,
        ..snapshot.clone()
    };
    Ok((
        FinetunedModel {
            backbone,
            head,
            mode,
        },
        curve,
    ))
}

/// Trains the backbone and a fresh linear CTC head jointly. Returns the
/// model and the mean training CTC loss of every epoch.
pub fn finetune_e2e<T: Scalar>(
    snapshot: &ModelSnapshot<T>,
    train: &[LabeledUtterance<T>],
    vocab: &Vocab,
    cfg: &FinetuneConfig,
) -> Result<(FinetunedModel<T>, Vec<f64>)> {
    finetune(snapshot, train, vocab, cfg, FinetuneMode::E2e)
}

/// Trains only a linear CTC head over the frozen backbone's features.
pub fn frozen_probe<T: Scalar>(
    snapshot: &ModelSnapshot<T>,
    train: &[LabeledUtterance<T>],
    vocab: &Vocab,
    cfg: &FinetuneConfig,
) -> Result<(FinetunedModel<T>, Vec<f64>)> {
    finetune(snapshot, train, vocab, cfg, FinetuneMode::Probe)
}

/// Corpus-level token error rate of greedy transcripts.
pub fn evaluate<T: Scalar>(
    model: &FinetunedModel<T>,
    test: &[LabeledUtterance<T>],
) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::Data("no evaluation data".into()));
    }
    let per_utt = test
        .iter()
        .map(|u| model.transcribe(&u.frames).map(|hyp| wer(&u.labels, &hyp)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::aggregate(&per_utt))
}
