//! Continued pre-training over a stream of unlabeled domains.
//!
//! Each stage takes the previous snapshot `f^{i-1}` and produces `f^i`
//! with one of three strategies:
//!
//! * [`Strategy::NoCp`] returns the parameters untouched.
//! * [`Strategy::VanillaCp`] trains a copy on the masked reconstruction
//!   task using its own representations and a fresh reconstruction head.
//! * [`Strategy::FusDom`] trains a student copy through the cross-domain
//!   attention head while a second, frozen copy acts as teacher.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    encode, encode_on, init_recon_head, masked_input_on, reconstruct_on, BackboneConfig, MaskPlan,
    ModelSnapshot, StageRecord,
};
use crate::error::{Error, Result};
use crate::head::{fusdom_loss_on, CdaParams, HeadConfig, MaskConfig};
use crate::scalar::Scalar;
use crate::seeds::mix;
use crate::tensor::{params_bit_eq, Adam, AdamConfig, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "nocp")]
    NoCp,
    #[serde(rename = "vanilla")]
    VanillaCp,
    #[serde(rename = "fusdom")]
    FusDom,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::NoCp, Strategy::VanillaCp, Strategy::FusDom];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::NoCp => "nocp",
            Strategy::VanillaCp => "vanilla",
            Strategy::FusDom => "fusdom",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Strategy::NoCp => 0,
            Strategy::VanillaCp => 1,
            Strategy::FusDom => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == code)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nocp" | "no-cp" | "none" => Ok(Strategy::NoCp),
            "vanilla" | "vanillacp" | "vanilla-cp" => Ok(Strategy::VanillaCp),
            "fusdom" => Ok(Strategy::FusDom),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

pub const DEFAULT_CP_EPOCHS: usize = 30;
pub const DEFAULT_CP_LR: f64 = 5e-4;
pub const DEFAULT_BATCH_SIZE: usize = 8;

/// One element of the pre-training stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub domain_id: String,
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl StagePlan {
    /// A plan with the default epochs, batch size and learning rate.
    pub fn new(domain_id: impl Into<String>, strategy: Strategy, seed: u64) -> Self {
        Self {
            domain_id: domain_id.into(),
            strategy,
            epochs: DEFAULT_CP_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_CP_LR,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Settings shared by every pre-text training loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextOptions {
    pub mask: MaskConfig,
    /// Hidden width of the FusDom head's feed-forward layer.
    pub head_ffn: usize,
    pub adam: AdamConfig,
}

impl PretextOptions {
    pub fn for_backbone(config: &BackboneConfig) -> Self {
        Self {
            mask: MaskConfig::default(),
            head_ffn: config.d_ffn,
            adam: AdamConfig::default(),
        }
    }
}

/// Result of a single stage.
#[derive(Clone, Debug)]
pub struct StageOutcome<T> {
    pub snapshot: ModelSnapshot<T>,
    /// Mean training pre-text loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// The frozen teacher of a FusDom stage, as it stood at the end.
    pub teacher: Option<ModelSnapshot<T>>,
    /// How many times teacher byte-identity was verified.
    pub teacher_checks: usize,
    pub wall_clock: Duration,
}

enum Objective<'a, T> {
    Vanilla,
    FusDom {
        teacher: &'a ModelSnapshot<T>,
        head: HeadConfig,
        cached_teacher: Option<Vec<Tensor<T>>>,
        mask_teacher: bool,
    },
}

struct TrainState<T> {
    student: ParamSet<T>,
    head: ParamSet<T>,
    recon: ParamSet<T>,
    opt_student: Adam<T>,
    opt_head: Adam<T>,
    opt_recon: Adam<T>,
}

pub(crate) fn abort(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::TrainingAbort {
            step,
            detail: format!("non-finite value in {op}"),
        },
        Error::NanGradient { param } => Error::TrainingAbort {
            step,
            detail: format!("non-finite gradient for `{param}`"),
        },
        other => other,
    }
}

/// Runs the masked-reconstruction loop shared by pre-training, Vanilla
/// CP and FusDom. Returns per-epoch mean losses.
fn train_pretext<T: Scalar>(
    template: &ModelSnapshot<T>,
    state: &mut TrainState<T>,
    objective: &Objective<'_, T>,
    data: &[Tensor<T>],
    plan: &StagePlan,
    options: &PretextOptions,
    mut after_epoch: impl FnMut(usize) -> Result<()>,
) -> Result<Vec<f64>> {
    let config = template.config;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(&[plan.seed, 3]));
    let mut losses = Vec::with_capacity(plan.epochs);
    let mut step = 0usize;

    for epoch in 0..plan.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut epoch_sum, mut epoch_weight) = (0.0f64, 0usize);
        for batch in order.chunks(plan.batch_size) {
            step += 1;
            let plans = batch
                .iter()
                .map(|&u| {
                    let seed = mix(&[plan.seed, 4, epoch as u64, u as u64]);
                    MaskPlan::sample(data[u].rows(), options.mask.mask_rate, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let total: usize = plans.iter().map(|p| p.positions.len()).sum();
            if total == 0 {
                continue;
            }

            let mut g = Graph::new();
            let sp = g.bind(&state.student, true);
            let hp = g.bind(&state.head, true);
            let rp = g.bind(&state.recon, true);
            let mut batch_loss: Option<Var> = None;
            for (&u, mplan) in batch.iter().zip(&plans) {
                if mplan.is_empty() {
                    continue;
                }
                let frames = &data[u];
                let mut utterance_loss = || match objective {
                    Objective::Vanilla => {
                        let x = g.constant(frames.clone());
                        let masked = masked_input_on(&mut g, &sp, x, mplan)?;
                        let s = encode_on(&mut g, &config, &sp, masked, None)?;
                        let pred = reconstruct_on(&mut g, &rp, s)?;
                        g.l1_loss(pred, frames, &mplan.positions)
                    }
                    Objective::FusDom {
                        teacher,
                        head,
                        cached_teacher,
                        mask_teacher,
                    } => {
                        let t = match cached_teacher {
                            Some(reps) => g.constant(reps[u].clone()),
                            None => {
                                let tp = g.bind(&teacher.params, false);
                                let x = g.constant(frames.clone());
                                let x = if *mask_teacher {
                                    masked_input_on(&mut g, &tp, x, mplan)?
                                } else {
                                    x
                                };
                                encode_on(&mut g, &teacher.config, &tp, x, None)?
                            }
                        };
                        fusdom_loss_on(&mut g, &config, &sp, t, head, &hp, &rp, frames, mplan)
                    }
                };
                let loss_u = utterance_loss().map_err(|e| abort(step, e))?;
                let weight = T::lit(mplan.positions.len() as f64 / total as f64);
                let weighted = g.scale(loss_u, weight).map_err(|e| abort(step, e))?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => g.add(acc, weighted).map_err(|e| abort(step, e))?,
                    None => weighted,
                });
            }
            let Some(loss) = batch_loss else { continue };
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::TrainingAbort {
                    step,
                    detail: "loss is not finite".into(),
                });
            }
            let grads = g.backward(loss).map_err(|e| abort(step, e))?;
            state
                .opt_student
                .step(&mut state.student, &grads.for_params(&sp))
                .map_err(|e| abort(step, e))?;
            if !state.head.is_empty() {
                state
                    .opt_head
                    .step(&mut state.head, &grads.for_params(&hp))
                    .map_err(|e| abort(step, e))?;
            }
            state
                .opt_recon
                .step(&mut state.recon, &grads.for_params(&rp))
                .map_err(|e| abort(step, e))?;
            epoch_sum += value * total as f64;
            epoch_weight += total;
        }
        losses.push(if epoch_weight == 0 {
            0.0
        } else {
            epoch_sum / epoch_weight as f64
        });
        after_epoch(epoch)?;
    }
    Ok(losses)
}

fn new_state<T: Scalar>(
    student: ParamSet<T>,
    head: ParamSet<T>,
    recon: ParamSet<T>,
    adam: AdamConfig,
) -> TrainState<T> {
    TrainState {
        student,
        head,
        recon,
        opt_student: Adam::new(adam),
        opt_head: Adam::new(adam),
        opt_recon: Adam::new(adam),
    }
}

fn stage_options(plan: &StagePlan, options: &PretextOptions) -> PretextOptions {
    PretextOptions {
        adam: AdamConfig {
            lr: plan.lr,
            ..options.adam
        },
        ..*options
    }
}

/// Produces `f^i` from `f^{i-1}` with the plan's strategy.
pub fn run_cp_stage<T: Scalar>(
    prev: &ModelSnapshot<T>,
    data: &[Tensor<T>],
    plan: &StagePlan,
    options: &PretextOptions,
) -> Result<StageOutcome<T>> {
    plan.validate()?;
    let started = Instant::now();
    if plan.strategy != Strategy::NoCp && data.is_empty() && plan.epochs > 0 {
        return Err(Error::Data(format!(
            "no unlabeled data for {} stage on `{}`",
            plan.strategy, plan.domain_id
        )));
    }
    let opts = stage_options(plan, options);
    let config = prev.config;
    let recon = init_recon_head(&config, mix(&[plan.seed, 2]));

    let (params, epoch_losses, teacher, teacher_checks) = match plan.strategy {
        Strategy::NoCp => (prev.params.clone(), Vec::new(), None, 0),
        Strategy::VanillaCp => {
            let mut state = new_state(prev.params.clone(), ParamSet::new(), recon, opts.adam);
            let losses = train_pretext(
                prev,
                &mut state,
                &Objective::Vanilla,
                data,
                plan,
                &opts,
                |_| Ok(()),
            )?;
            (state.student, losses, None, 0)
        }
        Strategy::FusDom => {
            let teacher = prev.clone();
            let head_cfg = HeadConfig {
                d_model: config.d_model,
                n_heads: config.n_heads,
                d_ffn: opts.head_ffn,
            };
            let head = CdaParams::init(head_cfg, mix(&[plan.seed, 1]))?;
            let cached_teacher = if opts.mask.mask_teacher {
                None
            } else {
                Some(
                    data.iter()
                        .map(|x| encode(&teacher, x).map(|r| r.into_tensor()))
                        .collect::<Result<Vec<_>>>()
                        .map_err(|e| abort(0, e))?,
                )
            };
            let objective = Objective::FusDom {
                teacher: &teacher,
                head: head_cfg,
                cached_teacher,
                mask_teacher: opts.mask.mask_teacher,
            };
            let mut state = new_state(prev.params.clone(), head.params, recon, opts.adam);
            let mut checks = 0usize;
            let losses = train_pretext(prev, &mut state, &objective, data, plan, &opts, |epoch| {
                if !params_bit_eq(&teacher.params, &prev.params) {
                    return Err(Error::Contract(format!(
                        "teacher parameters changed during epoch {epoch}"
                    )));
                }
                checks += 1;
                Ok(())
            })?;
            (state.student, losses, Some(teacher), checks)
        }
    };

    let mut provenance = prev.provenance.clone();
    provenance.push(StageRecord {
        strategy: plan.strategy,
        domain_id: plan.domain_id.clone(),
    });
    let snapshot = ModelSnapshot {
        config,
        params,
        stage_tag: format!("{}+{}@{}", prev.stage_tag, plan.strategy, plan.domain_id),
        provenance,
    };
    Ok(StageOutcome {
        snapshot,
        epoch_losses,
        teacher,
        teacher_checks,
        wall_clock: started.elapsed(),
    })
}

/// Snapshots `f^0 … f^n` of a stream run with per-stage bookkeeping.
#[derive(Clone, Debug)]
pub struct StreamResult<T> {
    pub snapshots: Vec<ModelSnapshot<T>>,
    pub loss_curves: Vec<Vec<f64>>,
    pub wall_clock: Vec<Duration>,
}

impl<T> StreamResult<T> {
    pub fn last(&self) -> &ModelSnapshot<T> {
        self.snapshots.last().expect("stream holds at least f^0")
    }
}

/// Folds [`run_cp_stage`] over `plans`, one dataset per plan.
pub fn run_stream<T: Scalar>(
    init: &ModelSnapshot<T>,
    plans: &[StagePlan],
    datasets: &[&[Tensor<T>]],
    options: &PretextOptions,
) -> Result<StreamResult<T>> {
    if plans.len() != datasets.len() {
        return Err(Error::Contract(format!(
            "{} stage plans but {} datasets",
            plans.len(),
            datasets.len()
        )));
    }
    let mut result = StreamResult {
        snapshots: vec![init.clone()],
        loss_curves: Vec::new(),
        wall_clock: Vec::new(),
    };
    for (plan, data) in plans.iter().zip(datasets) {
        let outcome = run_cp_stage(result.last(), data, plan, options)?;
        result.snapshots.push(outcome.snapshot);
        result.loss_curves.push(outcome.epoch_losses);
        result.wall_clock.push(outcome.wall_clock);
    }
    Ok(result)
}

/// Initial source-domain pre-training of `f^0` from a fresh
/// initialization seeded by `plan.seed`. Returns the snapshot (tagged
/// `"source"`, empty provenance) and its per-epoch loss curve.
pub fn pretrain_from_scratch<T: Scalar>(
    config: BackboneConfig,
    data: &[Tensor<T>],
    plan: &StagePlan,
    options: &PretextOptions,
) -> Result<(ModelSnapshot<T>, Vec<f64>)> {
    plan.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no source data for pre-training".into()));
    }
    let init = ModelSnapshot::init(config, plan.seed)?;
    let opts = stage_options(plan, options);
    let recon = init_recon_head(&config, mix(&[plan.seed, 2]));
    let mut state = new_state(init.params.clone(), ParamSet::new(), recon, opts.adam);
    let losses = train_pretext(
        &init,
        &mut state,
        &Objective::Vanilla,
        data,
        plan,
        &opts,
        |_| Ok(()),
    )?;
    Ok((
        ModelSnapshot {
            config,
            params: state.student,
            stage_tag: "source".into(),
            provenance: Vec::new(),
        },
        losses,
    ))
}
