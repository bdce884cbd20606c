//! The FusDom pre-training head.
//!
//! Cross-domain attention (CDA) lets the frozen teacher's representations
//! `T` pose the queries while the student's representations `S` supply the
//! keys and values. For head `i`:
//!
//! ```text
//! A_i = softmax((T·W_q_i)(S·W_k_i)ᵀ / √d_head)
//! H_i = A_i · (S·W_v_i)
//! CDA(S, T) = [H_1 … H_M] · W_o
//! ```
//!
//! The head wraps CDA in a pre-norm block:
//! `y = CDA(LN_s(S), LN_t(T))`, `F = y + W_2·gelu(W_1·LN_f(y))`.
//! Only the student and the head are trained; the teacher is bound as
//! constants, so the tape never produces a gradient for it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    attend, encode_on, init_param, masked_input_on, reconstruct_on, BackboneConfig, MaskPlan,
    ModelSnapshot, RepMatrix, DEFAULT_MASK_RATE,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BoundParams, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return Err(Error::Config("head extents must be at least 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, dh, ffn) = (self.d_model, self.d_head(), self.d_ffn);
        let mut out = Vec::new();
        for i in 0..self.n_heads {
            out.push((format!("cda.wq.{i}"), vec![d, dh]));
            out.push((format!("cda.wk.{i}"), vec![d, dh]));
            out.push((format!("cda.wv.{i}"), vec![d, dh]));
        }
        out.extend([
            ("cda.wo".to_string(), vec![d, d]),
            ("ffn.w1".to_string(), vec![d, ffn]),
            ("ffn.w2".to_string(), vec![ffn, d]),
            ("ln_s.gain".to_string(), vec![d]),
            ("ln_s.bias".to_string(), vec![d]),
            ("ln_t.gain".to_string(), vec![d]),
            ("ln_t.bias".to_string(), vec![d]),
            ("ln_ffn.gain".to_string(), vec![d]),
            ("ln_ffn.bias".to_string(), vec![d]),
        ]);
        out
    }
}

/// Parameters of the pre-training head.
#[derive(Clone, Debug, PartialEq)]
pub struct CdaParams<T> {
    pub config: HeadConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> CdaParams<T> {
    pub fn init(config: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = init_param(&name, &shape, &mut rng);
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Builds parameters from explicit tensors, validating names and shapes.
    pub fn from_params(config: HeadConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => {
                    return Err(Error::Config(format!(
                        "head parameter `{name}` missing or misshapen"
                    )))
                }
            }
        }
        Ok(Self { config, params })
    }
}

/// Per-head intermediates captured by [`cda_traced`].
#[derive(Clone, Debug, Default)]
pub struct CdaTrace<T> {
    /// `A_i`, `[L × L]`, rows indexed by teacher (query) position.
    pub attention: Vec<Tensor<T>>,
    /// Value bank `S·W_v_i`, `[L × d_head]`.
    pub values: Vec<Tensor<T>>,
}

fn check_pair<T: Scalar>(g: &Graph<T>, s: Var, t: Var, config: &HeadConfig) -> Result<()> {
    let (ss, ts) = (g.value(s).shape(), g.value(t).shape());
    if ss != ts {
        return Err(Error::Shape {
            op: "cda",
            lhs: ss.to_vec(),
            rhs: ts.to_vec(),
        });
    }
    if ss.len() != 2 || ss[1] != config.d_model {
        return Err(Error::Shape {
            op: "cda",
            lhs: ss.to_vec(),
            rhs: vec![ss.first().copied().unwrap_or(0), config.d_model],
        });
    }
    Ok(())
}

/// Records multi-head cross-domain attention on `g`.
pub fn cda_on<T: Scalar>(
    g: &mut Graph<T>,
    config: &HeadConfig,
    params: &BoundParams,
    student: Var,
    teacher: Var,
    mut trace: Option<&mut CdaTrace<T>>,
) -> Result<Var> {
    check_pair(g, student, teacher, config)?;
    let d_head = config.d_head();
    let mut heads = Vec::with_capacity(config.n_heads);
    for i in 0..config.n_heads {
        let q = g.matmul(teacher, params.get(&format!("cda.wq.{i}")))?;
        let k = g.matmul(student, params.get(&format!("cda.wk.{i}")))?;
        let v = g.matmul(student, params.get(&format!("cda.wv.{i}")))?;
        let (out, weights) = attend(g, q, k, v, d_head)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.attention.push(g.value(weights).clone());
            tr.values.push(g.value(v).clone());
        }
        heads.push(out);
    }
    let cat = g.concat_cols(&heads)?;
    g.matmul(cat, params.get("cda.wo"))
}

/// Records the full head block on `g`: pre-norm CDA followed by a
/// feed-forward layer with a skip connection.
pub fn head_forward_on<T: Scalar>(
    g: &mut Graph<T>,
    config: &HeadConfig,
    params: &BoundParams,
    student: Var,
    teacher: Var,
    trace: Option<&mut CdaTrace<T>>,
) -> Result<Var> {
    check_pair(g, student, teacher, config)?;
    let s = g.layer_norm(student, params.get("ln_s.gain"), params.get("ln_s.bias"))?;
    let t = g.layer_norm(teacher, params.get("ln_t.gain"), params.get("ln_t.bias"))?;
    let y = cda_on(g, config, params, s, t, trace)?;
    let f = g.layer_norm(y, params.get("ln_ffn.gain"), params.get("ln_ffn.bias"))?;
    let f = g.matmul(f, params.get("ffn.w1"))?;
    let f = g.gelu(f)?;
    let f = g.matmul(f, params.get("ffn.w2"))?;
    g.add(y, f)
}

pub fn cda<T: Scalar>(
    s: &RepMatrix<T>,
    t: &RepMatrix<T>,
    params: &CdaParams<T>,
) -> Result<RepMatrix<T>> {
    Ok(cda_traced(s, t, params)?.0)
}

pub fn cda_traced<T: Scalar>(
    s: &RepMatrix<T>,
    t: &RepMatrix<T>,
    params: &CdaParams<T>,
) -> Result<(RepMatrix<T>, CdaTrace<T>)> {
    let mut g = Graph::new();
    let bound = g.bind(&params.params, false);
    let sv = g.constant(s.values().clone());
    let tv = g.constant(t.values().clone());
    let mut trace = CdaTrace::default();
    let out = cda_on(&mut g, &params.config, &bound, sv, tv, Some(&mut trace))?;
    Ok((RepMatrix::new(g.value(out).clone())?, trace))
}

/// Output of the pre-training head.
#[derive(Clone, Debug)]
pub struct HeadOutput<T> {
    pub f: RepMatrix<T>,
    pub attention_maps: Vec<Tensor<T>>,
}

pub fn head_forward<T: Scalar>(
    s: &RepMatrix<T>,
    t: &RepMatrix<T>,
    params: &CdaParams<T>,
) -> Result<HeadOutput<T>> {
    let mut g = Graph::new();
    let bound = g.bind(&params.params, false);
    let sv = g.constant(s.values().clone());
    let tv = g.constant(t.values().clone());
    let mut trace = CdaTrace::default();
    let out = head_forward_on(&mut g, &params.config, &bound, sv, tv, Some(&mut trace))?;
    Ok(HeadOutput {
        f: RepMatrix::new(g.value(out).clone())?,
        attention_maps: trace.attention,
    })
}

/// Masking behaviour of a pre-text step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub mask_rate: f64,
    /// Also mask the teacher input (same positions, teacher's own mask
    /// embedding). Off by default: the teacher sees clean frames.
    pub mask_teacher: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_rate: DEFAULT_MASK_RATE,
            mask_teacher: false,
        }
    }
}

/// Records one utterance's FusDom pre-text loss on `g`.
///
/// `teacher_reps` must be a node that does not require gradients (either
/// a constant or the output of a teacher bound as constants).
#[allow(clippy::too_many_arguments)]
pub fn fusdom_loss_on<T: Scalar>(
    g: &mut Graph<T>,
    backbone: &BackboneConfig,
    student_params: &BoundParams,
    teacher_reps: Var,
    head: &HeadConfig,
    head_params: &BoundParams,
    recon_params: &BoundParams,
    frames: &Tensor<T>,
    plan: &MaskPlan,
) -> Result<Var> {
    if g.requires_grad(teacher_reps) {
        return Err(Error::Contract(
            "teacher representations must be detached from the tape".into(),
        ));
    }
    let x = g.constant(frames.clone());
    let masked = masked_input_on(g, student_params, x, plan)?;
    let s = encode_on(g, backbone, student_params, masked, None)?;
    let f = head_forward_on(g, head, head_params, s, teacher_reps, None)?;
    let pred = reconstruct_on(g, recon_params, f)?;
    g.l1_loss(pred, frames, &plan.positions)
}

/// Loss value and gradients from one [`fusdom_pretext_step`].
#[derive(Clone, Debug)]
pub struct PretextStep<T> {
    pub loss: T,
    pub plan: MaskPlan,
    pub student_grads: ParamSet<T>,
    pub head_grads: ParamSet<T>,
    pub recon_grads: ParamSet<T>,
    /// Gradients reported by the tape for teacher parameters. Always empty.
    pub teacher_grads: ParamSet<T>,
}

/// One FusDom pre-text evaluation on a single utterance: the student
/// encodes masked frames, the teacher encodes clean frames on the same
/// tape but bound as constants, the head fuses both, and the masked L1
/// reconstruction loss is differentiated.
pub fn fusdom_pretext_step<T: Scalar>(
    student: &ModelSnapshot<T>,
    teacher: &ModelSnapshot<T>,
    head: &CdaParams<T>,
    recon: &ParamSet<T>,
    frames: &Tensor<T>,
    mask: &MaskConfig,
    seed: u64,
) -> Result<PretextStep<T>> {
    if student.config != teacher.config {
        return Err(Error::Contract(
            "student and teacher must share a backbone configuration".into(),
        ));
    }
    let plan = MaskPlan::sample(frames.rows(), mask.mask_rate, seed)?;
    let mut g = Graph::new();
    let sp = g.bind(&student.params, true);
    let tp = g.bind(&teacher.params, false);
    let hp = g.bind(&head.params, true);
    let rp = g.bind(recon, true);

    let clean = g.constant(frames.clone());
    let teacher_in = if mask.mask_teacher {
        masked_input_on(&mut g, &tp, clean, &plan)?
    } else {
        clean
    };
    let t = encode_on(&mut g, &teacher.config, &tp, teacher_in, None)?;
    let loss = fusdom_loss_on(
        &mut g,
        &student.config,
        &sp,
        t,
        &head.config,
        &hp,
        &rp,
        frames,
        &plan,
    )?;
    let grads = g.backward(loss)?;
    Ok(PretextStep {
        loss: g.value(loss).item(),
        plan,
        student_grads: grads.for_params(&sp),
        head_grads: grads.for_params(&hp),
        recon_grads: grads.for_params(&rp),
        teacher_grads: grads.for_params(&tp),
    })
}
