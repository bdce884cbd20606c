//! The self-supervised encoder: a small pre-norm transformer over frame
//! sequences, input masking, and the masked L1 reconstruction objective.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BoundParams, Graph, ParamSet, Tensor, Var};
use crate::trainer::Strategy;

/// Default fraction of positions masked per utterance.
pub const DEFAULT_MASK_RATE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Zero layers is allowed and reduces the encoder to the input
    /// projection plus positional encoding.
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub frame_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 64,
            max_len: 64,
            frame_dim: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_len", self.max_len),
            ("frame_dim", self.frame_dim),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
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

    /// Every parameter name and shape, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, ffn) = (self.d_model, self.frame_dim, self.d_ffn);
        let mut out = vec![
            ("input.weight".to_string(), vec![f, d]),
            ("input.bias".to_string(), vec![d]),
            ("mask_embedding".to_string(), vec![f]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ffn.w1"), vec![d, ffn]),
                (p("ffn.b1"), vec![ffn]),
                (p("ffn.w2"), vec![ffn, d]),
                (p("ffn.b2"), vec![d]),
            ]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// One continued pre-training stage applied to a snapshot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub strategy: Strategy,
    pub domain_id: String,
}

/// A named set of backbone parameters together with its lineage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot<T> {
    pub config: BackboneConfig,
    pub params: ParamSet<T>,
    pub stage_tag: String,
    pub provenance: Vec<StageRecord>,
}

/// Initializes one parameter tensor by naming convention: layer-norm
/// gains are one, biases zero, everything else uniform in ±1/√fan_in.
pub(crate) fn init_param<T: Scalar>(
    name: &str,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    if name.ends_with(".gain") {
        Tensor::ones(shape)
    } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
        Tensor::zeros(shape)
    } else {
        let bound = 1.0 / (shape[0] as f64).sqrt();
        Tensor::uniform(shape, bound, rng)
    }
}

impl<T: Scalar> ModelSnapshot<T> {
    /// Fresh snapshot, deterministic in `seed`.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
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
        Ok(Self {
            config,
            params,
            stage_tag: "init".into(),
            provenance: Vec::new(),
        })
    }

    /// Assembles a snapshot from loaded parts, checking that the parameter
    /// names and shapes are exactly those implied by `config`.
    pub fn from_parts(
        config: BackboneConfig,
        params: ParamSet<T>,
        stage_tag: String,
        provenance: Vec<StageRecord>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters for config, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape {
                        op: "snapshot parameter",
                        lhs: shape.clone(),
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Self {
            config,
            params,
            stage_tag,
            provenance,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn mask_embedding(&self) -> &Tensor<T> {
        &self.params["mask_embedding"]
    }
}

/// A sequence of `d_model`-wide representations.
#[derive(Clone, Debug, PartialEq)]
pub struct RepMatrix<T>(Tensor<T>);

impl<T: Scalar> RepMatrix<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 2 || !values.is_finite() {
            return Err(Error::Contract(
                "representations must be a finite L × d matrix".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }
}

/// Fixed sinusoidal position table, `[len × d]`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let freq = 10_000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            data.push(T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_parts(vec![len, d], data)
}

/// Attention weights captured during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct EncodeTrace<T> {
    /// `attention[layer][head]` is an `[L × L]` row-stochastic matrix.
    pub attention: Vec<Vec<Tensor<T>>>,
}

/// Scaled dot-product attention for one head. Returns the head output and
/// the attention-weight node.
pub(crate) fn attend<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    d_head: usize,
) -> Result<(Var, Var)> {
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, T::one() / T::lit(d_head as f64).sqrt())?;
    let weights = g.softmax_rows(scaled)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

fn check_frames(config: &BackboneConfig, shape: &[usize]) -> Result<()> {
    if shape.len() != 2 || shape[1] != config.frame_dim {
        return Err(Error::Shape {
            op: "encode",
            lhs: shape.to_vec(),
            rhs: vec![config.max_len, config.frame_dim],
        });
    }
    if shape[0] > config.max_len {
        return Err(Error::SequenceLength {
            len: shape[0],
            max_len: config.max_len,
        });
    }
    Ok(())
}

/// Records the encoder forward pass on `g` for an `[L × frame_dim]` input
/// node, returning the `[L × d_model]` representation node.
pub fn encode_on<T: Scalar>(
    g: &mut Graph<T>,
    config: &BackboneConfig,
    params: &BoundParams,
    frames: Var,
    mut trace: Option<&mut EncodeTrace<T>>,
) -> Result<Var> {
    check_frames(config, g.value(frames).shape())?;
    let len = g.value(frames).rows();
    let d_head = config.d_head();

    let proj = g.matmul(frames, params.get("input.weight"))?;
    let proj = g.add_bias(proj, params.get("input.bias"))?;
    let pe = g.constant(sinusoidal_positions(len, config.d_model));
    let mut h = g.add(proj, pe)?;

    for l in 0..config.n_layers {
        let p = |s: &str| params.get(&format!("layers.{l}.{s}"));
        let a = g.layer_norm(h, p("ln1.gain"), p("ln1.bias"))?;
        let q = g.matmul(a, p("attn.wq"))?;
        let k = g.matmul(a, p("attn.wk"))?;
        let v = g.matmul(a, p("attn.wv"))?;
        let mut heads = Vec::with_capacity(config.n_heads);
        let mut maps = Vec::new();
        for i in 0..config.n_heads {
            let qi = g.slice_cols(q, i * d_head, d_head)?;
            let ki = g.slice_cols(k, i * d_head, d_head)?;
            let vi = g.slice_cols(v, i * d_head, d_head)?;
            let (out, weights) = attend(g, qi, ki, vi, d_head)?;
            if trace.is_some() {
                maps.push(g.value(weights).clone());
            }
            heads.push(out);
        }
        if let Some(t) = trace.as_deref_mut() {
            t.attention.push(maps);
        }
        let cat = g.concat_cols(&heads)?;
        let attn_out = g.matmul(cat, p("attn.wo"))?;
        h = g.add(h, attn_out)?;

        let f = g.layer_norm(h, p("ln2.gain"), p("ln2.bias"))?;
        let f = g.matmul(f, p("ffn.w1"))?;
        let f = g.add_bias(f, p("ffn.b1"))?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, p("ffn.w2"))?;
        let f = g.add_bias(f, p("ffn.b2"))?;
        h = g.add(h, f)?;
    }
    Ok(h)
}

/// Forward pass without gradient tracking.
pub fn encode<T: Scalar>(snapshot: &ModelSnapshot<T>, frames: &Tensor<T>) -> Result<RepMatrix<T>> {
    let mut g = Graph::new();
    let bound = g.bind(&snapshot.params, false);
    let x = g.constant(frames.clone());
    let h = encode_on(&mut g, &snapshot.config, &bound, x, None)?;
    RepMatrix::new(g.value(h).clone())
}

/// Forward pass that also returns every self-attention map.
pub fn encode_traced<T: Scalar>(
    snapshot: &ModelSnapshot<T>,
    frames: &Tensor<T>,
) -> Result<(RepMatrix<T>, EncodeTrace<T>)> {
    let mut g = Graph::new();
    let bound = g.bind(&snapshot.params, false);
    let x = g.constant(frames.clone());
    let mut trace = EncodeTrace::default();
    let h = encode_on(&mut g, &snapshot.config, &bound, x, Some(&mut trace))?;
    Ok((RepMatrix::new(g.value(h).clone())?, trace))
}

/// Positions replaced by the mask embedding for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Sorted, unique row indices.
    pub positions: Vec<usize>,
    pub mask_rate: f64,
    pub seed: u64,
}

impl MaskPlan {
    /// Samples `round(mask_rate × len)` distinct positions without
    /// replacement, deterministically in `seed`.
    pub fn sample(len: usize, mask_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mask_rate) {
            return Err(Error::Contract(format!(
                "mask_rate must lie in [0, 1], got {mask_rate}"
            )));
        }
        let count = ((mask_rate * len as f64).round() as usize).min(len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions = index::sample(&mut rng, len, count).into_vec();
        positions.sort_unstable();
        Ok(Self {
            positions,
            mask_rate,
            seed,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Replaces a sampled subset of frames with the snapshot's mask embedding.
pub fn apply_mask<T: Scalar>(
    snapshot: &ModelSnapshot<T>,
    frames: &Tensor<T>,
    mask_rate: f64,
    seed: u64,
) -> Result<(Tensor<T>, MaskPlan)> {
    check_frames(&snapshot.config, frames.shape())?;
    let plan = MaskPlan::sample(frames.rows(), mask_rate, seed)?;
    let mut masked = frames.clone();
    let fill = snapshot.mask_embedding().data().to_vec();
    let n = frames.cols();
    for &r in &plan.positions {
        masked.data_mut()[r * n..(r + 1) * n].copy_from_slice(&fill);
    }
    Ok((masked, plan))
}

/// Taped counterpart of [`apply_mask`] for a precomputed plan.
pub fn masked_input_on<T: Scalar>(
    g: &mut Graph<T>,
    params: &BoundParams,
    frames: Var,
    plan: &MaskPlan,
) -> Result<Var> {
    if plan.is_empty() {
        return Ok(frames);
    }
    g.fill_rows(frames, &plan.positions, params.get("mask_embedding"))
}

/// Parameters of the linear frame-reconstruction head, `[d_model → frame_dim]`.
pub fn init_recon_head<T: Scalar>(config: &BackboneConfig, seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [
        ("recon.weight", vec![config.d_model, config.frame_dim]),
        ("recon.bias", vec![config.frame_dim]),
    ]
    .into_iter()
    .map(|(name, shape)| (name.to_string(), init_param(name, &shape, &mut rng)))
    .collect()
}

pub fn reconstruct_on<T: Scalar>(g: &mut Graph<T>, head: &BoundParams, reps: Var) -> Result<Var> {
    let y = g.matmul(reps, head.get("recon.weight"))?;
    g.add_bias(y, head.get("recon.bias"))
}

/// Masked L1 reconstruction error: mean |predicted − target| over the
/// masked rows and all frame dimensions. Zero for an empty plan.
pub fn pretext_loss<T: Scalar>(
    predicted: &Tensor<T>,
    target: &Tensor<T>,
    plan: &MaskPlan,
) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(predicted.clone());
    let l = g.l1_loss(p, target, &plan.positions)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = BackboneConfig {
            d_model: 30,
            n_heads: 4,
            ..BackboneConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(ModelSnapshot::<f64>::init(cfg, 0).is_err());
    }

    #[test]
    fn mask_rate_out_of_range_is_rejected() {
        assert!(MaskPlan::sample(10, 1.5, 0).is_err());
        assert!(MaskPlan::sample(10, -0.1, 0).is_err());
    }

    #[test]
    fn from_parts_detects_shape_drift() {
        let snap = ModelSnapshot::<f64>::init(BackboneConfig::default(), 1).unwrap();
        let mut params = snap.params.clone();
        params.insert("input.bias".into(), Tensor::zeros(&[3]));
        let err = ModelSnapshot::from_parts(snap.config, params, "x".into(), vec![]);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let cfg = BackboneConfig {
            max_len: 4,
            ..BackboneConfig::default()
        };
        let snap = ModelSnapshot::<f64>::init(cfg, 1).unwrap();
        let err = encode(&snap, &Tensor::zeros(&[5, cfg.frame_dim])).unwrap_err();
        assert_eq!(err, Error::SequenceLength { len: 5, max_len: 4 });
    }
}
