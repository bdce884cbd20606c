//! Synthetic domains: a Markov chain over tokens whose emissions pass
//! through a per-domain linear mixing transform.
//!
//! Token means are shared by every preset, so two domains differ only in
//! how the same underlying tokens are mixed into frames and in how tokens
//! follow one another.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{hash_str, mix};
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 1;

/// Built-in domain presets, in canonical order.
pub const PRESETS: [&str; 3] = ["source", "shifted", "distant"];

/// Smallest relative Frobenius distance tolerated between the transforms
/// of two presets.
pub const MIN_TRANSFORM_DISTANCE: f64 = 0.5;

/// Knobs shared by every preset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShape {
    /// Label symbols, excluding the blank.
    pub vocab_size: usize,
    pub frame_dim: usize,
    pub noise_sigma: f64,
    pub frames_per_token: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for DomainShape {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            frame_dim: 16,
            noise_sigma: 1.0,
            frames_per_token: 4,
            min_tokens: 3,
            max_tokens: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub domain_id: String,
    pub vocab_size: usize,
    /// Row-stochastic `[V × V]`; row `i` holds the successor distribution
    /// of token index `i` (label `i + 1`).
    pub transition: Tensor<f64>,
    pub token_means: Tensor<f64>,
    pub transform: Tensor<f64>,
    pub noise_sigma: f64,
    pub frames_per_token: usize,
    pub length_range: (usize, usize),
}

impl DomainSpec {
    pub fn frame_dim(&self) -> usize {
        self.token_means.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size;
        let bad = |m: String| Err(Error::Config(format!("domain `{}`: {m}", self.domain_id)));
        if v < 2 {
            return bad(format!("vocab_size must be at least 2, got {v}"));
        }
        if self.transition.shape() != [v, v] {
            return bad(format!("transition shape {:?}", self.transition.shape()));
        }
        for i in 0..v {
            let row = self.transition.row(i);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return bad(format!("transition row {i} has an entry outside [0, 1]"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("transition row {i} sums to {s}"));
            }
        }
        let f = self.token_means.cols();
        if self.token_means.shape() != [v, f] || self.transform.shape() != [f, f] {
            return bad(format!(
                "means {:?} and transform {:?} disagree",
                self.token_means.shape(),
                self.transform.shape()
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            ));
        }
        if self.frames_per_token < 2 {
            return bad("frames_per_token must be at least 2".into());
        }
        let (lo, hi) = self.length_range;
        if lo == 0 || lo > hi {
            return bad(format!("length range ({lo}, {hi})"));
        }
        Ok(())
    }

    /// `transform · token_mean_v`, the noiseless frame of token index `v`.
    pub fn clean_frame(&self, v: usize) -> Vec<f64> {
        let f = self.frame_dim();
        let mean = self.token_means.row(v);
        (0..f)
            .map(|r| (0..f).map(|c| self.transform.at(r, c) * mean[c]).sum())
            .collect()
    }
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

/// Random orthogonal matrix by Gram–Schmidt on a Gaussian matrix.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    loop {
        let g = gaussian_matrix(n, n, 1.0, rng);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut degenerate = false;
        for i in 0..n {
            let mut v = g.row(i).to_vec();
            for q in &rows {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-6 {
                degenerate = true;
                break;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
        if !degenerate {
            return Tensor::from_rows(&rows).expect("square rows");
        }
    }
}

/// A permutation of `0..n` without fixed points.
fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// Convex mixture of `k` derangement matrices: doubly stochastic with a
/// zero diagonal, so the chain never repeats a token and its stationary
/// distribution is uniform.
fn mixed_transitions(v: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();
    let mut t = Tensor::zeros(&[v, v]);
    for w in weights {
        let p = derangement(v, rng);
        for (i, &j) in p.iter().enumerate() {
            t.data_mut()[i * v + j] += w / total;
        }
    }
    // Renormalize each row so the sum is exact to rounding.
    for i in 0..v {
        let s: f64 = t.row(i).iter().sum();
        t.data_mut()[i * v..(i + 1) * v]
            .iter_mut()
            .for_each(|p| *p /= s);
    }
    t
}

fn token_means(shape: &DomainShape, master_seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[master_seed, hash_str("token_means")]));
    gaussian_matrix(shape.vocab_size, shape.frame_dim, 1.0, &mut rng)
}

fn preset_rng(name: &str, master_seed: u64, salt: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[master_seed, hash_str(name), hash_str(salt)]))
}

fn preset_transform(name: &str, f: usize, master_seed: u64) -> Result<Tensor<f64>> {
    let mut rng = preset_rng(name, master_seed, "transform");
    match name {
        // Near-identity mixing.
        "source" => {
            let mut t = gaussian_matrix(f, f, 0.1 / (f as f64).sqrt(), &mut rng);
            for i in 0..f {
                t.data_mut()[i * f + i] += 1.0;
            }
            Ok(t)
        }
        // A rotation of the source feature space.
        "shifted" => Ok(orthogonal(f, &mut rng)),
        // A rotation followed by anisotropic scaling.
        "distant" => {
            let mut q = orthogonal(f, &mut rng);
            for r in 0..f {
                let s = rng.random_range(0.5..1.5);
                q.data_mut()[r * f..(r + 1) * f]
                    .iter_mut()
                    .for_each(|x| *x *= s);
            }
            Ok(q)
        }
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// Relative Frobenius distance `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn transform_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.l2_norm().max(b.l2_norm())
}

/// Builds the named preset. Every preset shares the token means drawn
/// from `master_seed`; transforms and transitions are preset-specific.
pub fn make_domain(preset: &str, shape: &DomainShape, master_seed: u64) -> Result<DomainSpec> {
    let transform = preset_transform(preset, shape.frame_dim, master_seed)?;
    let sparsity = match preset {
        "source" => shape.vocab_size.saturating_sub(1).max(1),
        "shifted" => 3,
        _ => 2,
    };
    for other in PRESETS.iter().filter(|&&p| p != preset) {
        let t = preset_transform(other, shape.frame_dim, master_seed)?;
        let d = transform_distance(&transform, &t);
        if d < MIN_TRANSFORM_DISTANCE {
            return Err(Error::Contract(format!(
                "presets `{preset}` and `{other}` are too close (distance {d:.3})"
            )));
        }
    }
    let mut rng = preset_rng(preset, master_seed, "transitions");
    let spec = DomainSpec {
        domain_id: preset.to_string(),
        vocab_size: shape.vocab_size,
        transition: mixed_transitions(shape.vocab_size, sparsity, &mut rng),
        token_means: token_means(shape, master_seed),
        transform,
        noise_sigma: shape.noise_sigma,
        frames_per_token: shape.frames_per_token,
        length_range: (shape.min_tokens, shape.max_tokens),
    };
    spec.validate()?;
    Ok(spec)
}

/// One generated sequence. `tokens` holds label ids `1..=V`.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub frames: Tensor<f64>,
    pub tokens: Option<Vec<usize>>,
    pub domain_id: String,
    pub seed: u64,
}

fn draw(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Token index sequence (0-based) from the chain with a uniform start.
pub fn sample_tokens(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (lo, hi) = spec.length_range;
    let len = rng.random_range(lo..=hi);
    let mut seq = Vec::with_capacity(len);
    seq.push(rng.random_range(0..spec.vocab_size));
    while seq.len() < len {
        let prev = *seq.last().expect("nonempty");
        let row = spec.transition.row(prev);
        let mut next = draw(row, rng);
        if next == prev {
            next = draw(row, rng);
        }
        seq.push(next);
    }
    seq
}

/// Deterministic in `(spec, seed)`.
pub fn sample_utterance(spec: &DomainSpec, seed: u64, labeled: bool) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, hash_str(&spec.domain_id)]));
    let seq = sample_tokens(spec, &mut rng);
    let f = spec.frame_dim();
    let fpt = spec.frames_per_token;
    let mut data = Vec::with_capacity(seq.len() * fpt * f);
    let mut latent = vec![0.0; f];
    for &v in &seq {
        let mean = spec.token_means.row(v);
        for _ in 0..fpt {
            for (z, &m) in latent.iter_mut().zip(mean) {
                *z = m + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            for r in 0..f {
                let row = &spec.transform.data()[r * f..(r + 1) * f];
                data.push(row.iter().zip(&latent).map(|(a, z)| a * z).sum());
            }
        }
    }
    Utterance {
        frames: Tensor::new(vec![seq.len() * fpt, f], data).expect("consistent shape"),
        tokens: labeled.then(|| seq.iter().map(|&v| v + 1).collect()),
        domain_id: spec.domain_id.clone(),
        seed,
    }
}

/// Corpus partitions. Each draws utterance seeds from its own range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn labeled(self) -> bool {
        self != Split::Pretrain
    }

    /// Utterance `i` of this split gets seed `base + i`; bases are
    /// 2^40 apart.
    pub fn seed_base(self) -> u64 {
        let code = match self {
            Split::Pretrain => 0,
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        };
        code << 40
    }

    pub fn seed_range(self) -> std::ops::Range<u64> {
        self.seed_base()..self.seed_base() + (1 << 40)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSizes {
    pub pretrain: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl CorpusSizes {
    /// Sizes for the domain the initial model is pre-trained on.
    pub const SOURCE: CorpusSizes = CorpusSizes {
        pretrain: 400,
        train: 120,
        dev: 30,
        test: 30,
    };

    /// Sizes for a continued pre-training domain.
    pub const TARGET: CorpusSizes = CorpusSizes {
        pretrain: 200,
        train: 120,
        dev: 30,
        test: 30,
    };

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Pretrain => self.pretrain,
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

/// Generates split `split` of `spec` in memory.
pub fn generate_split(
    spec: &DomainSpec,
    split: Split,
    n: usize,
    master_seed: u64,
) -> Vec<Utterance> {
    (0..n as u64)
        .map(|i| {
            let seed = split.seed_base() + i;
            let mut u = sample_utterance(spec, mix(&[master_seed, seed]), split.labeled());
            u.seed = seed;
            u
        })
        .collect()
}
