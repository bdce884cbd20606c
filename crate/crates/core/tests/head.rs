use fusdom_core::backbone::{init_recon_head, BackboneConfig, ModelSnapshot, RepMatrix};
use fusdom_core::datagen::{generate_split, make_domain, DomainShape, Split};
use fusdom_core::head::{
    cda, cda_on, cda_traced, fusdom_pretext_step, head_forward, head_forward_on, CdaParams,
    HeadConfig, MaskConfig,
};
use fusdom_core::seeds::mix;
use fusdom_core::tensor::{
    gradcheck, params_bit_eq, Adam, AdamConfig, BoundParams, Graph, ParamSet, Tensor, Var,
};
use fusdom_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

fn reps(len: usize, d: usize, rng: &mut ChaCha8Rng) -> RepMatrix<f64> {
    RepMatrix::new(random(&[len, d], rng)).unwrap()
}

/// Per head, per query position: scores against every key, softmax,
/// weighted sum of values; then concatenation and output projection.
fn naive_cda(s: &Tensor<f64>, t: &Tensor<f64>, p: &CdaParams<f64>) -> Vec<Vec<f64>> {
    let (len, d) = (s.rows(), s.cols());
    let m = p.config.n_heads;
    let dh = d / m;
    let proj = |x: &Tensor<f64>, w: &Tensor<f64>, row: usize, col: usize| -> f64 {
        (0..d).map(|k| x.at(row, k) * w.at(k, col)).sum()
    };
    let mut concat = vec![vec![0.0; d]; len];
    for h in 0..m {
        let (wq, wk, wv) = (
            &p.params[&format!("cda.wq.{h}")],
            &p.params[&format!("cda.wk.{h}")],
            &p.params[&format!("cda.wv.{h}")],
        );
        for i in 0..len {
            let q: Vec<f64> = (0..dh).map(|c| proj(t, wq, i, c)).collect();
            let scores: Vec<f64> = (0..len)
                .map(|j| {
                    (0..dh).map(|c| q[c] * proj(s, wk, j, c)).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|x| (x - mx).exp()).sum();
            for j in 0..len {
                let a = (scores[j] - mx).exp() / z;
                for c in 0..dh {
                    concat[i][h * dh + c] += a * proj(s, wv, j, c);
                }
            }
        }
    }
    let wo = &p.params["cda.wo"];
    (0..len)
        .map(|i| {
            (0..d)
                .map(|c| (0..d).map(|k| concat[i][k] * wo.at(k, c)).sum())
                .collect()
        })
        .collect()
}

#[test]
fn cda_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..100 {
        let m = [1, 2, 4][case % 3];
        let d = m * rng.random_range(1..=16 / m);
        let len = rng.random_range(1..=8);
        let cfg = HeadConfig {
            d_model: d,
            n_heads: m,
            d_ffn: 8,
        };
        let params = CdaParams::init(cfg, case as u64).unwrap();
        let (s, t) = (reps(len, d, &mut rng), reps(len, d, &mut rng));
        let (out, trace) = cda_traced(&s, &t, &params).unwrap();
        let oracle = naive_cda(s.values(), t.values(), &params);
        for i in 0..len {
            for c in 0..d {
                let diff = (out.values().at(i, c) - oracle[i][c]).abs();
                assert!(diff < 1e-10, "case {case}: {diff}");
            }
        }
        assert_eq!(trace.attention.len(), m);
        for a in &trace.attention {
            for r in 0..len {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

fn ones_config(d: usize, m: usize) -> (HeadConfig, CdaParams<f64>) {
    let cfg = HeadConfig {
        d_model: d,
        n_heads: m,
        d_ffn: 2,
    };
    let params: ParamSet<f64> = cfg
        .param_shapes()
        .into_iter()
        .map(|(n, s)| (n, Tensor::ones(&s)))
        .collect();
    (cfg, CdaParams::from_params(cfg, params).unwrap())
}

#[test]
fn single_key_attention_returns_value() {
    let (_, params) = ones_config(1, 1);
    let s = RepMatrix::new(Tensor::from_rows(&[vec![0.7]]).unwrap()).unwrap();
    let t = RepMatrix::new(Tensor::from_rows(&[vec![-2.3]]).unwrap()).unwrap();
    assert_eq!(cda(&s, &t, &params).unwrap().values().item(), 0.7);
}

#[test]
fn identical_student_rows_ignore_teacher() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = HeadConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 4,
    };
    let params = CdaParams::init(cfg, 3).unwrap();
    let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = RepMatrix::new(Tensor::from_rows(&vec![v.clone(); 5]).unwrap()).unwrap();
    let vrow = Tensor::from_rows(&[v]).unwrap();
    let heads: Vec<f64> = (0..2)
        .flat_map(|h| {
            vrow.matmul(&params.params[&format!("cda.wv.{h}")])
                .unwrap()
                .into_data()
        })
        .collect();
    let expected = Tensor::new(vec![1, 8], heads)
        .unwrap()
        .matmul(&params.params["cda.wo"])
        .unwrap();
    for _ in 0..3 {
        let t = reps(5, 8, &mut rng);
        let out = cda(&s, &t, &params).unwrap();
        for r in 0..5 {
            for c in 0..8 {
                assert!((out.values().at(r, c) - expected.at(0, c)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn teacher_drives_weights_and_student_drives_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = HeadConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 4,
    };
    let params = CdaParams::init(cfg, 5).unwrap();
    let s = reps(6, 8, &mut rng);
    let (t1, t2) = (reps(6, 8, &mut rng), reps(6, 8, &mut rng));
    let (out1, tr1) = cda_traced(&s, &t1, &params).unwrap();
    let (_, tr2) = cda_traced(&s, &t2, &params).unwrap();
    for h in 0..2 {
        assert!(tr1.values[h].bit_eq(&tr2.values[h]));
        assert!(!tr1.attention[h].bit_eq(&tr2.attention[h]));
    }
    // Output is the projected concatenation of A_i · V_i.
    let heads: Vec<Tensor<f64>> = (0..2)
        .map(|h| tr1.attention[h].matmul(&tr1.values[h]).unwrap())
        .collect();
    let mut cat = Tensor::zeros(&[6, 8]);
    for r in 0..6 {
        for h in 0..2 {
            for c in 0..4 {
                cat.data_mut()[r * 8 + h * 4 + c] = heads[h].at(r, c);
            }
        }
    }
    let recomposed = cat.matmul(&params.params["cda.wo"]).unwrap();
    assert!(recomposed.max_abs_diff(out1.values()) < 1e-12);
    // Changing S changes the value bank.
    let s2 = reps(6, 8, &mut rng);
    let (_, tr3) = cda_traced(&s2, &t1, &params).unwrap();
    assert!(!tr3.values[0].bit_eq(&tr1.values[0]));
}

#[test]
fn cda_rejects_mismatched_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = HeadConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 4,
    };
    let params = CdaParams::init(cfg, 0).unwrap();
    assert!(matches!(
        cda(&reps(4, 8, &mut rng), &reps(5, 8, &mut rng), &params),
        Err(Error::Shape { .. })
    ));
    assert!(matches!(
        cda(&reps(4, 6, &mut rng), &reps(4, 6, &mut rng), &params),
        Err(Error::Shape { .. })
    ));
}

fn layer_norm(x: &Tensor<f64>, gain: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let mut out = x.clone();
    let n = x.cols();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let denom = var.max(1e-5).sqrt();
        for c in 0..n {
            out.data_mut()[r * n + c] = (row[c] - mean) / denom * gain.data()[c] + bias.data()[c];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn head_forward_is_cda_then_ffn() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = HeadConfig {
        d_model: 8,
        n_heads: 4,
        d_ffn: 12,
    };
    let mut params = CdaParams::init(cfg, 7).unwrap();
    for (name, t) in params.params.iter_mut() {
        if name.starts_with("ln") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    let p = &params.params;
    let (s, t) = (reps(5, 8, &mut rng), reps(5, 8, &mut rng));
    let sn = RepMatrix::new(layer_norm(s.values(), &p["ln_s.gain"], &p["ln_s.bias"])).unwrap();
    let tn = RepMatrix::new(layer_norm(t.values(), &p["ln_t.gain"], &p["ln_t.bias"])).unwrap();
    let y = cda(&sn, &tn, &params).unwrap().into_tensor();
    let hidden = layer_norm(&y, &p["ln_ffn.gain"], &p["ln_ffn.bias"])
        .matmul(&p["ffn.w1"])
        .unwrap()
        .map(gelu);
    let ffn = hidden.matmul(&p["ffn.w2"]).unwrap();
    let out = head_forward(&s, &t, &params).unwrap();
    for i in 0..y.numel() {
        assert!((out.f.values().data()[i] - (y.data()[i] + ffn.data()[i])).abs() < 1e-12);
    }
    assert_eq!(out.attention_maps.len(), 4);

    // A zero FFN leaves only the skip path.
    for name in ["ffn.w1", "ffn.w2"] {
        let shape = params.params[name].shape().to_vec();
        params.params.insert(name.into(), Tensor::zeros(&shape));
    }
    let out = head_forward(&s, &t, &params).unwrap();
    let mut g = Graph::new();
    let bound = g.bind(&params.params, false);
    let (sv, tv) = (
        g.constant(s.values().clone()),
        g.constant(t.values().clone()),
    );
    let sn = g
        .layer_norm(sv, bound.get("ln_s.gain"), bound.get("ln_s.bias"))
        .unwrap();
    let tn = g
        .layer_norm(tv, bound.get("ln_t.gain"), bound.get("ln_t.bias"))
        .unwrap();
    let y = cda_on(&mut g, &cfg, &bound, sn, tn, None).unwrap();
    assert!(out.f.values().bit_eq(g.value(y)));
}

fn bind(names: &[String], vars: &[Var]) -> BoundParams {
    names.iter().cloned().zip(vars.iter().copied()).collect()
}

#[test]
fn cda_and_head_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = [1, 2, 4][seed as usize % 3];
        let cfg = HeadConfig {
            d_model: 8,
            n_heads: m,
            d_ffn: 6,
        };
        let params = CdaParams::init(cfg, seed).unwrap();
        let names: Vec<String> = params.params.keys().cloned().collect();
        let mut inputs: Vec<Tensor<f64>> = params.params.values().cloned().collect();
        for (name, t) in names.iter().zip(inputs.iter_mut()) {
            if name.starts_with("ln") {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        let len = rng.random_range(1..=6);
        inputs.push(random(&[len, 8], &mut rng));
        inputs.push(random(&[len, 8], &mut rng));
        let split = |v: &[Var]| {
            (
                bind(&names, &v[..v.len() - 2]),
                v[v.len() - 2],
                v[v.len() - 1],
            )
        };

        let err = gradcheck::check(
            |g, v| {
                let (bound, s, t) = split(v);
                let y = cda_on(g, &cfg, &bound, s, t, None)?;
                gradcheck::weighted_sum(g, y, seed)
            },
            &inputs,
        )
        .unwrap();
        assert!(err < 1e-4, "cda seed {seed}: {err}");

        let err = gradcheck::check(
            |g, v| {
                let (bound, s, t) = split(v);
                let f = head_forward_on(g, &cfg, &bound, s, t, None)?;
                g.mean(f)
            },
            &inputs,
        )
        .unwrap();
        assert!(err < 1e-4, "head seed {seed}: {err}");
    }
}

#[test]
fn teacher_representations_must_be_detached() {
    let cfg = HeadConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 4,
    };
    let backbone = BackboneConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ffn: 8,
        max_len: 16,
        frame_dim: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let student = ModelSnapshot::<f64>::init(backbone, 1).unwrap();
    let head = CdaParams::<f64>::init(cfg, 2).unwrap();
    let recon = init_recon_head::<f64>(&backbone, 3);
    let frames = random(&[6, 4], &mut rng);
    let plan = fusdom_core::backbone::MaskPlan::sample(6, 0.5, 1).unwrap();
    let mut g = Graph::new();
    let sp = g.bind(&student.params, true);
    let hp = g.bind(&head.params, true);
    let rp = g.bind(&recon, true);
    let t = g.param(random(&[6, 8], &mut rng));
    let err = fusdom_core::head::fusdom_loss_on(
        &mut g, &backbone, &sp, t, &cfg, &hp, &rp, &frames, &plan,
    );
    assert!(matches!(err, Err(Error::Contract(_))));
}

struct Setup {
    student: ModelSnapshot<f64>,
    teacher: ModelSnapshot<f64>,
    head: CdaParams<f64>,
    recon: ParamSet<f64>,
    batch: Vec<Tensor<f64>>,
}

fn setup(seed: u64) -> Setup {
    let config = BackboneConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ffn: 32,
        max_len: 64,
        frame_dim: 16,
    };
    let teacher = ModelSnapshot::init(config, seed).unwrap();
    let spec = make_domain("shifted", &DomainShape::default(), seed).unwrap();
    let batch = generate_split(&spec, Split::Pretrain, 8, seed)
        .into_iter()
        .map(|u| u.frames)
        .collect();
    Setup {
        student: teacher.clone(),
        teacher,
        head: CdaParams::init(
            HeadConfig {
                d_model: 16,
                n_heads: 2,
                d_ffn: 32,
            },
            mix(&[seed, 1]),
        )
        .unwrap(),
        recon: init_recon_head(&config, mix(&[seed, 2])),
        batch,
    }
}

fn add_into(acc: &mut ParamSet<f64>, g: ParamSet<f64>) {
    for (name, t) in g {
        match acc.get_mut(&name) {
            Some(a) => a
                .data_mut()
                .iter_mut()
                .zip(t.data())
                .for_each(|(x, y)| *x += y / 8.0),
            None => {
                acc.insert(name, t.map(|v| v / 8.0));
            }
        }
    }
}

/// Runs `steps` Adam steps on a fixed batch with fixed masks; returns the
/// mean batch loss before every step.
fn train(s: &mut Setup, steps: usize, lr: f64, mask: MaskConfig) -> Vec<f64> {
    let adam = AdamConfig::with_lr(lr);
    let (mut os, mut oh, mut or) = (Adam::new(adam), Adam::new(adam), Adam::new(adam));
    let mut losses = Vec::new();
    for _ in 0..steps {
        let (mut gs, mut gh, mut gr) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        let mut loss = 0.0;
        for (u, frames) in s.batch.iter().enumerate() {
            let step = fusdom_pretext_step(
                &s.student, &s.teacher, &s.head, &s.recon, frames, &mask, u as u64,
            )
            .unwrap();
            assert!(step.teacher_grads.is_empty());
            loss += step.loss / 8.0;
            add_into(&mut gs, step.student_grads);
            add_into(&mut gh, step.head_grads);
            add_into(&mut gr, step.recon_grads);
        }
        losses.push(loss);
        os.step(&mut s.student.params, &gs).unwrap();
        oh.step(&mut s.head.params, &gh).unwrap();
        or.step(&mut s.recon, &gr).unwrap();
    }
    losses
}

#[test]
fn fusdom_step_overfits_a_fixed_batch() {
    for seed in 0..3 {
        let mut s = setup(seed);
        let reference = s.teacher.clone();
        let losses = train(&mut s, 51, 2e-2, MaskConfig::default());
        let (first, last) = (losses[0], losses[50]);
        assert!(last <= 0.5 * first, "seed {seed}: {first} -> {last}");
        assert!(params_bit_eq(&s.teacher.params, &reference.params));
        assert!(!params_bit_eq(&s.student.params, &reference.params));
    }
}

#[test]
fn zero_mask_rate_is_a_no_op() {
    let mut s = setup(4);
    let before = (
        s.student.params.clone(),
        s.head.params.clone(),
        s.recon.clone(),
    );
    let mask = MaskConfig {
        mask_rate: 0.0,
        mask_teacher: false,
    };
    let losses = train(&mut s, 3, 1e-2, mask);
    assert!(losses.iter().all(|&l| l == 0.0));
    assert!(params_bit_eq(&s.student.params, &before.0));
    assert!(params_bit_eq(&s.head.params, &before.1));
    assert!(params_bit_eq(&s.recon, &before.2));
}

#[test]
fn masked_teacher_variant_also_keeps_teacher_frozen() {
    let mut s = setup(5);
    let reference = s.teacher.clone();
    let mask = MaskConfig {
        mask_rate: 0.3,
        mask_teacher: true,
    };
    train(&mut s, 3, 1e-2, mask);
    assert!(params_bit_eq(&s.teacher.params, &reference.params));
}

#[test]
fn config_mismatch_is_a_contract_error() {
    let s = setup(6);
    let other = ModelSnapshot::init(
        BackboneConfig {
            n_layers: 2,
            ..s.student.config
        },
        0,
    )
    .unwrap();
    let err = fusdom_pretext_step(
        &s.student,
        &other,
        &s.head,
        &s.recon,
        &s.batch[0],
        &MaskConfig::default(),
        0,
    );
    assert!(matches!(err, Err(Error::Contract(_))));
}
