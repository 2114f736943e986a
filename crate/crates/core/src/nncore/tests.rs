use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    t
}

#[test]
fn matmul_identity_and_selector() {
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(matmul(&eye, &m).unwrap().data(), m.data());

    let sel = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let col = Tensor::from_rows(&[vec![2.0], vec![5.0]]).unwrap();
    assert_eq!(matmul(&sel, &col).unwrap().data(), &[2.0]);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut reg = ParamRegistry::new();
    let a = reg.register("a", random_tensor(&mut rng, &[3, 4]), false).unwrap();
    let b = reg.register("b", random_tensor(&mut rng, &[4, 2]), false).unwrap();
    let weights = random_tensor(&mut rng, &[3, 2]);
    let report = grad_check(&reg, 1e-5, 1e-6, |t| {
        let (va, vb) = (t.param(a), t.param(b));
        let c = t.matmul(va, vb)?;
        let w = t.constant(weights.clone());
        let p = t.mul(c, w)?;
        Ok(t.sum(p))
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn softmax_examples() {
    let s = softmax_rows(&Tensor::row(vec![0.0, 0.0]));
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = softmax_rows(&Tensor::row(vec![1000.0, 1000.0]));
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = softmax_rows(&Tensor::row(vec![0.0, 3f64.ln()]));
    assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-12);
    assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-12);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e6f64..1e6, 1..16)) {
        let s = softmax_rows(&Tensor::row(row));
        let total: f64 = s.data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(s.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}

#[test]
fn layer_norm_examples() {
    let g = Tensor::filled(&[3], 1.0);
    let b = Tensor::zeros(&[3]);
    let out = layer_norm(&Tensor::row(vec![4.0, 4.0, 4.0]), &g, &b, LAYER_NORM_EPS).unwrap();
    assert!(out.data().iter().all(|v| *v == 0.0));

    let g = Tensor::filled(&[2], 1.0);
    let b = Tensor::zeros(&[2]);
    let out = layer_norm(&Tensor::row(vec![1.0, 3.0]), &g, &b, LAYER_NORM_EPS).unwrap();
    // variance 1, so eps only shifts the result by ~5e-6
    assert_abs_diff_eq!(out.data()[0], -1.0, epsilon = 1e-5);
    assert_abs_diff_eq!(out.data()[1], 1.0, epsilon = 1e-5);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut reg = ParamRegistry::new();
    let x = reg.register("x", random_tensor(&mut rng, &[3, 5]), false).unwrap();
    let g = reg.register("g", random_tensor(&mut rng, &[5]), true).unwrap();
    let b = reg.register("b", random_tensor(&mut rng, &[5]), true).unwrap();
    let w = random_tensor(&mut rng, &[3, 5]);
    let report = grad_check(&reg, 1e-5, 1e-5, |t| {
        let (vx, vg, vb) = (t.param(x), t.param(g), t.param(b));
        let y = t.layer_norm(vx, vg, vb, LAYER_NORM_EPS)?;
        let wc = t.constant(w.clone());
        let p = t.mul(y, wc)?;
        Ok(t.sum(p))
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn grad_check_quadratic_is_exact() {
    let mut reg = ParamRegistry::new();
    let w = reg
        .register("w", Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap(), false)
        .unwrap();
    let report = grad_check(&reg, 1e-5, 1e-8, |t| {
        let v = t.param(w);
        let sq = t.mul(v, v)?;
        Ok(t.sum(sq))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-8, "{report:?}");
    assert_eq!(report.num_checked, 4);
}

#[test]
fn grad_check_rejects_dropout() {
    let mut reg = ParamRegistry::new();
    let w = reg.register("w", Tensor::filled(&[2, 2], 1.0), false).unwrap();
    let err = grad_check(&reg, 1e-5, 1e-6, |t| {
        t.enable_dropout(1);
        let v = t.param(w);
        let d = t.dropout(v, 0.5);
        Ok(t.sum(d))
    })
    .unwrap_err();
    assert!(matches!(err, Error::Nondeterministic(_)));
    assert!(err.to_string().contains("nondeterministic function"));
}

#[test]
fn grad_check_reports_non_finite_loss() {
    let mut reg = ParamRegistry::new();
    let w = reg.register("w", Tensor::filled(&[1], 0.0), false).unwrap();
    let err = grad_check(&reg, 1e-5, 1e-6, |t| {
        let v = t.param(w);
        let inf = t.constant(Tensor::scalar(f64::INFINITY));
        let s = t.add(v, inf)?;
        Ok(t.sum(s))
    })
    .unwrap_err();
    assert!(matches!(err, Error::Numeric { .. }));
}

#[test]
fn dropout_is_identity_without_rng() {
    let reg = ParamRegistry::new();
    let mut t = Tape::new(&reg);
    let x = t.constant(Tensor::filled(&[2, 3], 2.0));
    assert_eq!(t.dropout(x, 0.5), x);
}

#[test]
fn dropout_mask_is_seeded_and_inverted() {
    let reg = ParamRegistry::new();
    let run = |seed| {
        let mut t = Tape::with_dropout(&reg, seed);
        let x = t.constant(Tensor::filled(&[20, 20], 1.0));
        let y = t.dropout(x, 0.25);
        t.value(y).data().to_vec()
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert!(a.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    let kept = a.iter().filter(|&&v| v > 0.0).count() as f64 / a.len() as f64;
    assert!((kept - 0.75).abs() < 0.08);
}

#[test]
fn masked_attention_ignores_padding_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let reg = ParamRegistry::new();
    let (l, d) = (3, 4);
    let q = random_tensor(&mut rng, &[l, d]);
    let k = random_tensor(&mut rng, &[l, d]);
    let v = random_tensor(&mut rng, &[l, d]);

    let mut t = Tape::new(&reg);
    let (vq, vk, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let out = t.attention(vq, vk, vv, 1, l, 2, &[true; 3]).unwrap();
    let unpadded = t.value(out).clone();

    let pad = |m: &Tensor| {
        let mut rows = m.to_rows();
        rows.push(vec![9.0; d]);
        rows.push(vec![-7.0; d]);
        Tensor::from_rows(&rows).unwrap()
    };
    let mut t = Tape::new(&reg);
    let (vq, vk, vv) = (t.constant(pad(&q)), t.constant(pad(&k)), t.constant(pad(&v)));
    let mask = [true, true, true, false, false];
    let out = t.attention(vq, vk, vv, 1, 5, 2, &mask).unwrap();
    assert_eq!(&t.value(out).data()[..l * d], unpadded.data());
}

#[test]
fn pool_strategies() {
    let reg = ParamRegistry::new();
    let mut t = Tape::new(&reg);
    let x = t
        .constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![9.0, 9.0]]).unwrap());
    let mean = t.pool(x, 3, &[true, true, false], Pooling::Mean).unwrap();
    assert_eq!(t.value(mean).data(), &[2.0, 3.0]);
    let max = t.pool(x, 3, &[true, true, false], Pooling::Max).unwrap();
    assert_eq!(t.value(max).data(), &[3.0, 4.0]);
    let cls = t.pool(x, 3, &[true, true, false], Pooling::Cls).unwrap();
    assert_eq!(t.value(cls).data(), &[1.0, 2.0]);
    assert!(matches!(
        t.pool(x, 3, &[false, false, false], Pooling::Mean),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn bce_is_stable() {
    assert_abs_diff_eq!(bce_with_logit(0.0, 1.0), 2f64.ln(), epsilon = 1e-15);
    let expected = (-20f64).exp().ln_1p();
    assert_abs_diff_eq!(bce_with_logit(20.0, 1.0), expected, epsilon = 1e-20);
    assert!((bce_with_logit(20.0, 1.0) - 2.06e-9).abs() < 1e-11);
    assert_abs_diff_eq!(bce_with_logit(-20.0, 1.0), 20.0, epsilon = 1e-8);
    assert!(bce_with_logit(1e4, 0.0).is_finite());
}

#[test]
fn cosine_rejects_zero_norm() {
    let reg = ParamRegistry::new();
    let mut t = Tape::new(&reg);
    let u = t.constant(Tensor::row(vec![0.0, 0.0]));
    let v = t.constant(Tensor::row(vec![1.0, 0.0]));
    assert!(matches!(t.cosine_rows(u, v), Err(Error::Numeric { .. })));
}

/// Each differentiable op, wrapped as `sum(op(params) ⊙ R)` for a random
/// constant `R`, checked against central differences.
fn op_loss(which: usize, t: &mut Tape<'_>, ids: &[ParamId], r: &Tensor) -> crate::error::Result<Var> {
    let p: Vec<Var> = ids.iter().map(|&i| t.param(i)).collect();
    let y = match which {
        0 => t.matmul(p[0], p[1])?,
        1 => t.matmul_nt(p[0], p[2])?,
        2 => t.add(p[0], p[3])?,
        3 => t.sub(p[0], p[3])?,
        4 => t.mul(p[0], p[3])?,
        5 => t.add_row(p[0], p[4])?,
        6 => t.scale(p[0], -1.7),
        7 => t.relu(p[0]),
        8 => t.gelu(p[0]),
        9 => t.layer_norm(p[0], p[4], p[5], LAYER_NORM_EPS)?,
        10 => t.softmax_rows(p[0]),
        11 => t.gather_rows(p[0], &[2, 0, 2, 1])?,
        12 => t.concat_cols(&[p[0], p[3], p[0]])?,
        13 => t.attention(p[0], p[3], p[6], 1, 4, 2, &[true, true, true, false])?,
        14 => t.pool(p[0], 2, &[true, true, true, false], Pooling::Mean)?,
        15 => t.pool(p[0], 2, &[true, true, true, false], Pooling::Max)?,
        16 => t.pool(p[0], 2, &[true, true, true, false], Pooling::Cls)?,
        17 => t.cosine_rows(p[0], p[3])?,
        18 => {
            let col = t.matmul(p[0], p[7])?;
            return t.bce_with_logits(col, &[1.0, 0.0, 1.0, 0.0]);
        }
        19 => {
            let col = t.matmul(p[0], p[7])?;
            return t.mse(col, &[1.0, 0.0, 0.5, -0.5]);
        }
        20 => return Ok(t.mean(p[0])),
        _ => unreachable!(),
    };
    let rc = t.constant(random_like(r, t.value(y).shape()));
    let prod = t.mul(y, rc)?;
    Ok(t.sum(prod))
}

fn random_like(seed_src: &Tensor, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_src.data()[0].to_bits());
    random_tensor(&mut rng, shape)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = ParamRegistry::new();
        let shapes: [&[usize]; 8] = [&[4, 6], &[6, 3], &[5, 6], &[4, 6], &[6], &[6], &[4, 6], &[6, 1]];
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| reg.register(format!("p{i}"), random_tensor(&mut rng, s), i == 4 || i == 5).unwrap())
            .collect();
        let r = random_tensor(&mut rng, &[1]);
        for which in 0..=20 {
            let report = grad_check(&reg, 1e-5, 1e-4, |t| op_loss(which, t, &ids, &r)).unwrap();
            prop_assert!(report.passed(), "op {} failed: {:?}", which, report);
        }
    }
}
