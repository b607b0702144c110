use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check, project};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn projected<F>(inputs: Vec<Tensor>, out_numel: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let w = Tensor::randn(&[out_numel], 1.0, &mut rng(seed + 1000));
    let res = check(&inputs, STEP, |t, v| {
        let y = f(t, v)?;
        if t.value(y).numel() == 1 {
            Ok(y)
        } else {
            project(t, y, &w)
        }
    })
    .unwrap();
    res.max_rel_error()
}

#[test]
fn conv2d_gradients_strided_and_padded() {
    for (k, stride, pad) in [(3, 2, 1), (3, 1, 1), (1, 1, 0), (4, 2, 1)] {
        let mut r = rng(k as u64 * 10 + stride as u64);
        let x = Tensor::randn(&[2, 3, 5, 6], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, k, k], 0.5, &mut r);
        let b = Tensor::randn(&[4], 0.5, &mut r);
        let ho = (5 + 2 * pad - k) / stride + 1;
        let wo = (6 + 2 * pad - k) / stride + 1;
        let err = projected(vec![x, w, b], 2 * 4 * ho * wo, 7, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        });
        assert!(err < TOL, "k={k} s={stride} p={pad}: {err}");
    }
}

#[test]
fn resize_gradients_up_and_down() {
    let mut r = rng(3);
    let x = Tensor::randn(&[1, 2, 4, 6], 1.0, &mut r);
    for (oh, ow) in [(8, 12), (3, 5), (4, 13)] {
        let err = projected(vec![x.clone()], 2 * oh * ow, 9, |t, v| {
            t.resize_bilinear(v[0], oh, ow)
        });
        assert!(err < TOL, "{oh}x{ow}: {err}");
    }
}

#[test]
fn softmax_and_matmul_gradients() {
    let mut r = rng(5);
    let x = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut r);
    assert!(projected(vec![x.clone()], 72, 1, |t, v| t.softmax_channels(v[0])) < TOL);
    let y = Tensor::randn(&[2, 3, 5], 1.0, &mut r);
    assert!(projected(vec![y], 30, 2, |t, v| Ok(t.softmax_last(v[0]))) < TOL);

    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let a = Tensor::randn(&a_shape, 1.0, &mut r);
        let b = Tensor::randn(&b_shape, 1.0, &mut r);
        let err = projected(vec![a, b], 30, 3, |t, v| t.matmul(v[0], v[1], ta, tb));
        assert!(err < TOL, "ta={ta} tb={tb}: {err}");
    }
}

#[test]
fn structural_op_gradients() {
    let mut r = rng(11);
    let a = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
    let b = Tensor::randn(&[2, 1, 2, 2], 1.0, &mut r);
    let s = Tensor::randn(&[1], 1.0, &mut r);
    let err = projected(vec![a.clone(), b, s], 2 * 4 * 4, 4, |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let n = t.narrow(c, 1, 1, 3)?;
        let k = t.scale_by(n, v[2])?;
        let l = t.leaky_relu(k, 0.2);
        let r = t.relu(v[0]);
        let m = t.add(l, r)?;
        let z = t.scale(m, 0.7);
        t.concat(&[z, v[1]], 1)
    });
    assert!(err < TOL, "{err}");

    let x = Tensor::randn(&[2, 4, 5], 1.0, &mut r);
    assert!(projected(vec![x.clone()], 40, 5, |t, v| t.l2_normalize(v[0], 1)) < TOL);
    assert!(projected(vec![x], 40, 6, |t, v| t.l2_normalize(v[0], 2)) < TOL);
}

#[test]
fn segment_and_gather_gradients() {
    let mut r = rng(13);
    let x = Tensor::randn(&[3, 6], 1.0, &mut r);
    let segments: Arc<[usize]> = vec![0, 1, 1, 2, 0, 2].into();
    let weights: Arc<[f64]> = vec![0.5, 0.25, 0.75, 1.0, 0.5, 0.0].into();
    let index: Arc<[usize]> = vec![2, 0, 0, 1].into();
    let err = projected(vec![x], 12, 8, |t, v| {
        let s = t.segment_sum(v[0], segments.clone(), weights.clone(), 3)?;
        t.gather_last(s, index.clone())
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn loss_gradients() {
    let mut r = rng(17);
    let logits = Tensor::randn(&[2, 4, 3, 3], 1.5, &mut r);
    let labels: Arc<[u8]> = (0..18u8)
        .map(|i| if i % 5 == 0 { IGNORE_LABEL } else { i % 4 })
        .collect::<Vec<_>>()
        .into();
    let err = projected(vec![logits.clone()], 1, 0, |t, v| {
        t.cross_entropy(v[0], labels.clone())
    });
    assert!(err < TOL, "ce {err}");
    for target in [true, false] {
        let err = projected(vec![logits.clone()], 1, 0, |t, v| {
            Ok(t.bce_with_logits(v[0], target))
        });
        assert!(err < TOL, "bce {target}: {err}");
    }
    let err = projected(vec![logits.clone(), logits], 1, 0, |t, v| {
        let a = t.mean(v[0]);
        let b = t.bce_with_logits(v[1], true);
        t.weighted_sum(&[(a, 0.3), (b, -1.2)])
    });
    assert!(err < TOL, "weighted {err}");
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::full(&[1, 1, 2, 2], 1.0));
    let c = tape.constant(Tensor::full(&[1, 1, 2, 2], 2.0));
    let s = tape.add(p, c).unwrap();
    let d = tape.detach(s);
    let m1 = tape.mean(s);
    let m2 = tape.mean(d);
    let loss = tape.weighted_sum(&[(m1, 1.0), (m2, 1.0)]).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(d).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[0.25; 4]);
}

#[test]
fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[1, 19, 2, 2], 0.3));
    let labels: Arc<[u8]> = vec![IGNORE_LABEL; 4].into();
    let loss = tape.cross_entropy(x, labels).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3, 4]));
    let b = tape.constant(Tensor::zeros(&[2, 5, 4]));
    assert!(tape.matmul(a, b, false, false).is_err());
    assert!(tape.add(a, b).is_err());
    let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    assert!(tape.conv2d(x, w, None, 1, 1).is_err());
    let l = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
    assert!(tape.cross_entropy(l, vec![7u8].into()).is_err());
}
