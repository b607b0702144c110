use std::collections::VecDeque;
use std::f64::consts::LN_2;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;
use crate::segmenter::{forward, init_segmenter, SegmenterArch};
use crate::tensor::Tensor;

fn zero_last_layer(store: &mut ParamStore, prefix: &str) {
    let w = store.get_mut(&format!("{prefix}.conv5.w")).unwrap();
    w.data_mut().fill(0.0);
}

fn disc(in_ch: usize, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_discriminator(&mut s, "d", in_ch, 4, &mut ChaCha8Rng::seed_from_u64(seed));
    s
}

#[test]
fn discriminator_shapes_and_zero_input() {
    let store = disc(19, 0);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 19, 64, 256]));
    let y = discriminator_forward(&mut tape, &b, "d", x).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 8]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let odd = tape.constant(Tensor::zeros(&[1, 19, 33, 70]));
    let y = discriminator_forward(&mut tape, &b, "d", odd).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 3]);

    let small = tape.constant(Tensor::zeros(&[1, 19, 16, 64]));
    assert!(matches!(
        discriminator_forward(&mut tape, &b, "d", small),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn upscaling_reaches_minimum() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 8, 32]));
    let y = upscale_for_discriminator(&mut tape, x).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 32, 128]);
    let big = tape.constant(Tensor::zeros(&[1, 2, 40, 40]));
    assert_eq!(upscale_for_discriminator(&mut tape, big).unwrap(), big);
}

#[test]
fn zero_logits_give_ln2() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[2, 1, 2, 8]));
    let ld = d_loss(&mut tape, z, z).unwrap();
    let la = adv_loss(&mut tape, z);
    assert!((tape.value(ld).item() - LN_2).abs() < 1e-15);
    assert!((tape.value(la).item() - LN_2).abs() < 1e-15);
}

#[test]
fn saturated_logits_stay_finite() {
    let mut tape = Tape::new();
    let hi = tape.constant(Tensor::full(&[1, 1, 2, 2], 1e6));
    let lo = tape.constant(Tensor::full(&[1, 1, 2, 2], -1e6));
    let perfect = d_loss(&mut tape, hi, lo).unwrap();
    assert!(tape.value(perfect).item() < 1e-11);
    let caught = adv_loss(&mut tape, lo);
    let v = tape.value(caught).item();
    assert!(v.is_finite() && (v - (1e12f64).ln()).abs() < 1e-6);
}

#[test]
fn identical_inputs_never_beat_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let t = Tensor::randn(&[1, 1, 3, 5], rng.random_range(0.1..5.0), &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let l = d_loss(&mut tape, x, x).unwrap();
        assert!(tape.value(l).item() >= LN_2 - 1e-15);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let s = Tensor::randn(&[2, 1, 2, 3], 2.0, &mut rng);
        let t = Tensor::randn(&[2, 1, 2, 3], 2.0, &mut rng);
        let r = gradcheck::check(&[s, t.clone()], 1e-5, |tape, v| d_loss(tape, v[0], v[1])).unwrap();
        assert!(r.max_rel_error() < 1e-4);
        let r = gradcheck::check(&[t], 1e-5, |tape, v| Ok(adv_loss(tape, v[0]))).unwrap();
        assert!(r.max_rel_error() < 1e-4);
    }
}

#[test]
fn untrained_sdam_is_at_chance_and_routes_gradients() {
    let mut store = disc(3, 1);
    zero_last_layer(&mut store, "d");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let fs = tape.param(Tensor::randn(&[1, 3, 32, 64], 1.0, &mut rng));
    let ft = tape.param(Tensor::randn(&[1, 3, 32, 64], 1.0, &mut rng));
    let frozen = store.bind(&mut tape, false);
    let trainable = store.bind(&mut tape, true);
    let l = sdam(&mut tape, &frozen, &trainable, "d", fs, ft, false).unwrap();
    assert!((tape.value(l.l_d).item() - LN_2).abs() < 1e-15);
    assert!((tape.value(l.l_adv).item() - LN_2).abs() < 1e-15);

    let g = tape.backward(l.l_adv).unwrap();
    assert!(g.get(ft).is_some());
    assert!(g.get(fs).is_none());
    assert!(trainable.collect_grads(&tape, &g).values().all(|t| t.data().iter().all(|&v| v == 0.0)));

    let g = tape.backward(l.l_d).unwrap();
    assert!(g.get(fs).is_none() && g.get(ft).is_none());
    let dg = trainable.collect_grads(&tape, &g);
    assert!(dg["d.conv5.w"].data().iter().any(|&v| v != 0.0));
}

#[test]
fn mechanism_site_rules() {
    assert!(Mechanism::R.check_site(Site::Output).is_ok());
    assert!(matches!(Mechanism::R.check_site(Site::Feature), Err(Error::Config { .. })));
    assert!(matches!(Mechanism::A.check_site(Site::Output), Err(Error::Config { .. })));
    assert!(Mechanism::SA.check_site(Site::Feature).is_ok());
    assert_eq!(Mechanism::SA.discriminators(Site::Feature), ["da2.s", "da2.a"]);
}

fn adam_store(c: usize, gamma: f64) -> ParamStore {
    let mut s = ParamStore::new();
    init_adam(&mut s, "d", c, 2, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    *s.get_mut("d.att.gamma").unwrap() = Tensor::scalar(gamma);
    s
}

#[test]
fn adam_identity_and_row_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let b = adam_store(4, 0.0).bind(&mut tape, false);
    let x = tape.constant(f.clone());
    let (out, attn) = adam_reweight(&mut tape, &b, "d", x).unwrap();
    assert_eq!(tape.value(out), &f);
    let a = tape.value(attn);
    assert_eq!(a.shape(), &[1, 64, 64]);
    for row in a.data().chunks(64) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let b = adam_store(4, 0.9).bind(&mut tape, false);
    let k = tape.constant(Tensor::full(&[1, 4, 3, 3], -0.4));
    let (out, _) = adam_reweight(&mut tape, &b, "d", k).unwrap();
    let o = tape.value(out).data();
    for c in 0..4 {
        assert!(o[c * 9..(c + 1) * 9].iter().all(|&v| (v - o[c * 9]).abs() < 1e-12));
    }
}

/// Scores whose argmax is `labels[p]` with probability mass `margin` apart.
fn scores_from_labels(labels: &[usize], c: usize, h: usize, w: usize, margin: f64) -> Tensor {
    let mut t = Tensor::zeros(&[c, h, w]);
    for (p, &l) in labels.iter().enumerate() {
        t.data_mut()[l * h * w + p] = margin;
    }
    t
}

/// Breadth-first flood fill joining 4-neighbours with equal argmax and a
/// normalised probability distance within the threshold.
fn flood_fill_count(scores: &Tensor) -> (usize, Vec<usize>) {
    let [c, h, w] = scores.shape()[..] else { unreachable!() };
    let n = h * w;
    let probs: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            let v: Vec<f64> = (0..c).map(|k| scores.data()[k * n + p]).collect();
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect();
    let argmax = |p: usize| {
        (0..c)
            .max_by(|&a, &b| probs[p][a].total_cmp(&probs[p][b]).then(b.cmp(&a)))
            .unwrap()
    };
    let linked = |a: usize, b: usize| {
        let d: f64 = probs[a].iter().zip(&probs[b]).map(|(x, y)| (x - y).powi(2)).sum();
        argmax(a) == argmax(b) && (d.sqrt() / 2f64.sqrt()).min(1.0) <= BOUNDARY_THRESHOLD
    };
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = count;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (i, j) = (p / w, p % w);
            let mut nb = vec![];
            if i > 0 {
                nb.push(p - w);
            }
            if i + 1 < h {
                nb.push(p + w);
            }
            if j > 0 {
                nb.push(p - 1);
            }
            if j + 1 < w {
                nb.push(p + 1);
            }
            for q in nb {
                if comp[q] == usize::MAX && linked(p, q) {
                    comp[q] = count;
                    queue.push_back(q);
                }
            }
        }
        count += 1;
    }
    (count, comp)
}

#[test]
fn constant_scores_form_one_region() {
    let t = scores_from_labels(&[3; 30], 19, 5, 6, 2.0);
    let rd = rcb(&t).unwrap();
    assert_eq!(rd.num_regions, 1);
    assert!(rd.boundary.iter().all(|&b| b == 0.0));
    assert_eq!(rd.representatives[0], vec![0, 1, 2, 3]);
}

#[test]
fn half_planes_form_two_regions() {
    let (h, w) = (6, 8);
    let labels: Vec<usize> = (0..h * w).map(|p| usize::from(p % w >= w / 2)).collect();
    let rd = rcb(&scores_from_labels(&labels, 19, h, w, 6.0)).unwrap();
    assert_eq!(rd.num_regions, 2);
    for (r, reps) in rd.representatives.iter().enumerate() {
        assert_eq!(reps.len(), 4);
        for &p in reps {
            assert_eq!(rd.region_id[p], r);
            assert_eq!(usize::from(p % w >= w / 2), labels[reps[0]]);
        }
    }
}

#[test]
fn checkerboard_blocks_match_flood_fill() {
    let labels: Vec<usize> = (0..64).map(|p| ((p / 8) / 2 + (p % 8) / 2) % 2).collect();
    let t = scores_from_labels(&labels, 19, 8, 8, 5.0);
    let rd = rcb(&t).unwrap();
    let (count, _) = flood_fill_count(&t);
    assert_eq!(count, 16);
    assert_eq!(rd.num_regions, count);
}

#[test]
fn empty_or_malformed_scores_rejected() {
    assert!(matches!(rcb(&Tensor::zeros(&[19, 0, 4])), Err(Error::InvalidArgument(_))));
    assert!(matches!(rcb(&Tensor::zeros(&[4, 4])), Err(Error::InvalidArgument(_))));
}

fn random_scores(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    // piecewise-smooth maps so that both merges and splits occur
    let centers: Vec<(f64, f64, usize)> = (0..rng.random_range(1..5))
        .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), rng.random_range(0..c)))
        .collect();
    let mut t = Tensor::zeros(&[c, h, w]);
    let scale = rng.random_range(0.5..8.0);
    for i in 0..h {
        for j in 0..w {
            let (_, _, k) = centers
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - i as f64).powi(2) + (a.1 - j as f64).powi(2);
                    let db = (b.0 - i as f64).powi(2) + (b.1 - j as f64).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            for ch in 0..c {
                let noise: f64 = rng.random_range(-0.3..0.3);
                let base = if ch == *k { scale } else { 0.0 };
                t.data_mut()[ch * h * w + i * w + j] = base + noise;
            }
        }
    }
    t
}

#[test]
fn regions_partition_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let t = random_scores(&mut rng, 5, h, w);
        let rd = rcb(&t).unwrap();
        rd.validate(h, w).unwrap();
        let mut seen = vec![0usize; h * w];
        for r in 0..rd.num_regions {
            for (p, &id) in rd.region_id.iter().enumerate() {
                if id == r {
                    seen[p] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert!(rd.boundary.iter().all(|&b| (0.0..=1.0).contains(&b)));
        let (count, comp) = flood_fill_count(&t);
        assert_eq!(rd.num_regions, count);
        // same grouping, not merely the same count
        for a in 0..h * w {
            for b in 0..h * w {
                assert_eq!(rd.region_id[a] == rd.region_id[b], comp[a] == comp[b]);
            }
        }
    }
}

proptest! {
    #[test]
    fn every_region_has_bounded_representatives(seed in 0u64..10_000, h in 1usize..10, w in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rd = rcb(&random_scores(&mut rng, 4, h, w)).unwrap();
        for (r, reps) in rd.representatives.iter().enumerate() {
            let size = rd.region_id.iter().filter(|&&id| id == r).count();
            prop_assert_eq!(reps.len(), size.min(MAX_REPRESENTATIVES));
            for win in reps.windows(2) {
                prop_assert!(rd.confidence[win[0]] >= rd.confidence[win[1]]);
            }
        }
    }
}

fn fusion(c: usize) -> ParamStore {
    let mut s = ParamStore::new();
    init_rib_fusion(&mut s, "rc", c);
    s
}

#[test]
fn single_region_summary_is_global_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (c, h, w) = (3, 4, 5);
    let f = Tensor::randn(&[1, c, h, w], 1.0, &mut rng);
    let rd = rcb(&Tensor::zeros(&[19, h, w])).unwrap();
    assert_eq!(rd.num_regions, 1);
    let mut tape = Tape::new();
    let b = fusion(c).bind(&mut tape, false);
    let x = tape.constant(f.clone());
    let out = rib(&mut tape, &b, "rc", &rd, x).unwrap();
    let s = tape.value(out.summaries).data();
    for ch in 0..c {
        let mean: f64 = f.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
        assert!((s[ch] - mean).abs() < 1e-14);
    }
    // identity fusion
    assert_eq!(tape.value(out.out), &f);
}

#[test]
fn two_region_attention_matches_softmax_oracle() {
    let (c, h, w) = (2, 4, 4);
    let labels: Vec<usize> = (0..h * w).map(|p| usize::from(p % w >= 2)).collect();
    let rd = rcb(&scores_from_labels(&labels, 19, h, w, 4.0)).unwrap();
    assert_eq!(rd.num_regions, 2);
    let (a, bvec) = ([0.7, -1.2], [0.3, 0.9]);
    let mut f = Tensor::zeros(&[1, c, h, w]);
    for p in 0..h * w {
        let v = if labels[p] == 0 { a } else { bvec };
        for ch in 0..c {
            f.data_mut()[ch * h * w + p] = v[ch];
        }
    }
    let mut tape = Tape::new();
    let b = fusion(c).bind(&mut tape, false);
    let x = tape.constant(f);
    let out = rib(&mut tape, &b, "rc", &rd, x).unwrap();

    let s = [a, bvec];
    let dot = |x: [f64; 2], y: [f64; 2]| (x[0] * y[0] + x[1] * y[1]) / 2f64.sqrt();
    let attn = tape.value(out.attention).data();
    let ctx = tape.value(out.context).data();
    for r in 0..2 {
        let e = [dot(s[r], s[0]).exp(), dot(s[r], s[1]).exp()];
        let z = e[0] + e[1];
        for u in 0..2 {
            assert!((attn[r * 2 + u] - e[u] / z).abs() < 1e-14);
        }
        for ch in 0..c {
            let want = (e[0] * s[0][ch] + e[1] * s[1][ch]) / z;
            assert!((ctx[ch * 2 + r] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn partition_violation_is_contract_error() {
    let mut rd = rcb(&Tensor::zeros(&[19, 3, 3])).unwrap();
    rd.region_id[4] = 7;
    let mut tape = Tape::new();
    let b = fusion(2).bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(matches!(rib(&mut tape, &b, "rc", &rd, x), Err(Error::Contract(_))));
}

#[test]
fn rib_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..20 {
        let (c, h, w) = (3, 4, 5);
        let rd = rcb(&random_scores(&mut rng, 4, h, w)).unwrap();
        let f = Tensor::randn(&[1, c, h, w], 1.0, &mut rng);
        let fw = Tensor::randn(&[c, 2 * c, 1, 1], 0.5, &mut rng);
        let fb = Tensor::randn(&[c], 0.5, &mut rng);
        let proj = Tensor::randn(&[c * h * w], 1.0, &mut rng);
        let r = gradcheck::check(&[f, fw, fb], 1e-5, |tape, v| {
            let b = Bound::from_pairs([("rc.w".to_string(), v[1]), ("rc.b".to_string(), v[2])]);
            let out = rib(tape, &b, "rc", &rd, v[0])?;
            gradcheck::project(tape, out.out, &proj)
        })
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "trial {trial}: {:?}", r.rel_errors);
    }
}

fn small_arch() -> SegmenterArch {
    SegmenterArch {
        encoder_widths: [4, 4, 8, 8],
        decoder_width: 8,
        attention: vec![],
        reduction_ratio: 8,
    }
}

#[test]
fn identity_fusion_reproduces_stage_one() {
    let mut seg = init_segmenter(&small_arch(), 3).unwrap();
    init_rib_fusion(&mut seg.params, "rc", 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let b = seg.params.bind(&mut tape, true);
    let x = tape.constant(Tensor::randn(&[2, 3, 32, 64], 1.0, &mut rng).map(|v| v.abs().min(1.0)));
    let taps = forward(&mut tape, &b, &seg.arch, x).unwrap();
    let st = rcdam_stage2(&mut tape, &b, "rc", &taps).unwrap();
    assert_eq!(st.decisions.len(), 2);
    assert!(tape.value(st.logits).max_abs_diff(tape.value(taps.logits)) < 1e-6);
}

#[test]
fn constant_logits_are_a_fixed_point() {
    let seg = {
        let mut s = init_segmenter(&small_arch(), 4).unwrap();
        init_rib_fusion(&mut s.params, "rc", 8);
        s
    };
    let mut tape = Tape::new();
    let b = seg.params.bind(&mut tape, false);
    let x = tape.constant(Tensor::full(&[1, 3, 32, 32], 0.0));
    let taps = forward(&mut tape, &b, &seg.arch, x).unwrap();
    let st = rcdam_stage2(&mut tape, &b, "rc", &taps).unwrap();
    assert_eq!(st.decisions[0].num_regions, 1);
    assert_eq!(tape.value(st.logits), tape.value(taps.logits));
}

#[test]
fn two_stage_discriminators_start_at_chance() {
    let mut seg = init_segmenter(&small_arch(), 5).unwrap();
    init_rib_fusion(&mut seg.params, "rc", 8);
    let mut d = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for p in ["da1.s", "da1.r"] {
        init_discriminator(&mut d, p, 19, 4, &mut rng);
        zero_last_layer(&mut d, p);
    }
    let mut tape = Tape::new();
    let g = seg.params.bind(&mut tape, true);
    let frozen = d.bind(&mut tape, false);
    let trainable = d.bind(&mut tape, true);
    let xs = tape.constant(Tensor::randn(&[1, 3, 32, 64], 0.5, &mut rng));
    let xt = tape.constant(Tensor::randn(&[1, 3, 32, 64], 0.5, &mut rng));
    let ts = forward(&mut tape, &g, &seg.arch, xs).unwrap();
    let tt = forward(&mut tape, &g, &seg.arch, xt).unwrap();
    let s2s = rcdam_stage2(&mut tape, &g, "rc", &ts).unwrap();
    let s2t = rcdam_stage2(&mut tape, &g, "rc", &tt).unwrap();
    let ps = tape.softmax_channels(ts.logits).unwrap();
    let pt = tape.softmax_channels(tt.logits).unwrap();
    let l1 = sdam(&mut tape, &frozen, &trainable, "da1.s", ps, pt, false).unwrap();
    let ps2 = tape.softmax_channels(s2s.logits).unwrap();
    let pt2 = tape.softmax_channels(s2t.logits).unwrap();
    let l2 = sdam(&mut tape, &frozen, &trainable, "da1.r", ps2, pt2, false).unwrap();
    for l in [l1, l2] {
        assert!((tape.value(l.l_d).item() - LN_2).abs() < 1e-15);
        assert!((tape.value(l.l_adv).item() - LN_2).abs() < 1e-15);
    }
}
