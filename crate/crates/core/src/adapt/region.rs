//! Region construction (RCB) and region interaction (RIB).
//!
//! RCB turns a class-score map into a partition of the grid: 4-neighbours
//! join when they share an argmax class and their probability vectors are
//! close. RIB summarises every region, lets the summaries attend to one
//! another, and broadcasts the result back to the pixels, where a 1x1
//! fusion merges it with the incoming features.

use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{conv, Bound, ParamStore};
use crate::segmenter::{decode, ForwardTaps};
use crate::tensor::Tensor;

/// Largest normalised probability jump still treated as the same region.
pub const BOUNDARY_THRESHOLD: f64 = 0.1;
pub const MAX_REPRESENTATIVES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RegionDecision {
    pub height: usize,
    pub width: usize,
    /// Region index per pixel (row-major), numbered in order of first
    /// appearance.
    pub region_id: Vec<usize>,
    pub num_regions: usize,
    /// Representative pixel indices per region, most confident first.
    pub representatives: Vec<Vec<usize>>,
    /// Per-pixel largest normalised probability difference to a
    /// 4-neighbour, in `[0, 1]`.
    pub boundary: Vec<f64>,
    /// Per-pixel probability of the argmax class.
    pub confidence: Vec<f64>,
}

struct DisjointSets(Vec<usize>);

impl DisjointSets {
    fn find(&mut self, mut a: usize) -> usize {
        while self.0[a] != a {
            self.0[a] = self.0[self.0[a]];
            a = self.0[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Region decision for a `[classes, h, w]` score map.
pub fn rcb(logits: &Tensor) -> Result<RegionDecision> {
    let [c, h, w] = logits.shape()[..] else {
        return Err(Error::invalid(format!(
            "rcb expects [classes, h, w] scores, got {:?}",
            logits.shape()
        )));
    };
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("rcb: empty score map"));
    }
    if !logits.all_finite() {
        return Err(Error::numeric("rcb: non-finite scores"));
    }
    let n = h * w;
    let d = logits.data();
    // pixel-major probabilities
    let mut prob = vec![0.0; n * c];
    let mut label = vec![0usize; n];
    let mut confidence = vec![0.0; n];
    for p in 0..n {
        let row = &mut prob[p * c..(p + 1) * c];
        let mut best = 0;
        for k in 0..c {
            row[k] = d[k * n + p];
            if row[k] > row[best] {
                best = k;
            }
        }
        let m = row[best];
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
        label[p] = best;
        confidence[p] = row[best];
    }
    let edge = |a: usize, b: usize| -> f64 {
        let (pa, pb) = (&prob[a * c..(a + 1) * c], &prob[b * c..(b + 1) * c]);
        let s: f64 = pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum();
        (s.sqrt() / std::f64::consts::SQRT_2).min(1.0)
    };

    let mut boundary = vec![0.0f64; n];
    let mut sets = DisjointSets((0..n).collect());
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let mut neighbours = [None, None];
            if j + 1 < w {
                neighbours[0] = Some(p + 1);
            }
            if i + 1 < h {
                neighbours[1] = Some(p + w);
            }
            for q in neighbours.into_iter().flatten() {
                let e = edge(p, q);
                boundary[p] = boundary[p].max(e);
                boundary[q] = boundary[q].max(e);
                if label[p] == label[q] && e <= BOUNDARY_THRESHOLD {
                    sets.union(p, q);
                }
            }
        }
    }

    let mut root_to_region = vec![usize::MAX; n];
    let mut region_id = vec![0; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for p in 0..n {
        let r = sets.find(p);
        if root_to_region[r] == usize::MAX {
            root_to_region[r] = members.len();
            members.push(Vec::new());
        }
        region_id[p] = root_to_region[r];
        members[region_id[p]].push(p);
    }
    let representatives = members
        .into_iter()
        .map(|mut m| {
            // stable: equal confidences keep raster order
            m.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]));
            m.truncate(MAX_REPRESENTATIVES);
            m
        })
        .collect::<Vec<_>>();
    Ok(RegionDecision {
        height: h,
        width: w,
        num_regions: representatives.len(),
        region_id,
        representatives,
        boundary,
        confidence,
    })
}

impl RegionDecision {
    /// Checks that the decision is a partition of an `h x w` grid with at
    /// least one representative inside every region.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(format!("region decision: {m}")));
        if (self.height, self.width) != (h, w) {
            return fail(format!(
                "decision is {}x{}, features are {w}x{h}",
                self.width, self.height
            ));
        }
        let n = h * w;
        if self.region_id.len() != n || self.confidence.len() != n || self.boundary.len() != n {
            return fail("per-pixel maps do not cover the grid".into());
        }
        if self.representatives.len() != self.num_regions {
            return fail("representative lists do not match the region count".into());
        }
        let mut size = vec![0usize; self.num_regions];
        for &r in &self.region_id {
            if r >= self.num_regions {
                return fail(format!("region id {r} out of range"));
            }
            size[r] += 1;
        }
        for (r, reps) in self.representatives.iter().enumerate() {
            if size[r] == 0 {
                return fail(format!("region {r} is empty"));
            }
            if reps.is_empty() {
                return fail(format!("region {r} has no representative"));
            }
            if reps.iter().any(|&p| p >= n || self.region_id[p] != r) {
                return fail(format!("region {r} has a representative outside it"));
            }
        }
        Ok(())
    }
}

/// Identity fusion: weights `[I, 0]` over `[features, context]`, zero bias.
pub fn init_rib_fusion(store: &mut ParamStore, prefix: &str, channels: usize) {
    let mut w = Tensor::zeros(&[channels, 2 * channels, 1, 1]);
    for c in 0..channels {
        w.data_mut()[c * 2 * channels + c] = 1.0;
    }
    store.insert(format!("{prefix}.w"), w);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[channels]));
}

#[derive(Clone, Copy, Debug)]
pub struct RibOut {
    /// `[1, c, h, w]` fused features.
    pub out: Var,
    /// `[1, c, regions]` confidence-weighted region summaries.
    pub summaries: Var,
    /// `[1, regions, regions]` attention between regions.
    pub attention: Var,
    /// `[1, c, regions]` summaries after cross-region aggregation.
    pub context: Var,
}

/// Region interaction on one `[1, c, h, w]` feature map.
///
/// 1. Each region's representatives take the confidence-weighted mean of
///    the region's features.
/// 2. Every representative attends over all representatives with scaled
///    dot-product weights; representatives of one region are identical,
///    so region `u` enters each softmax with multiplicity `k_u`.
/// 3. Pixels receive their region's aggregated representative, which the
///    `<prefix>` 1x1 conv fuses with the original features.
pub fn rib(tape: &mut Tape, bound: &Bound, prefix: &str, rd: &RegionDecision, f: Var) -> Result<RibOut> {
    let (b, c, h, w) = tape.value(f).dims4()?;
    if b != 1 {
        return Err(Error::invalid("rib operates on one feature map at a time"));
    }
    rd.validate(h, w)?;
    let n = h * w;
    let r = rd.num_regions;

    let mut mass = vec![0.0; r];
    for (p, &id) in rd.region_id.iter().enumerate() {
        mass[id] += rd.confidence[p];
    }
    let weights: Vec<f64> = rd
        .region_id
        .iter()
        .zip(&rd.confidence)
        .map(|(&id, &conf)| conf / mass[id])
        .collect();
    let flat = tape.reshape(f, &[1, c, n])?;
    let summaries = tape.segment_sum(
        flat,
        Arc::from(rd.region_id.as_slice()),
        Arc::from(weights),
        r,
    )?;

    let energy = tape.matmul(summaries, summaries, true, false)?;
    let energy = tape.scale(energy, 1.0 / (c as f64).sqrt());
    let log_mult: Vec<f64> = rd
        .representatives
        .iter()
        .map(|reps| (reps.len() as f64).ln())
        .collect();
    let bias = tape.constant(Tensor::new(&[1, r, r], log_mult.repeat(r))?);
    let energy = tape.add(energy, bias)?;
    let attention = tape.softmax_last(energy);
    let context = tape.matmul(summaries, attention, false, true)?;

    let spread = tape.gather_last(context, Arc::from(rd.region_id.as_slice()))?;
    let spread = tape.reshape(spread, &[1, c, h, w])?;
    let cat = tape.concat(&[f, spread], 1)?;
    let out = conv(tape, bound, prefix, cat, 1, 0)?;
    Ok(RibOut {
        out,
        summaries,
        attention,
        context,
    })
}

/// Second-stage prediction of the regional-context scheme.
#[derive(Clone, Debug)]
pub struct Stage2 {
    pub coarse_logits: Var,
    /// Upsampled to the input resolution.
    pub logits: Var,
    pub decisions: Vec<RegionDecision>,
}

/// Rebuilds the prediction from region-interacted features: RCB on the
/// stage-1 coarse scores, RIB on the aligned pre-decoder features, then the
/// generator's own decoder.
pub fn rcdam_stage2(tape: &mut Tape, bound: &Bound, prefix: &str, taps: &ForwardTaps) -> Result<Stage2> {
    let (n, _, h, w) = tape.value(taps.logits).dims4()?;
    let mut fused = Vec::with_capacity(n);
    let mut decisions = Vec::with_capacity(n);
    for i in 0..n {
        let scores = tape.value(taps.coarse_logits).batch_item(i)?;
        let dims = scores.shape()[1..].to_vec();
        let rd = rcb(&scores.reshape(&dims)?)?;
        let f = tape.narrow(taps.feat_da2, 0, i, 1)?;
        fused.push(rib(tape, bound, prefix, &rd, f)?.out);
        decisions.push(rd);
    }
    let z = if n == 1 { fused[0] } else { tape.concat(&fused, 0)? };
    let coarse_logits = decode(tape, bound, z)?;
    let logits = tape.resize_bilinear(coarse_logits, h, w)?;
    Ok(Stage2 {
        coarse_logits,
        logits,
        decisions,
    })
}
