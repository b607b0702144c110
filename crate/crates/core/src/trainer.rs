//! Alternating adversarial training.
//!
//! One step runs a single forward pass over a source and a target batch and
//! builds two objectives on the same tape:
//!
//! * phase A — the generator loss `Σ λ_seg·L_seg + Σ λ_adv·L_adv`, where a
//!   site's `L_adv` is the mean over its discriminators, with every
//!   discriminator bound as constants; momentum SGD updates the generator
//!   only;
//! * phase B — each discriminator's loss on detached features; Adam updates
//!   the discriminators only.
//!
//! Both learning rates follow the poly schedule. Batches are drawn with an
//! RNG derived from `(seed, iteration)`, so a resumed run replays exactly.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    self, init_adam, init_discriminator, init_rib_fusion, rcdam_stage2, Mechanism, Site,
};
use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::{poly_lr, Adam, Grads, Sgd};
use crate::params::ParamStore;
use crate::scene::{resize_sample, Sample, NUM_CLASSES};
use crate::segmenter::{aux_logits, forward, init_segmenter, seg_loss, Segmenter};
use crate::tensor::Tensor;

/// Prefix of the regional-context fusion inside the generator store.
pub const RC_FUSION: &str = "rc";

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub generator: Segmenter,
    /// All discriminators (and their attention blocks) keyed
    /// `<site>.<kind>.<layer>`.
    pub discriminators: ParamStore,
    pub g_opt: Sgd,
    pub d_opt: Adam,
}

/// `Σ λ_seg·L_seg + Σ λ_adv·L_adv` over `(loss, weight)` pairs.
pub fn generator_total_loss(seg_terms: &[(f64, f64)], adv_terms: &[(f64, f64)]) -> f64 {
    seg_terms
        .iter()
        .chain(adv_terms)
        .map(|(loss, weight)| loss * weight)
        .sum()
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut generator = init_segmenter(&cfg.model.arch(), cfg.seed)?;
        let c = cfg.model.arch().feature_channels();
        if cfg.adaptation.da1.mechanism == Mechanism::R {
            init_rib_fusion(&mut generator.params, RC_FUSION, c);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD15C_0000);
        let mut discriminators = ParamStore::new();
        for (site, name) in cfg.adaptation.discriminators() {
            let in_ch = match site {
                Site::Output => NUM_CLASSES,
                Site::Feature => c,
            };
            init_discriminator(&mut discriminators, &name, in_ch, cfg.model.disc_width, &mut rng);
            if name.ends_with(".a") {
                let m = &cfg.model;
                init_adam(&mut discriminators, &name, c, m.reduction_ratio, m.adam_gamma_init, &mut rng)?;
            }
        }
        Ok(Self {
            iteration: 0,
            generator,
            discriminators,
            g_opt: Sgd::new(cfg.train.g_momentum, cfg.train.g_weight_decay),
            d_opt: Adam::new(cfg.train.d_beta1, cfg.train.d_beta2),
        })
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        let mut put = |ns: &str, it: &mut dyn Iterator<Item = (&String, &Tensor)>| {
            for (k, t) in it {
                tensors.insert(format!("{ns}/{k}"), t.clone());
            }
        };
        put("g", &mut self.generator.params.iter());
        put("d", &mut self.discriminators.iter());
        put("opt.g.velocity", &mut self.g_opt.velocity.iter());
        put("opt.d.m", &mut self.d_opt.m.iter());
        put("opt.d.v", &mut self.d_opt.v.iter());
        Checkpoint {
            arch: cfg.arch_record(),
            iteration: self.iteration,
            counters: BTreeMap::from([("d_opt_steps".to_string(), self.d_opt.steps)]),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &RunConfig) -> Result<Self> {
        ck.expect_arch(&cfg.arch_record())?;
        let mut state = Self::init(cfg)?;
        let restore = |store: &mut ParamStore, saved: BTreeMap<String, Tensor>, ns: &str| -> Result<()> {
            if saved.len() != store.len() {
                return Err(Error::Checkpoint(format!(
                    "namespace `{ns}` holds {} tensors, expected {}",
                    saved.len(),
                    store.len()
                )));
            }
            for (k, t) in saved {
                let slot = store.get_mut(&k).ok_or_else(|| {
                    Error::Checkpoint(format!("unexpected tensor `{ns}/{k}`"))
                })?;
                if slot.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for `{ns}/{k}`")));
                }
                *slot = t;
            }
            Ok(())
        };
        restore(&mut state.generator.params, ck.namespace("g"), "g")?;
        restore(&mut state.discriminators, ck.namespace("d"), "d")?;
        state.g_opt.velocity = ck.namespace("opt.g.velocity");
        state.d_opt.m = ck.namespace("opt.d.m");
        state.d_opt.v = ck.namespace("opt.d.v");
        state.d_opt.steps = ck.counters.get("d_opt_steps").copied().unwrap_or(0);
        state.iteration = ck.iteration;
        Ok(state)
    }
}

/// Losses and rates of one step, as written to the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub l_seg: f64,
    /// Per discriminator, keyed by its namespace (`da1.s`, `da2.a`, ...).
    pub l_adv: BTreeMap<String, f64>,
    pub l_d: BTreeMap<String, f64>,
    pub l_g: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

/// Gradients of both phases, computed before either update is applied.
#[derive(Clone, Debug)]
pub struct StepGrads {
    pub generator: Grads,
    pub discriminators: Grads,
    pub record: StepRecord,
}

fn batch_tensor(samples: &[Sample]) -> Result<Tensor> {
    let items = samples
        .iter()
        .map(|s| {
            let (h, w) = (s.height(), s.width());
            s.image.clone().reshape(&[1, 3, h, w])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

fn batch_labels(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        out.extend_from_slice(
            s.labels
                .as_ref()
                .ok_or_else(|| Error::invalid("source batch contains an unlabeled sample"))?,
        );
    }
    Ok(out)
}

/// Builds both objectives for one step and returns their gradients.
pub fn compute_step(
    state: &TrainState,
    batch_s: &[Sample],
    batch_t: &[Sample],
    cfg: &RunConfig,
) -> Result<StepGrads> {
    if batch_s.is_empty() || batch_t.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let ad = &cfg.adaptation;
    let arch = &state.generator.arch;
    let labels = batch_labels(batch_s)?;
    let mut tape = Tape::new();
    let g = state.generator.params.bind(&mut tape, true);
    let d_frozen = state.discriminators.bind(&mut tape, false);
    let d_train = state.discriminators.bind(&mut tape, true);

    let xs = tape.constant(batch_tensor(batch_s)?);
    let xt = tape.constant(batch_tensor(batch_t)?);
    let ts = forward(&mut tape, &g, arch, xs)?;
    let tt = forward(&mut tape, &g, arch, xt)?;

    let l_seg = seg_loss(&mut tape, ts.logits, &labels)?;
    let mut g_terms: Vec<(Var, f64)> = vec![(l_seg, ad.da1.lambda_seg)];
    let mut d_terms: Vec<Var> = Vec::new();
    let mut adv_vals = BTreeMap::new();
    let mut d_vals = BTreeMap::new();
    let mut record = |tape: &Tape, name: &str, l: adapt::SiteLosses| {
        adv_vals.insert(name.to_string(), tape.value(l.l_adv).item());
        d_vals.insert(name.to_string(), tape.value(l.l_d).item());
    };

    // a site's λ_adv weights the mean over its discriminators
    let site_weight = |site: Site| {
        let sc = ad.site(site);
        sc.lambda_adv / sc.mechanism.discriminators(site).len().max(1) as f64
    };
    if ad.da1.mechanism != Mechanism::None {
        let w1 = site_weight(Site::Output);
        let ps = tape.softmax_channels(ts.logits)?;
        let pt = tape.softmax_channels(tt.logits)?;
        let l = adapt::sdam(&mut tape, &d_frozen, &d_train, "da1.s", ps, pt, false)?;
        g_terms.push((l.l_adv, w1));
        d_terms.push(l.l_d);
        record(&tape, "da1.s", l);
        if ad.da1.mechanism == Mechanism::R {
            let s2 = rcdam_stage2(&mut tape, &g, RC_FUSION, &ts)?;
            let t2 = rcdam_stage2(&mut tape, &g, RC_FUSION, &tt)?;
            let l_seg2 = seg_loss(&mut tape, s2.logits, &labels)?;
            g_terms.push((l_seg2, cfg.train.rcdam_stage2_seg_weight));
            let ps2 = tape.softmax_channels(s2.logits)?;
            let pt2 = tape.softmax_channels(t2.logits)?;
            let l = adapt::sdam(&mut tape, &d_frozen, &d_train, "da1.r", ps2, pt2, false)?;
            g_terms.push((l.l_adv, w1));
            d_terms.push(l.l_d);
            record(&tape, "da1.r", l);
        }
    }
    if ad.da2.mechanism != Mechanism::None {
        let (h, w) = (batch_s[0].height(), batch_s[0].width());
        let aux = aux_logits(&mut tape, &g, ts.feat_da2, h, w)?;
        let l_aux = seg_loss(&mut tape, aux, &labels)?;
        g_terms.push((l_aux, ad.da2.lambda_seg));
        for name in ad.da2.mechanism.discriminators(Site::Feature) {
            let reweight = name.ends_with(".a");
            let l = adapt::sdam(&mut tape, &d_frozen, &d_train, &name, ts.feat_da2, tt.feat_da2, reweight)?;
            g_terms.push((l.l_adv, site_weight(Site::Feature)));
            d_terms.push(l.l_d);
            record(&tape, &name, l);
        }
    }

    let l_g = tape.weighted_sum(&g_terms)?;
    let l_g_val = tape.value(l_g).item();
    let l_seg_val = tape.value(l_seg).item();
    let finite = l_g_val.is_finite()
        && adv_vals.values().chain(d_vals.values()).all(|v| v.is_finite());
    if !finite {
        return Err(Error::numeric(format!(
            "non-finite loss at iteration {}: L_G={l_g_val} L_seg={l_seg_val} L_adv={adv_vals:?} L_D={d_vals:?}",
            state.iteration
        )));
    }

    let grads = tape.backward(l_g)?;
    let generator = g.collect_grads(&tape, &grads);
    let discriminators = if d_terms.is_empty() {
        Grads::new()
    } else {
        let weighted: Vec<(Var, f64)> = d_terms.iter().map(|&v| (v, 1.0)).collect();
        let l_d = tape.weighted_sum(&weighted)?;
        let grads = tape.backward(l_d)?;
        d_train.collect_grads(&tape, &grads)
    };

    let t = &cfg.train;
    Ok(StepGrads {
        generator,
        discriminators,
        record: StepRecord {
            iter: state.iteration,
            l_seg: l_seg_val,
            l_adv: adv_vals,
            l_d: d_vals,
            l_g: l_g_val,
            lr_g: poly_lr(t.g_base_lr, state.iteration, t.max_iter, t.lr_power)?,
            lr_d: poly_lr(t.d_base_lr, state.iteration, t.max_iter, t.lr_power)?,
            wall_ms: None,
        },
    })
}

/// Phase A: generator update only.
pub fn apply_generator_update(state: &mut TrainState, grads: &StepGrads) -> Result<()> {
    let lr = grads.record.lr_g;
    state
        .g_opt
        .step(&mut state.generator.params, &grads.generator, lr)
}

/// Phase B: discriminator update only.
pub fn apply_discriminator_update(state: &mut TrainState, grads: &StepGrads) -> Result<()> {
    if grads.discriminators.is_empty() {
        return Ok(());
    }
    let lr = grads.record.lr_d;
    state
        .d_opt
        .step(&mut state.discriminators, &grads.discriminators, lr)
}

/// One full iteration: phase A then phase B, iteration counter advanced.
pub fn train_step(
    state: &mut TrainState,
    batch_s: &[Sample],
    batch_t: &[Sample],
    cfg: &RunConfig,
) -> Result<StepRecord> {
    if state.iteration >= cfg.train.max_iter {
        return Err(Error::invalid("training already reached max_iter"));
    }
    let grads = compute_step(state, batch_s, batch_t, cfg)?;
    apply_generator_update(state, &grads)?;
    apply_discriminator_update(state, &grads)?;
    if !state.generator.params.all_finite() || !state.discriminators.all_finite() {
        return Err(Error::numeric(format!(
            "parameters became non-finite at iteration {}",
            state.iteration
        )));
    }
    state.iteration += 1;
    Ok(grads.record)
}

/// Batch indices for an iteration; a pure function of `(seed, iter)`.
pub fn batch_indices(
    seed: u64,
    iter: u64,
    n_source: usize,
    n_target: usize,
    batch: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ iter.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let s = (0..batch).map(|_| rng.random_range(0..n_source.max(1))).collect();
    let t = (0..batch).map(|_| rng.random_range(0..n_target.max(1))).collect();
    (s, t)
}

/// Resizes every sample to `[width, height]`.
pub fn prepare(samples: &[Sample], [w, h]: [usize; 2]) -> Result<Vec<Sample>> {
    samples.iter().map(|s| resize_sample(s, w, h)).collect()
}

/// Files a training run writes.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub checkpoints: PathBuf,
    pub metrics: PathBuf,
}

impl RunPaths {
    pub fn new(run_dir: &Path) -> Self {
        Self {
            checkpoints: run_dir.join("checkpoints"),
            metrics: run_dir.join("metrics.log"),
        }
    }

    pub fn checkpoint(&self, iter: u64) -> PathBuf {
        self.checkpoints.join(format!("iter_{iter:08}.ckpt"))
    }

    pub fn latest(&self) -> PathBuf {
        self.checkpoints.join("latest.ckpt")
    }
}

/// Keeps only log records of iterations before `iter`.
fn truncate_log(path: &Path, iter: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: StepRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if rec.iter < iter {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains until `max_iter`, starting from `state`. With `paths`, records
/// are appended to the metrics log and checkpoints written every
/// `checkpoint_every` iterations and at the end.
pub fn run_training(
    cfg: &RunConfig,
    mut state: TrainState,
    source: &[Sample],
    target: &[Sample],
    paths: Option<&RunPaths>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainState> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("training needs non-empty source and target datasets"));
    }
    let t = &cfg.train;
    let source = prepare(source, t.source_size)?;
    let target = prepare(target, t.target_size)?;
    let mut log = match paths {
        Some(p) => {
            fs::create_dir_all(&p.checkpoints).map_err(|e| Error::io(&p.checkpoints, e))?;
            truncate_log(&p.metrics, state.iteration)?;
            Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p.metrics)
                    .map_err(|e| Error::io(&p.metrics, e))?,
            )
        }
        None => None,
    };
    let start = Instant::now();
    while state.iteration < t.max_iter {
        let iter = state.iteration;
        let (si, ti) = batch_indices(cfg.seed, iter, source.len(), target.len(), t.batch_size);
        let bs: Vec<Sample> = si.iter().map(|&i| source[i].clone()).collect();
        let bt: Vec<Sample> = ti.iter().map(|&i| target[i].clone()).collect();
        let mut rec = match train_step(&mut state, &bs, &bt, cfg) {
            Ok(r) => r,
            Err(e) => {
                if let Some(p) = paths {
                    // last good state stays on disk for inspection
                    let _ = state.to_checkpoint(cfg).save(&p.checkpoints.join("diagnostic.ckpt"));
                }
                return Err(e);
            }
        };
        if t.record_wall_time {
            rec.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
        }
        on_step(&rec);
        if let (Some(f), Some(p)) = (log.as_mut(), paths) {
            let line = serde_json::to_string(&rec).expect("records serialize");
            writeln!(f, "{line}").map_err(|e| Error::io(&p.metrics, e))?;
        }
        if let Some(p) = paths {
            if state.iteration % t.checkpoint_every == 0 || state.iteration == t.max_iter {
                let ck = state.to_checkpoint(cfg);
                ck.save(&p.checkpoint(state.iteration))?;
                ck.save(&p.latest())?;
            }
        }
    }
    Ok(state)
}
