//! Self-attention over feature maps: position (non-local) attention,
//! channel attention, and a linear-cost "fast" attention with cosine
//! affinities.
//!
//! All three add a learned `γ`-scaled response to their input, so `γ = 0`
//! is the identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Position,
    Channel,
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    pub reduction_ratio: usize,
    pub gamma_init: f64,
}

impl AttentionConfig {
    pub fn new(variant: AttentionVariant) -> Self {
        Self {
            variant,
            reduction_ratio: 8,
            gamma_init: 0.0,
        }
    }

    /// Query/key width for `channels` inputs; at least one channel.
    pub fn reduced_channels(&self, channels: usize) -> Result<usize> {
        if self.reduction_ratio == 0 {
            return Err(Error::config(
                "model.reduction_ratio",
                "reduction ratio must be at least 1",
            ));
        }
        if channels < self.reduction_ratio {
            return Ok(1);
        }
        if channels % self.reduction_ratio != 0 {
            return Err(Error::config(
                "model.reduction_ratio",
                format!(
                    "reduction ratio {} does not divide {channels} channels",
                    self.reduction_ratio
                ),
            ));
        }
        Ok(channels / self.reduction_ratio)
    }

    /// Adds this block's parameters to `store` under `prefix`.
    pub fn init<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<()> {
        store.insert(format!("{prefix}.gamma"), Tensor::scalar(self.gamma_init));
        if self.variant == AttentionVariant::Channel {
            return Ok(());
        }
        let reduced = self.reduced_channels(channels)?;
        store.init_conv(&format!("{prefix}.q"), channels, reduced, 1, rng);
        store.init_conv(&format!("{prefix}.k"), channels, reduced, 1, rng);
        store.init_conv(&format!("{prefix}.v"), channels, channels, 1, rng);
        Ok(())
    }

    /// Runs the block; `attn` is returned for the softmax variants.
    pub fn apply(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        f: Var,
    ) -> Result<(Var, Option<Var>)> {
        let gamma = bound.var(&format!("{prefix}.gamma"))?;
        match self.variant {
            AttentionVariant::Channel => {
                let (out, attn) = channel_attention(tape, f, gamma)?;
                Ok((out, Some(attn)))
            }
            AttentionVariant::Position => {
                let p = QkvParams::from_bound(bound, prefix)?;
                let (out, attn) = position_attention(tape, f, &p)?;
                Ok((out, Some(attn)))
            }
            AttentionVariant::Fast => {
                let p = QkvParams::from_bound(bound, prefix)?;
                Ok((fast_attention(tape, f, &p)?, None))
            }
        }
    }
}

/// Query/key/value 1x1 projections and the residual scale.
#[derive(Clone, Copy, Debug)]
pub struct QkvParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub gamma: Var,
}

impl QkvParams {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        let v = |s: &str| bound.var(&format!("{prefix}.{s}"));
        Ok(Self {
            wq: v("q.w")?,
            bq: v("q.b")?,
            wk: v("k.w")?,
            bk: v("k.b")?,
            wv: v("v.w")?,
            bv: v("v.b")?,
            gamma: v("gamma")?,
        })
    }
}

fn check_finite(tape: &Tape, f: Var) -> Result<(usize, usize, usize, usize)> {
    let t = tape.value(f);
    let dims = t.dims4()?;
    if !t.all_finite() {
        return Err(Error::numeric("attention input contains non-finite values"));
    }
    Ok(dims)
}

/// `[b, c, h, w]` → `[b, c, h*w]` projections.
fn project(tape: &mut Tape, f: Var, w: Var, b: Var, n: usize) -> Result<Var> {
    let y = tape.conv2d(f, w, Some(b), 1, 0)?;
    let s = tape.shape(y).to_vec();
    tape.reshape(y, &[s[0], s[1], n])
}

fn residual(tape: &mut Tape, out: Var, gamma: Var, f: Var) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    let out = tape.reshape(out, &shape)?;
    let scaled = tape.scale_by(out, gamma)?;
    tape.add(scaled, f)
}

/// Non-local position attention: `attn = softmax_rows(Qᵀ K)` over the
/// `N = h*w` positions and `out = γ · (V attnᵀ) + f`.
pub fn position_attention(tape: &mut Tape, f: Var, p: &QkvParams) -> Result<(Var, Var)> {
    let (_, _, h, w) = check_finite(tape, f)?;
    let n = h * w;
    let q = project(tape, f, p.wq, p.bq, n)?;
    let k = project(tape, f, p.wk, p.bk, n)?;
    let v = project(tape, f, p.wv, p.bv, n)?;
    let energy = tape.matmul(q, k, true, false)?;
    let attn = tape.softmax_last(energy);
    // order-free sums keep the block exactly permutation equivariant
    let out = tape.matmul_exact(v, attn, false, true)?;
    Ok((residual(tape, out, p.gamma, f)?, attn))
}

/// Channel attention: `attn = softmax_rows(F Fᵀ)` for `F` the `[c, N]`
/// reshaped input, `out = γ · (attn F) + f`.
pub fn channel_attention(tape: &mut Tape, f: Var, gamma: Var) -> Result<(Var, Var)> {
    let (b, c, h, w) = check_finite(tape, f)?;
    let flat = tape.reshape(f, &[b, c, h * w])?;
    let energy = tape.matmul(flat, flat, false, true)?;
    let attn = tape.softmax_last(energy);
    let out = tape.matmul(attn, flat, false, false)?;
    Ok((residual(tape, out, gamma, f)?, attn))
}

fn fast_parts(tape: &mut Tape, f: Var, p: &QkvParams) -> Result<(Var, Var, Var, usize)> {
    let (_, _, h, w) = check_finite(tape, f)?;
    let n = h * w;
    let q = project(tape, f, p.wq, p.bq, n)?;
    let k = project(tape, f, p.wk, p.bk, n)?;
    let v = project(tape, f, p.wv, p.bv, n)?;
    let q = tape.l2_normalize(q, 1)?;
    let k = tape.l2_normalize(k, 1)?;
    Ok((q, k, v, n))
}

/// Fast attention with cosine affinities `cos(qᵢ, kⱼ) / N`, evaluated as
/// `(V K̂ᵀ) Q̂` so the cost is linear in the number of positions.
pub fn fast_attention(tape: &mut Tape, f: Var, p: &QkvParams) -> Result<Var> {
    let (q, k, v, n) = fast_parts(tape, f, p)?;
    let vk = tape.matmul(v, k, false, true)?;
    let out = tape.matmul(vk, q, false, false)?;
    let out = tape.scale(out, 1.0 / n as f64);
    residual(tape, out, p.gamma, f)
}

/// The same response as [`fast_attention`] built through the explicit
/// `N x N` affinity matrix `V (K̂ᵀ Q̂)`.
pub fn fast_attention_pairwise(tape: &mut Tape, f: Var, p: &QkvParams) -> Result<Var> {
    let (q, k, v, n) = fast_parts(tape, f, p)?;
    let affinity = tape.matmul(k, q, true, false)?;
    let out = tape.matmul(v, affinity, false, false)?;
    let out = tape.scale(out, 1.0 / n as f64);
    residual(tape, out, p.gamma, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(variant: AttentionVariant, c: usize, gamma: f64, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let cfg = AttentionConfig {
            variant,
            reduction_ratio: 2,
            gamma_init: gamma,
        };
        cfg.init(&mut store, "att", c, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        store
    }

    fn run(variant: AttentionVariant, store: &ParamStore, f: &Tensor) -> (Tensor, Option<Tensor>) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(f.clone());
        let cfg = AttentionConfig {
            variant,
            reduction_ratio: 2,
            gamma_init: 0.0,
        };
        let (out, attn) = cfg.apply(&mut tape, &bound, "att", x).unwrap();
        (
            tape.value(out).clone(),
            attn.map(|a| tape.value(a).clone()),
        )
    }

    #[test]
    fn gamma_zero_is_identity() {
        let f = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        for v in [
            AttentionVariant::Position,
            AttentionVariant::Channel,
            AttentionVariant::Fast,
        ] {
            let store = setup(v, 4, 0.0, 2);
            let (out, _) = run(v, &store, &f);
            assert_eq!(out, f, "{v:?}");
        }
    }

    #[test]
    fn shared_feature_vector_gives_uniform_rows() {
        // every position carries the same vector
        let mut f = Tensor::zeros(&[1, 4, 2, 3]);
        for c in 0..4 {
            for p in 0..6 {
                f.data_mut()[c * 6 + p] = c as f64 * 0.3 - 0.2;
            }
        }
        let store = setup(AttentionVariant::Position, 4, 0.5, 3);
        let (_, attn) = run(AttentionVariant::Position, &store, &f);
        for &a in attn.unwrap().data() {
            assert!((a - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_channels_give_uniform_channel_rows() {
        let row: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
        let f = Tensor::new(&[1, 3, 2, 3], row.repeat(3)).unwrap();
        let store = setup(AttentionVariant::Channel, 3, 0.5, 3);
        let (_, attn) = run(AttentionVariant::Channel, &store, &f);
        for &a in attn.unwrap().data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_map_stays_constant_under_fast_attention() {
        let f = Tensor::full(&[1, 4, 3, 3], 0.7);
        let store = setup(AttentionVariant::Fast, 4, 0.8, 5);
        let (out, _) = run(AttentionVariant::Fast, &store, &f);
        for c in 0..4 {
            let plane = &out.data()[c * 9..(c + 1) * 9];
            assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn non_finite_input_is_a_numeric_error() {
        let mut f = Tensor::zeros(&[1, 4, 2, 2]);
        f.data_mut()[3] = f64::NAN;
        let store = setup(AttentionVariant::Position, 4, 0.0, 1);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(f);
        let p = QkvParams::from_bound(&bound, "att").unwrap();
        assert!(matches!(
            position_attention(&mut tape, x, &p),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn reduction_ratio_must_divide_channels() {
        let cfg = AttentionConfig {
            variant: AttentionVariant::Position,
            reduction_ratio: 8,
            gamma_init: 0.0,
        };
        assert_eq!(cfg.reduced_channels(4).unwrap(), 1);
        assert_eq!(cfg.reduced_channels(32).unwrap(), 4);
        assert!(matches!(cfg.reduced_channels(12), Err(Error::Config { .. })));
    }
}
