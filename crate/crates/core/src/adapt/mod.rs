//! Adversarial adaptation: discriminators and losses, output/feature-level
//! alignment (`sdam`), attention-reweighted feature alignment (`adam`), and
//! the two-stage regional-context scheme (`rcdam`).
//!
//! Domain labels: source = 1, target = 0. The generator's adversarial
//! term scores target inputs against the source label.

mod region;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{position_attention, AttentionConfig, AttentionVariant, QkvParams};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{conv, Bound, ParamStore};

pub use region::{
    init_rib_fusion, rcb, rcdam_stage2, rib, RegionDecision, RibOut, Stage2, BOUNDARY_THRESHOLD,
    MAX_REPRESENTATIVES,
};

/// Smallest spatial extent the five stride-2 layers accept.
pub const D_MIN_INPUT: usize = 32;
pub const D_LAYERS: usize = 5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Where along the generator a discriminator looks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Site {
    /// Softmax of the final prediction.
    #[serde(rename = "da1")]
    Output,
    /// Pre-decoder features.
    #[serde(rename = "da2")]
    Feature,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::Output => "da1",
            Site::Feature => "da2",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    #[default]
    #[serde(rename = "none")]
    None,
    S,
    A,
    #[serde(rename = "S+A")]
    SA,
    R,
}

impl Mechanism {
    pub fn label(self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::S => "S",
            Mechanism::A => "A",
            Mechanism::SA => "S+A",
            Mechanism::R => "R",
        }
    }

    /// Output-level alignment admits S and R; feature-level admits S, A
    /// and S+A.
    pub fn check_site(self, site: Site) -> Result<()> {
        let ok = match site {
            Site::Output => matches!(self, Mechanism::None | Mechanism::S | Mechanism::R),
            Site::Feature => !matches!(self, Mechanism::R),
        };
        if ok {
            return Ok(());
        }
        let why = match (self, site) {
            (Mechanism::R, _) => "regional-context adaptation (R) is only available at da1",
            _ => "attentional adaptation (A, S+A) is only available at da2",
        };
        Err(Error::config(
            format!("adaptation.{}.mechanism", site.name()),
            why,
        ))
    }

    /// Discriminator namespaces this mechanism trains at `site`.
    pub fn discriminators(self, site: Site) -> Vec<String> {
        let s = site.name();
        match self {
            Mechanism::None => vec![],
            Mechanism::S => vec![format!("{s}.s")],
            Mechanism::A => vec![format!("{s}.a")],
            Mechanism::SA => vec![format!("{s}.s"), format!("{s}.a")],
            Mechanism::R => vec![format!("{s}.s"), format!("{s}.r")],
        }
    }
}

/// Five 3x3 stride-2 convolutions, widths `ndf, 2ndf, 4ndf, 8ndf, 1`.
pub fn init_discriminator<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    in_channels: usize,
    ndf: usize,
    rng: &mut R,
) {
    let widths = [ndf, 2 * ndf, 4 * ndf, 8 * ndf, 1];
    let mut cin = in_channels;
    for (i, &cout) in widths.iter().enumerate() {
        store.init_conv(&format!("{prefix}.conv{}", i + 1), cin, cout, 3, rng);
        cin = cout;
    }
}

/// Per-location domain logits, `[n, 1, ceil(h/32), ceil(w/32)]`.
pub fn discriminator_forward(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let (_, _, h, w) = tape.value(x).dims4()?;
    if h < D_MIN_INPUT || w < D_MIN_INPUT {
        return Err(Error::invalid(format!(
            "discriminator input {w}x{h} is smaller than {D_MIN_INPUT}x{D_MIN_INPUT}"
        )));
    }
    if !tape.value(x).all_finite() {
        return Err(Error::numeric("discriminator input contains non-finite values"));
    }
    let mut y = x;
    for i in 1..=D_LAYERS {
        y = conv(tape, bound, &format!("{prefix}.conv{i}"), y, 2, 1)?;
        if i < D_LAYERS {
            y = tape.leaky_relu(y, LEAKY_SLOPE);
        }
    }
    Ok(y)
}

/// Bilinear upscaling by the smallest integer factor that brings both
/// spatial dims to at least [`D_MIN_INPUT`].
pub fn upscale_for_discriminator(tape: &mut Tape, x: Var) -> Result<Var> {
    let (_, _, h, w) = tape.value(x).dims4()?;
    let m = h.min(w);
    if m == 0 {
        return Err(Error::invalid("empty feature map"));
    }
    let factor = D_MIN_INPUT.div_ceil(m).max(1);
    tape.resize_bilinear(x, h * factor, w * factor)
}

/// `½·BCE(source logits, 1) + ½·BCE(target logits, 0)`.
pub fn d_loss(tape: &mut Tape, logits_s: Var, logits_t: Var) -> Result<Var> {
    let ls = tape.bce_with_logits(logits_s, true);
    let lt = tape.bce_with_logits(logits_t, false);
    tape.weighted_sum(&[(ls, 0.5), (lt, 0.5)])
}

/// Target logits scored against the source label.
pub fn adv_loss(tape: &mut Tape, logits_t: Var) -> Var {
    tape.bce_with_logits(logits_t, true)
}

/// Attention parameters owned by an attentional discriminator.
pub fn init_adam<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    reduction_ratio: usize,
    gamma_init: f64,
    rng: &mut R,
) -> Result<()> {
    AttentionConfig {
        reduction_ratio,
        gamma_init,
        ..AttentionConfig::new(AttentionVariant::Position)
    }
    .init(store, &format!("{prefix}.att"), channels, rng)
}

/// Position attention with the discriminator-side parameters under
/// `<prefix>.att`; returns the reweighted map and its attention matrix.
pub fn adam_reweight(tape: &mut Tape, bound: &Bound, prefix: &str, f: Var) -> Result<(Var, Var)> {
    let p = QkvParams::from_bound(bound, &format!("{prefix}.att"))?;
    position_attention(tape, f, &p)
}

/// Losses of one discriminator.
#[derive(Clone, Copy, Debug)]
pub struct SiteLosses {
    /// Discriminator objective on detached features; its gradient reaches
    /// only the trainable discriminator binding.
    pub l_d: Var,
    /// Generator objective through the frozen discriminator binding.
    pub l_adv: Var,
}

/// Adversarial losses for one discriminator named `prefix`.
///
/// `frozen` and `trainable` are two bindings of the same discriminator
/// parameters: the generator term runs through constants, the
/// discriminator term through parameters fed with detached copies of the
/// features. When `reweight` is set the features first pass through the
/// discriminator's own attention block. Inputs smaller than the
/// discriminator's receptive minimum are upscaled.
pub fn sdam(
    tape: &mut Tape,
    frozen: &Bound,
    trainable: &Bound,
    prefix: &str,
    f_s: Var,
    f_t: Var,
    reweight: bool,
) -> Result<SiteLosses> {
    let (cs, ct) = (tape.shape(f_s)[1], tape.shape(f_t)[1]);
    if cs != ct {
        return Err(Error::invalid(format!(
            "source features have {cs} channels, target {ct}"
        )));
    }
    let prep = |tape: &mut Tape, bound: &Bound, f: Var| -> Result<Var> {
        let f = if reweight {
            adam_reweight(tape, bound, prefix, f)?.0
        } else {
            f
        };
        upscale_for_discriminator(tape, f)
    };

    let xt = prep(tape, frozen, f_t)?;
    let lt = discriminator_forward(tape, frozen, prefix, xt)?;
    let l_adv = adv_loss(tape, lt);

    let ds = tape.detach(f_s);
    let dt = tape.detach(f_t);
    let xs = prep(tape, trainable, ds)?;
    let xt = prep(tape, trainable, dt)?;
    let ls = discriminator_forward(tape, trainable, prefix, xs)?;
    let lt = discriminator_forward(tape, trainable, prefix, xt)?;
    let l_d = d_loss(tape, ls, lt)?;
    Ok(SiteLosses { l_d, l_adv })
}

#[cfg(test)]
mod tests;
