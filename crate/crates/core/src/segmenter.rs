//! Miniature encoder–decoder segmentation network (the generator).
//!
//! Layout: four 3x3 conv blocks (three stride-2, one stride-1, overall
//! stride 8) → optional attention heads fused by a 1x1 conv → decoder
//! (3x3 conv + 1x1 classifier) → bilinear upsampling to the input size.
//!
//! Two taps feed the adaptation sites: the pre-decoder features
//! (`feat_da2`) and the full-resolution logits, whose softmax is the
//! output-level input.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionVariant};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{conv, Bound, ParamStore};
use crate::scene::NUM_CLASSES;
use crate::tensor::Tensor;

pub const OUTPUT_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterArch {
    /// Output channels of the four encoder blocks.
    pub encoder_widths: [usize; 4],
    pub decoder_width: usize,
    #[serde(default)]
    pub attention: Vec<AttentionVariant>,
    #[serde(default = "default_reduction")]
    pub reduction_ratio: usize,
}

fn default_reduction() -> usize {
    8
}

impl SegmenterArch {
    pub fn feature_channels(&self) -> usize {
        self.encoder_widths[3]
    }

    pub fn attention_config(&self, variant: AttentionVariant) -> AttentionConfig {
        AttentionConfig {
            reduction_ratio: self.reduction_ratio,
            ..AttentionConfig::new(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.contains(&0) || self.decoder_width == 0 {
            return Err(Error::config("model", "channel widths must be positive"));
        }
        let mut seen = Vec::new();
        for &v in &self.attention {
            if seen.contains(&v) {
                return Err(Error::config(
                    "model.attention",
                    format!("attention variant {v:?} listed twice"),
                ));
            }
            seen.push(v);
            self.attention_config(v)
                .reduced_channels(self.feature_channels())?;
        }
        Ok(())
    }
}

fn head_prefix(v: AttentionVariant) -> &'static str {
    match v {
        AttentionVariant::Position => "att_pos",
        AttentionVariant::Channel => "att_chan",
        AttentionVariant::Fast => "att_fast",
    }
}

/// Generator weights together with the architecture they instantiate.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    pub arch: SegmenterArch,
    pub params: ParamStore,
}

/// He-initialised weights with zero biases; deterministic in `seed`.
pub fn init_segmenter(arch: &SegmenterArch, seed: u64) -> Result<Segmenter> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let [w1, w2, w3, w4] = arch.encoder_widths;
    p.init_conv("enc1", 3, w1, 3, &mut rng);
    p.init_conv("enc2", w1, w2, 3, &mut rng);
    p.init_conv("enc3", w2, w3, 3, &mut rng);
    p.init_conv("enc4", w3, w4, 3, &mut rng);
    for &v in &arch.attention {
        arch.attention_config(v)
            .init(&mut p, head_prefix(v), w4, &mut rng)?;
    }
    if arch.attention.len() > 1 {
        p.init_conv("fuse", w4 * arch.attention.len(), w4, 1, &mut rng);
    }
    p.init_conv("dec", w4, arch.decoder_width, 3, &mut rng);
    p.init_conv("cls", arch.decoder_width, NUM_CLASSES, 1, &mut rng);
    p.init_conv("aux", w4, NUM_CLASSES, 1, &mut rng);
    Ok(Segmenter {
        arch: arch.clone(),
        params: p,
    })
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTaps {
    /// `[n, 19, h, w]` at input resolution.
    pub logits: Var,
    /// `[n, 19, h/8, w/8]` classifier output before upsampling.
    pub coarse_logits: Var,
    /// `[n, c, h/8, w/8]` features entering the decoder.
    pub feat_da2: Var,
    pub attended: Vec<Var>,
}

/// Decoder head shared by every path that turns stride-8 features into
/// class scores.
pub fn decode(tape: &mut Tape, bound: &Bound, feat: Var) -> Result<Var> {
    let d = conv(tape, bound, "dec", feat, 1, 1)?;
    let d = tape.relu(d);
    conv(tape, bound, "cls", d, 1, 0)
}

/// Auxiliary classifier on the pre-decoder features, upsampled to
/// `height x width`.
pub fn aux_logits(tape: &mut Tape, bound: &Bound, feat: Var, height: usize, width: usize) -> Result<Var> {
    let a = conv(tape, bound, "aux", feat, 1, 0)?;
    tape.resize_bilinear(a, height, width)
}

pub fn forward(tape: &mut Tape, bound: &Bound, arch: &SegmenterArch, x: Var) -> Result<ForwardTaps> {
    let (_, c, h, w) = tape.value(x).dims4()?;
    if c != 3 {
        return Err(Error::invalid(format!("expected RGB input, got {c} channels")));
    }
    if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
        return Err(Error::invalid(format!(
            "input {w}x{h} is not divisible by {OUTPUT_STRIDE}"
        )));
    }
    let mut f = x;
    for (name, stride) in [("enc1", 2), ("enc2", 2), ("enc3", 2), ("enc4", 1)] {
        let y = conv(tape, bound, name, f, stride, 1)?;
        f = tape.relu(y);
    }
    let mut attended = Vec::with_capacity(arch.attention.len());
    for &v in &arch.attention {
        let (out, _) = arch
            .attention_config(v)
            .apply(tape, bound, head_prefix(v), f)?;
        attended.push(out);
    }
    let feat_da2 = match attended.len() {
        0 => f,
        1 => attended[0],
        _ => {
            let cat = tape.concat(&attended, 1)?;
            conv(tape, bound, "fuse", cat, 1, 0)?
        }
    };
    let coarse_logits = decode(tape, bound, feat_da2)?;
    let logits = tape.resize_bilinear(coarse_logits, h, w)?;
    if !tape.value(logits).all_finite() {
        return Err(Error::numeric("segmenter produced non-finite logits"));
    }
    Ok(ForwardTaps {
        logits,
        coarse_logits,
        feat_da2,
        attended,
    })
}

/// Mean cross-entropy over pixels whose label is not the ignore value.
pub fn seg_loss(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    tape.cross_entropy(logits, Arc::from(labels))
}

impl Segmenter {
    /// Inference: `[19, h, w]` logits for one `[3, h, w]` image.
    pub fn predict_logits(&self, image: &Tensor) -> Result<Tensor> {
        let [3, h, w] = image.shape()[..] else {
            return Err(Error::invalid("predict expects a [3, h, w] image"));
        };
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone().reshape(&[1, 3, h, w])?);
        let taps = forward(&mut tape, &bound, &self.arch, x)?;
        tape.value(taps.logits).clone().reshape(&[NUM_CLASSES, h, w])
    }

    /// Per-pixel argmax class.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<u8>> {
        Ok(argmax_channels(&self.predict_logits(image)?))
    }
}

/// Argmax over the leading axis of a `[c, h, w]` score map; ties go to the
/// lower class index.
pub fn argmax_channels(scores: &Tensor) -> Vec<u8> {
    let c = scores.shape()[0];
    let plane = scores.numel() / c;
    let d = scores.data();
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * plane + p] > d[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::Rng;

    pub(crate) fn tiny_arch(attention: Vec<AttentionVariant>) -> SegmenterArch {
        SegmenterArch {
            encoder_widths: [4, 4, 8, 8],
            decoder_width: 8,
            attention,
            reduction_ratio: 4,
        }
    }

    #[test]
    fn shapes_follow_stride_contract() {
        let arch = tiny_arch(vec![AttentionVariant::Position, AttentionVariant::Channel]);
        let seg = init_segmenter(&arch, 0).unwrap();
        let mut tape = Tape::new();
        let bound = seg.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 256]));
        let taps = forward(&mut tape, &bound, &arch, x).unwrap();
        assert_eq!(tape.shape(taps.logits), &[1, 19, 64, 256]);
        assert_eq!(tape.shape(taps.feat_da2), &[1, 8, 8, 32]);
        assert_eq!(taps.attended.len(), 2);
    }

    #[test]
    fn indivisible_input_rejected() {
        let arch = tiny_arch(vec![]);
        let seg = init_segmenter(&arch, 0).unwrap();
        assert!(matches!(
            seg.predict_logits(&Tensor::zeros(&[3, 20, 64])),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn init_is_seeded() {
        let arch = tiny_arch(vec![AttentionVariant::Fast]);
        assert_eq!(init_segmenter(&arch, 3).unwrap(), init_segmenter(&arch, 3).unwrap());
        assert_ne!(init_segmenter(&arch, 0).unwrap(), init_segmenter(&arch, 1).unwrap());
        let plain = init_segmenter(&tiny_arch(vec![]), 0).unwrap();
        assert!(plain.params.iter().all(|(k, _)| !k.starts_with("att")));
    }

    #[test]
    fn incompatible_reduction_is_config_error() {
        let mut arch = tiny_arch(vec![AttentionVariant::Position]);
        arch.encoder_widths[3] = 12;
        arch.reduction_ratio = 8;
        assert!(matches!(init_segmenter(&arch, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn zero_image_gives_constant_logits() {
        let seg = init_segmenter(&tiny_arch(vec![AttentionVariant::Position]), 5).unwrap();
        let logits = seg.predict_logits(&Tensor::zeros(&[3, 32, 64])).unwrap();
        let plane = 32 * 64;
        for c in 0..19 {
            let p = &logits.data()[c * plane..(c + 1) * plane];
            assert!(p.iter().all(|&v| v == p[0]));
        }
    }

    #[test]
    fn seg_loss_gradient_matches_finite_differences() {
        let arch = tiny_arch(vec![AttentionVariant::Position, AttentionVariant::Channel]);
        let mut seg = init_segmenter(&arch, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (name, t) in seg.params.iter_mut() {
            if name.ends_with("gamma") || name.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
        }
        let x = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut rng);
        let labels: Vec<u8> = (0..2 * 16 * 16)
            .map(|i| if i % 7 == 0 { 255 } else { rng.random_range(0..19) })
            .collect();
        let names: Vec<String> = seg.params.iter().map(|(k, _)| k.clone()).collect();
        let mut inputs: Vec<Tensor> = seg.params.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(x);
        let res = gradcheck::check(&inputs, 1e-5, |tape, vars| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let taps = forward(tape, &bound, &arch, *vars.last().unwrap())?;
            seg_loss(tape, taps.logits, &labels)
        })
        .unwrap();
        // key biases shift every score in a softmax row equally, so their
        // gradient is identically zero and only rounding noise remains
        assert!(res.passes(1e-4, 1e-8), "{:?} {:?}", res.rel_errors, res.abs_errors);
    }
}
