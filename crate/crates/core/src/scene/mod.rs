//! Synthetic spherical road scenes rendered as pinhole views (source
//! domain) and 360° equirectangular panoramas (target domain), plus loading
//! and writing of trainID-encoded datasets.

mod camera;
mod io;

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use camera::{angles_to_direction, direction_to_angles, CameraKind, CameraSpec, Direction};
pub use io::{load_image, load_labeled_pair, load_split, resize_sample, write_sample};

use crate::autograd::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 19;

/// Evaluation classes in trainID order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

pub const ROAD: u8 = 0;
pub const SIDEWALK: u8 = 1;
pub const BUILDING: u8 = 2;
pub const SKY: u8 = 10;

/// Cityscapes display colors per trainID.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn of_camera(cam: &CameraSpec) -> Self {
        if cam.is_panoramic() {
            Domain::Target
        } else {
            Domain::Source
        }
    }
}

/// An RGB image in `[0, 1]` (`[3, h, w]`) with optional per-pixel trainIDs.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: Option<Vec<u8>>,
    pub domain: Domain,
}

impl Sample {
    pub fn new(image: Tensor, labels: Option<Vec<u8>>, domain: Domain) -> Result<Self> {
        let [3, h, w] = image.shape()[..] else {
            return Err(Error::invalid(format!(
                "sample image must be [3, h, w], got {:?}",
                image.shape()
            )));
        };
        if let Some(l) = &labels {
            if l.len() != h * w {
                return Err(Error::Format(format!(
                    "label map has {} pixels, image has {h}x{w}",
                    l.len()
                )));
            }
            if l.iter().any(|&v| v != IGNORE_LABEL && usize::from(v) >= NUM_CLASSES) {
                return Err(Error::invalid("labels must lie in {0..18, 255}"));
            }
        }
        Ok(Self {
            image,
            labels,
            domain,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// The same image without its labels.
    pub fn unlabeled(&self) -> Sample {
        Sample {
            labels: None,
            ..self.clone()
        }
    }
}

/// A region of the sphere bounded by a yaw interval (which may wrap past
/// ±π) and a pitch interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub class_id: u8,
    pub yaw_start: f64,
    pub yaw_width: f64,
    pub pitch_min: f64,
    pub pitch_max: f64,
    pub layer: i32,
}

impl Primitive {
    pub fn contains(&self, yaw: f64, pitch: f64) -> bool {
        if pitch < self.pitch_min || pitch > self.pitch_max {
            return false;
        }
        (yaw - self.yaw_start).rem_euclid(2.0 * PI) < self.yaw_width
    }
}

/// Layered class regions on the unit sphere. Primitives are kept sorted by
/// layer; at equal layers the later one wins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalScene {
    pub seed: u64,
    primitives: Vec<Primitive>,
}

impl SphericalScene {
    /// Builds a scene from primitives. The first one (after sorting) must
    /// cover the whole sphere so every direction has a class.
    pub fn from_primitives(seed: u64, mut primitives: Vec<Primitive>) -> Result<Self> {
        if primitives.iter().any(|p| usize::from(p.class_id) >= NUM_CLASSES) {
            return Err(Error::invalid("primitive class outside the 19-class palette"));
        }
        primitives.sort_by_key(|p| p.layer);
        let base = primitives
            .first()
            .ok_or_else(|| Error::invalid("scene needs at least one primitive"))?;
        if base.yaw_width < 2.0 * PI || base.pitch_min > -FRAC_PI_2 || base.pitch_max < FRAC_PI_2 {
            return Err(Error::invalid(
                "lowest-layer primitive must cover the whole sphere",
            ));
        }
        Ok(Self { seed, primitives })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn class_at_angles(&self, yaw: f64, pitch: f64) -> u8 {
        self.primitives
            .iter()
            .rev()
            .find(|p| p.contains(yaw, pitch))
            .map(|p| p.class_id)
            .unwrap_or(self.primitives[0].class_id)
    }

    pub fn class_at(&self, d: Direction) -> u8 {
        let (yaw, pitch) = direction_to_angles(d);
        self.class_at_angles(yaw, pitch)
    }
}

/// Yaw width, pitch range and layer templates for object classes.
struct Template {
    class_id: u8,
    width: (f64, f64),
    bottom: (f64, f64),
    top: (f64, f64),
    layer: i32,
    max_instances: usize,
}

const OBJECT_TEMPLATES: [Template; 15] = [
    Template { class_id: 3, width: (0.3, 0.9), bottom: (-0.06, -0.03), top: (0.06, 0.16), layer: 4, max_instances: 2 },
    Template { class_id: 4, width: (0.3, 1.0), bottom: (-0.08, -0.04), top: (0.02, 0.07), layer: 4, max_instances: 2 },
    Template { class_id: 5, width: (0.03, 0.06), bottom: (-0.3, -0.15), top: (0.3, 0.6), layer: 6, max_instances: 3 },
    Template { class_id: 6, width: (0.05, 0.09), bottom: (0.15, 0.25), top: (0.3, 0.4), layer: 7, max_instances: 2 },
    Template { class_id: 7, width: (0.06, 0.12), bottom: (0.1, 0.2), top: (0.25, 0.35), layer: 7, max_instances: 2 },
    Template { class_id: 8, width: (0.3, 1.0), bottom: (-0.05, -0.02), top: (0.2, 0.6), layer: 4, max_instances: 3 },
    Template { class_id: 9, width: (0.4, 1.0), bottom: (-0.6, -0.35), top: (-0.06, -0.03), layer: 3, max_instances: 2 },
    Template { class_id: 11, width: (0.06, 0.12), bottom: (-0.3, -0.15), top: (0.0, 0.08), layer: 6, max_instances: 3 },
    Template { class_id: 12, width: (0.06, 0.12), bottom: (-0.3, -0.15), top: (0.02, 0.1), layer: 6, max_instances: 2 },
    Template { class_id: 13, width: (0.25, 0.6), bottom: (-0.35, -0.15), top: (0.0, 0.06), layer: 5, max_instances: 3 },
    Template { class_id: 14, width: (0.4, 0.9), bottom: (-0.3, -0.15), top: (0.1, 0.2), layer: 5, max_instances: 2 },
    Template { class_id: 15, width: (0.5, 1.0), bottom: (-0.3, -0.15), top: (0.15, 0.25), layer: 5, max_instances: 1 },
    Template { class_id: 16, width: (0.8, 1.5), bottom: (-0.12, -0.06), top: (0.12, 0.2), layer: 5, max_instances: 1 },
    Template { class_id: 17, width: (0.08, 0.16), bottom: (-0.35, -0.2), top: (-0.1, -0.05), layer: 6, max_instances: 2 },
    Template { class_id: 18, width: (0.08, 0.16), bottom: (-0.35, -0.2), top: (-0.1, -0.05), layer: 6, max_instances: 2 },
];

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

fn random_yaw(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-PI..PI)
}

/// Procedurally generates a street scene: sky, road, sidewalks and
/// buildings always, plus `complexity` further object classes.
pub fn generate_scene(seed: u64, complexity: usize) -> Result<SphericalScene> {
    if complexity < 1 {
        return Err(Error::invalid("scene complexity must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = uniform(&mut rng, (-0.03, 0.03));
    let mut prims = vec![
        Primitive {
            class_id: SKY,
            yaw_start: -PI,
            yaw_width: 2.0 * PI,
            pitch_min: -FRAC_PI_2,
            pitch_max: FRAC_PI_2,
            layer: 0,
        },
        Primitive {
            class_id: ROAD,
            yaw_start: -PI,
            yaw_width: 2.0 * PI,
            pitch_min: -FRAC_PI_2,
            pitch_max: horizon - 0.02,
            layer: 1,
        },
    ];
    for side in [-1.0, 1.0] {
        let width = uniform(&mut rng, (1.8, 2.6));
        let center = side * (FRAC_PI_2 + uniform(&mut rng, (-0.2, 0.2)));
        prims.push(Primitive {
            class_id: SIDEWALK,
            yaw_start: center - 0.5 * width,
            yaw_width: width,
            pitch_min: -uniform(&mut rng, (0.25, 0.45)),
            pitch_max: horizon - 0.02,
            layer: 2,
        });
    }
    let blocks = rng.random_range(4..=7);
    for i in 0..blocks {
        let width = uniform(&mut rng, (0.4, 1.4));
        // one block always faces forward so narrow views see a facade
        let center = if i == 0 {
            uniform(&mut rng, (-0.5, 0.5))
        } else {
            random_yaw(&mut rng)
        };
        prims.push(Primitive {
            class_id: BUILDING,
            yaw_start: center - 0.5 * width,
            yaw_width: width,
            pitch_min: horizon - 0.03,
            pitch_max: horizon + uniform(&mut rng, (0.15, 0.7)),
            layer: 3,
        });
    }
    let mut order: Vec<usize> = (0..OBJECT_TEMPLATES.len()).collect();
    order.shuffle(&mut rng);
    for &t in order.iter().take(complexity.min(OBJECT_TEMPLATES.len())) {
        let tpl = &OBJECT_TEMPLATES[t];
        let count = rng.random_range(1..=tpl.max_instances);
        for _ in 0..count {
            let width = uniform(&mut rng, tpl.width);
            let center = random_yaw(&mut rng);
            prims.push(Primitive {
                class_id: tpl.class_id,
                yaw_start: center - 0.5 * width,
                yaw_width: width,
                pitch_min: horizon + uniform(&mut rng, tpl.bottom),
                pitch_max: horizon + uniform(&mut rng, tpl.top),
                layer: tpl.layer,
            });
        }
    }
    SphericalScene::from_primitives(seed, prims)
}

/// Per-domain photometric response: `out = clamp(gain ⊙ rgb + offset)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl Sensor {
    pub const IDENTITY: Sensor = Sensor {
        gain: [1.0, 1.0, 1.0],
        offset: [0.0, 0.0, 0.0],
    };

    /// Response of the panoramic capture rig: a darker, warmer tone curve.
    pub const PANORAMIC: Sensor = Sensor {
        gain: [0.8, 0.7, 0.55],
        offset: [0.12, 0.08, 0.02],
    };

    pub fn for_domain(domain: Domain) -> Sensor {
        match domain {
            Domain::Source => Sensor::IDENTITY,
            Domain::Target => Sensor::PANORAMIC,
        }
    }
}

/// Noise level of synthetic textures.
pub const TEXTURE_NOISE_STD: f64 = 0.05;

/// Renders `scene` through `cam`. Labels come from an exact per-ray lookup;
/// the image is the class color passed through the domain's sensor plus
/// seeded Gaussian noise. Pinhole renders are tagged source, panoramas
/// target.
pub fn render(scene: &SphericalScene, cam: &CameraSpec) -> Result<Sample> {
    let domain = Domain::of_camera(cam);
    render_with(scene, cam, Sensor::for_domain(domain))
}

pub fn render_with(scene: &SphericalScene, cam: &CameraSpec, sensor: Sensor) -> Result<Sample> {
    cam.validate()?;
    let (w, h) = (cam.width, cam.height);
    let labels = render_labels(scene, cam)?;
    let noise_seed = scene.seed
        ^ (w as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (h as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ u64::from(cam.is_panoramic());
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Tensor::randn(&[3, h, w], TEXTURE_NOISE_STD, &mut rng);
    let mut image = Tensor::zeros(&[3, h, w]);
    let data = image.data_mut();
    for (p, &label) in labels.iter().enumerate() {
        let color = PALETTE[usize::from(label)];
        for ch in 0..3 {
            let base = f64::from(color[ch]) / 255.0;
            let idx = ch * h * w + p;
            let v = sensor.gain[ch] * base + sensor.offset[ch] + noise.data()[idx];
            data[idx] = v.clamp(0.0, 1.0);
        }
    }
    Sample::new(image, Some(labels), Domain::of_camera(cam))
}

/// Per-pixel trainIDs of `scene` seen through `cam`.
pub fn render_labels(scene: &SphericalScene, cam: &CameraSpec) -> Result<Vec<u8>> {
    let (w, h) = (cam.width, cam.height);
    let mut labels = Vec::with_capacity(w * h);
    for i in 0..h {
        for j in 0..w {
            let d = cam.pixel_to_direction(j as f64 + 0.5, i as f64 + 0.5)?;
            labels.push(scene.class_at(d));
        }
    }
    Ok(labels)
}

/// Scene seeds for a named split, derived from one base seed so splits
/// never share scenes.
pub fn split_seeds(base_seed: u64, split: &str, count: usize) -> Vec<u64> {
    let tag = split
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01B3));
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ tag);
    (0..count).map(|_| rng.random()).collect()
}

/// Renders `count` scenes for a split through one camera.
pub fn synthesize(
    base_seed: u64,
    split: &str,
    count: usize,
    complexity: usize,
    cam: &CameraSpec,
    labeled: bool,
) -> Result<Vec<Sample>> {
    split_seeds(base_seed, split, count)
        .into_iter()
        .map(|seed| {
            let scene = generate_scene(seed, complexity)?;
            let s = render(&scene, cam)?;
            Ok(if labeled { s } else { s.unlabeled() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(0, 1).unwrap();
        let b = generate_scene(0, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_scene(0, 3).unwrap();
        let b = generate_scene(1, 3).unwrap();
        assert_ne!(a.primitives(), b.primitives());
    }

    #[test]
    fn zero_complexity_rejected() {
        assert!(matches!(generate_scene(0, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn complexity_five_shows_five_classes() {
        let cam = CameraSpec::equirectangular(256, 64).unwrap();
        for seed in 0..10 {
            let scene = generate_scene(seed, 5).unwrap();
            let labels = render_labels(&scene, &cam).unwrap();
            let classes: BTreeSet<u8> = labels.into_iter().collect();
            assert!(classes.len() >= 5, "seed {seed}: {classes:?}");
            for must in [SKY, ROAD, BUILDING] {
                assert!(classes.contains(&must));
            }
        }
    }

    #[test]
    fn single_primitive_scene_renders_constant() {
        let sky = Primitive {
            class_id: SKY,
            yaw_start: -PI,
            yaw_width: 2.0 * PI,
            pitch_min: -FRAC_PI_2,
            pitch_max: FRAC_PI_2,
            layer: 0,
        };
        let scene = SphericalScene::from_primitives(3, vec![sky]).unwrap();
        for cam in [
            CameraSpec::equirectangular(32, 16).unwrap(),
            CameraSpec::pinhole(32, 16, 1.2).unwrap(),
        ] {
            let s = render(&scene, &cam).unwrap();
            assert!(s.labels.unwrap().iter().all(|&l| l == SKY));
        }
    }

    #[test]
    fn render_dims_and_domains() {
        let scene = generate_scene(4, 2).unwrap();
        let pano = render(&scene, &CameraSpec::equirectangular(2048, 400).unwrap()).unwrap();
        assert_eq!((pano.width(), pano.height()), (2048, 400));
        assert_eq!(pano.domain, Domain::Target);
        let pin = render(&scene, &CameraSpec::pinhole(64, 32, FRAC_PI_2).unwrap()).unwrap();
        assert_eq!(pin.domain, Domain::Source);
        assert!(pano.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn class_histograms_differ_between_views() {
        let scene = generate_scene(9, 4).unwrap();
        let hist = |cam: &CameraSpec| {
            let l = render_labels(&scene, cam).unwrap();
            let mut h = [0f64; NUM_CLASSES];
            for &c in &l {
                h[usize::from(c)] += 1.0 / l.len() as f64;
            }
            h
        };
        let a = hist(&CameraSpec::pinhole(128, 64, FRAC_PI_2).unwrap());
        let b = hist(&CameraSpec::equirectangular(256, 64).unwrap());
        assert_ne!(a, b);
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let a: BTreeSet<u64> = split_seeds(1, "source_train", 50).into_iter().collect();
        let b: BTreeSet<u64> = split_seeds(1, "target_val", 50).into_iter().collect();
        assert!(a.is_disjoint(&b));
    }
}
