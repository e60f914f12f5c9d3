//! Labeled synthetic landmark corpora built from eight pose archetypes.
//!
//! Every template starts from one standing body skeleton in the 33-point
//! layout, adjusts limbs for the class, and places the body in the frame
//! through a per-class viewport. Each template coordinate lies in
//! [0.1, 0.9] or at least 0.08 outside the frame, so noise at the default
//! scale rarely moves a keypoint across an edge. Keypoints outside the frame
//! are clamped to its edge and get visibility 0, so emitted files validate
//! without warnings. 17-point records are projected by keypoint name.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmark::{Keypoint, LandmarkRecord, TopologyKind, POSE3D33};
use crate::ranking::ProductRecord;

pub const NUM_CLASSES: u8 = 8;
pub const NO_POSE_CLASS: u8 = 5;
pub const DEFAULT_NOISE: f64 = 0.02;
pub const DEFAULT_GROUPING: usize = 8;
pub const IMAGE_WIDTH: u32 = 1000;
pub const IMAGE_HEIGHT: u32 = 1500;

const DESCRIPTIONS: [&str; 8] = [
    "Upper body till waist | nose visible | front",
    "Upper body till waist | half | back",
    "Full body | knee bent | front",
    "Close up | chin visible | chest",
    "Full body",
    "Non-human | tables | fabric closeup",
    "Chin to torso",
    "Full body",
];

const SUBCATEGORIES: [&str; 3] = ["Polo shirts", "T-shirts", "Men casual shirts"];

/// Mean product rating contributed by an image of each class.
const CLASS_APPEAL: [f64; 8] = [4.6, 3.9, 4.2, 3.4, 4.4, 2.8, 3.7, 4.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("unknown pose class {0} (expected 0..=7)")]
    UnknownClass(u8),
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplatePoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseTemplate {
    pub class_id: u8,
    pub description: &'static str,
    /// Normalized coordinates in the 33-point layout, before clamping.
    /// Empty for the no-pose class.
    pub base_keypoints: Vec<TemplatePoint>,
    /// True where the keypoint lies inside the frame.
    pub visible_mask: Vec<bool>,
    pub is_no_pose: bool,
}

#[derive(Clone, Copy)]
enum Arms {
    Down,
    OnHips,
    Folded,
}

struct Pose {
    stance: f64,
    knee_bend: bool,
    arms: Arms,
}

struct Viewport {
    scale: f64,
    /// Image y of the body's top (head crown).
    top: f64,
    /// +1 when the subject faces the camera (their left on the image right).
    facing: f64,
    /// Horizontal foreshortening; below 1 when the torso is turned away.
    width: f64,
    /// Image x of the body midline.
    center: f64,
}

fn view(scale: f64, top: f64) -> Viewport {
    Viewport { scale, top, facing: 1.0, width: 1.0, center: 0.5 }
}

/// Standing skeleton: x is the offset toward the subject's left, y runs from
/// the head crown (0) to the soles (1), z is depth (negative toward camera).
fn skeleton(pose: &Pose) -> Vec<TemplatePoint> {
    let p = |x, y, z| TemplatePoint { x, y, z };
    let s = pose.stance;
    let (knee_x, knee_y, ankle_y) = if pose.knee_bend { (0.15, 0.68, 0.86) } else { (0.075 * s, 0.73, 0.93) };
    let ankle_x = if pose.knee_bend { 0.09 } else { 0.075 * s };
    let (elbow, wrist, hand_y) = match pose.arms {
        Arms::Down => ((0.14, 0.33), (0.15, 0.47), 0.51),
        Arms::OnHips => ((0.22, 0.34), (0.09, 0.50), 0.52),
        // Forearms cross the chest, so each wrist sits past the midline.
        Arms::Folded => ((0.12, 0.34), (-0.05, 0.31), 0.31),
    };
    let mut out = vec![p(0.0, 0.06, -0.15)];
    let sided = |x: f64, y: f64, z: f64| [p(x, y, z), p(-x, y, z)];
    let eyes = [(0.012, 0.045), (0.022, 0.045), (0.032, 0.045)];
    for &(x, y) in &eyes {
        out.push(p(x, y, -0.13));
    }
    for &(x, y) in &eyes {
        out.push(p(-x, y, -0.13));
    }
    out.extend(sided(0.045, 0.055, -0.05));
    out.extend(sided(0.015, 0.085, -0.12));
    out.extend(sided(0.11, 0.18, 0.0));
    out.extend(sided(elbow.0, elbow.1, -0.02));
    out.extend(sided(wrist.0, wrist.1, -0.06));
    out.extend(sided(wrist.0 + 0.005, hand_y, -0.07));
    out.extend(sided(wrist.0 - 0.005, hand_y + 0.005, -0.08));
    out.extend(sided(wrist.0 - 0.02, hand_y - 0.01, -0.08));
    out.extend(sided(0.07, 0.52, 0.0));
    out.extend(sided(knee_x, knee_y, if pose.knee_bend { -0.08 } else { 0.0 }));
    out.extend(sided(ankle_x, ankle_y, 0.02));
    out.extend(sided(ankle_x - 0.005, ankle_y + 0.03, 0.05));
    out.extend(sided(ankle_x + 0.01, ankle_y + 0.06, -0.06));
    debug_assert_eq!(out.len(), 33);
    out
}

fn class_layout(class_id: u8) -> Option<(Pose, Viewport)> {
    let standing = Pose { stance: 1.0, knee_bend: false, arms: Arms::Down };
    Some(match class_id {
        0 => (standing, view(1.45, 0.08)),
        1 => (standing, Viewport { facing: -1.0, ..view(1.45, 0.08) }),
        2 => (Pose { knee_bend: true, ..standing }, Viewport { center: 0.34, ..view(0.85, 0.1) }),
        3 => (Pose { arms: Arms::Folded, ..standing }, Viewport { width: 0.5, ..view(3.0, -0.38) }),
        4 => (standing, view(0.8, 0.1)),
        6 => (standing, Viewport { width: 0.7, ..view(2.2, -0.28) }),
        7 => (Pose { stance: 2.2, knee_bend: false, arms: Arms::OnHips }, Viewport { center: 0.68, ..view(0.76, 0.12) }),
        _ => return None,
    })
}

pub fn template(class_id: u8) -> Result<PoseTemplate, SynthError> {
    if class_id >= NUM_CLASSES {
        return Err(SynthError::UnknownClass(class_id));
    }
    let description = DESCRIPTIONS[class_id as usize];
    let Some((pose, view)) = class_layout(class_id) else {
        return Ok(PoseTemplate { class_id, description, base_keypoints: Vec::new(), visible_mask: Vec::new(), is_no_pose: true });
    };
    let base_keypoints: Vec<TemplatePoint> = skeleton(&pose)
        .into_iter()
        .map(|b| TemplatePoint {
            x: view.center + view.facing * view.width * b.x * view.scale,
            y: view.top + b.y * view.scale,
            z: view.facing * b.z * view.scale,
        })
        .collect();
    let visible_mask = base_keypoints.iter().map(|k| (0.0..=1.0).contains(&k.x) && (0.0..=1.0).contains(&k.y)).collect();
    Ok(PoseTemplate { class_id, description, base_keypoints, visible_mask, is_no_pose: false })
}

fn layout_indices(topology: TopologyKind) -> Vec<usize> {
    topology
        .topology()
        .keypoint_names
        .iter()
        .map(|n| POSE3D33.index_of(n).expect("2D names exist in the 33-point layout"))
        .collect()
}

/// One noisy sample. The generator stream is derived from
/// `(seed, class_id, index)` alone.
pub fn generate_class_sample(
    class_id: u8,
    noise_sigma: f64,
    seed: u64,
    index: u64,
    topology: TopologyKind,
) -> Result<LandmarkRecord, SynthError> {
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(SynthError::InvalidSpec(format!("noise sigma {noise_sigma}")));
    }
    let t = template(class_id)?;
    let image_id = format!("img-c{class_id}-{index:06}");
    if t.is_no_pose {
        return Ok(LandmarkRecord::undetected(image_id, String::new(), topology, IMAGE_WIDTH, IMAGE_HEIGHT));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class_id as u64) << 48) | index);
    let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
    let mut jitter = |v: f64| if noise_sigma > 0.0 { v + normal.sample(&mut rng) } else { v };

    let (w, h) = (IMAGE_WIDTH as f64, IMAGE_HEIGHT as f64);
    let keypoints = layout_indices(topology)
        .into_iter()
        .map(|i| {
            let b = t.base_keypoints[i];
            let (x, y, z) = (jitter(b.x), jitter(b.y), jitter(b.z));
            let visibility = if t.visible_mask[i] { 1.0 } else { 0.0 };
            let (px, py) = (x.clamp(0.0, 1.0) * w, y.clamp(0.0, 1.0) * h);
            Keypoint {
                x: px,
                y: py,
                z: topology.topology().has_z.then_some(z),
                visibility,
            }
        })
        .collect();
    Ok(LandmarkRecord {
        image_id,
        product_id: String::new(),
        topology,
        width: IMAGE_WIDTH,
        height: IMAGE_HEIGHT,
        detected: true,
        keypoints,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub classes: Vec<u8>,
    pub per_class: usize,
    pub noise_sigma: f64,
    pub topology: TopologyKind,
    pub seed: u64,
    pub product_grouping: usize,
}

impl CorpusSpec {
    pub fn new(classes: Vec<u8>, per_class: usize, topology: TopologyKind, seed: u64) -> Self {
        CorpusSpec { classes, per_class, noise_sigma: DEFAULT_NOISE, topology, seed, product_grouping: DEFAULT_GROUPING }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        if let Some(&c) = self.classes.iter().find(|&&c| c >= NUM_CLASSES) {
            return Err(SynthError::UnknownClass(c));
        }
        let mut sorted = self.classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return bad("duplicate class".into());
        }
        if self.per_class == 0 {
            return bad("per_class must be at least 1".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        if self.product_grouping == 0 {
            return bad("product grouping must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    /// Grouped by product, in product order.
    pub records: Vec<LandmarkRecord>,
    /// Aligned with `records`.
    pub ground_truth: Vec<GroundTruth>,
    pub products: Vec<ProductRecord>,
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.classes.len() * spec.per_class);
    for &c in &spec.classes {
        for i in 0..spec.per_class {
            samples.push((c, generate_class_sample(c, spec.noise_sigma, spec.seed, i as u64, spec.topology)?));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    samples.shuffle(&mut rng);

    let width = (samples.len().div_ceil(spec.product_grouping)).to_string().len().max(4);
    let reviews = LogNormal::new(200f64.ln(), 1.0).expect("valid log-normal");
    let rating_noise = Normal::new(0.0, 0.2).expect("valid sigma");
    let mut records = Vec::with_capacity(samples.len());
    let mut ground_truth = Vec::with_capacity(samples.len());
    let mut products = Vec::new();
    for (p, chunk) in samples.chunks(spec.product_grouping).enumerate() {
        let product_id = format!("p{p:0width$}");
        let appeal = chunk.iter().map(|(c, _)| CLASS_APPEAL[*c as usize]).sum::<f64>() / chunk.len() as f64;
        let avg_rating = ((appeal + rating_noise.sample(&mut rng)).clamp(1.0, 5.0) * 100.0).round() / 100.0;
        let num_reviews = reviews.sample(&mut rng).round() as u64;
        let subcategory = SUBCATEGORIES[rng.random_range(0..SUBCATEGORIES.len())];
        let mut image_ids = Vec::with_capacity(chunk.len());
        for (c, r) in chunk {
            let mut r = r.clone();
            r.product_id = product_id.clone();
            image_ids.push(r.image_id.clone());
            ground_truth.push(GroundTruth { image_id: r.image_id.clone(), class_id: *c });
            records.push(r);
        }
        products.push(ProductRecord {
            product_id,
            category: "Men".into(),
            subcategory: subcategory.into(),
            product_type: "Topwear".into(),
            avg_rating,
            num_reviews,
            image_ids,
        });
    }
    Ok(SynthCorpus { records, ground_truth, products })
}

/// Size-weighted mean over clusters of the majority-class fraction.
pub fn cluster_purity(clusters: &[usize], classes: &[u8]) -> f64 {
    assert_eq!(clusters.len(), classes.len(), "purity inputs must align");
    if clusters.is_empty() {
        return 1.0;
    }
    let mut table: std::collections::BTreeMap<usize, [usize; 256]> = Default::default();
    for (&k, &c) in clusters.iter().zip(classes) {
        table.entry(k).or_insert([0; 256])[c as usize] += 1;
    }
    let majority: usize = table.values().map(|counts| *counts.iter().max().expect("non-empty")).sum();
    majority as f64 / clusters.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{build_embedding, FeatureConfig};
    use crate::landmark::{normalize, validate_topology};
    use crate::matrix::squared_distance;

    fn embedding(class: u8, topology: TopologyKind) -> Vec<f64> {
        let r = generate_class_sample(class, 0.0, 0, 0, topology).unwrap();
        build_embedding(&normalize(&r).unwrap(), &FeatureConfig::new(topology)).unwrap().vector
    }

    #[test]
    fn templates_are_separated() {
        for topo in [TopologyKind::Pose2d17, TopologyKind::Pose3d33] {
            let embs: Vec<Vec<f64>> = (0..NUM_CLASSES).map(|c| embedding(c, topo)).collect();
            for a in 0..embs.len() {
                for b in 0..a {
                    let d = squared_distance(&embs[a], &embs[b]).sqrt();
                    assert!(d > 10.0 * DEFAULT_NOISE, "{topo}: classes {a} and {b} are {d} apart");
                }
            }
        }
    }

    #[test]
    fn template_coordinates_keep_clear_of_edges() {
        for c in 0..NUM_CLASSES {
            for (i, k) in template(c).unwrap().base_keypoints.iter().enumerate() {
                for v in [k.x, k.y] {
                    assert!((0.1..=0.9).contains(&v) || !(-0.08..=1.08).contains(&v), "class {c} keypoint {i}: {v}");
                }
            }
        }
    }

    #[test]
    fn front_and_back_shoulder_ratios_are_reciprocal() {
        for topo in [TopologyKind::Pose2d17, TopologyKind::Pose3d33] {
            let cfg = FeatureConfig::new(topo);
            let i = cfg.feature_index("ratio_x_shoulder").unwrap();
            let (front, back) = (embedding(0, topo)[i], embedding(1, topo)[i]);
            assert!(front > 1.0);
            assert!((front * back - 1.0).abs() < 1e-12, "{front} * {back}");
        }
    }

    #[test]
    fn no_pose_class() {
        let r = generate_class_sample(5, 0.02, 9, 3, TopologyKind::Pose3d33).unwrap();
        assert!(!r.detected);
        assert!(r.keypoints.is_empty());
        assert_eq!(generate_class_sample(8, 0.02, 9, 3, TopologyKind::Pose3d33), Err(SynthError::UnknownClass(8)));
    }

    #[test]
    fn samples_are_valid_and_deterministic() {
        for topo in [TopologyKind::Pose2d17, TopologyKind::Pose3d33] {
            for c in 0..NUM_CLASSES {
                let a = generate_class_sample(c, 0.02, 4, 17, topo).unwrap();
                assert_eq!(a, generate_class_sample(c, 0.02, 4, 17, topo).unwrap());
                let b = generate_class_sample(c, 0.02, 4, 18, topo).unwrap();
                assert_ne!(a.image_id, b.image_id);
                assert_eq!(c == NO_POSE_CLASS, a.keypoints == b.keypoints, "class {c}");
                let mut copy = a.clone();
                assert!(validate_topology(&mut copy).unwrap().is_empty(), "class {c} needed clamping");
            }
            let z = generate_class_sample(2, 0.0, 1, 0, topo).unwrap();
            assert_eq!(z, generate_class_sample(2, 0.0, 1, 0, topo).unwrap());
        }
    }

    #[test]
    fn corpus_arithmetic() {
        let spec = CorpusSpec::new((0..6).collect(), 200, TopologyKind::Pose2d17, 1);
        let c = generate_corpus(&spec).unwrap();
        assert_eq!(c.records.len(), 1200);
        assert_eq!(c.products.len(), 150);
        assert!(c.products.iter().all(|p| p.image_ids.len() == 8));
        assert_eq!(c, generate_corpus(&spec).unwrap());
        for (r, g) in c.records.iter().zip(&c.ground_truth) {
            assert_eq!(r.image_id, g.image_id);
        }
        let mut ids: Vec<&str> = c.records.iter().map(|r| r.image_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 1200);
    }

    #[test]
    fn spec_validation() {
        let mut spec = CorpusSpec::new(vec![0, 0], 1, TopologyKind::Pose2d17, 1);
        assert!(spec.validate().is_err());
        spec.classes = vec![9];
        assert_eq!(spec.validate(), Err(SynthError::UnknownClass(9)));
        spec.classes = vec![1];
        spec.per_class = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn purity_examples() {
        assert_eq!(cluster_purity(&[0, 0, 1, 1], &[3, 3, 4, 4]), 1.0);
        assert_eq!(cluster_purity(&[0, 0, 0, 1], &[3, 3, 4, 4]), 0.75);
        assert_eq!(cluster_purity(&[0, 0, 0, 0], &[1, 2, 3, 4]), 0.25);
    }
}
