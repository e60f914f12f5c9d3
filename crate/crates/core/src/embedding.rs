//! Pose embeddings engineered from normalized landmarks.
//!
//! The layout is fixed per topology and fully described by
//! [`FeatureConfig::feature_names`]:
//!
//! * `POSE2D17`, 61 features: x/y of every keypoint (34), left/right x- and
//!   y-ratios for the 8 symmetric pairs (16), bounding box width, height,
//!   aspect, center x, center y (5), and six skeletal spans (6).
//! * `POSE3D33`, 77 features: x/y of every keypoint (66), left/right x-ratios
//!   for the eyes, ears, shoulders, elbows, wrists, hips, knees and ankles (8),
//!   and three depth features: mean z, nose z relative to the shoulders, and
//!   z span (3).
//!
//! Undetected images map to the all-zero vector.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::landmark::{NormalizedKeypoint, NormalizedLandmarkSet, TopologyKind};
use crate::matrix::Matrix;

pub const DIM_POSE2D17: usize = 61;
pub const DIM_POSE3D33: usize = 77;
pub const DEFAULT_RATIO_CLAMP: f64 = 10.0;
pub const DEFAULT_RATIO_EPSILON: f64 = 1e-6;

const SPAN_FEATURES: [&str; 6] = [
    "shoulder_span",
    "hip_span",
    "torso_length",
    "neck_length",
    "left_leg_length",
    "right_leg_length",
];
const BBOX_FEATURES: [&str; 5] =
    ["bbox_width", "bbox_height", "bbox_aspect", "bbox_center_x", "bbox_center_y"];
const Z_FEATURES: [&str; 3] = ["z_mean", "z_nose_minus_shoulders", "z_span"];

/// Describes the embedding layout for one topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub topology: TopologyKind,
    pub dimension: usize,
    pub ratio_clamp: f64,
    pub ratio_epsilon: f64,
    pub feature_names: Vec<String>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("record {image_id} has topology {record} but the feature config expects {config}")]
    TopologyMismatch { image_id: String, record: TopologyKind, config: TopologyKind },
    #[error("record {image_id} has {found} keypoints, expected {expected}")]
    KeypointCount { image_id: String, expected: usize, found: usize },
    #[error("record {image_id} is missing depth on keypoint {index}")]
    MissingDepth { image_id: String, index: usize },
    #[error("invalid ratio parameters: clamp {clamp}, epsilon {epsilon}")]
    RatioParams { clamp: f64, epsilon: f64 },
}

impl FeatureConfig {
    pub fn new(topology: TopologyKind) -> Self {
        Self::with_ratio_params(topology, DEFAULT_RATIO_CLAMP, DEFAULT_RATIO_EPSILON)
            .expect("default ratio parameters are valid")
    }

    pub fn with_ratio_params(
        topology: TopologyKind,
        ratio_clamp: f64,
        ratio_epsilon: f64,
    ) -> Result<Self, EmbeddingError> {
        if !(ratio_clamp.is_finite() && ratio_clamp > 0.0 && ratio_epsilon.is_finite() && ratio_epsilon > 0.0) {
            return Err(EmbeddingError::RatioParams { clamp: ratio_clamp, epsilon: ratio_epsilon });
        }
        let feature_names = canonical_feature_names(topology);
        let mut config = FeatureConfig {
            topology,
            dimension: feature_names.len(),
            ratio_clamp,
            ratio_epsilon,
            feature_names,
            fingerprint: String::new(),
        };
        config.fingerprint = config.compute_fingerprint();
        Ok(config)
    }

    /// Content hash over every field except the fingerprint itself.
    pub fn compute_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.topology.as_str().as_bytes());
        hasher.update((self.dimension as u64).to_le_bytes());
        hasher.update(self.ratio_clamp.to_bits().to_le_bytes());
        hasher.update(self.ratio_epsilon.to_bits().to_le_bytes());
        for name in &self.feature_names {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// True when the stored fingerprint matches the content and the layout is
    /// the canonical one for the topology.
    pub fn is_consistent(&self) -> bool {
        self.fingerprint == self.compute_fingerprint()
            && self.feature_names == canonical_feature_names(self.topology)
            && self.dimension == self.feature_names.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }
}

fn canonical_feature_names(topology: TopologyKind) -> Vec<String> {
    let t = topology.topology();
    let mut names = Vec::new();
    for kp in t.keypoint_names {
        names.push(format!("x_{kp}"));
        names.push(format!("y_{kp}"));
    }
    match topology {
        TopologyKind::Pose2d17 => {
            for p in t.symmetric_pairs {
                names.push(format!("ratio_x_{}", p.name));
                names.push(format!("ratio_y_{}", p.name));
            }
            names.extend(BBOX_FEATURES.iter().map(|s| s.to_string()));
            names.extend(SPAN_FEATURES.iter().map(|s| s.to_string()));
        }
        TopologyKind::Pose3d33 => {
            for p in &t.symmetric_pairs[..8] {
                names.push(format!("ratio_x_{}", p.name));
            }
            names.extend(Z_FEATURES.iter().map(|s| s.to_string()));
        }
    }
    names
}

/// Division that saturates instead of blowing up.
///
/// Returns `numerator / denominator` clamped to `[-ratio_clamp, ratio_clamp]`;
/// when `|denominator| < ratio_epsilon` the result is `sign(numerator) * ratio_clamp`,
/// or 0 for a zero numerator.
pub fn safe_ratio(numerator: f64, denominator: f64, config: &FeatureConfig) -> f64 {
    let clamp = config.ratio_clamp;
    if denominator.abs() < config.ratio_epsilon {
        if numerator == 0.0 {
            0.0
        } else {
            clamp.copysign(numerator)
        }
    } else {
        (numerator / denominator).clamp(-clamp, clamp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEmbedding {
    pub image_id: String,
    pub product_id: String,
    pub vector: Vec<f64>,
    pub is_no_pose: bool,
}

fn dist(a: NormalizedKeypoint, b: NormalizedKeypoint) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

fn midpoint(a: NormalizedKeypoint, b: NormalizedKeypoint) -> NormalizedKeypoint {
    NormalizedKeypoint {
        x: 0.5 * (a.x + b.x),
        y: 0.5 * (a.y + b.y),
        z: None,
        visibility: 1.0,
    }
}

/// Builds the embedding for one image.
pub fn build_embedding(
    lm: &NormalizedLandmarkSet,
    config: &FeatureConfig,
) -> Result<PoseEmbedding, EmbeddingError> {
    if lm.topology != config.topology {
        return Err(EmbeddingError::TopologyMismatch {
            image_id: lm.image_id.clone(),
            record: lm.topology,
            config: config.topology,
        });
    }
    let topo = config.topology.topology();
    if !lm.detected {
        return Ok(PoseEmbedding {
            image_id: lm.image_id.clone(),
            product_id: lm.product_id.clone(),
            vector: vec![0.0; config.dimension],
            is_no_pose: true,
        });
    }
    if lm.coords.len() != topo.keypoint_count() {
        return Err(EmbeddingError::KeypointCount {
            image_id: lm.image_id.clone(),
            expected: topo.keypoint_count(),
            found: lm.coords.len(),
        });
    }

    let c = &lm.coords;
    let mut v = Vec::with_capacity(config.dimension);
    for kp in c {
        v.push(kp.x);
        v.push(kp.y);
    }

    match config.topology {
        TopologyKind::Pose2d17 => {
            for p in topo.symmetric_pairs {
                v.push(safe_ratio(c[p.left].x, c[p.right].x, config));
                v.push(safe_ratio(c[p.left].y, c[p.right].y, config));
            }

            let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
            for kp in c {
                x0 = x0.min(kp.x);
                x1 = x1.max(kp.x);
                y0 = y0.min(kp.y);
                y1 = y1.max(kp.y);
            }
            let (bw, bh) = (x1 - x0, y1 - y0);
            v.extend([bw, bh, safe_ratio(bw, bh, config), 0.5 * (x0 + x1), 0.5 * (y0 + y1)]);

            let kp = |name: &str| c[topo.index_of(name).expect("2D keypoint name")];
            let shoulders = (kp("left_shoulder"), kp("right_shoulder"));
            let hips = (kp("left_hip"), kp("right_hip"));
            let shoulder_mid = midpoint(shoulders.0, shoulders.1);
            let hip_mid = midpoint(hips.0, hips.1);
            v.extend([
                dist(shoulders.0, shoulders.1),
                dist(hips.0, hips.1),
                dist(shoulder_mid, hip_mid),
                dist(kp("nose"), shoulder_mid),
                dist(hips.0, kp("left_ankle")),
                dist(hips.1, kp("right_ankle")),
            ]);
        }
        TopologyKind::Pose3d33 => {
            for p in &topo.symmetric_pairs[..8] {
                v.push(safe_ratio(c[p.left].x, c[p.right].x, config));
            }
            let mut zs = Vec::with_capacity(c.len());
            for (index, kp) in c.iter().enumerate() {
                zs.push(kp.z.ok_or_else(|| EmbeddingError::MissingDepth {
                    image_id: lm.image_id.clone(),
                    index,
                })?);
            }
            let z_at = |name: &str| zs[topo.index_of(name).expect("3D keypoint name")];
            let mean = zs.iter().sum::<f64>() / zs.len() as f64;
            let shoulders = 0.5 * (z_at("left_shoulder") + z_at("right_shoulder"));
            let (lo, hi) = zs
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| (lo.min(z), hi.max(z)));
            v.extend([mean, z_at("nose") - shoulders, hi - lo]);
        }
    }
    debug_assert_eq!(v.len(), config.dimension);

    Ok(PoseEmbedding {
        image_id: lm.image_id.clone(),
        product_id: lm.product_id.clone(),
        vector: v,
        is_no_pose: false,
    })
}

/// Embeddings for a corpus, one row per record in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dimension: usize,
    pub rows: Vec<PoseEmbedding>,
}

impl EmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.rows.len() * self.dimension);
        for r in &self.rows {
            data.extend_from_slice(&r.vector);
        }
        Matrix::from_vec(self.rows.len(), self.dimension, data)
    }
}

pub fn embed_corpus(
    records: &[NormalizedLandmarkSet],
    config: &FeatureConfig,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    let rows = records
        .iter()
        .map(|r| build_embedding(r, config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EmbeddingMatrix { dimension: config.dimension, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmark::{POSE2D17, POSE3D33};
    use proptest::prelude::*;

    fn kp(x: f64, y: f64, z: Option<f64>) -> NormalizedKeypoint {
        NormalizedKeypoint { x, y, z, visibility: 1.0 }
    }

    fn set(topology: TopologyKind, coords: Vec<NormalizedKeypoint>) -> NormalizedLandmarkSet {
        NormalizedLandmarkSet {
            image_id: "i".into(),
            product_id: "p".into(),
            topology,
            detected: true,
            coords,
        }
    }

    /// Symmetric frontal template: left keypoints at 1 - x of their right partner.
    fn frontal_2d() -> NormalizedLandmarkSet {
        let right_x = [0.45, 0.4, 0.4, 0.38, 0.36, 0.42, 0.42, 0.43];
        let ys = [0.1, 0.12, 0.2, 0.35, 0.5, 0.55, 0.72, 0.9];
        let mut coords = vec![kp(0.5, 0.08, None); 17];
        for (i, p) in POSE2D17.symmetric_pairs.iter().enumerate() {
            coords[p.right] = kp(right_x[i], ys[i], None);
            coords[p.left] = kp(1.0 - right_x[i], ys[i], None);
        }
        set(TopologyKind::Pose2d17, coords)
    }

    fn frontal_3d() -> NormalizedLandmarkSet {
        let coords = (0..33)
            .map(|i| {
                let t = i as f64 / 32.0;
                kp(0.3 + 0.4 * t, 0.1 + 0.8 * t, Some(-0.2 + 0.3 * t))
            })
            .collect();
        set(TopologyKind::Pose3d33, coords)
    }

    #[test]
    fn dimensions_match_topologies() {
        assert_eq!(FeatureConfig::new(TopologyKind::Pose2d17).dimension, 61);
        assert_eq!(FeatureConfig::new(TopologyKind::Pose3d33).dimension, 77);
        let e = build_embedding(&frontal_2d(), &FeatureConfig::new(TopologyKind::Pose2d17)).unwrap();
        assert_eq!(e.vector.len(), 61);
        let e = build_embedding(&frontal_3d(), &FeatureConfig::new(TopologyKind::Pose3d33)).unwrap();
        assert_eq!(e.vector.len(), 77);
    }

    #[test]
    fn feature_names_unique() {
        for kind in TopologyKind::ALL {
            let cfg = FeatureConfig::new(kind);
            let unique: std::collections::HashSet<_> = cfg.feature_names.iter().collect();
            assert_eq!(unique.len(), cfg.dimension);
            assert!(cfg.is_consistent());
        }
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = FeatureConfig::new(TopologyKind::Pose2d17);
        let b = FeatureConfig::with_ratio_params(TopologyKind::Pose2d17, 5.0, 1e-6).unwrap();
        let c = FeatureConfig::new(TopologyKind::Pose3d33);
        assert_ne!(a.fingerprint, b.fingerprint);
        assert_ne!(a.fingerprint, c.fingerprint);
        assert_eq!(a.fingerprint, FeatureConfig::new(TopologyKind::Pose2d17).fingerprint);
        let mut edited = a.clone();
        edited.ratio_clamp = 9.0;
        assert!(!edited.is_consistent());
    }

    #[test]
    fn safe_ratio_examples() {
        let cfg = FeatureConfig::new(TopologyKind::Pose2d17);
        assert_eq!(safe_ratio(0.4, 0.2, &cfg), 2.0);
        assert_eq!(safe_ratio(0.5, 0.0, &cfg), 10.0);
        assert_eq!(safe_ratio(-0.5, 0.0, &cfg), -10.0);
        assert_eq!(safe_ratio(0.0, 0.0, &cfg), 0.0);
        assert_eq!(safe_ratio(5.0, 0.1, &cfg), 10.0);
        assert_eq!(safe_ratio(-5.0, 0.1, &cfg), -10.0);
    }

    #[test]
    fn no_pose_is_zero_sentinel() {
        let cfg = FeatureConfig::new(TopologyKind::Pose3d33);
        let mut lm = frontal_3d();
        lm.detected = false;
        lm.coords.clear();
        let e = build_embedding(&lm, &cfg).unwrap();
        assert!(e.is_no_pose);
        assert_eq!(e.vector, vec![0.0; 77]);
    }

    #[test]
    fn shoulder_ratio_from_template() {
        let cfg = FeatureConfig::new(TopologyKind::Pose2d17);
        let mut lm = frontal_2d();
        lm.coords[5].x = 0.6;
        lm.coords[6].x = 0.4;
        let e = build_embedding(&lm, &cfg).unwrap();
        let i = cfg.feature_index("ratio_x_shoulder").unwrap();
        assert!((e.vector[i] - 1.5).abs() < 1e-15);
        assert_eq!(e.vector[i], 0.6 / 0.4);
    }

    #[test]
    fn bbox_and_span_features_hand_checked() {
        let cfg = FeatureConfig::new(TopologyKind::Pose2d17);
        let e = build_embedding(&frontal_2d(), &cfg).unwrap();
        let f = |n: &str| e.vector[cfg.feature_index(n).unwrap()];
        // x range is [0.36, 0.64], y range is [0.08, 0.9].
        assert!((f("bbox_width") - 0.28).abs() < 1e-12);
        assert!((f("bbox_height") - 0.82).abs() < 1e-12);
        assert!((f("bbox_aspect") - 0.28 / 0.82).abs() < 1e-12);
        assert!((f("bbox_center_x") - 0.5).abs() < 1e-12);
        assert!((f("bbox_center_y") - 0.49).abs() < 1e-12);
        assert!((f("shoulder_span") - 0.2).abs() < 1e-12);
        assert!((f("hip_span") - 0.16).abs() < 1e-12);
        assert!((f("torso_length") - 0.35).abs() < 1e-12);
        assert!((f("neck_length") - 0.12).abs() < 1e-12);
        let leg = (0.01f64.powi(2) + 0.35f64.powi(2)).sqrt();
        assert!((f("left_leg_length") - leg).abs() < 1e-12);
        assert!((f("right_leg_length") - leg).abs() < 1e-12);
    }

    #[test]
    fn depth_features_hand_checked() {
        let cfg = FeatureConfig::new(TopologyKind::Pose3d33);
        let mut lm = frontal_3d();
        for c in lm.coords.iter_mut() {
            c.z = Some(0.0);
        }
        lm.coords[0].z = Some(-0.33);
        lm.coords[11].z = Some(-0.1);
        lm.coords[12].z = Some(0.1);
        lm.coords[30].z = Some(0.66);
        let e = build_embedding(&lm, &cfg).unwrap();
        let f = |n: &str| e.vector[cfg.feature_index(n).unwrap()];
        assert!((f("z_mean") - 0.33 / 33.0).abs() < 1e-15);
        assert!((f("z_nose_minus_shoulders") + 0.33).abs() < 1e-15);
        assert!((f("z_span") - 0.99).abs() < 1e-15);
    }

    #[test]
    fn topology_mismatch_names_both() {
        let cfg = FeatureConfig::new(TopologyKind::Pose3d33);
        let err = build_embedding(&frontal_2d(), &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("POSE2D17") && msg.contains("POSE3D33"));
    }

    #[test]
    fn degenerate_pose_has_zero_extent() {
        let cfg = FeatureConfig::new(TopologyKind::Pose2d17);
        let lm = set(TopologyKind::Pose2d17, vec![kp(0.3, 0.3, None); 17]);
        let e = build_embedding(&lm, &cfg).unwrap();
        for n in ["bbox_width", "bbox_height", "bbox_aspect", "shoulder_span", "torso_length"] {
            assert_eq!(e.vector[cfg.feature_index(n).unwrap()], 0.0, "{n}");
        }
        assert_eq!(e.vector[cfg.feature_index("ratio_x_eye").unwrap()], 1.0);
    }

    #[test]
    fn corpus_order_and_sentinels() {
        let cfg = FeatureConfig::new(TopologyKind::Pose2d17);
        assert!(embed_corpus(&[], &cfg).unwrap().is_empty());
        let mut a = frontal_2d();
        a.image_id = "a".into();
        let mut b = a.clone();
        b.image_id = "b".into();
        b.detected = false;
        b.coords.clear();
        let mut c = a.clone();
        c.image_id = "c".into();
        let m = embed_corpus(&[a, b, c], &cfg).unwrap();
        let ids: Vec<_> = m.rows.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        let norms: Vec<f64> = m.rows.iter().map(|r| r.vector.iter().map(|v| v * v).sum()).collect();
        assert!(norms[0] > 0.0 && norms[1] == 0.0 && norms[2] > 0.0);
        assert_eq!(m.to_matrix().row(2), &m.rows[2].vector[..]);
    }

    #[test]
    fn mirror_maps_pair_ratios_to_reciprocal() {
        for kind in TopologyKind::ALL {
            let cfg = FeatureConfig::new(kind);
            let lm = if kind == TopologyKind::Pose2d17 { frontal_2d() } else { frontal_3d() };
            let mut mirrored = lm.clone();
            for p in kind.topology().symmetric_pairs {
                mirrored.coords.swap(p.left, p.right);
            }
            let a = build_embedding(&lm, &cfg).unwrap();
            let b = build_embedding(&mirrored, &cfg).unwrap();
            for p in &kind.topology().symmetric_pairs[..8] {
                let i = cfg.feature_index(&format!("ratio_x_{}", p.name)).unwrap();
                assert!((a.vector[i] * b.vector[i] - 1.0).abs() < 1e-12, "{kind} {}", p.name);
            }
        }
    }

    proptest! {
        #[test]
        fn shift_moves_raw_coordinates(
            coords in proptest::collection::vec((0.0f64..0.85, 0.0f64..1.0), 17)
        ) {
            let cfg = FeatureConfig::new(TopologyKind::Pose2d17);
            let lm = set(TopologyKind::Pose2d17, coords.iter().map(|&(x, y)| kp(x, y, None)).collect());
            let mut shifted = lm.clone();
            for c in shifted.coords.iter_mut() {
                c.x += 0.1;
            }
            let a = build_embedding(&lm, &cfg).unwrap();
            let b = build_embedding(&shifted, &cfg).unwrap();
            for i in 0..17 {
                prop_assert!((b.vector[2 * i] - a.vector[2 * i] - 0.1).abs() < 1e-12);
                prop_assert_eq!(b.vector[2 * i + 1], a.vector[2 * i + 1]);
            }
        }

        #[test]
        fn embeddings_finite_and_bounded(
            coords in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, -1.0f64..1.0), 33)
        ) {
            let cfg = FeatureConfig::new(TopologyKind::Pose3d33);
            let lm = set(TopologyKind::Pose3d33, coords.iter().map(|&(x, y, z)| kp(x, y, Some(z))).collect());
            let a = build_embedding(&lm, &cfg).unwrap();
            prop_assert!(a.vector.iter().all(|v| v.is_finite() && v.abs() <= cfg.ratio_clamp));
            let b = build_embedding(&lm, &cfg).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn detected_nonzero_pose_is_never_the_sentinel(
            coords in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 17)
        ) {
            prop_assume!(coords.iter().any(|&(x, y)| x != 0.0 || y != 0.0));
            let cfg = FeatureConfig::new(TopologyKind::Pose2d17);
            let lm = set(TopologyKind::Pose2d17, coords.iter().map(|&(x, y)| kp(x, y, None)).collect());
            let e = build_embedding(&lm, &cfg).unwrap();
            prop_assert!(!e.is_no_pose);
            prop_assert!(e.vector.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn pose3d_uses_first_eight_pairs() {
        let cfg = FeatureConfig::new(TopologyKind::Pose3d33);
        for p in &POSE3D33.symmetric_pairs[..8] {
            assert!(cfg.feature_index(&format!("ratio_x_{}", p.name)).is_some());
        }
        assert!(cfg.feature_index("ratio_x_mouth").is_none());
    }
}
