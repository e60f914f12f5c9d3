//! Landmark topologies, the line-delimited landmark record format, and
//! normalization of pixel coordinates to the unit square.
//!
//! A record file holds one JSON object per line:
//!
//! ```text
//! {"image_id":"a","product_id":"p","topology":"POSE2D17","width":500,"height":1000,
//!  "detected":true,"keypoints":[{"x":250.0,"y":500.0},...]}
//! ```
//!
//! Records with `detected = false` carry no keypoints and stand for images where
//! the detector found no person (fabric closeups, size charts, flat lays).

use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The two detector families supported by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TopologyKind {
    /// 33 keypoints with a relative depth coordinate.
    #[serde(rename = "POSE3D33")]
    Pose3d33,
    /// 17 keypoints in the image plane.
    #[serde(rename = "POSE2D17")]
    Pose2d17,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 2] = [TopologyKind::Pose3d33, TopologyKind::Pose2d17];

    pub fn as_str(self) -> &'static str {
        match self {
            TopologyKind::Pose3d33 => "POSE3D33",
            TopologyKind::Pose2d17 => "POSE2D17",
        }
    }

    pub fn topology(self) -> &'static Topology {
        match self {
            TopologyKind::Pose3d33 => &POSE3D33,
            TopologyKind::Pose2d17 => &POSE2D17,
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TopologyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "POSE3D33" => Ok(TopologyKind::Pose3d33),
            "POSE2D17" => Ok(TopologyKind::Pose2d17),
            other => Err(format!("unknown topology {other:?} (expected POSE3D33 or POSE2D17)")),
        }
    }
}

/// A named left/right keypoint pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymmetricPair {
    pub name: &'static str,
    pub left: usize,
    pub right: usize,
}

const fn pair(name: &'static str, left: usize, right: usize) -> SymmetricPair {
    SymmetricPair { name, left, right }
}

/// Static description of a keypoint layout.
#[derive(Debug, PartialEq, Eq)]
pub struct Topology {
    pub kind: TopologyKind,
    pub keypoint_names: &'static [&'static str],
    pub has_z: bool,
    pub symmetric_pairs: &'static [SymmetricPair],
}

impl Topology {
    pub fn keypoint_count(&self) -> usize {
        self.keypoint_names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.keypoint_names.iter().position(|n| *n == name)
    }

    pub fn pair(&self, name: &str) -> Option<SymmetricPair> {
        self.symmetric_pairs.iter().copied().find(|p| p.name == name)
    }
}

const POSE3D33_NAMES: [&str; 33] = [
    "nose",
    "left_eye_inner",
    "left_eye",
    "left_eye_outer",
    "right_eye_inner",
    "right_eye",
    "right_eye_outer",
    "left_ear",
    "right_ear",
    "mouth_left",
    "mouth_right",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_pinky",
    "right_pinky",
    "left_index",
    "right_index",
    "left_thumb",
    "right_thumb",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "left_heel",
    "right_heel",
    "left_foot_index",
    "right_foot_index",
];

// The first eight pairs mirror the 2D layout; embeddings rely on that prefix.
const POSE3D33_PAIRS: [SymmetricPair; 12] = [
    pair("eye", 2, 5),
    pair("ear", 7, 8),
    pair("shoulder", 11, 12),
    pair("elbow", 13, 14),
    pair("wrist", 15, 16),
    pair("hip", 23, 24),
    pair("knee", 25, 26),
    pair("ankle", 27, 28),
    pair("mouth", 9, 10),
    pair("heel", 29, 30),
    pair("foot_index", 31, 32),
    pair("pinky", 17, 18),
];

const POSE2D17_NAMES: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

const POSE2D17_PAIRS: [SymmetricPair; 8] = [
    pair("eye", 1, 2),
    pair("ear", 3, 4),
    pair("shoulder", 5, 6),
    pair("elbow", 7, 8),
    pair("wrist", 9, 10),
    pair("hip", 11, 12),
    pair("knee", 13, 14),
    pair("ankle", 15, 16),
];

pub static POSE3D33: Topology = Topology {
    kind: TopologyKind::Pose3d33,
    keypoint_names: &POSE3D33_NAMES,
    has_z: true,
    symmetric_pairs: &POSE3D33_PAIRS,
};

pub static POSE2D17: Topology = Topology {
    kind: TopologyKind::Pose2d17,
    keypoint_names: &POSE2D17_NAMES,
    has_z: false,
    symmetric_pairs: &POSE2D17_PAIRS,
};

fn default_visibility() -> f64 {
    1.0
}

fn is_default_visibility(v: &f64) -> bool {
    *v == 1.0
}

/// One detected keypoint in pixel units, origin at the image top left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    #[serde(default = "default_visibility", skip_serializing_if = "is_default_visibility")]
    pub visibility: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Keypoint { x, y, z: None, visibility: 1.0 }
    }

    pub fn with_z(x: f64, y: f64, z: f64) -> Self {
        Keypoint { x, y, z: Some(z), visibility: 1.0 }
    }
}

/// One image's detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkRecord {
    pub image_id: String,
    pub product_id: String,
    pub topology: TopologyKind,
    pub width: u32,
    pub height: u32,
    pub detected: bool,
    pub keypoints: Vec<Keypoint>,
}

impl LandmarkRecord {
    /// A record for an image in which no person was found.
    pub fn undetected(
        image_id: impl Into<String>,
        product_id: impl Into<String>,
        topology: TopologyKind,
        width: u32,
        height: u32,
    ) -> Self {
        LandmarkRecord {
            image_id: image_id.into(),
            product_id: product_id.into(),
            topology,
            width,
            height,
            detected: false,
            keypoints: Vec::new(),
        }
    }

    /// Serializes to a single line of the record file (no trailing newline).
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("landmark records always serialize")
    }
}

/// Hard violations of the record invariants.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("keypoint count mismatch: {topology} expects {expected}, found {found}")]
    KeypointCountMismatch { topology: TopologyKind, expected: usize, found: usize },
    #[error("undetected record must not carry keypoints (found {found})")]
    UndetectedWithKeypoints { found: usize },
    #[error("z not allowed for 2D topology (keypoint {index})")]
    ZNotAllowed { index: usize },
    #[error("z required for 3D topology (keypoint {index})")]
    ZMissing { index: usize },
    #[error("non-finite coordinate at keypoint {index}")]
    NonFinite { index: usize },
    #[error("visibility {value} outside [0, 1] at keypoint {index}")]
    VisibilityOutOfRange { index: usize, value: f64 },
}

/// Soft findings that were corrected during ingestion.
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationWarning {
    /// A keypoint lay outside the image frame and was clamped onto its border.
    Clamped { index: usize, from: (f64, f64), to: (f64, f64) },
}

impl fmt::Display for ValidationWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationWarning::Clamped { index, from, to } => write!(
                f,
                "keypoint {index} out of frame at ({}, {}), clamped to ({}, {})",
                from.0, from.1, to.0, to.1
            ),
        }
    }
}

/// Checks a record against its declared topology and clamps out-of-frame
/// keypoints onto the image border in place.
///
/// Returns one warning per clamped keypoint.
pub fn validate_topology(
    record: &mut LandmarkRecord,
) -> Result<Vec<ValidationWarning>, ValidationError> {
    if record.width == 0 || record.height == 0 {
        return Err(ValidationError::ZeroDimension { width: record.width, height: record.height });
    }
    if !record.detected {
        if !record.keypoints.is_empty() {
            return Err(ValidationError::UndetectedWithKeypoints { found: record.keypoints.len() });
        }
        return Ok(Vec::new());
    }
    let topology = record.topology.topology();
    if record.keypoints.len() != topology.keypoint_count() {
        return Err(ValidationError::KeypointCountMismatch {
            topology: record.topology,
            expected: topology.keypoint_count(),
            found: record.keypoints.len(),
        });
    }
    for (index, kp) in record.keypoints.iter().enumerate() {
        match (topology.has_z, kp.z) {
            (false, Some(_)) => return Err(ValidationError::ZNotAllowed { index }),
            (true, None) => return Err(ValidationError::ZMissing { index }),
            _ => {}
        }
        if !kp.x.is_finite() || !kp.y.is_finite() || kp.z.is_some_and(|z| !z.is_finite()) {
            return Err(ValidationError::NonFinite { index });
        }
        if !(0.0..=1.0).contains(&kp.visibility) {
            return Err(ValidationError::VisibilityOutOfRange { index, value: kp.visibility });
        }
    }

    let (w, h) = (f64::from(record.width), f64::from(record.height));
    let mut warnings = Vec::new();
    for (index, kp) in record.keypoints.iter_mut().enumerate() {
        let to = (kp.x.clamp(0.0, w), kp.y.clamp(0.0, h));
        if to != (kp.x, kp.y) {
            warnings.push(ValidationWarning::Clamped { index, from: (kp.x, kp.y), to });
            kp.x = to.0;
            kp.y = to.1;
        }
    }
    Ok(warnings)
}

/// A per-line finding from the record parser; `line` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct LineDiagnostic {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Default)]
pub struct ParsedRecords {
    pub records: Vec<LandmarkRecord>,
    /// Lines that were rejected.
    pub errors: Vec<LineDiagnostic>,
    /// Lines that were accepted after correction (clamping).
    pub warnings: Vec<LineDiagnostic>,
}

#[derive(Debug, Error)]
pub enum LandmarkError {
    #[error("unreadable landmark stream: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid record {image_id}: {source}")]
    Invalid {
        image_id: String,
        #[source]
        source: ValidationError,
    },
}

/// Parses a line-delimited landmark record stream.
///
/// Malformed lines are reported and skipped; blank lines are ignored. Only an
/// I/O failure on the stream itself is fatal.
pub fn parse_landmark_records<R: BufRead>(mut reader: R) -> Result<ParsedRecords, LandmarkError> {
    let mut out = ParsedRecords::default();
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let text = match std::str::from_utf8(&buf) {
            Ok(t) => t.trim(),
            Err(e) => {
                out.errors.push(LineDiagnostic { line: line_no, message: format!("invalid UTF-8: {e}") });
                continue;
            }
        };
        if text.is_empty() {
            continue;
        }
        let mut record: LandmarkRecord = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(LineDiagnostic { line: line_no, message: e.to_string() });
                continue;
            }
        };
        match validate_topology(&mut record) {
            Ok(warnings) => {
                for w in warnings {
                    out.warnings.push(LineDiagnostic {
                        line: line_no,
                        message: format!("{}: {w}", record.image_id),
                    });
                }
                out.records.push(record);
            }
            Err(e) => out.errors.push(LineDiagnostic { line: line_no, message: e.to_string() }),
        }
    }
    Ok(out)
}

/// A keypoint in unit-square coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedKeypoint {
    pub x: f64,
    pub y: f64,
    pub z: Option<f64>,
    pub visibility: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLandmarkSet {
    pub image_id: String,
    pub product_id: String,
    pub topology: TopologyKind,
    pub detected: bool,
    pub coords: Vec<NormalizedKeypoint>,
}

/// Divides every coordinate by the matching image dimension. Depth passes
/// through unchanged.
pub fn normalize(record: &LandmarkRecord) -> Result<NormalizedLandmarkSet, LandmarkError> {
    if record.width == 0 || record.height == 0 {
        return Err(LandmarkError::Invalid {
            image_id: record.image_id.clone(),
            source: ValidationError::ZeroDimension { width: record.width, height: record.height },
        });
    }
    let (w, h) = (f64::from(record.width), f64::from(record.height));
    let coords = if record.detected {
        record
            .keypoints
            .iter()
            .map(|kp| NormalizedKeypoint {
                x: kp.x / w,
                y: kp.y / h,
                z: kp.z,
                visibility: kp.visibility,
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(NormalizedLandmarkSet {
        image_id: record.image_id.clone(),
        product_id: record.product_id.clone(),
        topology: record.topology,
        detected: record.detected,
        coords,
    })
}
