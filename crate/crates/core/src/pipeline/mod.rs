//! Training and inference flows, reference selection and the model bundle.

pub mod bundle;
pub mod eval;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::{train_autoencoder, AutoencoderModel, TrainingHyperparams, BOTTLENECK};
use crate::clustering::{kmeans_fit, CentroidModel, KMeansConfig, DEFAULT_K};
use crate::embedding::{embed_corpus, FeatureConfig};
use crate::landmark::{normalize, parse_landmark_records, LandmarkRecord, TopologyKind};
use crate::matrix::Matrix;
use crate::ranking::{popularity_target, sort_by_rank, CentroidScore, GbdtConfig, ImageAssignment, ProductRecord, Ranker};

pub use bundle::{load_bundle, save_bundle, BundleError, BUNDLE_VERSION};
pub use eval::{evaluate, score_imageset, EvalReport, ImagesetScore, LabelRecord, LabeledSet, SetScore};

/// Imagesets smaller than this qualify for missing-pose suggestions.
pub const DEFAULT_P_THRESHOLD: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Parse,
    Products,
    Reference,
    Normalize,
    Embed,
    Autoencoder,
    Clustering,
    Ranking,
    Inference,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Parse => "parse",
            Stage::Products => "products",
            Stage::Reference => "reference selection",
            Stage::Normalize => "normalize",
            Stage::Embed => "embedding",
            Stage::Autoencoder => "autoencoder",
            Stage::Clustering => "clustering",
            Stage::Ranking => "ranking",
            Stage::Inference => "inference",
        })
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} stage: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: BoxError,
    },
    #[error("image {image_id} has topology {found}, expected {expected}")]
    TopologyMismatch { image_id: String, found: TopologyKind, expected: TopologyKind },
    #[error("image {image_id} belongs to product {found}, expected {expected}")]
    ProductMismatch { image_id: String, found: String, expected: String },
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

fn stage<E: Into<BoxError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, source: e.into() }
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSelection {
    pub min_images: usize,
    pub top_k: usize,
}

impl Default for ReferenceSelection {
    fn default() -> Self {
        ReferenceSelection { min_images: 10, top_k: 3000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    /// Seeds the autoencoder, k-means and shuffling.
    pub seed: u64,
    pub use_autoencoder: bool,
    pub autoencoder: TrainingHyperparams,
    pub kmeans: KMeansConfig,
    pub ranker: GbdtConfig,
    /// When set, train only on the selected reference products.
    pub reference: Option<ReferenceSelection>,
    /// Expected topology; inferred from the first record when absent.
    pub topology: Option<TopologyKind>,
    pub trained_at: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: DEFAULT_K,
            seed: 0,
            use_autoencoder: true,
            autoencoder: TrainingHyperparams::default(),
            kmeans: KMeansConfig::default(),
            ranker: GbdtConfig::default(),
            reference: None,
            topology: None,
            trained_at: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub n_products: usize,
    pub n_images: usize,
    pub k: usize,
    pub objective: f64,
    pub trained_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub version: u32,
    pub feature_config: FeatureConfig,
    pub autoencoder: Option<AutoencoderModel>,
    pub centroid_model: CentroidModel,
    pub ranker: Ranker,
    pub training_summary: TrainingSummary,
}

impl ModelBundle {
    pub fn k(&self) -> usize {
        self.centroid_model.k
    }

    pub fn topology(&self) -> TopologyKind {
        self.feature_config.topology
    }

    /// Checks that every component was produced for the same feature config.
    pub fn check_consistency(&self) -> Result<(), BundleError> {
        if self.version != BUNDLE_VERSION {
            return Err(BundleError::Version { found: self.version, supported: BUNDLE_VERSION });
        }
        let fc = &self.feature_config;
        if !fc.is_consistent() {
            return Err(BundleError::FingerprintMismatch(format!(
                "feature config content hashes to {}, stored fingerprint is {}",
                fc.compute_fingerprint(),
                fc.fingerprint
            )));
        }
        if self.centroid_model.feature_config_fingerprint != fc.fingerprint {
            return Err(BundleError::FingerprintMismatch("centroid model was fitted under another feature config".into()));
        }
        let expected_dim = match &self.autoencoder {
            Some(ae) => {
                if ae.config_fingerprint != fc.fingerprint {
                    return Err(BundleError::FingerprintMismatch("autoencoder was trained under another feature config".into()));
                }
                if ae.input_dim != fc.dimension {
                    return Err(BundleError::Corrupt(format!(
                        "autoencoder input {} does not match feature dimension {}",
                        ae.input_dim, fc.dimension
                    )));
                }
                BOTTLENECK
            }
            None => fc.dimension,
        };
        let cm = &self.centroid_model;
        if cm.dimension != expected_dim || cm.centroids.cols() != expected_dim || cm.centroids.rows() != cm.k {
            return Err(BundleError::Corrupt(format!("centroids are {}x{}, expected k x {expected_dim}", cm.k, cm.dimension)));
        }
        if self.ranker.k() != cm.k || self.training_summary.k != cm.k {
            return Err(BundleError::Corrupt("ranker, summary and centroid model disagree on k".into()));
        }
        Ok(())
    }

    /// Clustering-space vectors for the given records, in order.
    pub fn embed(&self, records: &[LandmarkRecord]) -> Result<Matrix, PipelineError> {
        for r in records {
            if r.topology != self.topology() {
                return Err(PipelineError::TopologyMismatch {
                    image_id: r.image_id.clone(),
                    found: r.topology,
                    expected: self.topology(),
                });
            }
        }
        let raw = embed_records(records, &self.feature_config)?;
        match &self.autoencoder {
            Some(ae) => ae.encode_matrix(&raw).map_err(stage(Stage::Autoencoder)),
            None => Ok(raw),
        }
    }
}

fn embed_records(records: &[LandmarkRecord], fc: &FeatureConfig) -> Result<Matrix, PipelineError> {
    let normalized = records.iter().map(normalize).collect::<Result<Vec<_>, _>>().map_err(stage(Stage::Normalize))?;
    let m = embed_corpus(&normalized, fc).map_err(stage(Stage::Embed))?;
    if m.is_empty() {
        return Ok(Matrix::zeros(0, fc.dimension));
    }
    Ok(m.to_matrix())
}

/// Products with at least `min_images` images, most popular first
/// (ties by product id), truncated to `top_k`.
pub fn select_reference(products: &[ProductRecord], selection: ReferenceSelection) -> Result<Vec<String>, PipelineError> {
    let mut keep: Vec<(&ProductRecord, f64)> = products
        .iter()
        .filter(|p| p.image_ids.len() >= selection.min_images)
        .map(|p| (p, popularity_target(p)))
        .collect();
    if keep.is_empty() {
        return Err(stage(Stage::Reference)(format!(
            "no product has at least {} images; lower the minimum image count",
            selection.min_images
        )));
    }
    keep.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.product_id.cmp(&b.0.product_id)));
    keep.truncate(selection.top_k);
    Ok(keep.into_iter().map(|(p, _)| p.product_id.clone()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub bundle: ModelBundle,
    /// Final assignment of every training image.
    pub assignments: Vec<ImageAssignment>,
    /// Per-epoch autoencoder loss; empty when the autoencoder is disabled.
    pub autoencoder_losses: Vec<f64>,
}

/// Parses a landmark stream and trains. Any malformed line aborts training.
pub fn train_flow<R: BufRead>(
    landmarks: R,
    products: &[ProductRecord],
    config: &TrainConfig,
) -> Result<TrainOutput, PipelineError> {
    let parsed = parse_landmark_records(landmarks).map_err(stage(Stage::Parse))?;
    if let Some(first) = parsed.errors.first() {
        return Err(stage(Stage::Parse)(format!("{} malformed line(s); first: {first}", parsed.errors.len())));
    }
    for w in &parsed.warnings {
        log::warn!("{w}");
    }
    train_records(&parsed.records, products, config)
}

pub fn train_records(
    records: &[LandmarkRecord],
    products: &[ProductRecord],
    config: &TrainConfig,
) -> Result<TrainOutput, PipelineError> {
    let by_id = index_products(products)?;
    for r in records {
        if !by_id.contains_key(r.product_id.as_str()) {
            return Err(stage(Stage::Products)(format!("image {} references unknown product {}", r.image_id, r.product_id)));
        }
    }

    let selected: Vec<&LandmarkRecord> = match config.reference {
        Some(sel) => {
            let ids: BTreeSet<String> = select_reference(products, sel)?.into_iter().collect();
            records.iter().filter(|r| ids.contains(&r.product_id)).collect()
        }
        None => records.iter().collect(),
    };
    let Some(first) = selected.first() else {
        return Err(stage(Stage::Parse)("no landmark records to train on"));
    };
    let topology = config.topology.unwrap_or(first.topology);
    if let Some(r) = selected.iter().find(|r| r.topology != topology) {
        return Err(PipelineError::TopologyMismatch { image_id: r.image_id.clone(), found: r.topology, expected: topology });
    }
    let records: Vec<LandmarkRecord> = selected.into_iter().cloned().collect();
    log::info!("training on {} images with topology {topology}", records.len());

    let fc = FeatureConfig::new(topology);
    let raw = embed_records(&records, &fc)?;

    let (autoencoder, losses, space) = if config.use_autoencoder {
        let hyper = TrainingHyperparams { seed: config.seed, ..config.autoencoder.clone() };
        let init = AutoencoderModel::init(fc.dimension, config.seed).map_err(stage(Stage::Autoencoder))?;
        let (mut model, losses) = train_autoencoder(init, &raw, &hyper).map_err(stage(Stage::Autoencoder))?;
        model.config_fingerprint = fc.fingerprint.clone();
        log::info!("autoencoder loss {:?} -> {:?}", losses.first(), losses.last());
        let encoded = model.encode_matrix(&raw).map_err(stage(Stage::Autoencoder))?;
        (Some(model), losses, encoded)
    } else {
        (None, Vec::new(), raw)
    };

    let kcfg = KMeansConfig { seed: config.seed, ..config.kmeans.clone() };
    let fit = kmeans_fit(&space, config.k, &kcfg).map_err(|e| match e {
        crate::clustering::ClusterError::NonFinite { row } => {
            stage(Stage::Clustering)(format!("non-finite embedding for image {}", records[row].image_id))
        }
        e => stage(Stage::Clustering)(e),
    })?;
    let mut centroid_model = fit.model;
    centroid_model.feature_config_fingerprint = fc.fingerprint.clone();
    if centroid_model.k < config.k {
        log::warn!("merged duplicate centroids: k = {} instead of {}", centroid_model.k, config.k);
    }

    let assignments: Vec<ImageAssignment> = records
        .iter()
        .zip(&fit.assignments)
        .map(|(r, a)| ImageAssignment {
            image_id: r.image_id.clone(),
            product_id: r.product_id.clone(),
            centroid_index: a.centroid_index,
        })
        .collect();
    let ranker = Ranker::train(centroid_model.k, &assignments, products, &config.ranker).map_err(stage(Stage::Ranking))?;

    let n_products = records.iter().map(|r| r.product_id.as_str()).collect::<BTreeSet<_>>().len();
    let training_summary = TrainingSummary {
        n_products,
        n_images: records.len(),
        k: centroid_model.k,
        objective: centroid_model.objective,
        trained_at: config.trained_at,
    };
    let bundle = ModelBundle {
        version: BUNDLE_VERSION,
        feature_config: fc,
        autoencoder,
        centroid_model,
        ranker,
        training_summary,
    };
    bundle.check_consistency()?;
    Ok(TrainOutput { bundle, assignments, autoencoder_losses: losses })
}

pub fn index_products(products: &[ProductRecord]) -> Result<HashMap<&str, &ProductRecord>, PipelineError> {
    let mut by_id = HashMap::with_capacity(products.len());
    for p in products {
        if by_id.insert(p.product_id.as_str(), p).is_some() {
            return Err(stage(Stage::Products)(format!("duplicate product id {}", p.product_id)));
        }
    }
    Ok(by_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresentCentroid {
    pub centroid_index: usize,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingReport {
    pub product_id: String,
    pub image_count: usize,
    pub qualifies: bool,
    /// Ascending centroid index.
    pub present: Vec<PresentCentroid>,
    /// Descending score.
    pub missing: Vec<CentroidScore>,
}

impl MissingReport {
    pub fn missing_indices(&self) -> Vec<usize> {
        self.missing.iter().map(|m| m.centroid_index).collect()
    }

    pub fn present_indices(&self) -> Vec<usize> {
        self.present.iter().map(|p| p.centroid_index).collect()
    }
}

/// Reports which centroids the product's images do not cover.
pub fn infer_flow(
    bundle: &ModelBundle,
    records: &[LandmarkRecord],
    product: &ProductRecord,
) -> Result<MissingReport, PipelineError> {
    infer_with_threshold(bundle, records, product, DEFAULT_P_THRESHOLD)
}

pub fn infer_with_threshold(
    bundle: &ModelBundle,
    records: &[LandmarkRecord],
    product: &ProductRecord,
    p_threshold: usize,
) -> Result<MissingReport, PipelineError> {
    bundle.check_consistency()?;
    if let Some(r) = records.iter().find(|r| r.product_id != product.product_id) {
        return Err(PipelineError::ProductMismatch {
            image_id: r.image_id.clone(),
            found: r.product_id.clone(),
            expected: product.product_id.clone(),
        });
    }
    let space = bundle.embed(records)?;
    let assignments = bundle.centroid_model.assign_all(&space).map_err(stage(Stage::Inference))?;

    let mut present: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (r, a) in records.iter().zip(&assignments) {
        present.entry(a.centroid_index).or_default().push(r.image_id.clone());
    }
    let absent: Vec<usize> = (0..bundle.k()).filter(|c| !present.contains_key(c)).collect();
    let scores = bundle.ranker.score_centroids(&product.cohort(), &absent);
    let by_index: HashMap<usize, f64> = scores.iter().map(|s| (s.centroid_index, s.score)).collect();
    let missing = sort_by_rank(&scores)
        .into_iter()
        .map(|c| CentroidScore { centroid_index: c, score: by_index[&c] })
        .collect();

    Ok(MissingReport {
        product_id: product.product_id.clone(),
        image_count: records.len(),
        qualifies: records.len() < p_threshold,
        present: present.into_iter().map(|(centroid_index, image_ids)| PresentCentroid { centroid_index, image_ids }).collect(),
        missing,
    })
}
