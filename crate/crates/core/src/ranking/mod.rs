//! Centroid ranking by cohort popularity.
//!
//! One global regressor is trained over one-hot encoded
//! (centroid, category, subcategory, product type) features and conditioned
//! on the subject product's cohort at scoring time. Small corpora fall back to
//! a frequency ranker.

pub mod gbdt;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gbdt::{Ensemble, GbdtConfig, Node, Tree};

/// Below this many training rows the frequency ranker is used.
pub const MIN_ROWS_FOR_TREES: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RankingError {
    #[error("image {image_id} references unknown product {product_id}")]
    UnknownProduct { image_id: String, product_id: String },
    #[error("need at least 2 training rows, got {0}")]
    TooFewRows(usize),
    #[error("centroid index {index} out of range for k = {k}")]
    CentroidOutOfRange { index: usize, k: usize },
    #[error("non-finite popularity target for product {0}")]
    NonFiniteTarget(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductRecord {
    pub product_id: String,
    pub category: String,
    pub subcategory: String,
    pub product_type: String,
    pub avg_rating: f64,
    pub num_reviews: u64,
    pub image_ids: Vec<String>,
}

impl ProductRecord {
    pub fn cohort(&self) -> Cohort {
        Cohort {
            category: self.category.clone(),
            subcategory: self.subcategory.clone(),
            product_type: self.product_type.clone(),
        }
    }
}

/// `avg_rating * log10(1 + num_reviews)`.
pub fn popularity_target(p: &ProductRecord) -> f64 {
    p.avg_rating * (1.0 + p.num_reviews as f64).log10()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cohort {
    pub category: String,
    pub subcategory: String,
    pub product_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageAssignment {
    pub image_id: String,
    pub product_id: String,
    pub centroid_index: usize,
}

/// One-hot layout: `k` centroid slots, then each categorical block with its
/// seen values in sorted order followed by one unknown slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoding {
    pub k: usize,
    pub categories: Vec<String>,
    pub subcategories: Vec<String>,
    pub product_types: Vec<String>,
}

impl FeatureEncoding {
    pub fn from_products<'a>(k: usize, products: impl IntoIterator<Item = &'a ProductRecord>) -> Self {
        let mut c = Vec::new();
        let mut s = Vec::new();
        let mut t = Vec::new();
        for p in products {
            c.push(p.category.clone());
            s.push(p.subcategory.clone());
            t.push(p.product_type.clone());
        }
        for v in [&mut c, &mut s, &mut t] {
            v.sort();
            v.dedup();
        }
        FeatureEncoding { k, categories: c, subcategories: s, product_types: t }
    }

    pub fn width(&self) -> usize {
        self.k + self.categories.len() + self.subcategories.len() + self.product_types.len() + 3
    }

    /// Positions of the four active features.
    pub fn active(&self, centroid: usize, cohort: &Cohort) -> [usize; 4] {
        let slot = |values: &[String], v: &str| values.binary_search_by(|x| x.as_str().cmp(v)).unwrap_or(values.len());
        let c0 = self.k;
        let s0 = c0 + self.categories.len() + 1;
        let t0 = s0 + self.subcategories.len() + 1;
        [
            centroid,
            c0 + slot(&self.categories, &cohort.category),
            s0 + slot(&self.subcategories, &cohort.subcategory),
            t0 + slot(&self.product_types, &cohort.product_type),
        ]
    }

    pub fn encode(&self, centroid: usize, cohort: &Cohort) -> Vec<f64> {
        let mut x = vec![0.0; self.width()];
        for i in self.active(centroid, cohort) {
            x[i] = 1.0;
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRow {
    pub features: Vec<f64>,
    pub target: f64,
}

/// One row per assigned image, in assignment order.
pub fn build_training_rows(
    assignments: &[ImageAssignment],
    products: &[ProductRecord],
    encoding: &FeatureEncoding,
) -> Result<Vec<TrainingRow>, RankingError> {
    let by_id: HashMap<&str, &ProductRecord> = products.iter().map(|p| (p.product_id.as_str(), p)).collect();
    assignments
        .iter()
        .map(|a| {
            let p = by_id.get(a.product_id.as_str()).ok_or_else(|| RankingError::UnknownProduct {
                image_id: a.image_id.clone(),
                product_id: a.product_id.clone(),
            })?;
            if a.centroid_index >= encoding.k {
                return Err(RankingError::CentroidOutOfRange { index: a.centroid_index, k: encoding.k });
            }
            let target = popularity_target(p);
            if !target.is_finite() {
                return Err(RankingError::NonFiniteTarget(p.product_id.clone()));
            }
            Ok(TrainingRow { features: encoding.encode(a.centroid_index, &p.cohort()), target })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankModel {
    pub encoding: FeatureEncoding,
    pub ensemble: Ensemble,
    pub num_rounds: usize,
    pub max_depth: usize,
}

pub fn fit_ranker(rows: &[TrainingRow], encoding: FeatureEncoding, config: &GbdtConfig) -> Result<RankModel, RankingError> {
    if rows.len() < 2 {
        return Err(RankingError::TooFewRows(rows.len()));
    }
    let x: Vec<Vec<f64>> = rows.iter().map(|r| r.features.clone()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.target).collect();
    let ensemble = gbdt::fit(&x, &y, config);
    Ok(RankModel { encoding, ensemble, num_rounds: config.num_rounds, max_depth: config.max_depth })
}

impl RankModel {
    pub fn predict(&self, centroid: usize, cohort: &Cohort) -> f64 {
        self.ensemble.predict(&self.encoding.encode(centroid, cohort))
    }

    /// Training MSE after 0, 1, ..., `trees.len()` rounds.
    pub fn staged_mse(&self, rows: &[TrainingRow]) -> Vec<f64> {
        (0..=self.ensemble.trees.len())
            .map(|m| {
                rows.iter().map(|r| (r.target - self.ensemble.predict_staged(&r.features, m)).powi(2)).sum::<f64>()
                    / rows.len() as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidScore {
    pub centroid_index: usize,
    pub score: f64,
}

/// Descending score, ascending index on ties.
pub fn sort_by_rank(scores: &[CentroidScore]) -> Vec<usize> {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.centroid_index.cmp(&b.centroid_index)));
    s.into_iter().map(|c| c.centroid_index).collect()
}

/// Counts images per centroid among products whose popularity target is at
/// least the median target. Cohort-independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRanker {
    pub counts: Vec<u64>,
}

impl FrequencyRanker {
    pub fn fit(k: usize, assignments: &[ImageAssignment], products: &[ProductRecord]) -> Result<Self, RankingError> {
        let by_id: HashMap<&str, &ProductRecord> = products.iter().map(|p| (p.product_id.as_str(), p)).collect();
        let mut targets: Vec<f64> = Vec::with_capacity(assignments.len());
        for a in assignments {
            let p = by_id.get(a.product_id.as_str()).ok_or_else(|| RankingError::UnknownProduct {
                image_id: a.image_id.clone(),
                product_id: a.product_id.clone(),
            })?;
            if a.centroid_index >= k {
                return Err(RankingError::CentroidOutOfRange { index: a.centroid_index, k });
            }
            targets.push(popularity_target(p));
        }
        let mut product_targets: Vec<f64> = {
            let mut per: BTreeMap<&str, f64> = BTreeMap::new();
            for a in assignments {
                per.insert(a.product_id.as_str(), popularity_target(by_id[a.product_id.as_str()]));
            }
            per.into_values().collect()
        };
        product_targets.sort_by(f64::total_cmp);
        let median = product_targets.get(product_targets.len().saturating_sub(1) / 2).copied().unwrap_or(0.0);
        let mut counts = vec![0u64; k];
        for (a, t) in assignments.iter().zip(&targets) {
            if *t >= median {
                counts[a.centroid_index] += 1;
            }
        }
        Ok(FrequencyRanker { counts })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Ranker {
    Gbdt(RankModel),
    Frequency(FrequencyRanker),
}

impl Ranker {
    /// Trains the tree model, or the frequency ranker when there are fewer
    /// than [`MIN_ROWS_FOR_TREES`] assigned images.
    pub fn train(
        k: usize,
        assignments: &[ImageAssignment],
        products: &[ProductRecord],
        config: &GbdtConfig,
    ) -> Result<Self, RankingError> {
        if assignments.len() < MIN_ROWS_FOR_TREES {
            return FrequencyRanker::fit(k, assignments, products).map(Ranker::Frequency);
        }
        let used: std::collections::HashSet<&str> = assignments.iter().map(|a| a.product_id.as_str()).collect();
        let encoding = FeatureEncoding::from_products(k, products.iter().filter(|p| used.contains(p.product_id.as_str())));
        let rows = build_training_rows(assignments, products, &encoding)?;
        fit_ranker(&rows, encoding, config).map(Ranker::Gbdt)
    }

    pub fn k(&self) -> usize {
        match self {
            Ranker::Gbdt(m) => m.encoding.k,
            Ranker::Frequency(f) => f.counts.len(),
        }
    }

    pub fn score_centroids(&self, cohort: &Cohort, candidates: &[usize]) -> Vec<CentroidScore> {
        candidates
            .iter()
            .map(|&c| CentroidScore {
                centroid_index: c,
                score: match self {
                    Ranker::Gbdt(m) => m.predict(c, cohort),
                    Ranker::Frequency(f) => f.counts.get(c).copied().unwrap_or(0) as f64,
                },
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn product(id: &str, cat: &str, rating: f64, reviews: u64) -> ProductRecord {
        ProductRecord {
            product_id: id.into(),
            category: cat.into(),
            subcategory: "Polo shirts".into(),
            product_type: "shirt".into(),
            avg_rating: rating,
            num_reviews: reviews,
            image_ids: vec![format!("{id}-0")],
        }
    }

    fn assign(img: &str, prod: &str, c: usize) -> ImageAssignment {
        ImageAssignment { image_id: img.into(), product_id: prod.into(), centroid_index: c }
    }

    fn cohort() -> Cohort {
        product("x", "Men", 0.0, 0).cohort()
    }

    #[test]
    fn target_examples() {
        assert_eq!(popularity_target(&product("a", "c", 0.0, 12345)), 0.0);
        assert!((popularity_target(&product("a", "c", 4.0, 999)) - 12.0).abs() < 1e-12);
        assert_eq!(popularity_target(&product("a", "c", 5.0, 0)), 0.0);
    }

    #[test]
    fn encoding_layout() {
        let ps = [product("a", "Men", 4.0, 10), product("b", "Women", 3.0, 10)];
        let enc = FeatureEncoding::from_products(8, &ps);
        // 8 centroids + (2 categories + unknown) + (1 + unknown) + (1 + unknown).
        assert_eq!(enc.width(), 8 + 3 + 2 + 2);
        let x = enc.encode(2, &ps[1].cohort());
        let ones: Vec<usize> = x.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![2, 9, 11, 13]);
        let unknown = Cohort { category: "Kids".into(), subcategory: "?".into(), product_type: "?".into() };
        assert_eq!(enc.active(0, &unknown), [0, 10, 12, 14]);
    }

    #[test]
    fn rows_by_hand() {
        let ps = [product("a", "Men", 4.0, 999), product("b", "Women", 2.0, 9)];
        let enc = FeatureEncoding::from_products(2, &ps);
        let rows = build_training_rows(
            &[assign("a0", "a", 0), assign("a1", "a", 1), assign("b0", "b", 1), assign("b1", "b", 1)],
            &ps,
            &enc,
        )
        .unwrap();
        let expected = [
            (vec![1., 0., 1., 0., 0., 1., 0., 1., 0.], 12.0),
            (vec![0., 1., 1., 0., 0., 1., 0., 1., 0.], 12.0),
            (vec![0., 1., 0., 1., 0., 1., 0., 1., 0.], 2.0),
            (vec![0., 1., 0., 1., 0., 1., 0., 1., 0.], 2.0),
        ];
        for (r, (f, t)) in rows.iter().zip(expected) {
            assert_eq!(r.features, f);
            assert!((r.target - t).abs() < 1e-12);
        }
        let err = build_training_rows(&[assign("z", "missing", 0)], &ps, &enc).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    fn separable(n_each: usize) -> (Vec<TrainingRow>, FeatureEncoding) {
        let enc = FeatureEncoding::from_products(2, &[product("a", "Men", 0.0, 0)]);
        let mut rows = Vec::new();
        for _ in 0..n_each {
            rows.push(TrainingRow { features: enc.encode(0, &cohort()), target: 10.0 });
            rows.push(TrainingRow { features: enc.encode(1, &cohort()), target: 2.0 });
        }
        (rows, enc)
    }

    #[test]
    fn constant_targets_give_no_trees() {
        let (mut rows, enc) = separable(5);
        rows.iter_mut().for_each(|r| r.target = 7.0);
        let m = fit_ranker(&rows, enc, &GbdtConfig::default()).unwrap();
        assert!(m.ensemble.trees.is_empty());
        assert_eq!(m.predict(0, &cohort()), 7.0);
        assert_eq!(m.predict(1, &cohort()), 7.0);
    }

    #[test]
    fn one_round_by_hand() {
        let (rows, enc) = separable(5);
        let cfg = GbdtConfig { num_rounds: 1, max_depth: 1, ..Default::default() };
        let m = fit_ranker(&rows, enc, &cfg).unwrap();
        // Base 6, residuals +4 / -4, leaves move 0.1 of the way.
        assert_eq!(m.ensemble.trees.len(), 1);
        assert!((m.predict(0, &cohort()) - 6.4).abs() < 1e-12);
        assert!((m.predict(1, &cohort()) - 5.6).abs() < 1e-12);
        let s = Ranker::Gbdt(m).score_centroids(&cohort(), &[1, 0]);
        assert!(s[1].score > s[0].score);
    }

    #[test]
    fn too_few_rows() {
        let (rows, enc) = separable(1);
        assert_eq!(fit_ranker(&rows[..1], enc, &GbdtConfig::default()), Err(RankingError::TooFewRows(1)));
    }

    #[test]
    fn sort_examples() {
        let s = |c, v| CentroidScore { centroid_index: c, score: v };
        assert_eq!(sort_by_rank(&[s(0, 3.0), s(1, 5.0), s(2, 1.0)]), vec![1, 0, 2]);
        assert_eq!(sort_by_rank(&[s(2, 1.0), s(0, 1.0)]), vec![0, 2]);
        assert!(sort_by_rank(&[]).is_empty());
    }

    #[test]
    fn frequency_ranker_counts_popular_products() {
        let ps = [product("a", "Men", 5.0, 999), product("b", "Men", 1.0, 1), product("c", "Men", 4.0, 99)];
        let asg = [assign("a0", "a", 2), assign("a1", "a", 2), assign("b0", "b", 0), assign("c0", "c", 1)];
        let r = Ranker::train(3, &asg, &ps, &GbdtConfig::default()).unwrap();
        let Ranker::Frequency(f) = &r else { panic!("expected frequency ranker") };
        assert_eq!(f.counts, vec![0, 1, 2]);
        assert_eq!(sort_by_rank(&r.score_centroids(&cohort(), &[0, 1, 2])), vec![2, 1, 0]);
    }

    fn random_rows(seed: u64, n: usize) -> (Vec<TrainingRow>, FeatureEncoding) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cats = ["Men", "Women", "Kids"];
        let ps: Vec<ProductRecord> = cats.iter().map(|c| product(c, c, 1.0, 1)).collect();
        let enc = FeatureEncoding::from_products(4, &ps);
        let rows = (0..n)
            .map(|_| {
                let c = rng.random_range(0..4);
                let p = &ps[rng.random_range(0..3)];
                TrainingRow { features: enc.encode(c, &p.cohort()), target: (c as f64) * 1.5 + rng.random_range(0.0..3.0) }
            })
            .collect();
        (rows, enc)
    }

    proptest! {
        #[test]
        fn mse_non_increasing(seed in 0u64..500) {
            let (rows, enc) = random_rows(seed, 80);
            let m = fit_ranker(&rows, enc, &GbdtConfig { num_rounds: 30, ..Default::default() }).unwrap();
            let mse = m.staged_mse(&rows);
            for w in mse.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * w[0]);
            }
            prop_assert!(m.ensemble.trees.iter().all(|t| t.depth() <= 3));
        }

        #[test]
        fn constant_shift(seed in 0u64..200, c in -50.0f64..50.0) {
            let (rows, enc) = random_rows(seed, 60);
            let shifted: Vec<TrainingRow> =
                rows.iter().map(|r| TrainingRow { features: r.features.clone(), target: r.target + c }).collect();
            let cfg = GbdtConfig { num_rounds: 20, ..Default::default() };
            let a = fit_ranker(&rows, enc.clone(), &cfg).unwrap();
            let b = fit_ranker(&shifted, enc, &cfg).unwrap();
            for k in 0..4 {
                let d = b.predict(k, &cohort()) - a.predict(k, &cohort());
                prop_assert!((d - c).abs() < 1e-9);
            }
        }

        #[test]
        fn deterministic_and_monotone_invariant(seed in 0u64..200) {
            let (rows, enc) = random_rows(seed, 60);
            let cfg = GbdtConfig::default();
            let a = fit_ranker(&rows, enc.clone(), &cfg).unwrap();
            prop_assert_eq!(&a, &fit_ranker(&rows, enc, &cfg).unwrap());
            let scores = Ranker::Gbdt(a).score_centroids(&cohort(), &[0, 1, 2, 3]);
            let transformed: Vec<CentroidScore> = scores
                .iter()
                .map(|s| CentroidScore { centroid_index: s.centroid_index, score: s.score.exp() * 3.0 + 1.0 })
                .collect();
            prop_assert_eq!(sort_by_rank(&scores), sort_by_rank(&transformed));
        }

        #[test]
        fn target_monotone_in_reviews(r in 0.01f64..5.0, n in 0u64..1_000_000) {
            prop_assert!(popularity_target(&product("a", "c", r, n + 1)) >= popularity_target(&product("a", "c", r, n)));
        }
    }
}
