//! Binary model bundle.
//!
//! Layout: 8-byte magic, `u32` version, then tagged sections
//! (`[u8; 4]` tag, `u64` payload length, payload). Integers are `u64` and
//! reals are `f64`, both little-endian; strings and arrays carry a `u64`
//! length prefix. Sections appear in the order FCFG, AENC (optional), CENT,
//! RANK, SUMM.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{ModelBundle, TrainingSummary};
use crate::autoencoder::{AutoencoderModel, Dense};
use crate::clustering::CentroidModel;
use crate::embedding::FeatureConfig;
use crate::landmark::TopologyKind;
use crate::matrix::Matrix;
use crate::ranking::{Ensemble, FeatureEncoding, FrequencyRanker, Node, RankModel, Ranker, Tree};

pub const MAGIC: [u8; 8] = *b"UNPOSE\0B";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt bundle: {0}")]
    Corrupt(String),
    #[error("unsupported bundle version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T, BundleError> {
    Err(BundleError::Corrupt(msg.into()))
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn strs(&mut self, v: &[String]) {
        self.usize(v.len());
        v.iter().for_each(|s| self.str(s));
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => corrupt(format!("{} section truncated", self.what)),
        }
    }
    fn u8(&mut self) -> Result<u8, BundleError> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64, BundleError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize, BundleError> {
        let v = self.u64()?;
        usize::try_from(v).or_else(|_| corrupt(format!("{} value {v} overflows", self.what)))
    }
    /// A length that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize, BundleError> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return corrupt(format!("{} length {n} exceeds section", self.what));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64, BundleError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, BundleError> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).or_else(|_| corrupt(format!("{} string is not UTF-8", self.what)))
    }
    fn strs(&mut self) -> Result<Vec<String>, BundleError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.str()).collect()
    }
    fn f64s(&mut self) -> Result<Vec<f64>, BundleError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn finish(&self) -> Result<(), BundleError> {
        if self.pos != self.buf.len() {
            return corrupt(format!("{} section has {} trailing bytes", self.what, self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], body: Writer) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(body.0.len() as u64).to_le_bytes());
    out.extend_from_slice(&body.0);
}

pub fn to_bytes(bundle: &ModelBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&bundle.version.to_le_bytes());

    let fc = &bundle.feature_config;
    let mut w = Writer::default();
    w.str(fc.topology.as_str());
    w.usize(fc.dimension);
    w.f64(fc.ratio_clamp);
    w.f64(fc.ratio_epsilon);
    w.strs(&fc.feature_names);
    w.str(&fc.fingerprint);
    section(&mut out, b"FCFG", w);

    if let Some(ae) = &bundle.autoencoder {
        let mut w = Writer::default();
        w.usize(ae.input_dim);
        w.str(&ae.config_fingerprint);
        w.f64s(&ae.input_shift);
        w.f64s(&ae.input_scale);
        w.usize(ae.layers.len());
        for l in &ae.layers {
            w.usize(l.in_dim);
            w.usize(l.out_dim);
            w.f64s(&l.weights);
            w.f64s(&l.bias);
        }
        section(&mut out, b"AENC", w);
    }

    let cm = &bundle.centroid_model;
    let mut w = Writer::default();
    w.usize(cm.k);
    w.usize(cm.dimension);
    w.str(&cm.feature_config_fingerprint);
    w.f64(cm.objective);
    w.usize(cm.iterations_run);
    w.f64s(cm.centroids.as_slice());
    section(&mut out, b"CENT", w);

    let mut w = Writer::default();
    match &bundle.ranker {
        Ranker::Gbdt(m) => {
            w.u8(0);
            w.usize(m.encoding.k);
            w.strs(&m.encoding.categories);
            w.strs(&m.encoding.subcategories);
            w.strs(&m.encoding.product_types);
            w.usize(m.num_rounds);
            w.usize(m.max_depth);
            w.f64(m.ensemble.base_score);
            w.f64(m.ensemble.learning_rate);
            w.usize(m.ensemble.trees.len());
            for t in &m.ensemble.trees {
                w.usize(t.nodes.len());
                for n in &t.nodes {
                    match *n {
                        Node::Leaf { value } => {
                            w.u8(0);
                            w.f64(value);
                        }
                        Node::Split { feature, threshold, left, right } => {
                            w.u8(1);
                            w.usize(feature);
                            w.f64(threshold);
                            w.usize(left);
                            w.usize(right);
                        }
                    }
                }
            }
        }
        Ranker::Frequency(f) => {
            w.u8(1);
            w.usize(f.counts.len());
            f.counts.iter().for_each(|&c| w.u64(c));
        }
    }
    section(&mut out, b"RANK", w);

    let s = &bundle.training_summary;
    let mut w = Writer::default();
    w.usize(s.n_products);
    w.usize(s.n_images);
    w.usize(s.k);
    w.f64(s.objective);
    w.u64(s.trained_at);
    section(&mut out, b"SUMM", w);
    out
}

fn read_feature_config(r: &mut Reader) -> Result<FeatureConfig, BundleError> {
    let topology: TopologyKind = match r.str()?.parse() {
        Ok(t) => t,
        Err(_) => return corrupt("unknown topology in feature config"),
    };
    let fc = FeatureConfig {
        topology,
        dimension: r.usize()?,
        ratio_clamp: r.f64()?,
        ratio_epsilon: r.f64()?,
        feature_names: r.strs()?,
        fingerprint: r.str()?,
    };
    r.finish()?;
    Ok(fc)
}

fn read_autoencoder(r: &mut Reader) -> Result<AutoencoderModel, BundleError> {
    let input_dim = r.usize()?;
    let config_fingerprint = r.str()?;
    let input_shift = r.f64s()?;
    let input_scale = r.f64s()?;
    let n = r.len(32)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        layers.push(Dense { in_dim: r.usize()?, out_dim: r.usize()?, weights: r.f64s()?, bias: r.f64s()? });
    }
    r.finish()?;
    let mut model = AutoencoderModel::from_layers(layers).or_else(|e| corrupt(e.to_string()))?;
    if model.input_dim != input_dim {
        return corrupt("autoencoder input width disagrees with its layers");
    }
    if input_shift.len() != input_dim || input_scale.len() != input_dim {
        return corrupt("autoencoder input scaling has the wrong width");
    }
    if input_scale.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return corrupt("autoencoder input scale must be positive and finite");
    }
    model.input_shift = input_shift;
    model.input_scale = input_scale;
    model.config_fingerprint = config_fingerprint;
    Ok(model)
}

fn read_centroids(r: &mut Reader) -> Result<CentroidModel, BundleError> {
    let k = r.usize()?;
    let dimension = r.usize()?;
    let feature_config_fingerprint = r.str()?;
    let objective = r.f64()?;
    let iterations_run = r.usize()?;
    let data = r.f64s()?;
    r.finish()?;
    if k == 0 || k.checked_mul(dimension) != Some(data.len()) {
        return corrupt(format!("centroid matrix has {} values for {k}x{dimension}", data.len()));
    }
    Ok(CentroidModel {
        k,
        dimension,
        centroids: Matrix::from_vec(k, dimension, data),
        feature_config_fingerprint,
        objective,
        iterations_run,
    })
}

fn read_tree(r: &mut Reader, width: usize) -> Result<Tree, BundleError> {
    let n = r.len(9)?;
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let node = match r.u8()? {
            0 => Node::Leaf { value: r.f64()? },
            1 => {
                let (feature, threshold, left, right) = (r.usize()?, r.f64()?, r.usize()?, r.usize()?);
                // Children follow their parent, which rules out cycles.
                if feature >= width || left <= i || right <= i || left >= n || right >= n {
                    return corrupt(format!("tree node {i} has invalid links"));
                }
                Node::Split { feature, threshold, left, right }
            }
            t => return corrupt(format!("unknown tree node kind {t}")),
        };
        nodes.push(node);
    }
    if nodes.is_empty() {
        return corrupt("empty tree");
    }
    Ok(Tree { nodes })
}

fn read_ranker(r: &mut Reader) -> Result<Ranker, BundleError> {
    let ranker = match r.u8()? {
        0 => {
            let encoding = FeatureEncoding {
                k: r.usize()?,
                categories: r.strs()?,
                subcategories: r.strs()?,
                product_types: r.strs()?,
            };
            let num_rounds = r.usize()?;
            let max_depth = r.usize()?;
            let base_score = r.f64()?;
            let learning_rate = r.f64()?;
            let n = r.len(8)?;
            let width = encoding.width();
            let trees = (0..n).map(|_| read_tree(r, width)).collect::<Result<Vec<_>, _>>()?;
            Ranker::Gbdt(RankModel {
                encoding,
                ensemble: Ensemble { base_score, learning_rate, trees },
                num_rounds,
                max_depth,
            })
        }
        1 => {
            let n = r.len(8)?;
            Ranker::Frequency(FrequencyRanker { counts: (0..n).map(|_| r.u64()).collect::<Result<_, _>>()? })
        }
        t => return corrupt(format!("unknown ranker kind {t}")),
    };
    r.finish()?;
    Ok(ranker)
}

fn read_summary(r: &mut Reader) -> Result<TrainingSummary, BundleError> {
    let s = TrainingSummary {
        n_products: r.usize()?,
        n_images: r.usize()?,
        k: r.usize()?,
        objective: r.f64()?,
        trained_at: r.u64()?,
    };
    r.finish()?;
    Ok(s)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle, BundleError> {
    if bytes.len() < MAGIC.len() + 4 {
        return corrupt("file too short for header");
    }
    if bytes[..MAGIC.len()] != MAGIC {
        return corrupt("bad magic");
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != BUNDLE_VERSION {
        return Err(BundleError::Version { found: version, supported: BUNDLE_VERSION });
    }

    let mut sections: Vec<([u8; 4], &[u8])> = Vec::new();
    let mut outer = Reader::new(&bytes[12..], "header");
    while outer.pos < outer.buf.len() {
        let tag: [u8; 4] = outer.take(4)?.try_into().expect("4 bytes");
        let len = outer.usize()?;
        let body = outer.take(len)?;
        sections.push((tag, body));
    }
    let order: Vec<[u8; 4]> = sections.iter().map(|s| s.0).collect();
    let with_ae = [*b"FCFG", *b"AENC", *b"CENT", *b"RANK", *b"SUMM"];
    let without_ae = [*b"FCFG", *b"CENT", *b"RANK", *b"SUMM"];
    if order != with_ae && order != without_ae {
        let names: Vec<String> = order.iter().map(|t| String::from_utf8_lossy(t).into_owned()).collect();
        return corrupt(format!("unexpected section sequence [{}]", names.join(", ")));
    }
    let mut it = sections.into_iter();
    let mut next = |what| Reader::new(it.next().expect("section order checked").1, what);

    let feature_config = read_feature_config(&mut next("FCFG"))?;
    let autoencoder = if order.len() == 5 { Some(read_autoencoder(&mut next("AENC"))?) } else { None };
    let centroid_model = read_centroids(&mut next("CENT"))?;
    let ranker = read_ranker(&mut next("RANK"))?;
    let training_summary = read_summary(&mut next("SUMM"))?;

    let bundle = ModelBundle { version, feature_config, autoencoder, centroid_model, ranker, training_summary };
    bundle.check_consistency()?;
    Ok(bundle)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<(), BundleError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&to_bytes(bundle))?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| BundleError::Io(e.error))?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, BundleError> {
    from_bytes(&std::fs::read(path)?)
}
