#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde::Serialize;
use unpose::landmark::{LandmarkRecord, TopologyKind};
use unpose::ranking::ProductRecord;
use unpose::synthgen::generate_class_sample;

pub fn unpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unpose"))
        .args(args)
        .env_remove("SOURCE_DATE_EPOCH")
        .env("UNPOSE_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) {
    let text: String = items.iter().map(|i| serde_json::to_string(i).unwrap() + "\n").collect();
    std::fs::write(path, text).unwrap();
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

pub fn product(id: &str, image_ids: Vec<String>) -> ProductRecord {
    ProductRecord {
        product_id: id.into(),
        category: "Men".into(),
        subcategory: "Polo shirts".into(),
        product_type: "Topwear".into(),
        avg_rating: 4.1,
        num_reviews: 12,
        image_ids,
    }
}

/// One fresh image per listed class, under `product_id`.
pub fn imageset(classes: &[u8], product_id: &str, topology: TopologyKind, seed: u64) -> Vec<LandmarkRecord> {
    classes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut r = generate_class_sample(c, 0.02, seed, 5_000_000 + i as u64, topology).unwrap();
            r.product_id = product_id.into();
            r.image_id = format!("{product_id}-{i}");
            r
        })
        .collect()
}

/// Size-weighted majority-class fraction over clusters, from a contingency count.
pub fn purity(pairs: impl IntoIterator<Item = (usize, u8)>) -> f64 {
    let mut table: BTreeMap<usize, BTreeMap<u8, usize>> = BTreeMap::new();
    let mut total = 0;
    for (cluster, class) in pairs {
        *table.entry(cluster).or_default().entry(class).or_default() += 1;
        total += 1;
    }
    let majority: usize = table.values().map(|row| row.values().max().copied().unwrap_or(0)).sum();
    majority as f64 / total as f64
}

/// The centroid holding most images of each class.
pub fn majority_centroid(pairs: impl IntoIterator<Item = (usize, u8)>) -> BTreeMap<u8, usize> {
    let mut votes: BTreeMap<u8, BTreeMap<usize, usize>> = BTreeMap::new();
    for (cluster, class) in pairs {
        *votes.entry(class).or_default().entry(cluster).or_default() += 1;
    }
    votes
        .into_iter()
        .map(|(class, v)| (class, v.into_iter().max_by_key(|&(c, n)| (n, std::cmp::Reverse(c))).unwrap().0))
        .collect()
}
