//! Cosine-distance ranking with mAP and CMC.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[k]` is the fraction of queries with a match within the top `k+1`.
    pub cmc: Vec<f64>,
    /// `None` for queries whose identity is absent from the gallery.
    pub average_precision: Vec<Option<f64>>,
    pub excluded_queries: usize,
}

fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt()).max(1e-12)
}

/// Gallery indices by ascending distance; ties keep gallery order.
pub fn rank_gallery(query: &[f32], gallery: &[Vec<f32>]) -> Vec<usize> {
    let d: Vec<f64> = gallery.iter().map(|g| cosine_distance(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order
}

/// Average precision of a ranked relevance list.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

pub fn evaluate_retrieval(
    query: &[Vec<f32>],
    query_labels: &[usize],
    gallery: &[Vec<f32>],
    gallery_labels: &[usize],
) -> Result<RetrievalResult> {
    if gallery.is_empty() {
        return Err(Error::input("gallery is empty"));
    }
    if query.len() != query_labels.len() || gallery.len() != gallery_labels.len() {
        return Err(Error::input("feature and label counts differ"));
    }
    let g = gallery.len();
    let mut cmc_hits = vec![0usize; g];
    let mut aps = Vec::with_capacity(query.len());
    let mut excluded = 0;
    for (q, &ql) in query.iter().zip(query_labels) {
        let order = rank_gallery(q, gallery);
        let rel: Vec<bool> = order.iter().map(|&i| gallery_labels[i] == ql).collect();
        let ap = average_precision(&rel);
        if ap.is_none() {
            excluded += 1;
        } else if let Some(first) = rel.iter().position(|&r| r) {
            for c in &mut cmc_hits[first..] {
                *c += 1;
            }
        }
        aps.push(ap);
    }
    if excluded > 0 {
        log::warn!("{excluded} queries have no gallery match and were excluded");
    }
    let valid = query.len() - excluded;
    let (map, cmc) = if valid == 0 {
        (0.0, vec![0.0; g])
    } else {
        (
            aps.iter().flatten().sum::<f64>() / valid as f64,
            cmc_hits.iter().map(|&c| c as f64 / valid as f64).collect(),
        )
    };
    Ok(RetrievalResult {
        map,
        cmc,
        average_precision: aps,
        excluded_queries: excluded,
    })
}

/// Closed-form expected AP of a uniformly random ranking of `total` items
/// containing `relevant` matches.
pub fn expected_random_ap(relevant: usize, total: usize) -> f64 {
    if relevant == 0 || total == 0 {
        return 0.0;
    }
    if total == 1 {
        return 1.0;
    }
    let (r, g) = (relevant as f64, total as f64);
    (1..=total)
        .map(|k| {
            let k = k as f64;
            (1.0 + (k - 1.0) * (r - 1.0) / (g - 1.0)) / k
        })
        .sum::<f64>()
        / g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub mean_map: f64,
    pub std_map: f64,
    pub trials: usize,
}

/// mAP of Gaussian random features on a fixed label layout, over `trials` seeds.
pub fn random_feature_baseline(
    query_labels: &[usize],
    gallery_labels: &[usize],
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<RandomBaseline> {
    let mut maps = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let mut draw = |n: usize| -> Vec<Vec<f32>> {
            (0..n).map(|_| Tensor::<f32>::normal(&[dim], 1.0, &mut rng).into_data()).collect()
        };
        let q = draw(query_labels.len());
        let g = draw(gallery_labels.len());
        maps.push(evaluate_retrieval(&q, query_labels, &g, gallery_labels)?.map);
    }
    let n = maps.len().max(1) as f64;
    let mean = maps.iter().sum::<f64>() / n;
    let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(RandomBaseline {
        mean_map: mean,
        std_map: var.sqrt(),
        trials,
    })
}
