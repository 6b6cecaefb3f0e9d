//! Reading a trained head through its prototypes: projection onto training
//! samples, uniqueness, projection-distance diagnostics, a 2-D export of the
//! similarity space, and per-prototype soft clusters.

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datastore::{Dataset, TokenEmbeddingSample};
use crate::error::{Error, Result};
use crate::model::{attend, forward, HeadParameters};
use crate::numerics::l2_distance_sq;
use crate::report::{num, CsvTable};

/// Largest number of encodings used for the pairwise-distance normalizer.
pub const NORMALIZER_SUBSAMPLE: usize = 1000;

/// Attended tokens shown per projected sample.
const TOP_TOKENS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedPrototype {
    pub prototype: usize,
    pub class: usize,
    pub sample_id: usize,
    /// Squared distance between the prototype and the sample's pooled encoding.
    pub dist_sq: f64,
    pub alpha: Vec<f64>,
    /// Sample tokens joined by spaces, when the dataset carries texts.
    pub text: Option<String>,
    /// Most attended tokens as `token:weight`, highest first.
    pub top_tokens: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionResult {
    pub prototypes: Vec<ProjectedPrototype>,
}

impl ProjectionResult {
    pub fn sample_ids(&self) -> Vec<usize> {
        self.prototypes.iter().map(|p| p.sample_id).collect()
    }
}

fn encode_all(params: &HeadParameters, data: &Dataset) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    data.samples.iter().map(|s| attend(s, params)).collect()
}

fn render_tokens(sample: &TokenEmbeddingSample, alpha: &[f64]) -> (Option<String>, Option<String>) {
    let Some(texts) = &sample.token_texts else {
        return (None, None);
    };
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    // stable sort keeps earlier tokens first among equal weights
    order.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]));
    let top = order
        .iter()
        .take(TOP_TOKENS)
        .map(|&t| format!("{}:{:.4}", texts[t], alpha[t]))
        .collect::<Vec<_>>()
        .join("|");
    (Some(texts.join(" ")), Some(top))
}

/// Assigns each prototype the same-class training sample whose pooled encoding
/// is nearest, breaking ties by lowest `sample_id`.
pub fn project_prototypes(params: &HeadParameters, train: &Dataset) -> Result<ProjectionResult> {
    let encoded = encode_all(params, train)?;
    let classes = params.num_classes();
    let mut seen = vec![false; classes];
    for s in &train.samples {
        if let Some(slot) = seen.get_mut(s.target.class()) {
            *slot = true;
        }
    }
    if let Some(c) = seen.iter().position(|&x| !x) {
        return Err(Error::Projection(format!("class {c} has no training samples to project onto")));
    }
    let mut out = Vec::with_capacity(params.num_prototypes());
    for (j, &class) in params.proto_class.iter().enumerate() {
        let p = params.prototype(j);
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, s) in train.samples.iter().enumerate() {
            if s.target.class() != class {
                continue;
            }
            let d = l2_distance_sq(&encoded[i].1, p)?;
            let better = match best {
                None => true,
                Some((bd, bid, _)) => d < bd || (d == bd && s.sample_id < bid),
            };
            if better {
                best = Some((d, s.sample_id, i));
            }
        }
        let (dist_sq, sample_id, i) = best.expect("class presence checked above");
        let alpha = encoded[i].0.clone();
        let (text, top_tokens) = render_tokens(&train.samples[i], &alpha);
        out.push(ProjectedPrototype {
            prototype: j,
            class,
            sample_id,
            dist_sq,
            alpha,
            text,
            top_tokens,
        });
    }
    Ok(ProjectionResult { prototypes: out })
}

/// Fraction of prototypes whose projected sample no other prototype shares.
pub fn uniqueness(projection: &ProjectionResult) -> f64 {
    let ids = projection.sample_ids();
    if ids.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &id in &ids {
        *counts.entry(id).or_default() += 1;
    }
    ids.iter().filter(|id| counts[id] == 1).count() as f64 / ids.len() as f64
}

/// Mean Euclidean distance between prototypes and their projected encodings,
/// divided by the mean pairwise distance of training encodings.
///
/// With more than [`NORMALIZER_SUBSAMPLE`] samples the normalizer uses a
/// subsample drawn with `seed`.
pub fn mean_normalized_projection_distance(
    params: &HeadParameters,
    train: &Dataset,
    projection: &ProjectionResult,
    seed: u64,
) -> Result<f64> {
    let encoded = encode_all(params, train)?;
    let by_id: HashMap<usize, usize> = train.samples.iter().enumerate().map(|(i, s)| (s.sample_id, i)).collect();
    if projection.prototypes.is_empty() {
        return Err(Error::Diagnostic("projection is empty".into()));
    }
    let mut total = 0.0;
    for p in &projection.prototypes {
        let i = *by_id
            .get(&p.sample_id)
            .ok_or_else(|| Error::Index(format!("projected sample {} is not in the dataset", p.sample_id)))?;
        total += l2_distance_sq(&encoded[i].1, params.prototype(p.prototype))?.sqrt();
    }
    let mean = total / projection.prototypes.len() as f64;
    let pooled: Vec<&[f64]> = encoded.iter().map(|(_, s)| s.as_slice()).collect();
    let normalizer = mean_pairwise_distance(&pooled, seed)?;
    if normalizer <= 0.0 {
        return Err(Error::Diagnostic(
            "all training encodings coincide; the projection distance normalizer is zero".into(),
        ));
    }
    Ok(mean / normalizer)
}

/// Mean Euclidean distance over all pairs of (a seeded subsample of) `points`.
pub fn mean_pairwise_distance(points: &[&[f64]], seed: u64) -> Result<f64> {
    let chosen: Vec<usize> = if points.len() > NORMALIZER_SUBSAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample_indices(&mut rng, points.len(), NORMALIZER_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..points.len()).collect()
    };
    if chosen.len() < 2 {
        return Err(Error::Diagnostic("need at least two encodings for a pairwise normalizer".into()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in chosen.iter().enumerate() {
        for &k in &chosen[a + 1..] {
            sum += l2_distance_sq(points[i], points[k])?.sqrt();
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceRow {
    pub sample_id: usize,
    pub label: usize,
    pub prediction: usize,
    pub nsim_a: f64,
    pub nsim_b: f64,
}

/// `1 / (1 + d)` with `d` the Euclidean distance.
pub fn normalized_similarity(distance: f64) -> f64 {
    1.0 / (1.0 + distance)
}

/// Coordinates of every sample along two prototype axes.
pub fn export_space(params: &HeadParameters, data: &Dataset, proto_a: usize, proto_b: usize) -> Result<Vec<SpaceRow>> {
    let n = params.num_prototypes();
    for (flag, j) in [("proto-a", proto_a), ("proto-b", proto_b)] {
        if j >= n {
            return Err(Error::Index(format!("{flag} {j} out of range for N={n}")));
        }
    }
    if proto_a == proto_b {
        return Err(Error::Index(format!("proto-a and proto-b must differ (both {proto_a})")));
    }
    data.samples
        .iter()
        .map(|s| {
            let tr = forward(s, params)?;
            Ok(SpaceRow {
                sample_id: s.sample_id,
                label: s.target.class(),
                prediction: tr.predicted(),
                nsim_a: normalized_similarity(tr.dist_sq[proto_a].sqrt()),
                nsim_b: normalized_similarity(tr.dist_sq[proto_b].sqrt()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterDistribution {
    pub prototype: usize,
    /// Samples in the support, in dataset order.
    pub sample_ids: Vec<usize>,
    /// Euclidean distances to the prototype.
    pub distances: Vec<f64>,
    pub pi: Vec<f64>,
}

/// Soft cluster of prototype `j`: `π_i ∝ 1/d_i` over the training samples
/// (only those of the prototype's class when `class_restricted`). If some
/// samples sit exactly on the prototype they share all the mass equally.
pub fn cluster_distribution(
    params: &HeadParameters,
    train: &Dataset,
    j: usize,
    class_restricted: bool,
) -> Result<ClusterDistribution> {
    if j >= params.num_prototypes() {
        return Err(Error::Index(format!("prototype {j} out of range for N={}", params.num_prototypes())));
    }
    let p = params.prototype(j);
    let class = params.proto_class[j];
    let mut sample_ids = Vec::new();
    let mut distances = Vec::new();
    for s in &train.samples {
        if class_restricted && s.target.class() != class {
            continue;
        }
        let (_, pooled) = attend(s, params)?;
        sample_ids.push(s.sample_id);
        distances.push(l2_distance_sq(&pooled, p)?.sqrt());
    }
    if distances.is_empty() {
        return Err(Error::Diagnostic(format!("prototype {j} has no samples to distribute over")));
    }
    let pi = inverse_distance_weights(&distances);
    Ok(ClusterDistribution {
        prototype: j,
        sample_ids,
        distances,
        pi,
    })
}

/// Normalized `1/d` weights; uniform over the zero entries if any exist.
pub fn inverse_distance_weights(distances: &[f64]) -> Vec<f64> {
    let zeros = distances.iter().filter(|&&d| d == 0.0).count();
    if zeros > 0 {
        let w = 1.0 / zeros as f64;
        return distances.iter().map(|&d| if d == 0.0 { w } else { 0.0 }).collect();
    }
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / d).collect();
    let eta = 1.0 / inv.iter().sum::<f64>();
    inv.iter().map(|x| x * eta).collect()
}

pub fn projection_table(projection: &ProjectionResult) -> Result<CsvTable> {
    let mut t = CsvTable::new(["prototype", "class", "sample_id", "dist_sq", "top_tokens", "text"]);
    for p in &projection.prototypes {
        t.push(vec![
            p.prototype.to_string(),
            p.class.to_string(),
            p.sample_id.to_string(),
            num(p.dist_sq),
            p.top_tokens.clone().unwrap_or_default(),
            p.text.clone().unwrap_or_default(),
        ])?;
    }
    Ok(t)
}

pub fn space_table(rows: &[SpaceRow]) -> Result<CsvTable> {
    let mut t = CsvTable::new(["sample_id", "label", "prediction", "nsim_a", "nsim_b"]);
    t.comment("nsim = 1/(1+d), d = Euclidean distance to the prototype");
    for r in rows {
        t.push(vec![
            r.sample_id.to_string(),
            r.label.to_string(),
            r.prediction.to_string(),
            num(r.nsim_a),
            num(r.nsim_b),
        ])?;
    }
    Ok(t)
}

pub fn distribution_table(dists: &[ClusterDistribution]) -> Result<CsvTable> {
    let mut t = CsvTable::new(["prototype", "sample_id", "distance", "pi"]);
    t.comment("pi proportional to 1/d; uniform over exact matches when d = 0");
    for dist in dists {
        for ((id, d), pi) in dist.sample_ids.iter().zip(&dist.distances).zip(&dist.pi) {
            t.push(vec![dist.prototype.to_string(), id.to_string(), num(*d), num(*pi)])?;
        }
    }
    Ok(t)
}
