//! Cross-domain retrieval with style codes: exact L2 ranking, recall@k,
//! and coarse-to-fine reranking with counted costs.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::losses::FeatureExtractor;
use crate::metrics::perceptual_distance;
use crate::error::{Result, UstError};
use crate::model::{Domain, ImageBatch, MaskBatch, UstModel};
use crate::synth::LoadedSplit;
use crate::tensor::Tensor;

pub const INDEX_KIND: &str = "ust-index";
/// Cut-offs reported by default.
pub const DEFAULT_KS: [usize; 4] = [1, 5, 20, 50];

/// Immutable database of codes `[n, d]` with their item ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    codes: Tensor,
    descriptor: String,
}

/// Ranked ids with their distances, plus the number of coordinate
/// differences evaluated to produce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub ids: Vec<String>,
    pub distances: Vec<f64>,
    pub cost: u64,
}

impl RetrievalIndex {
    pub fn new(ids: Vec<String>, codes: Tensor, descriptor: impl Into<String>) -> Result<Self> {
        if codes.shape().len() != 2 || codes.shape()[0] != ids.len() {
            return Err(UstError::Contract(format!(
                "index of {} ids needs a [{}, d] code matrix, got {:?}",
                ids.len(),
                ids.len(),
                codes.shape()
            )));
        }
        if ids.is_empty() {
            return Err(UstError::Contract("empty retrieval database".into()));
        }
        if !codes.all_finite() {
            return Err(UstError::NonFinite("retrieval codes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(UstError::Contract(format!("duplicate index id `{dup}`")));
        }
        Ok(RetrievalIndex {
            ids,
            codes,
            descriptor: descriptor.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn code(&self, i: usize) -> &[f64] {
        self.codes.sample_data(i)
    }

    fn clamp_k(&self, k: usize) -> usize {
        if k > self.len() {
            warn!("k = {k} exceeds the database size {}; clamping", self.len());
        }
        k.min(self.len())
    }

    /// Top-`k` ids by ascending L2 distance to `q`; ties go to the smaller
    /// id. Costs `d` per database item.
    pub fn rank(&self, q: &[f64], k: usize) -> Result<Ranking> {
        if q.len() != self.dim() {
            return Err(UstError::shape("query code", &[self.dim()], &[q.len()]));
        }
        let k = self.clamp_k(k);
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|i| {
                let d2: f64 = self.code(i).iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum();
                (d2.sqrt(), i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1])));
        scored.truncate(k);
        Ok(Ranking {
            ids: scored.iter().map(|s| self.ids[s.1].clone()).collect(),
            distances: scored.iter().map(|s| s.0).collect(),
            cost: (self.dim() * self.len()) as u64,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(
            INDEX_KIND,
            serde_json::json!({ "ids": self.ids, "descriptor": self.descriptor }),
        );
        c.push("codes", self.codes.clone());
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.kind != INDEX_KIND {
            return Err(UstError::Checkpoint(format!("expected a `{INDEX_KIND}` container, found `{}`", c.kind)));
        }
        let ids: Vec<String> = serde_json::from_value(c.metadata.get("ids").cloned().unwrap_or_default())?;
        let descriptor = c.metadata.get("descriptor").and_then(|d| d.as_str()).unwrap_or("").to_string();
        let codes = c
            .get("codes")
            .cloned()
            .ok_or_else(|| UstError::Checkpoint("index has no code matrix".into()))?;
        Self::new(ids, codes, descriptor)
    }
}

/// Descriptor recorded for indexes built from a model's style encoder.
pub fn style_descriptor(model: &UstModel) -> Result<String> {
    Ok(format!(
        "style-codes sd={} model={}",
        model.config().style_dim,
        &model.to_container()?.digest()?[..16]
    ))
}

/// Style code of every domain-B item, keyed by pair id.
pub fn build_index(model: &UstModel, database: &LoadedSplit) -> Result<RetrievalIndex> {
    if database.b.is_empty() {
        return Err(UstError::Dataset("empty retrieval database".into()));
    }
    let mut codes = Vec::with_capacity(database.b.len());
    for i in 0..database.b.len() {
        let x = database.b_batch(&[i])?;
        codes.push(model.encode_style_for(&x, Domain::B, None)?.0);
    }
    let ids = database.b.iter().map(|s| s.pair_id.clone()).collect();
    RetrievalIndex::new(ids, Tensor::stack(&codes)?, style_descriptor(model)?)
}

/// Style code of a masked domain-A query.
pub fn query_code(model: &UstModel, q_image: &ImageBatch, q_mask: &MaskBatch) -> Result<Vec<f64>> {
    let masked = mask_query(q_image, q_mask)?;
    Ok(model.encode_style_for(&masked, Domain::A, Some(q_mask))?.0.into_data())
}

/// The query image multiplied by its mask.
pub fn mask_query(q_image: &ImageBatch, q_mask: &MaskBatch) -> Result<ImageBatch> {
    ImageBatch::new(q_image.tensor().zip_map(&broadcast_mask(q_mask, q_image)?, |x, m| x * m)?)
}

fn broadcast_mask(m: &MaskBatch, x: &ImageBatch) -> Result<Tensor> {
    let (n, c, h, w) = x.tensor().dims4();
    if m.batch() != n || m.hw() != (h, w) {
        return Err(UstError::shape("query mask", &[n, 1, h, w], m.tensor().shape()));
    }
    if (0..n).any(|i| m.is_empty_at(i)) {
        return Err(UstError::EmptyMask("query mask has no foreground".into()));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        for _ in 0..c {
            out.extend_from_slice(m.tensor().sample_data(s));
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Mask the query, encode its style and rank the database.
pub fn query(
    index: &RetrievalIndex,
    model: &UstModel,
    q_image: &ImageBatch,
    q_mask: &MaskBatch,
    k: usize,
) -> Result<Ranking> {
    index.rank(&query_code(model, q_image, q_mask)?, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// `(k, recall@k in percent)`.
    pub recall: Vec<(usize, f64)>,
    pub queries: usize,
    pub database: usize,
    /// Dimension of the flat (coarse) codes.
    pub d: usize,
    pub d_fine: Option<usize>,
    pub rerank_k: Option<usize>,
    /// Coordinate differences evaluated over all queries.
    pub cost: u64,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.0 == k).map(|r| r.1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("k,recall\n");
        for (k, r) in &self.recall {
            s.push_str(&format!("{k},{r:.4}\n"));
        }
        s
    }
}

/// Percentage of queries whose relevant id is among their first `k` ids.
pub fn recall_at_k(rankings: &[Vec<String>], truth: &[Option<String>], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if rankings.len() != truth.len() {
        return Err(UstError::Contract(format!(
            "{} rankings but {} ground-truth entries",
            rankings.len(),
            truth.len()
        )));
    }
    if rankings.is_empty() {
        return Err(UstError::Contract("recall of zero queries".into()));
    }
    let truth: Vec<&str> = truth
        .iter()
        .enumerate()
        .map(|(i, t)| {
            t.as_deref()
                .ok_or_else(|| UstError::Contract(format!("query {i} has no ground truth")))
        })
        .collect::<Result<_>>()?;
    let ranks: Vec<Option<usize>> = rankings
        .iter()
        .zip(&truth)
        .map(|(r, t)| r.iter().position(|id| id == t))
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|p| p < k)).count();
            (k, 100.0 * hits as f64 / rankings.len() as f64)
        })
        .collect())
}

/// Flat retrieval for a set of query codes.
pub fn flat_recall(
    index: &RetrievalIndex,
    queries: &[Vec<f64>],
    truth: &[Option<String>],
    ks: &[usize],
) -> Result<(RecallReport, Vec<Ranking>)> {
    let rankings: Vec<Ranking> = queries.iter().map(|q| index.rank(q, index.len())).collect::<Result<_>>()?;
    let ids: Vec<Vec<String>> = rankings.iter().map(|r| r.ids.clone()).collect();
    let report = RecallReport {
        recall: recall_at_k(&ids, truth, ks)?,
        queries: queries.len(),
        database: index.len(),
        d: index.dim(),
        d_fine: None,
        rerank_k: None,
        cost: rankings.iter().map(|r| r.cost).sum(),
    };
    Ok((report, rankings))
}

/// Expensive pairwise distance between query `q` and database item `i`.
pub trait FineMetric {
    /// Cost of one evaluation, in coordinate differences.
    fn dim(&self) -> usize;
    fn distance(&self, q: usize, item: &str) -> Result<f64>;
}

/// Perceptual distance between masked query images and database images.
pub struct PerceptualFine<'a> {
    queries: Vec<Tensor>,
    database: std::collections::HashMap<String, Tensor>,
    phi: &'a dyn FeatureExtractor,
    dim: usize,
}

impl<'a> PerceptualFine<'a> {
    /// `queries` are `[1, 3, h, w]` images already multiplied by their
    /// masks; `database` maps ids to `[1, 3, h, w]` images.
    pub fn new(queries: Vec<Tensor>, database: Vec<(String, Tensor)>, phi: &'a dyn FeatureExtractor) -> Result<Self> {
        let first = database
            .first()
            .ok_or_else(|| UstError::Dataset("empty retrieval database".into()))?;
        let dim = phi.features(&first.1)?.iter().map(|f| f.numel()).sum();
        Ok(PerceptualFine {
            queries,
            database: database.into_iter().collect(),
            phi,
            dim,
        })
    }
}

impl FineMetric for PerceptualFine<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn distance(&self, q: usize, item: &str) -> Result<f64> {
        let x = self
            .queries
            .get(q)
            .ok_or_else(|| UstError::Contract(format!("no query image {q}")))?;
        let y = self
            .database
            .get(item)
            .ok_or_else(|| UstError::Contract(format!("no database image `{item}`")))?;
        perceptual_distance(x, y, self.phi)
    }
}

/// Coarse top-`k` by code distance, reordered by `fine`; items below the
/// top `k` keep their coarse order. Ties in the fine distance keep the
/// coarse order.
pub fn coarse_to_fine(
    index: &RetrievalIndex,
    fine: &dyn FineMetric,
    queries: &[Vec<f64>],
    truth: &[Option<String>],
    k: usize,
    ks: &[usize],
) -> Result<(RecallReport, Vec<Ranking>)> {
    let k = index.clamp_k(k);
    let mut rankings = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let mut r = index.rank(q, index.len())?;
        let mut head: Vec<(f64, usize)> = (0..k)
            .map(|j| fine.distance(qi, &r.ids[j]).map(|d| (d, j)))
            .collect::<Result<_>>()?;
        head.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let ids: Vec<String> = head.iter().map(|h| r.ids[h.1].clone()).collect();
        let dists: Vec<f64> = head.iter().map(|h| h.0).collect();
        r.ids.splice(0..k, ids);
        r.distances.splice(0..k, dists);
        r.cost += (fine.dim() * k) as u64;
        rankings.push(r);
    }
    let ids: Vec<Vec<String>> = rankings.iter().map(|r| r.ids.clone()).collect();
    let report = RecallReport {
        recall: recall_at_k(&ids, truth, ks)?,
        queries: queries.len(),
        database: index.len(),
        d: index.dim(),
        d_fine: Some(fine.dim()),
        rerank_k: Some(k),
        cost: rankings.iter().map(|r| r.cost).sum(),
    };
    Ok((report, rankings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index_of(rows: &[[f64; 2]]) -> RetrievalIndex {
        let ids = (0..rows.len()).map(|i| format!("id{i:02}")).collect();
        let data = rows.iter().flatten().copied().collect();
        RetrievalIndex::new(ids, Tensor::new(&[rows.len(), 2], data).unwrap(), "test").unwrap()
    }

    #[test]
    fn exact_match_ranks_first_and_ties_break_by_id() {
        let idx = index_of(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, 1.0]]);
        let r = idx.rank(&[0.0, 1.0], 4).unwrap();
        assert_eq!(r.ids, vec!["id01", "id03", "id00", "id02"]);
        assert_eq!(r.cost, 8);
        let clamped = idx.rank(&[0.0, 0.0], 99).unwrap();
        assert_eq!(clamped.ids.len(), 4);
    }

    #[test]
    fn recall_hand_case() {
        let ranking = vec![vec!["x".to_string(), "y".into(), "z".into(), "w".into()]];
        let r = recall_at_k(&ranking, &[Some("z".into())], &[1, 5]).unwrap();
        assert_eq!(r, vec![(1, 0.0), (5, 100.0)]);
        assert!(recall_at_k(&ranking, &[None], &[1]).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let t = Tensor::zeros(&[2, 2]);
        assert!(RetrievalIndex::new(vec!["a".into(), "a".into()], t, "").is_err());
    }
}
