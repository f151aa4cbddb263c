//! Retrieval evaluation: embeddings, distance matrices, CMC and mAP under the
//! single-query protocol.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{stack_images, DatasetRecord};
use crate::error::{Error, Result};
use crate::model::PftModel;

const NORM_FLOOR: f64 = 1e-12;
const EMBED_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Config(format!("unknown metric {other:?} (expected cosine or euclidean)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `cmc[k-1]`: fraction of evaluated queries with a match in the top `k`.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries without any valid gallery match, left out of both averages.
    pub excluded_queries: usize,
    /// Ranked gallery indices per query, after exclusion.
    #[serde(skip)]
    pub per_query: Vec<Vec<usize>>,
}

/// Embeds one image; `[feature_dim]`.
pub fn feature_extract(model: &PftModel, image: &Tensor) -> Result<Vec<f64>> {
    let p = &model.config().patch;
    let batch = image.reshaped(&[1, p.channels, p.height, p.width])?;
    Ok(model.embed(&batch)?.into_data())
}

/// Embeds every record; `[n, feature_dim]`. Chunks run in parallel and each
/// row depends only on its own image.
pub fn extract_features(model: &PftModel, records: &[DatasetRecord]) -> Result<Tensor> {
    if records.is_empty() {
        return Err(Error::Data("no images to embed".into()));
    }
    let chunks: Vec<Tensor> = records
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| model.embed(&stack_images(chunk.iter().map(|r| &r.image))?))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(records.len() * model.feature_dim());
    for c in chunks {
        data.extend(c.into_data());
    }
    Tensor::new(&[records.len(), model.feature_dim()], data)
}

pub fn distance_matrix(q: &Tensor, g: &Tensor, metric: Metric) -> Result<Tensor> {
    if q.rank() != 2 || g.rank() != 2 || q.cols() != g.cols() {
        return Err(Error::Shape { op: "distance_matrix", lhs: q.shape().to_vec(), rhs: g.shape().to_vec() });
    }
    let (nq, ng) = (q.rows(), g.rows());
    let norm = |t: &Tensor, i: usize| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
    let qn: Vec<f64> = (0..nq).map(|i| norm(q, i)).collect();
    let gn: Vec<f64> = (0..ng).map(|j| norm(g, j)).collect();
    let mut out = Vec::with_capacity(nq * ng);
    for i in 0..nq {
        for j in 0..ng {
            let (a, b) = (q.row(i), g.row(j));
            out.push(match metric {
                Metric::Cosine => 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (qn[i] * gn[j]),
                Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            });
        }
    }
    Tensor::new(&[nq, ng], out)
}

/// Single-query evaluation with same-identity-same-camera exclusion.
pub fn evaluate(
    dist: &Tensor,
    q_ids: &[usize],
    g_ids: &[usize],
    q_cams: &[usize],
    g_cams: &[usize],
    max_rank: usize,
) -> Result<RetrievalReport> {
    evaluate_with(dist, q_ids, g_ids, q_cams, g_cams, max_rank, true)
}

/// As [`evaluate`]; `exclude_same_camera == false` keeps every gallery item.
pub fn evaluate_with(
    dist: &Tensor,
    q_ids: &[usize],
    g_ids: &[usize],
    q_cams: &[usize],
    g_cams: &[usize],
    max_rank: usize,
    exclude_same_camera: bool,
) -> Result<RetrievalReport> {
    let (nq, ng) = match dist.shape() {
        [a, b] => (*a, *b),
        s => return Err(Error::invalid("evaluate", format!("distance matrix must be 2-D, got {s:?}"))),
    };
    if q_ids.len() != nq || q_cams.len() != nq || g_ids.len() != ng || g_cams.len() != ng {
        return Err(Error::invalid(
            "evaluate",
            format!(
                "label lengths (query {}/{}, gallery {}/{}) do not match distances {nq}x{ng}",
                q_ids.len(),
                q_cams.len(),
                g_ids.len(),
                g_cams.len()
            ),
        ));
    }
    if max_rank == 0 {
        return Err(Error::invalid("evaluate", "max_rank must be at least 1"));
    }
    let mut hits = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut per_query = Vec::with_capacity(nq);
    for i in 0..nq {
        let row = dist.row(i);
        let mut order: Vec<usize> = (0..ng)
            .filter(|&j| !(exclude_same_camera && g_ids[j] == q_ids[i] && g_cams[j] == q_cams[i]))
            .collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let relevant: Vec<usize> =
            order.iter().enumerate().filter(|(_, &j)| g_ids[j] == q_ids[i]).map(|(r, _)| r).collect();
        per_query.push(order);
        let Some(&first) = relevant.first() else { continue };
        evaluated += 1;
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
        ap_sum += relevant.iter().enumerate().map(|(n, &r)| (n + 1) as f64 / (r + 1) as f64).sum::<f64>()
            / relevant.len() as f64;
    }
    if evaluated == 0 {
        return Err(Error::Data("no query has a valid gallery match".into()));
    }
    Ok(RetrievalReport {
        cmc: hits.iter().map(|&h| h as f64 / evaluated as f64).collect(),
        map: ap_sum / evaluated as f64,
        excluded_queries: nq - evaluated,
        per_query,
    })
}
