use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::EmbeddedVideo;
use crate::{Error, Result};

/// Rows scaled to unit norm; zero rows stay zero.
pub(crate) fn unit_rows(m: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

fn unit_vector(v: ArrayView1<'_, f64>) -> Array1<f64> {
    unit_rows(v.insert_axis(Axis(0))).remove_axis(Axis(0))
}

/// Index of the most cosine-similar row of `emb2` for every row of `emb1`,
/// ties going to the smaller index.
pub fn nearest_neighbors(emb1: ArrayView2<'_, f64>, emb2: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    if emb1.ncols() != emb2.ncols() {
        return Err(Error::shape(format!("embedding widths differ: {} vs {}", emb1.ncols(), emb2.ncols())));
    }
    if emb2.nrows() == 0 {
        return Err(Error::invalid("second sequence is empty"));
    }
    let sims = unit_rows(emb1).dot(&unit_rows(emb2).t());
    Ok(sims
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Kendall rank correlation between frame order in `emb1` and the order of
/// its nearest neighbors in `emb2`. Pairs sharing a neighbor count zero.
pub fn kendalls_tau(emb1: ArrayView2<'_, f64>, emb2: ArrayView2<'_, f64>) -> Result<f64> {
    let t1 = emb1.nrows();
    if t1 < 2 {
        return Err(Error::invalid(format!("tau needs at least 2 query frames, got {t1}")));
    }
    let nn = nearest_neighbors(emb1, emb2)?;
    let mut score: i64 = 0;
    for u in 0..t1 {
        for v in u + 1..t1 {
            score += match nn[v].cmp(&nn[u]) {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => -1,
                std::cmp::Ordering::Equal => 0,
            };
        }
    }
    Ok(score as f64 / (t1 * (t1 - 1) / 2) as f64)
}

fn same_action(a: &EmbeddedVideo, b: &EmbeddedVideo) -> bool {
    a.action_label == b.action_label
}

/// Mean tau over ordered pairs of distinct videos sharing an action label.
pub fn dataset_kendalls_tau(videos: &[EmbeddedVideo]) -> Result<f64> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, a) in videos.iter().enumerate() {
        for (j, b) in videos.iter().enumerate() {
            if i != j && same_action(a, b) {
                sum += kendalls_tau(a.real(), b.real())?;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::invalid("no pair of videos shares an action label"));
    }
    Ok(sum / pairs as f64)
}

/// Candidate indices ordered by descending score, ties toward the smaller
/// index, truncated to `k`.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let order = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    idx
}

fn scores(query: &Array1<f64>, candidates: &Array2<f64>) -> Vec<f64> {
    candidates.dot(query).to_vec()
}

fn check_pool(k: usize, pool: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if pool < k {
        return Err(Error::invalid(format!("{pool} candidate frames for K = {k}")));
    }
    Ok(())
}

/// Fraction of the `k` most cosine-similar candidate frames whose label
/// matches `query_label`.
pub fn ap_at_k(
    query: ArrayView1<'_, f64>,
    query_label: usize,
    candidates: ArrayView2<'_, f64>,
    candidate_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if candidates.nrows() != candidate_labels.len() {
        return Err(Error::shape("one label per candidate frame is required"));
    }
    if candidates.ncols() != query.len() {
        return Err(Error::shape("query and candidate widths differ"));
    }
    check_pool(k, candidates.nrows())?;
    let hits = top_k(&scores(&unit_vector(query), &unit_rows(candidates)), k)
        .into_iter()
        .filter(|&i| candidate_labels[i] == query_label)
        .count();
    Ok(hits as f64 / k as f64)
}

/// Mean AP@K over every non-padding test frame, retrieving from the other
/// videos with the same action label.
pub fn dataset_ap_at_k(videos: &[EmbeddedVideo], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let max_k = ks.iter().copied().max().ok_or_else(|| Error::invalid("no K requested"))?;
    let mut totals = vec![0.0; ks.len()];
    let mut queries = 0usize;
    for (qi, query) in videos.iter().enumerate() {
        let pool: Vec<&EmbeddedVideo> = videos
            .iter()
            .enumerate()
            .filter(|&(i, v)| i != qi && same_action(query, v))
            .map(|(_, v)| v)
            .collect();
        if pool.is_empty() {
            continue;
        }
        let views: Vec<_> = pool.iter().map(|v| v.real()).collect();
        let candidates = unit_rows(ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?.view());
        let mut labels = Vec::with_capacity(candidates.nrows());
        for v in &pool {
            labels.extend_from_slice(v.labels_or_err()?);
        }
        check_pool(max_k, candidates.nrows())?;
        let query_labels = query.labels_or_err()?;
        for (row, &label) in query.real().rows().into_iter().zip(query_labels) {
            let ranked = top_k(&scores(&unit_vector(row), &candidates), max_k);
            for (total, &k) in totals.iter_mut().zip(ks) {
                let hits = ranked[..k].iter().filter(|&&i| labels[i] == label).count();
                *total += hits as f64 / k as f64;
            }
            queries += 1;
        }
    }
    if queries == 0 {
        return Err(Error::invalid("no video has a retrieval pool of the same action"));
    }
    Ok(ks.iter().zip(totals).map(|(&k, t)| (k, t / queries as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMatch {
    pub video_id: String,
    pub frame: usize,
    pub score: f64,
}

/// Top-`k` frames of `pool` (excluding the query's own video) by cosine
/// similarity to frame `frame` of `query`, in descending score.
pub fn retrieve_frames(query: &EmbeddedVideo, frame: usize, pool: &[EmbeddedVideo], k: usize) -> Result<Vec<FrameMatch>> {
    if frame >= query.real_frames {
        return Err(Error::invalid(format!(
            "frame {frame} out of range for `{}` with {} frames",
            query.id, query.real_frames
        )));
    }
    let others: Vec<&EmbeddedVideo> = pool.iter().filter(|v| v.id != query.id).collect();
    let mut refs = Vec::new();
    for v in &others {
        refs.extend((0..v.real_frames).map(|f| (v.id.as_str(), f)));
    }
    if refs.is_empty() {
        return Err(Error::invalid("retrieval pool is empty"));
    }
    check_pool(k, refs.len())?;
    let views: Vec<_> = others.iter().map(|v| v.real()).collect();
    let candidates = unit_rows(ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?.view());
    let s = scores(&unit_vector(query.real().row(frame)), &candidates);
    Ok(top_k(&s, k)
        .into_iter()
        .map(|i| FrameMatch {
            video_id: refs[i].0.to_string(),
            frame: refs[i].1,
            score: s[i],
        })
        .collect())
}
