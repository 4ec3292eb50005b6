//! Embedding extraction, pairwise distances and mAP / CMC ranking metrics.
//!
//! Average precision of one query is the mean, over its correct matches, of
//! the precision at each match's rank:
//!
//! ```text
//! AP = (1 / M) · Σ_{j=1..M} j / rank_j
//! ```
//!
//! where `rank_j` is the 1-based position of the `j`-th correct match in the
//! filtered gallery ranking and `M` the number of correct matches. Gallery
//! entries are sorted by ascending distance, equal distances by ascending
//! gallery index.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{forward_features, EmbeddingBatch, Model};
use crate::data::{Dataset, Preprocess, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::config("eval.metric", format!("unknown metric `{other}`"))),
        }
    }
}

/// `D[i][j]` = distance between query row `i` and gallery row `j`.
///
/// Cosine distance is `1 − cos θ`; a zero vector is at distance 1 from everything.
pub fn pairwise_distances(q: &Array2<f64>, g: &Array2<f64>, metric: Metric) -> Result<Array2<f64>> {
    if q.ncols() != g.ncols() {
        return Err(Error::Shape(format!(
            "query dim {} differs from gallery dim {}",
            q.ncols(),
            g.ncols()
        )));
    }
    let norms = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect::<Vec<_>>();
    let (qn, gn) = (norms(q), norms(g));
    let rows: Vec<Vec<f64>> = (0..q.nrows())
        .into_par_iter()
        .map(|i| {
            let qi = q.row(i);
            (0..g.nrows())
                .map(|j| {
                    let gj = g.row(j);
                    match metric {
                        Metric::Euclidean => qi.iter().zip(gj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                        Metric::Cosine => {
                            let denom = qn[i] * gn[j];
                            if denom == 0.0 {
                                1.0
                            } else {
                                1.0 - qi.dot(&gj) / denom
                            }
                        }
                    }
                })
                .collect()
        })
        .collect();
    let d = Array2::from_shape_vec((q.nrows(), g.nrows()), rows.concat()).expect("row lengths match");
    Ok(d)
}

/// Identity and camera of each query or gallery entry.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub identities: Vec<u64>,
    pub cameras: Vec<u64>,
}

impl Labels {
    pub fn new(identities: Vec<u64>, cameras: Vec<u64>) -> Self {
        Labels { identities, cameras }
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    #[serde(skip)]
    pub distances: Array2<f64>,
    pub map: f64,
    /// `cmc[k-1]` is Rank-k.
    pub cmc: Vec<f64>,
    /// `None` for queries without a valid match.
    pub per_query_ap: Vec<Option<f64>>,
    pub valid_queries: usize,
    pub excluded_queries: usize,
}

impl RankingResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k - 1).or(self.cmc.last()).copied().unwrap_or(0.0)
    }

    /// Plain-text summary table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "queries  {:>7} (excluded {})\nmAP      {:>7.4}\n",
            self.valid_queries, self.excluded_queries, self.map
        );
        for k in [1usize, 5, 10, 20] {
            if k <= self.cmc.len() {
                out += &format!("Rank-{k:<3} {:>7.4}\n", self.cmc[k - 1]);
            }
        }
        out
    }
}

fn check_inputs(d: &Array2<f64>, q: &Labels, g: &Labels, max_rank: usize) -> Result<()> {
    if q.identities.len() != q.cameras.len() || g.identities.len() != g.cameras.len() {
        return Err(Error::Shape("identity and camera lists differ in length".into()));
    }
    if d.dim() != (q.len(), g.len()) {
        return Err(Error::Shape(format!(
            "distance matrix {:?} does not match {} queries × {} gallery",
            d.dim(),
            q.len(),
            g.len()
        )));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distance matrix".into()));
    }
    if max_rank == 0 {
        return Err(Error::InvalidArgument("max_rank must be at least 1".into()));
    }
    Ok(())
}

/// mAP and CMC over the filtered rankings.
///
/// With `cross_camera_filter`, gallery entries sharing both identity and
/// camera with the query are removed before ranking. Queries left without a
/// correct match are excluded from both denominators and counted.
pub fn evaluate_ranking(
    d: &Array2<f64>,
    query: &Labels,
    gallery: &Labels,
    max_rank: usize,
    cross_camera_filter: bool,
) -> Result<RankingResult> {
    check_inputs(d, query, gallery, max_rank)?;
    let per_query: Vec<Option<(f64, usize)>> = (0..query.len())
        .into_par_iter()
        .map(|i| {
            let (qid, qcam) = (query.identities[i], query.cameras[i]);
            let row = d.row(i);
            let mut order: Vec<usize> = (0..gallery.len())
                .filter(|&j| !(cross_camera_filter && gallery.identities[j] == qid && gallery.cameras[j] == qcam))
                .collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let mut hits = 0usize;
            let mut precision_sum = 0.0;
            let mut first = None;
            for (pos, &j) in order.iter().enumerate() {
                if gallery.identities[j] == qid {
                    hits += 1;
                    precision_sum += hits as f64 / (pos + 1) as f64;
                    first.get_or_insert(pos);
                }
            }
            first.map(|f| (precision_sum / hits as f64, f))
        })
        .collect();
    let valid = per_query.iter().flatten().count();
    let mut cmc = vec![0.0; max_rank];
    let mut ap_sum = 0.0;
    for &(ap, first) in per_query.iter().flatten() {
        ap_sum += ap;
        for c in cmc.iter_mut().skip(first) {
            *c += 1.0;
        }
    }
    if valid > 0 {
        cmc.iter_mut().for_each(|c| *c /= valid as f64);
    }
    Ok(RankingResult {
        distances: d.clone(),
        map: if valid > 0 { ap_sum / valid as f64 } else { 0.0 },
        cmc,
        per_query_ap: per_query.iter().map(|p| p.map(|(ap, _)| ap)).collect(),
        valid_queries: valid,
        excluded_queries: query.len() - valid,
    })
}

/// Literal reference implementation of [`evaluate_ranking`] used to cross-check it.
pub fn oracle_ranking(
    d: &Array2<f64>,
    query: &Labels,
    gallery: &Labels,
    max_rank: usize,
    cross_camera_filter: bool,
) -> Result<RankingResult> {
    check_inputs(d, query, gallery, max_rank)?;
    let nq = query.len();
    let ng = gallery.len();
    let mut per_query_ap = Vec::new();
    let mut found_within = vec![0usize; max_rank];
    let mut valid = 0usize;
    let mut ap_total = 0.0;
    for i in 0..nq {
        // Candidate list of (distance, gallery index).
        let mut cand: Vec<(f64, usize)> = Vec::new();
        for j in 0..ng {
            let same_id = query.identities[i] == gallery.identities[j];
            let same_cam = query.cameras[i] == gallery.cameras[j];
            if cross_camera_filter && same_id && same_cam {
                continue;
            }
            cand.push((d[[i, j]], j));
        }
        // Insertion sort on (distance, index).
        for a in 1..cand.len() {
            let mut b = a;
            while b > 0 {
                let (x, y) = (cand[b - 1], cand[b]);
                let out_of_order = x.0 > y.0 || (x.0 == y.0 && x.1 > y.1);
                if !out_of_order {
                    break;
                }
                cand.swap(b - 1, b);
                b -= 1;
            }
        }
        let matches: Vec<bool> = cand.iter().map(|&(_, j)| gallery.identities[j] == query.identities[i]).collect();
        let total_matches = matches.iter().filter(|&&m| m).count();
        if total_matches == 0 {
            per_query_ap.push(None);
            continue;
        }
        valid += 1;
        let mut ap = 0.0;
        for r in 0..matches.len() {
            if matches[r] {
                let correct_so_far = matches[..=r].iter().filter(|&&m| m).count();
                ap += correct_so_far as f64 / (r + 1) as f64;
            }
        }
        ap /= total_matches as f64;
        ap_total += ap;
        per_query_ap.push(Some(ap));
        for (k, slot) in found_within.iter_mut().enumerate() {
            if matches.iter().take(k + 1).any(|&m| m) {
                *slot += 1;
            }
        }
    }
    let cmc = found_within
        .iter()
        .map(|&c| if valid == 0 { 0.0 } else { c as f64 / valid as f64 })
        .collect();
    Ok(RankingResult {
        distances: d.clone(),
        map: if valid == 0 { 0.0 } else { ap_total / valid as f64 },
        cmc,
        per_query_ap,
        valid_queries: valid,
        excluded_queries: nq - valid,
    })
}

/// Mean and standard deviation over repeats of the VehicleID protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatedResult {
    pub repeats: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub cmc_mean: Vec<f64>,
    pub cmc_std: Vec<f64>,
}

/// VehicleID-style evaluation: each repeat draws one gallery image per
/// identity at random and uses every other image as a query. No camera filter.
pub fn repeated_gallery_protocol(
    emb: &Array2<f64>,
    identities: &[u64],
    repeats: usize,
    seed: u64,
    metric: Metric,
    max_rank: usize,
) -> Result<RepeatedResult> {
    if emb.nrows() != identities.len() {
        return Err(Error::Shape("one identity per embedding row required".into()));
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let mut groups: std::collections::BTreeMap<u64, Vec<usize>> = Default::default();
    for (i, &id) in identities.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::new();
    let mut cmcs = Vec::new();
    for _ in 0..repeats {
        let (mut qi, mut gi) = (Vec::new(), Vec::new());
        for members in groups.values() {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            gi.push(m[0]);
            qi.extend_from_slice(&m[1..]);
        }
        let q = emb.select(Axis(0), &qi);
        let g = emb.select(Axis(0), &gi);
        let zeros = |n: usize| vec![0u64; n];
        let ql = Labels::new(qi.iter().map(|&i| identities[i]).collect(), zeros(qi.len()));
        let gl = Labels::new(gi.iter().map(|&i| identities[i]).collect(), zeros(gi.len()));
        let r = evaluate_ranking(&pairwise_distances(&q, &g, metric)?, &ql, &gl, max_rank, false)?;
        maps.push(r.map);
        cmcs.push(r.cmc);
    }
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (map_mean, map_std) = stats(&maps);
    let (cmc_mean, cmc_std) = (0..max_rank)
        .map(|k| stats(&cmcs.iter().map(|c| c[k]).collect::<Vec<_>>()))
        .unzip();
    Ok(RepeatedResult {
        repeats,
        map_mean,
        map_std,
        cmc_mean,
        cmc_std,
    })
}

/// Embeddings of every record of `split`, in manifest order.
pub fn extract_embeddings(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    preprocess: &Preprocess,
    batch_size: usize,
) -> Result<EmbeddingBatch> {
    let records = dataset.index().split_indices(split);
    extract_records(model, dataset, &records, preprocess, batch_size)
}

/// Embeddings for an explicit list of record indices.
pub fn extract_records(
    model: &Model,
    dataset: &Dataset,
    records: &[usize],
    preprocess: &Preprocess,
    batch_size: usize,
) -> Result<EmbeddingBatch> {
    let dim = model.embedding_dim();
    let size = model.config().input_size;
    let mut features = Array2::zeros((records.len(), dim));
    for (c, chunk) in records.chunks(batch_size.max(1)).enumerate() {
        let images = dataset.load_batch(chunk, size, preprocess, None, 0)?;
        let f = forward_features(model, &images)?;
        let start = c * batch_size.max(1);
        features.slice_mut(s![start..start + chunk.len(), ..]).assign(&f);
    }
    let recs = dataset.index().records();
    Ok(EmbeddingBatch {
        features,
        identities: records.iter().map(|&r| recs[r].identity).collect(),
        cameras: records.iter().map(|&r| recs[r].camera).collect(),
    })
}

/// Sidecar describing an embedding file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub count: usize,
    pub dims: usize,
    pub dtype: String,
    pub layout: String,
    pub checkpoint: Option<String>,
    pub split: Option<Split>,
    pub identities: Vec<u64>,
    pub cameras: Vec<u64>,
    #[serde(default)]
    pub paths: Vec<PathBuf>,
}

/// Path of the JSON sidecar belonging to an embedding file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes `count × dims` little-endian f32 values row-major, plus a `<path>.json` sidecar.
pub fn write_embeddings(path: &Path, batch: &EmbeddingBatch, mut meta: EmbeddingMeta) -> Result<()> {
    meta.count = batch.len();
    meta.dims = batch.features.ncols();
    meta.dtype = "f32".into();
    meta.layout = "row-major little-endian".into();
    meta.identities = batch.identities.clone();
    meta.cameras = batch.cameras.clone();
    let mut bytes = Vec::with_capacity(batch.features.len() * 4);
    for v in batch.features.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_embeddings(path: &Path) -> Result<(EmbeddingBatch, EmbeddingMeta)> {
    let side = sidecar_path(path);
    let meta: EmbeddingMeta =
        serde_json::from_str(&fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != meta.count * meta.dims * 4 {
        return Err(Error::Data(format!(
            "{} holds {} bytes, sidecar declares {}×{} f32",
            path.display(),
            bytes.len(),
            meta.count,
            meta.dims
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let features = Array2::from_shape_vec((meta.count, meta.dims), values).map_err(|e| Error::Data(e.to_string()))?;
    Ok((
        EmbeddingBatch {
            features,
            identities: meta.identities.clone(),
            cameras: meta.cameras.clone(),
        },
        meta,
    ))
}

/// Ranks a query batch against a gallery batch.
pub fn evaluate_embeddings(
    query: &EmbeddingBatch,
    gallery: &EmbeddingBatch,
    metric: Metric,
    max_rank: usize,
    cross_camera_filter: bool,
) -> Result<RankingResult> {
    let d = pairwise_distances(&query.features, &gallery.features, metric)?;
    evaluate_ranking(
        &d,
        &Labels::new(query.identities.clone(), query.cameras.clone()),
        &Labels::new(gallery.identities.clone(), gallery.cameras.clone()),
        max_rank,
        cross_camera_filter,
    )
}
