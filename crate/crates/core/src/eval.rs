//! Retrieval metrics (CMC, mAP) and activation maps.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Norm floor when L2-normalizing an all-zero embedding.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Distances {
    /// `(Q, G)`.
    pub matrix: Tensor,
    /// Embeddings (queries then gallery) whose norm was below the floor.
    pub zero_norm: Vec<usize>,
}

fn normalized_rows(t: &Tensor, zero: &mut Vec<usize>, offset: usize) -> Vec<Vec<f64>> {
    let d = t.dims()[1];
    t.data()
        .chunks(d)
        .enumerate()
        .map(|(i, row)| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < NORM_EPSILON {
                zero.push(offset + i);
            }
            let n = n.max(NORM_EPSILON);
            row.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Euclidean distances between L2-normalized query and gallery embeddings.
pub fn distance_matrix(query: &Tensor, gallery: &Tensor) -> Result<Distances> {
    if query.rank() != 2 || gallery.rank() != 2 || query.dims()[1] != gallery.dims()[1] {
        return Err(contract(format!(
            "distance_matrix: {} vs {}",
            query.shape(),
            gallery.shape()
        )));
    }
    let mut zero = Vec::new();
    let q = normalized_rows(query, &mut zero, 0);
    let g = normalized_rows(gallery, &mut zero, q.len());
    let mut out = Vec::with_capacity(q.len() * g.len());
    for a in &q {
        for b in &g {
            out.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    Ok(Distances {
        matrix: Tensor::new(vec![q.len(), g.len()], out)?,
        zero_norm: zero,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemMeta {
    pub identity: usize,
    pub camera: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankingResult {
    #[serde(skip)]
    pub distances: Option<Tensor>,
    /// `cmc[k]` is the match rate within the top `k + 1`.
    pub cmc: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `None` for excluded queries.
    pub average_precision: Vec<Option<f64>>,
    /// Queries without any valid positive in the gallery.
    pub excluded_queries: usize,
}

impl RankingResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }

    /// `metric,value` rows: rank-1/5/10 (as far as computed), mAP and the
    /// excluded-query count.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = Vec::new();
        for k in [1, 5, 10] {
            if k <= self.cmc.len() {
                rows.push((format!("rank{k}"), self.rank(k)));
            }
        }
        rows.push(("mAP".into(), self.map));
        rows.push(("excluded_queries".into(), self.excluded_queries as f64));
        rows
    }
}

/// CMC and mAP. For each query, gallery items of the same identity under the
/// same camera are dropped; the rest are ranked by ascending distance with
/// ties broken by gallery index. Queries left without a positive are excluded
/// from both averages and counted.
pub fn evaluate(dist: &Tensor, query: &[ItemMeta], gallery: &[ItemMeta], max_rank: usize) -> Result<RankingResult> {
    if dist.rank() != 2 || dist.dims() != [query.len(), gallery.len()] {
        return Err(contract(format!(
            "evaluate: distances {} for {} queries and {} gallery items",
            dist.shape(),
            query.len(),
            gallery.len()
        )));
    }
    if max_rank == 0 {
        return Err(contract("max_rank must be positive"));
    }
    let g = gallery.len();
    let mut hits = vec![0usize; max_rank];
    let mut aps = Vec::with_capacity(query.len());
    let mut excluded = 0;
    for (qi, q) in query.iter().enumerate() {
        let row = &dist.data()[qi * g..(qi + 1) * g];
        let mut order: Vec<usize> = (0..g)
            .filter(|&j| !(gallery[j].identity == q.identity && gallery[j].camera == q.camera))
            .collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let positive_ranks: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(_, &j)| gallery[j].identity == q.identity)
            .map(|(pos, _)| pos + 1)
            .collect();
        if positive_ranks.is_empty() {
            excluded += 1;
            aps.push(None);
            continue;
        }
        let first = positive_ranks[0];
        for h in hits.iter_mut().skip(first - 1) {
            *h += 1;
        }
        aps.push(Some(average_precision(&positive_ranks)));
    }
    let valid = query.len() - excluded;
    let denom = valid.max(1) as f64;
    let map = aps.iter().flatten().sum::<f64>() / denom;
    Ok(RankingResult {
        distances: Some(dist.clone()),
        cmc: hits.iter().map(|&h| h as f64 / denom).collect(),
        map,
        average_precision: aps,
        excluded_queries: excluded,
    })
}

/// Mean of precision at each positive's (1-based, ascending) rank.
fn average_precision(ranks: &[usize]) -> f64 {
    ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| (i + 1) as f64 / r as f64)
        .sum::<f64>()
        / ranks.len() as f64
}

/// Channel-summed absolute activation, L2-normalized over each sample's
/// spatial plane. Returns `(N, H, W)` and, per sample, whether the map was
/// all zero (left as zeros).
pub fn activation_map(feature: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    if feature.rank() != 4 {
        return Err(contract(format!(
            "activation_map expects (N, C, H, W), got {}",
            feature.shape()
        )));
    }
    let [n, c, h, w] = [0, 1, 2, 3].map(|i| feature.dims()[i]);
    let plane = h * w;
    let mut out = vec![0.0; n * plane];
    let mut zero = Vec::with_capacity(n);
    for s in 0..n {
        let a = &mut out[s * plane..(s + 1) * plane];
        for ch in 0..c {
            let src = &feature.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            for (o, v) in a.iter_mut().zip(src) {
                *o += v.abs();
            }
        }
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero.push(true);
        } else {
            zero.push(false);
            for v in a.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok((Tensor::new(vec![n, h, w], out)?, zero))
}

/// Write an `(H, W)` map (or a `(1, H, W)` slice) as an 8-bit graymap,
/// min to 0 and max to 255; a constant map becomes uniform mid-gray.
pub fn export_map(map: &Tensor, path: &Path) -> Result<()> {
    let dims = map.dims();
    let (h, w) = match dims {
        [h, w] | [1, h, w] => (*h, *w),
        _ => {
            return Err(contract(format!(
                "export_map expects (H, W), got {}",
                map.shape()
            )))
        }
    };
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in map.data() {
        let level = if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round()
        } else {
            128.0
        };
        bytes.push(level as u8);
    }
    fs::write(path, bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// `metric,value` CSV.
pub fn write_metrics_csv(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["metric", "value"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for (k, v) in rows {
        w.write_record([k.clone(), v.to_string()])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// JSON summary of a ranking result.
pub fn write_metrics_json(path: &Path, result: &RankingResult) -> Result<()> {
    let mut v = serde_json::to_value(result)?;
    if let Some(obj) = v.as_object_mut() {
        for (k, x) in result.rows() {
            obj.insert(k, serde_json::json!(x));
        }
    }
    fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(id: usize, cam: usize) -> ItemMeta {
        ItemMeta {
            identity: id,
            camera: cam,
        }
    }

    fn t(dims: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn distances() {
        let q = t(&[2, 2], &[1.0, 0.0, 0.0, 5.0]);
        let g = t(&[2, 2], &[3.0, 0.0, 0.0, 1.0]);
        let d = distance_matrix(&q, &g).unwrap();
        assert_eq!(d.matrix.data()[0], 0.0);
        assert!((d.matrix.data()[1] - 2f64.sqrt()).abs() < 1e-15);
        assert!(d.zero_norm.is_empty());
        let z = distance_matrix(&t(&[1, 2], &[0.0, 0.0]), &g).unwrap();
        assert_eq!(z.zero_norm, vec![0]);
        assert!(distance_matrix(&q, &t(&[1, 3], &[0.0; 3])).is_err());
    }

    #[test]
    fn distance_scale_invariance_and_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut r = |n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let q = t(&[3, 4], &r(12));
        let g = t(&[5, 4], &r(20));
        let d = distance_matrix(&q, &g).unwrap().matrix;
        let q5 = q.map(|v| 5.0 * v);
        let d5 = distance_matrix(&q5, &g).unwrap().matrix;
        let argsort = |m: &Tensor, row: usize| {
            let r = &m.data()[row * 5..row * 5 + 5];
            let mut o: Vec<usize> = (0..5).collect();
            o.sort_by(|&a, &b| r[a].total_cmp(&r[b]));
            o
        };
        for row in 0..3 {
            assert_eq!(argsort(&d, row), argsort(&d5, row));
        }
        let perm = [3, 0, 4, 1, 2];
        let gp: Vec<f64> = perm.iter().flat_map(|&i| g.data()[i * 4..i * 4 + 4].to_vec()).collect();
        let dp = distance_matrix(&q, &t(&[5, 4], &gp)).unwrap().matrix;
        for row in 0..3 {
            for (c, &p) in perm.iter().enumerate() {
                assert_eq!(dp.data()[row * 5 + c], d.data()[row * 5 + p]);
            }
        }
    }

    #[test]
    fn protocol_examples() {
        let q = [meta(0, 0)];
        let g = [meta(1, 1), meta(0, 1), meta(2, 1)];
        let r = evaluate(&t(&[1, 3], &[0.1, 0.2, 0.3]), &q, &g, 3).unwrap();
        assert_eq!(r.cmc, vec![0.0, 1.0, 1.0]);
        assert_eq!(r.map, 0.5);

        let g = [meta(0, 1), meta(1, 1), meta(0, 1)];
        let r = evaluate(&t(&[1, 3], &[0.1, 0.2, 0.3]), &q, &g, 3).unwrap();
        assert!((r.map - 5.0 / 6.0).abs() < 1e-15);

        let g = [meta(0, 0), meta(1, 1)];
        let r = evaluate(&t(&[1, 2], &[0.1, 0.2]), &q, &g, 2).unwrap();
        assert_eq!(r.excluded_queries, 1);
        assert_eq!(r.average_precision, vec![None]);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let q = [meta(0, 0)];
        let g = [meta(1, 1), meta(0, 1)];
        let r = evaluate(&t(&[1, 2], &[0.5, 0.5]), &q, &g, 2).unwrap();
        assert_eq!(r.cmc, vec![0.0, 1.0]);
    }

    #[test]
    fn activation_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::new(vec![2, 3, 4, 5], (0..120).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (a, zero) = activation_map(&f).unwrap();
        assert_eq!(a.dims(), &[2, 4, 5]);
        assert_eq!(zero, vec![false, false]);
        for s in 0..2 {
            let n: f64 = a.data()[s * 20..(s + 1) * 20].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let (neg, _) = activation_map(&f.map(|v| -v)).unwrap();
        assert_eq!(neg, a);

        let single = t(&[1, 1, 1, 2], &[3.0, 4.0]);
        assert_eq!(activation_map(&single).unwrap().0.data(), &[0.6, 0.8]);
        let (z, flag) = activation_map(&Tensor::new(vec![1, 2, 2, 2], vec![0.0; 8]).unwrap()).unwrap();
        assert!(flag[0] && z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graymap_export() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("m.pgm");
        export_map(&t(&[2, 2], &[0.1, 0.2, 0.3, 0.5]), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        let px = &bytes[bytes.len() - 4..];
        assert_eq!((px[0], px[3]), (0, 255));
        export_map(&t(&[2, 2], &[0.1, 0.2, 0.3, 0.5]), &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
        export_map(&t(&[1, 3], &[0.7; 3]), &p).unwrap();
        assert!(fs::read(&p).unwrap().ends_with(&[128, 128, 128]));
    }

    #[test]
    fn metric_files() {
        let d = tempfile::tempdir().unwrap();
        let r = evaluate(&t(&[1, 2], &[0.1, 0.2]), &[meta(0, 0)], &[meta(0, 1), meta(1, 1)], 2).unwrap();
        write_metrics_csv(&d.path().join("m.csv"), &r.rows()).unwrap();
        let csv = fs::read_to_string(d.path().join("m.csv")).unwrap();
        assert!(csv.starts_with("metric,value\nrank1,1\n"));
        assert!(csv.contains("mAP,1\n"));
        write_metrics_json(&d.path().join("m.json"), &r).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(v["rank1"], 1.0);
    }
}
