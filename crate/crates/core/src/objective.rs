//! Identification loss, PK batch construction and the optional batch-hard
//! triplet loss.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

pub const DEFAULT_TRIPLET_MARGIN: f64 = 0.3;

/// Mean softmax cross entropy of `(B, C)` logits against integer labels.
///
/// Each row is shifted by its maximum (a constant, so gradients are exact)
/// before exponentiation.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let dims = tape.shape(logits).dims().to_vec();
    if dims.len() != 2 || dims[0] != labels.len() {
        return Err(contract(format!(
            "cross_entropy: logits {:?} vs {} labels",
            dims,
            labels.len()
        )));
    }
    let (b, c) = (dims[0], dims[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(contract(format!("label {bad} out of range for {c} classes")));
    }
    let vals = tape.value(logits).data();
    let mut shift = Vec::with_capacity(b * c);
    let mut onehot = vec![0.0; b * c];
    for (i, &l) in labels.iter().enumerate() {
        let row = &vals[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift.extend(std::iter::repeat_n(m, c));
        onehot[i * c + l] = 1.0;
    }
    let shift = tape.constant(Tensor::new(vec![b, c], shift)?);
    let onehot = tape.constant(Tensor::new(vec![b, c], onehot)?);
    let z = tape.sub(logits, shift)?;
    let e = tape.exp(z)?;
    let s = tape.row_sum(e)?;
    let lse = tape.ln(s)?;
    let zl = tape.mul(z, onehot)?;
    let picked = tape.row_sum(zl)?;
    let per = tape.sub(lse, picked)?;
    Ok(tape.mean(per)?)
}

/// Fraction of rows whose argmax (first on ties) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.dims()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// P identities times K images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PkSpec {
    pub p: usize,
    pub k: usize,
}

impl PkSpec {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.p < 2 {
            errs.push(format!("batch.p must be >= 2, got {}", self.p));
        }
        if self.k < 1 {
            errs.push(format!("batch.k must be >= 1, got {}", self.k));
        }
        errs
    }
}

/// Sample indices and labels of one PK batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub anchor: usize,
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

const SAMPLER_STREAM: u64 = 1;

/// One epoch of PK batches over a dataset given by per-sample labels.
///
/// Every identity anchors exactly one batch (in a shuffled order); the other
/// `P - 1` identities of that batch are drawn at random. Identities with
/// fewer than K samples are drawn with replacement.
pub fn pk_sampler(labels: &[usize], spec: PkSpec, seed: u64, epoch: u64) -> Result<Vec<PkBatch>> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    if by_id.len() < spec.p {
        return Err(Error::Data(format!(
            "{} identities cannot fill batches of P={}",
            by_id.len(),
            spec.p
        )));
    }
    let ids: Vec<usize> = by_id.keys().copied().collect();
    let mut rng = stream_rng(seed, epoch, SAMPLER_STREAM);
    let mut anchors = ids.clone();
    anchors.shuffle(&mut rng);

    let mut batches = Vec::with_capacity(anchors.len());
    for &anchor in &anchors {
        let others: Vec<usize> = ids.iter().copied().filter(|&i| i != anchor).collect();
        let mut chosen = vec![anchor];
        chosen.extend(others.choose_multiple(&mut rng, spec.p - 1).copied());
        let mut indices = Vec::with_capacity(spec.batch_size());
        let mut batch_labels = Vec::with_capacity(spec.batch_size());
        for id in chosen {
            let pool = &by_id[&id];
            if pool.len() >= spec.k {
                indices.extend(pool.choose_multiple(&mut rng, spec.k).copied());
            } else {
                for _ in 0..spec.k {
                    indices.push(pool[rng.random_range(0..pool.len())]);
                }
            }
            batch_labels.extend(std::iter::repeat_n(id, spec.k));
        }
        batches.push(PkBatch {
            anchor,
            indices,
            labels: batch_labels,
        });
    }
    Ok(batches)
}

/// Batch-hard triplet loss: per anchor, `relu(d(a, hardest positive) -
/// d(a, hardest negative) + margin)`, averaged. The hardest pairs are
/// selected on current values and gathered through constant selection
/// matrices.
pub fn batch_hard_triplet(tape: &mut Tape, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let dims = tape.shape(emb).dims().to_vec();
    if dims.len() != 2 || dims[0] != labels.len() {
        return Err(contract(format!(
            "triplet: embeddings {:?} vs {} labels",
            dims,
            labels.len()
        )));
    }
    let b = dims[0];
    let e = tape.value(emb).clone();
    let d = e.dims()[1];
    let dist = |i: usize, j: usize| -> f64 {
        let (a, c) = (&e.data()[i * d..(i + 1) * d], &e.data()[j * d..(j + 1) * d]);
        a.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    };
    let mut pos = vec![0.0; b * b];
    let mut neg = vec![0.0; b * b];
    for i in 0..b {
        let mut hp: Option<(usize, f64)> = None;
        let mut hn: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            let dij = dist(i, j);
            if labels[j] == labels[i] {
                if hp.is_none_or(|(_, v)| dij > v) {
                    hp = Some((j, dij));
                }
            } else if hn.is_none_or(|(_, v)| dij < v) {
                hn = Some((j, dij));
            }
        }
        let (Some((p, _)), Some((n, _))) = (hp, hn) else {
            return Err(contract(format!(
                "triplet: anchor {i} (label {}) lacks a positive or a negative",
                labels[i]
            )));
        };
        pos[i * b + p] = 1.0;
        neg[i * b + n] = 1.0;
    }
    let mut distance_to = |sel: Vec<f64>| -> Result<Var> {
        let sel = tape.constant(Tensor::new(vec![b, b], sel)?);
        let other = tape.matmul(sel, emb)?;
        let diff = tape.sub(emb, other)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.row_sum(sq)?;
        let s = tape.add_const(s, 1e-12)?;
        Ok(tape.sqrt(s)?)
    };
    let dp = distance_to(pos)?;
    let dn = distance_to(neg)?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_const(gap, margin)?;
    let hinge = tape.relu(gap)?;
    Ok(tape.mean(hinge)?)
}
