//! Triplet margin losses over cosine distance, their supervised and
//! self-supervised triplet builders, and an InfoNCE alternative.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Default hinge margin λ.
pub const DEFAULT_MARGIN: f64 = 0.3;
/// Upper bound on supervised triplets per batch.
pub const SUPERVISED_CAP: usize = 512;
pub const MARGIN_GRID: [f64; 4] = [0.1, 0.3, 0.5, 0.7];
pub const TEMPERATURE_GRID: [f64; 4] = [0.05, 0.1, 0.5, 1.0];

const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Supervised,
    SelfSupervised,
}

/// Triplets as parallel index lists into a pool of latent vectors.
///
/// For supervised batches the pool is the batch itself. For
/// self-supervised batches it is `z_0..z_{B-1}` followed by `ẑ_0..ẑ_{B-1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub provenance: Provenance,
}

impl TripletBatch {
    fn new(provenance: Provenance) -> Self {
        Self {
            anchors: Vec::new(),
            positives: Vec::new(),
            negatives: Vec::new(),
            provenance,
        }
    }

    fn push(&mut self, a: usize, p: usize, n: usize) {
        self.anchors.push(a);
        self.positives.push(p);
        self.negatives.push(n);
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.len()).map(|i| (self.anchors[i], self.positives[i], self.negatives[i]))
    }

    fn max_index(&self) -> Option<usize> {
        self.anchors
            .iter()
            .chain(&self.positives)
            .chain(&self.negatives)
            .copied()
            .max()
    }
}

/// Every (anchor, same-label positive, other-label negative) combination in
/// index order, truncated at [`SUPERVISED_CAP`]. A batch without a usable
/// pair yields an empty batch.
pub fn build_supervised_triplets<L: PartialEq>(labels: &[L]) -> TripletBatch {
    build_supervised_triplets_capped(labels, SUPERVISED_CAP)
}

pub fn build_supervised_triplets_capped<L: PartialEq>(labels: &[L], cap: usize) -> TripletBatch {
    let mut b = TripletBatch::new(Provenance::Supervised);
    let n = labels.len();
    'outer: for a in 0..n {
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for neg in (0..n).filter(|&j| labels[j] != labels[a]) {
                if b.len() == cap {
                    break 'outer;
                }
                b.push(a, p, neg);
            }
        }
    }
    b
}

/// For each anchor `z_i`: positive `ẑ_i`, and one triplet for each negative
/// `z_j`, `ẑ_j` with `j ≠ i`. Pool indices: `z_i → i`, `ẑ_i → batch + i`.
pub fn build_self_supervised_triplets(batch: usize) -> TripletBatch {
    let mut b = TripletBatch::new(Provenance::SelfSupervised);
    if batch < 2 {
        return b;
    }
    for i in 0..batch {
        for j in (0..batch).filter(|&j| j != i) {
            b.push(i, batch + i, j);
            b.push(i, batch + i, batch + j);
        }
    }
    b
}

/// `1 − cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract("cosine distance of unequal lengths".into()));
    }
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
        return Err(Error::DegenerateVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

fn check_margin(margin: f64) -> Result<()> {
    if !margin.is_finite() || margin < 0.0 {
        return Err(Error::InvalidParameter(format!("margin {margin}")));
    }
    Ok(())
}

/// Mean hinge `max(0, λ + d(a,p) − d(a,n))` over plain vectors.
pub fn triplet_loss_values(pool: &[Vec<f64>], batch: &TripletBatch, margin: f64) -> Result<f64> {
    check_margin(margin)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch("triplet loss"));
    }
    if batch.max_index().is_some_and(|m| m >= pool.len()) {
        return Err(Error::Contract("triplet index outside latent pool".into()));
    }
    let mut total = 0.0;
    for (a, p, n) in batch.iter() {
        let dap = cosine_distance(&pool[a], &pool[p])?;
        let dan = cosine_distance(&pool[a], &pool[n])?;
        total += (margin + dap - dan).max(0.0);
    }
    Ok(total / batch.len() as f64)
}

/// Stacks `pool` into a `[N, L]` matrix of unit rows.
fn unit_rows(tape: &mut Tape, pool: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(pool.len());
    for &v in pool {
        let norm = libm::sqrt(tape.value(v).data().iter().map(|x| x * x).sum::<f64>());
        if norm <= NORM_FLOOR {
            return Err(Error::DegenerateVector);
        }
        let l = tape.value(v).len();
        rows.push(tape.reshape(v, &[1, l])?);
    }
    let m = tape.concat(&rows)?;
    let sq = tape.square(m)?;
    let ss = tape.row_sum(sq)?;
    let norms = tape.sqrt(ss)?;
    let ones = tape.constant(Tensor::full(&[pool.len()], 1.0))?;
    let inv = tape.div(ones, norms)?;
    tape.scale_rows(m, inv)
}

/// Pairwise cosine similarity `[N, M]` between two latent pools.
fn cosine_matrix(tape: &mut Tape, left: &[Var], right: &[Var]) -> Result<Var> {
    let a = unit_rows(tape, left)?;
    let b = unit_rows(tape, right)?;
    tape.matmul_bt(a, b)
}

/// Differentiable triplet loss; see [`triplet_loss_values`].
pub fn triplet_loss(tape: &mut Tape, pool: &[Var], batch: &TripletBatch, margin: f64) -> Result<Var> {
    check_margin(margin)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch("triplet loss"));
    }
    let n = pool.len();
    if batch.max_index().is_some_and(|m| m >= n) {
        return Err(Error::Contract("triplet index outside latent pool".into()));
    }
    let sim = cosine_matrix(tape, pool, pool)?;
    let flat = tape.reshape(sim, &[n * n, 1])?;
    let ap: Vec<usize> = batch.iter().map(|(a, p, _)| a * n + p).collect();
    let an: Vec<usize> = batch.iter().map(|(a, _, q)| a * n + q).collect();
    let s_ap = tape.gather_rows(flat, &ap)?;
    let s_an = tape.gather_rows(flat, &an)?;
    // d(a,p) − d(a,n) = s(a,n) − s(a,p)
    let diff = tape.sub(s_an, s_ap)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

fn check_info_nce(n: usize, m: usize, temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidParameter(format!("temperature {temperature}")));
    }
    if n != m {
        return Err(Error::Contract(format!("{n} anchors vs {m} positives")));
    }
    if n < 2 {
        return Err(Error::EmptyBatch("InfoNCE needs at least two pairs"));
    }
    Ok(())
}

/// `mean_i −log softmax_j(cos(z_i, ẑ_j) / τ)[i]` over plain vectors.
pub fn info_nce_values(z: &[Vec<f64>], z_hat: &[Vec<f64>], temperature: f64) -> Result<f64> {
    check_info_nce(z.len(), z_hat.len(), temperature)?;
    let mut total = 0.0;
    for (i, zi) in z.iter().enumerate() {
        let mut logits = Vec::with_capacity(z_hat.len());
        for zj in z_hat {
            logits.push((1.0 - cosine_distance(zi, zj)?) / temperature);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(logits.iter().map(|l| libm::exp(l - max)).sum::<f64>());
        total += lse - logits[i];
    }
    Ok(total / z.len() as f64)
}

/// Differentiable InfoNCE; see [`info_nce_values`].
pub fn info_nce_loss(tape: &mut Tape, z: &[Var], z_hat: &[Var], temperature: f64) -> Result<Var> {
    check_info_nce(z.len(), z_hat.len(), temperature)?;
    let sim = cosine_matrix(tape, z, z_hat)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..z.len()).collect();
    tape.cross_entropy(logits, &targets, usize::MAX)
}

/// Cosine distance between two tape vectors.
pub fn cosine_distance_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let sim = cosine_matrix(tape, &[a], &[b])?;
    let s = tape.reshape(sim, &[1])?;
    let neg = tape.scale(s, -1.0)?;
    tape.add_scalar(neg, 1.0)
}
