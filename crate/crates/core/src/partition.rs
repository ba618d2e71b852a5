//! Train/validation partitioning of source models from their transfer rates.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attacks::linf::run_fixed_linf_attack;
use crate::attacks::LinfAttackConfig;
use crate::zoo::{Classifier, ToyDataset};
use crate::{math, rng, Error, Result};

/// `w[i][j]`: fraction of adversarial examples crafted on model `i` that
/// fool model `j`. Rows are sources, columns are targets; the diagonal holds
/// white-box success and is never read by the partition loss.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TransferMatrix {
    pub ids: Vec<String>,
    rates: Vec<f64>,
}

impl TransferMatrix {
    pub fn new(ids: Vec<String>, rates: Vec<f64>) -> Result<Self> {
        let n = ids.len();
        if rates.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "{} rates for {n} models",
                rates.len()
            )));
        }
        if rates.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidArgument("transfer rate outside [0, 1]".into()));
        }
        Ok(Self { ids, rates })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(ids, rows.iter().flatten().copied().collect())
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn get(&self, source: usize, target: usize) -> f64 {
        self.rates[source * self.n() + target]
    }

    pub fn row(&self, source: usize) -> &[f64] {
        let n = self.n();
        &self.rates[source * n..(source + 1) * n]
    }

    /// Sub-matrix over `pool`, re-indexed `0..pool.len()`.
    pub fn restrict(&self, pool: &[usize]) -> Self {
        let ids = pool.iter().map(|&i| self.ids[i].clone()).collect();
        let rates = pool
            .iter()
            .flat_map(|&i| pool.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        Self { ids, rates }
    }
}

/// Row `source` of the transfer matrix.
///
/// Every input in `inputs` is attacked once on `models[source]` (seed derived
/// from `cfg.seed` and the source index). Entry `j` is the fraction of the
/// adversarial examples that `models[j]` misclassifies, counted only over the
/// inputs `models[j]` labels correctly when clean; 0 when there are none.
pub fn transfer_row(
    source: usize,
    models: &[&Classifier],
    data: &ToyDataset,
    inputs: &[usize],
    cfg: &LinfAttackConfig,
) -> Result<Vec<f64>> {
    let src = models
        .get(source)
        .ok_or_else(|| Error::InvalidArgument(format!("source {source} out of range")))?;
    let mut run = cfg.clone();
    run.seed = rng::derive_seed(cfg.seed, source as u64);
    let mut fooled = vec![0usize; models.len()];
    let mut clean_ok = vec![0usize; models.len()];
    for &i in inputs {
        let (x, y) = (data.image(i), data.labels[i]);
        let adv = run_fixed_linf_attack(&x, y, &[*src], &run, None, None, i)?.adversarial;
        for (j, m) in models.iter().enumerate() {
            if m.predict(&x)?[0] == y {
                clean_ok[j] += 1;
                if m.predict(&adv)?[0] != y {
                    fooled[j] += 1;
                }
            }
        }
    }
    Ok(fooled
        .iter()
        .zip(&clean_ok)
        .map(|(&f, &c)| if c == 0 { 0.0 } else { f as f64 / c as f64 })
        .collect())
}

/// Full transfer matrix, rows in source order.
pub fn transfer_matrix(
    ids: Vec<String>,
    models: &[&Classifier],
    data: &ToyDataset,
    inputs: &[usize],
    cfg: &LinfAttackConfig,
) -> Result<TransferMatrix> {
    if models.len() < 2 || ids.len() != models.len() {
        return Err(Error::InvalidArgument(format!("{} models with {} ids", models.len(), ids.len())));
    }
    let rows = (0..models.len())
        .map(|s| transfer_row(s, models, data, inputs, cfg))
        .collect::<Result<Vec<_>>>()?;
    TransferMatrix::from_rows(ids, &rows)
}

/// A train/validation split with its partition loss.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PartitionEvaluation {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub loss: f64,
    pub s_total: Option<f64>,
}

/// Partition loss of a split.
///
/// For a training model `i`: mean outgoing rate to the other training models
/// plus mean outgoing rate to the validation models. For a validation model
/// `j`: mean outgoing rate to the other validation models plus mean incoming
/// rate from the training models. The loss is the sum of the two group means.
pub fn partition_loss(w: &TransferMatrix, train: &[usize], validation: &[usize]) -> Result<f64> {
    let (k, v) = (train.len(), validation.len());
    if k < 2 {
        return Err(Error::DegenerateGroup(format!("training group of {k} makes k − 1 = {}", k as isize - 1)));
    }
    if v < 2 {
        return Err(Error::DegenerateGroup(format!(
            "validation group of {v} makes n − k − 1 = {}",
            v as isize - 1
        )));
    }
    let n = w.n();
    let mut seen = vec![false; n];
    for &i in train.iter().chain(validation) {
        if i >= n || seen[i] {
            return Err(Error::InvalidArgument(format!("index {i} out of range or repeated")));
        }
        seen[i] = true;
    }
    let (kf, vf) = (k as f64, v as f64);
    let train_term: f64 = train
        .iter()
        .map(|&i| {
            let intra: f64 = train.iter().filter(|&&t| t != i).map(|&t| w.get(i, t)).sum();
            let cross: f64 = validation.iter().map(|&t| w.get(i, t)).sum();
            intra / (kf - 1.0) + cross / vf
        })
        .sum();
    let val_term: f64 = validation
        .iter()
        .map(|&j| {
            let intra: f64 = validation.iter().filter(|&&t| t != j).map(|&t| w.get(j, t)).sum();
            let cross: f64 = train.iter().map(|&t| w.get(t, j)).sum();
            intra / (vf - 1.0) + cross / kf
        })
        .sum();
    Ok(train_term / kf + val_term / vf)
}

/// All `C(|pool|, k)` splits in lexicographic order of the training set.
pub fn enumerate_partitions(pool: &[usize], k: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let n = pool.len();
    if k < 2 || k + 2 > n {
        return Err(Error::InvalidArgument(format!(
            "need 2 ≤ k ≤ |pool| − 2, got k = {k} with |pool| = {n}"
        )));
    }
    let mut sorted = pool.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != n {
        return Err(Error::InvalidArgument("pool has repeated indices".into()));
    }
    let mut out = Vec::new();
    let mut pick: Vec<usize> = (0..k).collect();
    loop {
        let train: Vec<usize> = pick.iter().map(|&p| sorted[p]).collect();
        let validation = sorted.iter().copied().filter(|i| !train.contains(i)).collect();
        out.push((train, validation));
        // advance to the next combination
        let Some(pos) = (0..k).rev().find(|&i| pick[i] != i + n - k) else {
            break;
        };
        pick[pos] += 1;
        for j in pos + 1..k {
            pick[j] = pick[j - 1] + 1;
        }
    }
    Ok(out)
}

/// Split with the smallest partition loss; ties keep the earliest split.
pub fn best_partition(w: &TransferMatrix, pool: &[usize], k: usize) -> Result<PartitionEvaluation> {
    let mut best: Option<PartitionEvaluation> = None;
    for (train, validation) in enumerate_partitions(pool, k)? {
        let loss = partition_loss(w, &train, &validation)?;
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(PartitionEvaluation {
                train,
                validation,
                loss,
                s_total: None,
            });
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("no partitions".into()))
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs equal lengths ≥ 3, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("xs"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("ys"));
    }
    Ok((sxy / (math::sqrt(sxx) * math::sqrt(syy))).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    #[test]
    fn constant_matrix_gives_four_c() {
        let n = 6;
        let c = 0.37;
        let rates = (0..n * n).map(|i| if i % (n + 1) == 0 { 0.9 } else { c }).collect();
        let w = TransferMatrix::new(ids(n), rates).unwrap();
        for (t, v) in enumerate_partitions(&[0, 1, 2, 3, 4, 5], 3).unwrap() {
            assert!((partition_loss(&w, &t, &v).unwrap() - 4.0 * c).abs() < 1e-12);
        }
        let best = best_partition(&w, &[0, 1, 2, 3, 4, 5], 3).unwrap();
        assert_eq!(best.train, vec![0, 1, 2]);
    }

    #[test]
    fn degenerate_groups_are_rejected() {
        let w = TransferMatrix::new(ids(4), vec![0.5; 16]).unwrap();
        assert!(matches!(partition_loss(&w, &[0], &[1, 2, 3]), Err(Error::DegenerateGroup(_))));
        assert!(matches!(partition_loss(&w, &[0, 1, 2], &[3]), Err(Error::DegenerateGroup(_))));
        assert!(enumerate_partitions(&[0, 1, 2, 3], 1).is_err());
        assert!(enumerate_partitions(&[0, 1, 2, 3], 3).is_err());
    }

    #[test]
    fn partition_counts() {
        assert_eq!(enumerate_partitions(&[0, 1, 2, 3], 2).unwrap().len(), 6);
        let six = enumerate_partitions(&[0, 1, 2, 3, 4, 5], 3).unwrap();
        assert_eq!(six.len(), 20);
        let mut trains: Vec<_> = six.iter().map(|(t, _)| t.clone()).collect();
        trains.dedup();
        assert_eq!(trains.len(), 20);
        assert!(six.windows(2).all(|p| p[0].0 < p[1].0));
    }

    #[test]
    fn pearson_extremes() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &up).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&xs, &down).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&xs, &[1.0; 4]), Err(Error::ZeroVariance("ys")));
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }
}
