//! Segmentation metrics with optional Hungarian relabeling of predictions.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// `confusion[p][g]` counts pixels predicted `p` with ground truth `g`.
pub fn confusion_matrix(pred: &[u8], gt: &[u8], classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != gt.len() {
        return Err(shape_err("evaluate", format!("{} predicted vs {} ground-truth pixels", pred.len(), gt.len())));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        for l in [p, g] {
            if l as usize >= classes {
                return Err(Error::LabelOutOfRange { label: l as usize, classes });
            }
        }
        m[p as usize][g as usize] += 1;
    }
    Ok(m)
}

/// Permutation `perm` maximizing `sum_i weights[i][perm[i]]`.
///
/// Shortest augmenting path with potentials, O(n^3).
pub fn hungarian_match(weights: &[Vec<u64>]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let max = weights.iter().flatten().copied().max().unwrap_or(0) as i128;
    let cost = |i: usize, j: usize| max - weights[i][j] as i128;

    // 1-based arrays; column 0 is a virtual start.
    let inf = i128::MAX / 4;
    let mut u = vec![0i128; n + 1];
    let mut v = vec![0i128; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[row_of[j] - 1] = j - 1;
    }
    perm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub acc: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Predicted label `p` was scored as ground-truth label `permutation[p]`.
    pub permutation: Vec<usize>,
}

pub fn evaluate(pred: &[u8], gt: &[u8], classes: usize, use_matching: bool) -> Result<EvalReport> {
    if classes == 0 || classes > 256 {
        return Err(Error::InvalidArgument(format!("class count must be in 1..=256, got {classes}")));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty label field".into()));
    }
    let conf = confusion_matrix(pred, gt, classes)?;
    let permutation = if use_matching { hungarian_match(&tie_broken(&conf)) } else { (0..classes).collect() };
    Ok(report_from_confusion(&conf, permutation))
}

const IOU_RESOLUTION: f64 = 1e6;

/// Matched pixel count first, summed pair IoU second, so that equally good
/// matchings are ranked the same way under any relabeling of predictions.
fn tie_broken(conf: &[Vec<u64>]) -> Vec<Vec<u64>> {
    let classes = conf.len();
    let scale = IOU_RESOLUTION as u64 * classes as u64 + 1;
    let row: Vec<u64> = conf.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<u64> = (0..classes).map(|g| conf.iter().map(|r| r[g]).sum()).collect();
    (0..classes)
        .map(|p| {
            (0..classes)
                .map(|g| {
                    let union = row[p] + col[g] - conf[p][g];
                    let iou = if union == 0 { 0.0 } else { conf[p][g] as f64 / union as f64 };
                    conf[p][g] * scale + (iou * IOU_RESOLUTION).round() as u64
                })
                .collect()
        })
        .collect()
}

fn report_from_confusion(conf: &[Vec<u64>], permutation: Vec<usize>) -> EvalReport {
    let classes = conf.len();
    // relabeled[g_pred][g] after mapping predicted rows onto ground-truth labels
    let mut m = vec![vec![0u64; classes]; classes];
    for (p, row) in conf.iter().enumerate() {
        m[permutation[p]] = row.clone();
    }
    let total: u64 = m.iter().flatten().sum();
    let correct: u64 = (0..classes).map(|c| m[c][c]).sum();
    let fractions: Vec<Option<(u64, u64)>> = (0..classes)
        .map(|c| {
            let predicted: u64 = m[c].iter().sum();
            let actual: u64 = m.iter().map(|row| row[c]).sum();
            let union = predicted + actual - m[c][c];
            (union > 0).then_some((m[c][c], union))
        })
        .collect();
    let present: Vec<(u64, u64)> = fractions.iter().flatten().copied().collect();
    let per_class_iou = fractions.iter().map(|f| f.map(|(i, u)| i as f64 / u as f64)).collect();
    EvalReport {
        miou: mean_of_fractions(&present),
        acc: correct as f64 / total as f64,
        per_class_iou,
        permutation,
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num / den` terms, summed as an exact fraction when it fits in
/// 128 bits so that the result is correctly rounded.
fn mean_of_fractions(terms: &[(u64, u64)]) -> f64 {
    let exact = terms.iter().try_fold((0u128, 1u128), |(n, d), &(a, b)| {
        let (a, b) = (a as u128, b as u128);
        let num = n.checked_mul(b)?.checked_add(a.checked_mul(d)?)?;
        let den = d.checked_mul(b)?;
        let g = gcd(num, den).max(1);
        Some((num / g, den / g))
    });
    match exact {
        Some((n, d)) => {
            let d = d * terms.len() as u128;
            let g = gcd(n, d).max(1);
            let (n, d) = (n / g, d / g);
            n as f64 / d as f64
        }
        None => terms.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / terms.len() as f64,
    }
}
