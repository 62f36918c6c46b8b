//! Minimum-cost bipartite assignment between predicted and ground-truth
//! points, label assignment for classification, and total-loss bookkeeping.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Result of assigning predicted points (rows) to ground-truth points
/// (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Matched `(prediction index, ground-truth index)` pairs, sorted by
    /// prediction index. Exactly `min(K, N)` entries.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    fn empty(k: usize, n: usize) -> Self {
        Self {
            pairs: Vec::new(),
            unmatched_predictions: (0..k).collect(),
            unmatched_gt: (0..n).collect(),
            total_cost: 0.0,
        }
    }

    /// Classification labels per prediction: the matched ground-truth class,
    /// or `background_class` for unmatched predictions.
    pub fn labels(&self, k: usize, gt_classes: &[usize], background_class: usize) -> Vec<usize> {
        let mut labels = vec![background_class; k];
        for &(pi, gi) in &self.pairs {
            labels[pi] = gt_classes[gi];
        }
        labels
    }
}

/// Exact minimum-cost assignment of `min(K, N)` pairs for a `K×N` cost
/// matrix, by shortest augmenting paths with potentials.
///
/// Among equal-cost optima, pairwise exchanges canonicalize toward the
/// lexicographically smallest pair list, so hand-built tie cases resolve to
/// the lowest indices deterministically.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    assert_eq!(cost.shape().len(), 2, "cost must be a K×N matrix");
    let (k, n) = (cost.rows(), cost.cols());
    if cost.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("cost matrix contains NaN".into()));
    }
    if k == 0 || n == 0 {
        return Ok(Assignment::empty(k, n));
    }

    // Solve with rows = smaller side so every row gets a partner.
    let transposed = k > n;
    let (rows, cols) = if transposed { (n, k) } else { (k, n) };
    let at = |r: usize, c: usize| -> f64 {
        if transposed {
            cost.at2(c, r)
        } else {
            cost.at2(r, c)
        }
    };

    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut col_row = vec![0usize; cols + 1]; // row matched to column (1-based)
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        col_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(rows);
    for j in 1..=cols {
        if col_row[j] != 0 {
            let (row, col) = (col_row[j] - 1, j - 1);
            // back to (prediction, gt) orientation
            if transposed {
                pairs.push((col, row));
            } else {
                pairs.push((row, col));
            }
        }
    }
    pairs.sort_unstable();
    let mut asg = assemble(pairs, cost, k, n);
    canonicalize_ties(&mut asg, cost);
    Ok(asg)
}

fn assemble(pairs: Vec<(usize, usize)>, cost: &Tensor, k: usize, n: usize) -> Assignment {
    let mut pred_used = vec![false; k];
    let mut gt_used = vec![false; n];
    let mut total = 0.0;
    for &(pi, gi) in &pairs {
        pred_used[pi] = true;
        gt_used[gi] = true;
        total += cost.at2(pi, gi);
    }
    Assignment {
        pairs,
        unmatched_predictions: (0..k).filter(|&i| !pred_used[i]).collect(),
        unmatched_gt: (0..n).filter(|&j| !gt_used[j]).collect(),
        total_cost: total,
    }
}

/// Cost-preserving exchanges toward the lexicographically smallest pair
/// list. Each applied swap strictly decreases that order, so the loop
/// terminates.
fn canonicalize_ties(asg: &mut Assignment, cost: &Tensor) {
    loop {
        let mut changed = false;
        // swap gt partners between two pairs
        for a in 0..asg.pairs.len() {
            for b in (a + 1)..asg.pairs.len() {
                let (i1, j1) = asg.pairs[a];
                let (i2, j2) = asg.pairs[b];
                if j2 < j1 && cost.at2(i1, j2) + cost.at2(i2, j1) == cost.at2(i1, j1) + cost.at2(i2, j2)
                {
                    asg.pairs[a] = (i1, j2);
                    asg.pairs[b] = (i2, j1);
                    changed = true;
                }
            }
        }
        // move a pair to a lower unmatched gt index at equal cost
        for a in 0..asg.pairs.len() {
            let (i, j) = asg.pairs[a];
            if let Some(pos) = asg
                .unmatched_gt
                .iter()
                .position(|&j2| j2 < j && cost.at2(i, j2) == cost.at2(i, j))
            {
                let j2 = asg.unmatched_gt[pos];
                asg.pairs[a] = (i, j2);
                asg.unmatched_gt[pos] = j;
                asg.unmatched_gt.sort_unstable();
                changed = true;
            }
        }
        // move a pair to a lower unmatched prediction index at equal cost
        for a in 0..asg.pairs.len() {
            let (i, j) = asg.pairs[a];
            if let Some(pos) = asg
                .unmatched_predictions
                .iter()
                .position(|&i2| i2 < i && cost.at2(i2, j) == cost.at2(i, j))
            {
                let i2 = asg.unmatched_predictions[pos];
                asg.pairs[a] = (i2, j);
                asg.unmatched_predictions[pos] = i;
                asg.unmatched_predictions.sort_unstable();
                changed = true;
            }
        }
        if !changed {
            break;
        }
        asg.pairs.sort_unstable();
    }
}

/// Euclidean distance cost between `K` predicted points and `N` ground-truth
/// points.
pub fn distance_cost(points: &[[f64; 2]], gt_points: &[[f64; 2]]) -> Tensor {
    let (k, n) = (points.len(), gt_points.len());
    let mut cost = Tensor::zeros(&[k, n]);
    for (i, p) in points.iter().enumerate() {
        for (j, g) in gt_points.iter().enumerate() {
            let d = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
            cost.set2(i, j, d);
        }
    }
    cost
}

/// Hungarian match of predicted points to ground-truth points on Euclidean
/// distance. `N = 0` legally yields no pairs.
pub fn match_points(points: &[[f64; 2]], gt_points: &[[f64; 2]]) -> Result<Assignment> {
    hungarian(&distance_cost(points, gt_points))
}

/// L1 regression loss over matched pairs: `Σ (|Δx| + |Δy|)`.
///
/// Differentiable with respect to the predicted points; the assignment is a
/// constant. No pairs yields a constant zero.
pub fn regression_loss<'t>(
    points: Var<'t>,
    gt_points: &[[f64; 2]],
    assignment: &Assignment,
) -> Var<'t> {
    if assignment.pairs.is_empty() {
        return points.scale(0.0).sum();
    }
    let idx: Vec<usize> = assignment.pairs.iter().map(|&(pi, _)| pi).collect();
    let mut targets = Tensor::zeros(&[assignment.pairs.len(), 2]);
    for (r, &(_, gi)) in assignment.pairs.iter().enumerate() {
        targets.set2(r, 0, gt_points[gi][0]);
        targets.set2(r, 1, gt_points[gi][1]);
    }
    points.gather_rows(&idx).l1_to(&targets)
}

/// Weights of the three training loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub count: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            reg: 5e-3,
            count: 1e-4,
        }
    }
}

/// Per-term losses and their exact weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_count: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "cls={:.6} reg={:.6} count={:.6} total={:.6}",
            self.l_cls, self.l_reg, self.l_count, self.total
        )
    }
}

/// Combines the three loss terms: `total = w_cls·l_cls + w_reg·l_reg +
/// w_count·l_count`, exactly.
pub fn total_loss(
    l_cls: f64,
    l_reg: f64,
    l_count: f64,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [("l_cls", l_cls), ("l_reg", l_reg), ("l_count", l_count)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite: {v}")));
        }
    }
    let total = weights.cls * l_cls + weights.reg * l_reg + weights.count * l_count;
    Ok(LossBreakdown {
        l_cls,
        l_reg,
        l_count,
        total,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force minimum assignment cost over all injections of the
    /// smaller side into the larger, by recursive enumeration.
    fn brute_force_min_cost(cost: &Tensor) -> f64 {
        let (k, n) = (cost.rows(), cost.cols());
        fn recurse(cost: &Tensor, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let (k, n) = (cost.rows(), cost.cols());
            if row == k {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            // rows may outnumber columns; a row may stay unmatched only when
            // every column is taken by... not allowed: enumerate injections
            // of min side, so transpose beforehand instead.
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    recurse(cost, row + 1, used, acc + cost.at2(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        if k <= n {
            recurse(cost, 0, &mut vec![false; n], 0.0, &mut best);
        } else {
            // transpose so rows are the smaller side
            let mut t = Tensor::zeros(&[n, k]);
            for i in 0..k {
                for j in 0..n {
                    t.set2(j, i, cost.at2(i, j));
                }
            }
            recurse(&t, 0, &mut vec![false; k], 0.0, &mut best);
        }
        best
    }

    #[test]
    fn obvious_two_by_two() {
        let cost = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 2.0, 1.0]);
        let asg = hungarian(&cost).unwrap();
        assert_eq!(asg.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(asg.total_cost, 2.0);
    }

    #[test]
    fn single_cell() {
        let cost = Tensor::from_vec(&[1, 1], vec![0.0]);
        let asg = hungarian(&cost).unwrap();
        assert_eq!(asg.pairs, vec![(0, 0)]);
        assert_eq!(asg.total_cost, 0.0);
    }

    #[test]
    fn all_ties_prefer_lowest_indices() {
        let cost = Tensor::full(&[2, 2], 1.0);
        let asg = hungarian(&cost).unwrap();
        assert_eq!(asg.pairs, vec![(0, 0), (1, 1)]);
        // rectangular tie: three predictions, one gt, equal costs
        let cost = Tensor::full(&[3, 1], 2.5);
        let asg = hungarian(&cost).unwrap();
        assert_eq!(asg.pairs, vec![(0, 0)]);
        assert_eq!(asg.unmatched_predictions, vec![1, 2]);
    }

    #[test]
    fn random_matrices_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..200 {
            let k = rng.gen_range(1..=6);
            let n = rng.gen_range(1..=6);
            let data: Vec<f64> = (0..k * n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let cost = Tensor::from_vec(&[k, n], data);
            let asg = hungarian(&cost).unwrap();
            let expect = brute_force_min_cost(&cost);
            assert!(
                (asg.total_cost - expect).abs() < 1e-9,
                "trial {trial}: {} vs brute {}",
                asg.total_cost,
                expect
            );
            assert_eq!(asg.pairs.len(), k.min(n));
        }
    }

    #[test]
    fn nan_cost_rejected() {
        let cost = Tensor::from_vec(&[1, 2], vec![0.0, f64::NAN]);
        assert!(matches!(hungarian(&cost), Err(Error::Numeric(_))));
    }

    #[test]
    fn match_points_zero_distance_pair() {
        let points = vec![[3.0, 4.0], [10.0, 10.0]];
        let gt = vec![[10.0, 10.0]];
        let asg = match_points(&points, &gt).unwrap();
        assert_eq!(asg.pairs, vec![(1, 0)]);
        assert_eq!(asg.total_cost, 0.0);
        assert_eq!(asg.unmatched_predictions, vec![0]);
    }

    #[test]
    fn match_points_empty_gt_is_legal() {
        let points = vec![[1.0, 1.0], [2.0, 2.0]];
        let asg = match_points(&points, &[]).unwrap();
        assert!(asg.pairs.is_empty());
        assert_eq!(asg.unmatched_predictions, vec![0, 1]);
    }

    #[test]
    fn gt_shuffle_keeps_pair_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let points: Vec<[f64; 2]> = (0..5)
            .map(|_| [rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0)])
            .collect();
        let gt: Vec<[f64; 2]> = (0..3)
            .map(|_| [rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0)])
            .collect();
        let base = match_points(&points, &gt).unwrap();
        let perm = [2usize, 0, 1];
        let shuffled: Vec<[f64; 2]> = perm.iter().map(|&j| gt[j]).collect();
        let asg = match_points(&points, &shuffled).unwrap();
        let mut mapped: Vec<(usize, usize)> =
            asg.pairs.iter().map(|&(pi, gi)| (pi, perm[gi])).collect();
        mapped.sort_unstable();
        assert_eq!(mapped, base.pairs);
    }

    #[test]
    fn regression_loss_values_and_gradient() {
        let tape = Tape::new();
        let points = tape.input(Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 9.0, 9.0]));
        let gt = vec![[1.0, 1.0]];
        let asg = Assignment {
            pairs: vec![(0, 0)],
            unmatched_predictions: vec![1],
            unmatched_gt: vec![],
            total_cost: 0.0,
        };
        let loss = regression_loss(points, &gt, &asg);
        assert_eq!(loss.value().item(), 5.0); // |3-1| + |4-1|
        let grads = tape.backward(loss);
        let g = grads.wrt(points);
        // sign of the residual on the matched row, zero elsewhere
        assert_eq!(g.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_coordinates_give_zero_loss() {
        let tape = Tape::new();
        let points = tape.input(Tensor::from_vec(&[1, 2], vec![5.0, 6.0]));
        let gt = vec![[5.0, 6.0]];
        let asg = match_points(&[[5.0, 6.0]], &gt).unwrap();
        let loss = regression_loss(points, &gt, &asg);
        assert_eq!(loss.value().item(), 0.0);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let b = total_loss(2.0, 10.0, 100.0, LossWeights::default()).unwrap();
        assert!((b.total - 2.06).abs() < 1e-12);
        // exact additivity of the stored breakdown
        let w = b.weights;
        assert_eq!(b.total, w.cls * b.l_cls + w.reg * b.l_reg + w.count * b.l_count);
        let z = total_loss(0.0, 0.0, 0.0, LossWeights::default()).unwrap();
        assert_eq!(z.total, 0.0);
        let w0 = LossWeights {
            cls: 0.0,
            reg: 0.0,
            count: 0.0,
        };
        assert_eq!(total_loss(3.0, 4.0, 5.0, w0).unwrap().total, 0.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, LossWeights::default()).is_err());
    }
}
