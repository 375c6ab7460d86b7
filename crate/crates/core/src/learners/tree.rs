//! Regression trees shared by the forest and boosting learners.
//!
//! Training data is binned once on its exact distinct values, so split
//! search over per-node histograms is still exact greedy search. Rows are
//! kept in a canonical order (sorted by their bit patterns) and node
//! partitions are stable, which makes every floating-point sum independent
//! of the order in which the caller supplied the rows.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

const LEAF: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Split feature, or `u32::MAX` for a leaf.
    pub feature: u32,
    /// Rows with `x <= threshold` go left.
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut k = 0usize;
        loop {
            let node = &self.nodes[k];
            if node.feature == LEAF {
                return node.value;
            }
            k = if row[node.feature as usize] <= node.threshold { node.left } else { node.right } as usize;
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.feature == LEAF).count()
    }
}

/// Training matrix in canonical row order with each feature coded as the
/// rank of its value among the feature's distinct values.
pub struct BinnedData {
    pub n: usize,
    pub p: usize,
    bins: Vec<Vec<u32>>,
    values: Vec<Vec<f64>>,
    /// `canonical[k]` is the caller's row index of canonical row `k`.
    pub canonical: Vec<usize>,
}

impl BinnedData {
    pub fn new(x: &DMatrix<f64>, y: &[f64]) -> Self {
        let (n, p) = x.shape();
        let mut canonical: Vec<usize> = (0..n).collect();
        canonical.sort_by(|&a, &b| {
            for j in 0..p {
                let o = x[(a, j)].total_cmp(&x[(b, j)]);
                if o.is_ne() {
                    return o;
                }
            }
            y[a].total_cmp(&y[b])
        });
        let mut bins = Vec::with_capacity(p);
        let mut values = Vec::with_capacity(p);
        for j in 0..p {
            let col = x.column(j);
            let mut distinct: Vec<f64> = col.iter().copied().collect();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let codes = canonical
                .iter()
                .map(|&i| distinct.partition_point(|&v| v < col[i]) as u32)
                .collect();
            bins.push(codes);
            values.push(distinct);
        }
        BinnedData { n, p, bins, values, canonical }
    }

    /// Targets permuted into canonical order.
    pub fn canonical_targets(&self, y: &[f64]) -> Vec<f64> {
        self.canonical.iter().map(|&i| y[i]).collect()
    }
}

pub struct GrowParams {
    /// `None` grows until nodes cannot be split.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features sampled per split; `None` considers all.
    pub mtry: Option<usize>,
}

fn all_equal(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut it = values;
    let first = it.next()?;
    it.all(|v| v.to_bits() == first.to_bits()).then_some(first)
}

fn node_value(rows: &[u32], g: &[f64]) -> f64 {
    all_equal(rows.iter().map(|&r| g[r as usize])).unwrap_or_else(|| rows.iter().map(|&r| g[r as usize]).sum::<f64>() / rows.len() as f64)
}

struct Split {
    feature: usize,
    bin: u32,
    gain: f64,
}

fn best_split(data: &BinnedData, rows: &[u32], g: &[f64], features: &[usize], min_leaf: usize) -> Option<Split> {
    let n = rows.len();
    let total: f64 = rows.iter().map(|&r| g[r as usize]).sum();
    let parent = total * total / n as f64;
    let mut best: Option<Split> = None;
    let mut sums = Vec::new();
    let mut counts = Vec::new();
    for &j in features {
        let nb = data.values[j].len();
        if nb < 2 {
            continue;
        }
        sums.clear();
        sums.resize(nb, 0.0);
        counts.clear();
        counts.resize(nb, 0usize);
        let codes = &data.bins[j];
        for &r in rows {
            let b = codes[r as usize] as usize;
            sums[b] += g[r as usize];
            counts[b] += 1;
        }
        let (mut sl, mut nl) = (0.0, 0usize);
        for b in 0..nb - 1 {
            if counts[b] == 0 {
                continue;
            }
            sl += sums[b];
            nl += counts[b];
            let nr = n - nl;
            if nr < min_leaf {
                break;
            }
            if nl < min_leaf || nr == 0 {
                continue;
            }
            let sr = total - sl;
            let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - parent;
            if gain > 0.0 && best.as_ref().is_none_or(|s| gain > s.gain) {
                best = Some(Split { feature: j, bin: b as u32, gain });
            }
        }
    }
    best
}

/// Grows one tree on `rows` (canonical indices, sorted, duplicates allowed
/// for bootstrap draws) against canonical targets `g`.
pub fn grow(data: &BinnedData, mut rows: Vec<u32>, g: &[f64], params: &GrowParams, rng: &mut Rng) -> Tree {
    let min_leaf = params.min_leaf.max(1);
    let mut nodes = vec![Node { feature: LEAF, threshold: 0.0, left: 0, right: 0, value: 0.0 }];
    // (node, start, end, depth)
    let mut stack = vec![(0usize, 0usize, rows.len(), 0usize)];
    let mut scratch: Vec<u32> = Vec::with_capacity(rows.len());
    while let Some((id, start, end, depth)) = stack.pop() {
        let slice = &rows[start..end];
        nodes[id].value = node_value(slice, g);
        let splittable = slice.len() >= 2 * min_leaf
            && params.max_depth.is_none_or(|d| depth < d)
            && all_equal(slice.iter().map(|&r| g[r as usize])).is_none();
        if !splittable {
            continue;
        }
        let features: Vec<usize> = match params.mtry {
            Some(m) if m < data.p => {
                let mut f = sample(rng, data.p, m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..data.p).collect(),
        };
        let Some(split) = best_split(data, slice, g, &features, min_leaf) else {
            continue;
        };
        let codes = &data.bins[split.feature];
        scratch.clear();
        scratch.extend(slice.iter().copied().filter(|&r| codes[r as usize] <= split.bin));
        let n_left = scratch.len();
        scratch.extend(slice.iter().copied().filter(|&r| codes[r as usize] > split.bin));
        rows[start..end].copy_from_slice(&scratch);
        let vals = &data.values[split.feature];
        let b = split.bin as usize;
        let threshold = vals[b] + (vals[b + 1] - vals[b]) / 2.0;
        let left = nodes.len();
        nodes.push(Node { feature: LEAF, threshold: 0.0, left: 0, right: 0, value: 0.0 });
        nodes.push(Node { feature: LEAF, threshold: 0.0, left: 0, right: 0, value: 0.0 });
        nodes[id].feature = split.feature as u32;
        nodes[id].threshold = threshold;
        nodes[id].left = left as u32;
        nodes[id].right = left as u32 + 1;
        stack.push((left + 1, start + n_left, end, depth + 1));
        stack.push((left, start, start + n_left, depth + 1));
    }
    Tree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn fit_full(x: &DMatrix<f64>, y: &[f64], params: &GrowParams) -> Tree {
        let data = BinnedData::new(x, y);
        let g = data.canonical_targets(y);
        grow(&data, (0..data.n as u32).collect(), &g, params, &mut rng_from(1))
    }

    #[test]
    fn single_binary_split() {
        let x = DMatrix::from_column_slice(6, 1, &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let y = [0.0, 10.0, 0.0, 10.0, 10.0, 0.0];
        let tree = fit_full(&x, &y, &GrowParams { max_depth: None, min_leaf: 1, mtry: Some(1) });
        assert_eq!(tree.nodes.len(), 3);
        assert_eq!(tree.nodes[0].threshold, 0.5);
        for i in 0..6 {
            assert_eq!(tree.predict_row(&[x[(i, 0)]]), y[i]);
        }
    }

    #[test]
    fn constant_target_is_a_single_leaf() {
        let x = DMatrix::from_fn(8, 2, |i, j| (i * (j + 1)) as f64);
        let y = [0.1; 8];
        let tree = fit_full(&x, &y, &GrowParams { max_depth: None, min_leaf: 1, mtry: None });
        assert_eq!(tree.n_leaves(), 1);
        assert_eq!(tree.predict_row(&[3.0, 1.0]), 0.1);
    }

    #[test]
    fn ties_prefer_lowest_feature() {
        // two identical columns give identical gains
        let x = DMatrix::from_fn(4, 2, |i, _| i as f64);
        let y = [1.0, 1.0, 5.0, 5.0];
        let tree = fit_full(&x, &y, &GrowParams { max_depth: Some(1), min_leaf: 1, mtry: None });
        assert_eq!(tree.nodes[0].feature, 0);
        assert_eq!(tree.nodes[0].threshold, 1.5);
    }

    #[test]
    fn min_leaf_is_respected() {
        let x = DMatrix::from_fn(50, 1, |i, _| i as f64);
        let y: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let data = BinnedData::new(&x, &y);
        let g = data.canonical_targets(&y);
        let mut rows: Vec<u32> = (0..50).collect();
        let tree = grow(&data, rows.clone(), &g, &GrowParams { max_depth: None, min_leaf: 7, mtry: None }, &mut rng_from(3));
        let mut counts = std::collections::BTreeMap::new();
        rows.sort_unstable();
        for r in rows {
            let mut k = 0usize;
            while tree.nodes[k].feature != LEAF {
                k = if x[(r as usize, 0)] <= tree.nodes[k].threshold { tree.nodes[k].left } else { tree.nodes[k].right } as usize;
            }
            *counts.entry(k).or_insert(0) += 1;
        }
        assert!(counts.values().all(|&c| c >= 7));
    }
}
