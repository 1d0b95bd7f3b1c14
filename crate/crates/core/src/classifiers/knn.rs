//! Exact k-nearest-neighbour voting over a k-d tree.
//!
//! Neighbours are ranked by `(squared distance, training row index)`, so the
//! tree returns exactly what a linear scan with the same tie rule would.
//!
//! Sliding windows of a slowly varying signal cluster along the diagonal, which
//! axis-aligned cells fit badly. The tree is therefore built over the rows
//! rotated onto their principal axes. Rotated coordinates only prune; every
//! reported distance is computed on the original row.

use std::cmp::Ordering;
use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::squared_distance;
use crate::data::WindowMatrix;
use crate::error::{NilmError, Result};

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnModel {
    k: usize,
    width: usize,
    data: Vec<f64>,
    labels: Vec<u8>,
    #[serde(skip)]
    tree: OnceLock<KdTree>,
}

impl KnnModel {
    pub fn train(data: &WindowMatrix, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(NilmError::InvalidParameter("k must be positive".into()));
        }
        if k > data.len() {
            return Err(NilmError::InvalidParameter(format!(
                "k = {k} exceeds the {} training rows",
                data.len()
            )));
        }
        let model = Self {
            k,
            width: data.width(),
            data: data.data().to_vec(),
            labels: data.labels().to_vec(),
            tree: OnceLock::new(),
        };
        model.index();
        Ok(model)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub(crate) fn index(&self) -> &KdTree {
        self.tree.get_or_init(|| KdTree::build(&self.data, &self.labels, self.width))
    }

    /// The `k` nearest training rows as `(squared distance, row index)`, closest first.
    pub fn neighbours(&self, x: &[f64]) -> Vec<(f64, usize)> {
        self.neighbours_hinted(x, &[])
    }

    /// [`KnnModel::neighbours`], seeding the search with candidate rows.
    /// Good hints only make the search faster; the answer is unchanged.
    pub fn neighbours_hinted(&self, x: &[f64], hint: &[usize]) -> Vec<(f64, usize)> {
        self.search(x, hint, false).0
    }

    /// Neighbours as far as the vote needs them. While all `k` candidates
    /// share a label, subtrees holding only that label are skipped. If the
    /// search still ends unanimous the vote is the true one; otherwise the
    /// skipped rows could matter and the full search is run.
    fn voters(&self, x: &[f64], hint: &[usize]) -> Vec<(f64, usize)> {
        let (nb, skipped) = self.search(x, hint, true);
        let on = nb.iter().filter(|(_, i)| self.labels[*i] == 1).count();
        if skipped && on != 0 && on != nb.len() {
            let hint: Vec<usize> = nb.iter().map(|&(_, i)| i).collect();
            return self.search(x, &hint, false).0;
        }
        nb
    }

    fn search(&self, x: &[f64], hint: &[usize], settle: bool) -> (Vec<(f64, usize)>, bool) {
        let tree = self.index();
        let rotated = tree.rotate(x);
        let radius: f64 = rotated.iter().map(|v| v * v).sum::<f64>().sqrt() + tree.radius;
        let mut search = Search {
            query: x,
            rotated: &rotated,
            slack: 1e-9 * (1.0 + radius * radius),
            data: &self.data,
            labels: &self.labels,
            settle,
            skipped: false,
            k: self.k,
            on: 0,
            best: Vec::with_capacity(self.k + 1),
        };
        for &i in hint {
            if i < self.labels.len() {
                search.offer(squared_distance(x, self.row(i)), i);
            }
        }
        tree.search(0, 0.0, &mut vec![0.0; self.width], &mut search);
        let skipped = search.skipped;
        (search.best.into_iter().map(|c| (c.dist, c.index)).collect(), skipped)
    }

    /// Row-wise [`KnnModel::predict`] over consecutive windows. Each search
    /// is seeded with the successors of the previous window's neighbours.
    pub fn predict_run(&self, rows: &[f64]) -> Vec<u8> {
        let mut hint = Vec::with_capacity(self.k);
        rows.chunks_exact(self.width)
            .map(|x| {
                let nb = self.voters(x, &hint);
                hint.clear();
                hint.extend(nb.iter().map(|&(_, i)| i + 1));
                self.vote(&nb)
            })
            .collect()
    }

    fn vote(&self, nb: &[(f64, usize)]) -> u8 {
        let on = nb.iter().filter(|(_, i)| self.labels[*i] == 1).count();
        match (2 * on).cmp(&self.k) {
            Ordering::Greater => 1,
            Ordering::Less => 0,
            Ordering::Equal => self.labels[nb[0].1],
        }
    }

    /// Fraction of neighbours voting "on", minus one half.
    pub fn decision(&self, x: &[f64]) -> f64 {
        let nb = self.voters(x, &[]);
        let on = nb.iter().filter(|(_, i)| self.labels[*i] == 1).count();
        on as f64 / self.k as f64 - 0.5
    }

    /// Majority vote; a tied vote (even `k`) goes to the single nearest neighbour.
    pub fn predict(&self, x: &[f64]) -> u8 {
        self.vote(&self.voters(x, &[]))
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist: f64,
    index: usize,
}

impl Candidate {
    fn before(&self, other: &Candidate) -> bool {
        self.dist
            .total_cmp(&other.dist)
            .then(self.index.cmp(&other.index))
            .is_lt()
    }
}

struct Search<'a> {
    query: &'a [f64],
    rotated: &'a [f64],
    /// Allowance for rounding in the rotated frame.
    slack: f64,
    data: &'a [f64],
    labels: &'a [u8],
    /// Skip subtrees that cannot change a unanimous vote.
    settle: bool,
    skipped: bool,
    k: usize,
    /// Candidates labelled 1.
    on: usize,
    /// The best candidates so far, closest first.
    best: Vec<Candidate>,
}

impl Search<'_> {
    fn worst(&self) -> f64 {
        if self.best.len() == self.k {
            self.best[self.k - 1].dist
        } else {
            f64::INFINITY
        }
    }

    /// The single label bit shared by all `k` candidates, if any.
    fn settled(&self) -> Option<u8> {
        if !self.settle || self.best.len() < self.k {
            None
        } else if self.on == 0 {
            Some(0b01)
        } else if self.on == self.k {
            Some(0b10)
        } else {
            None
        }
    }

    /// Pruning limit in the rotated frame.
    fn limit(&self) -> f64 {
        self.worst() + self.slack
    }

    fn offer(&mut self, dist: f64, index: usize) {
        if self.best.iter().any(|c| c.index == index) {
            return;
        }
        let cand = Candidate { dist, index };
        if self.best.len() == self.k {
            if !cand.before(&self.best[self.k - 1]) {
                return;
            }
            let dropped = self.best.pop().expect("full");
            self.on -= usize::from(self.labels[dropped.index]);
        }
        self.on += usize::from(self.labels[index]);
        let at = self.best.partition_point(|c| c.before(&cand));
        self.best.insert(at, cand);
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
        /// Offset of the leaf's box in `leaf_boxes`.
        bbox: usize,
    },
    Split {
        dim: usize,
        /// Largest coordinate along `dim` in the left cell.
        left_max: f64,
        /// Smallest coordinate along `dim` in the right cell.
        right_min: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct KdTree {
    nodes: Vec<Node>,
    /// Labels present under each node: bit 0 for label 0, bit 1 for label 1.
    label_bits: Vec<u8>,
    /// Training row index of each tree slot.
    order: Vec<usize>,
    /// Rotated rows in tree order, so each leaf is contiguous.
    points: Vec<f64>,
    /// Tight box of each leaf, `lo` then `hi`.
    leaf_boxes: Vec<f64>,
    width: usize,
    mean: Vec<f64>,
    /// Principal axes, one per row.
    basis: Vec<f64>,
    /// Largest rotated row norm.
    radius: f64,
}

impl KdTree {
    fn build(data: &[f64], labels: &[u8], width: usize) -> Self {
        let n = data.len() / width;
        let (mean, basis) = principal_axes(data, width);
        let mut tree = KdTree {
            nodes: Vec::new(),
            label_bits: Vec::new(),
            order: (0..n).collect(),
            points: Vec::new(),
            leaf_boxes: Vec::new(),
            width,
            mean,
            basis,
            radius: 0.0,
        };
        let rotated: Vec<f64> = data.chunks_exact(width).flat_map(|r| tree.rotate(r)).collect();
        tree.radius = rotated
            .chunks_exact(width)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max)
            .sqrt();
        tree.build_node(&rotated, labels, 0, n);
        tree.points = tree
            .order
            .iter()
            .flat_map(|&i| rotated[i * width..(i + 1) * width].iter().copied())
            .collect();
        tree
    }

    fn rotate(&self, x: &[f64]) -> Vec<f64> {
        self.basis
            .chunks_exact(self.width)
            .map(|axis| axis.iter().zip(x).zip(&self.mean).map(|((a, v), m)| a * (v - m)).sum())
            .collect()
    }

    fn build_node(&mut self, data: &[f64], labels: &[u8], start: usize, end: usize) -> usize {
        let width = self.width;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end, bbox: 0 });
        self.label_bits.push(self.order[start..end].iter().fold(0, |b, &i| b | (1 << labels[i].min(1))));
        let mut lo = vec![f64::INFINITY; width];
        let mut hi = vec![f64::NEG_INFINITY; width];
        for &i in &self.order[start..end] {
            for d in 0..width {
                lo[d] = lo[d].min(data[i * width + d]);
                hi[d] = hi[d].max(data[i * width + d]);
            }
        }
        let (dim, spread) = (0..width)
            .map(|d| (d, hi[d] - lo[d]))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if end - start <= LEAF_SIZE || spread <= 0.0 {
            self.nodes[id] = Node::Leaf {
                start,
                end,
                bbox: self.leaf_boxes.len(),
            };
            self.leaf_boxes.extend_from_slice(&lo);
            self.leaf_boxes.extend_from_slice(&hi);
            return id;
        }
        let slice = &mut self.order[start..end];
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            data[a * width + dim].total_cmp(&data[b * width + dim])
        });
        let coord = |i: &usize| data[i * width + dim];
        let left_max = slice[..mid].iter().map(coord).fold(f64::NEG_INFINITY, f64::max);
        let right_min = slice[mid..].iter().map(coord).fold(f64::INFINITY, f64::min);
        let left = self.build_node(data, labels, start, start + mid);
        let right = self.build_node(data, labels, start + mid, end);
        self.nodes[id] = Node::Split {
            dim,
            left_max,
            right_min,
            left,
            right,
        };
        id
    }

    /// Squared distance from the rotated query to a leaf box.
    fn leaf_gap(&self, bbox: usize, q: &[f64]) -> f64 {
        let w = self.width;
        let (lo, hi) = self.leaf_boxes[bbox..bbox + 2 * w].split_at(w);
        let mut acc = [0.0; 2];
        for (d, x) in q.iter().enumerate() {
            let g = (lo[d] - x).max(x - hi[d]).max(0.0);
            acc[d & 1] += g * g;
        }
        acc[0] + acc[1]
    }

    /// `bound` is a lower bound on the squared distance to anything under
    /// `node`, built from the per-dimension gaps in `off`.
    fn search(&self, node: usize, bound: f64, off: &mut [f64], s: &mut Search<'_>) {
        if s.settled() == Some(self.label_bits[node]) {
            s.skipped = true;
            return;
        }
        match self.nodes[node] {
            Node::Leaf { start, end, bbox } => {
                if self.leaf_gap(bbox, s.rotated) > s.limit() {
                    return;
                }
                let rows = self.points[start * self.width..end * self.width].chunks_exact(self.width);
                for (slot, row) in (start..end).zip(rows) {
                    if bound_distance(s.rotated, row) <= s.limit() {
                        let i = self.order[slot];
                        let d = squared_distance(s.query, &s.data[i * self.width..(i + 1) * self.width]);
                        s.offer(d, i);
                    }
                }
            }
            Node::Split {
                dim,
                left_max,
                right_min,
                left,
                right,
            } => {
                let q = s.rotated[dim];
                let left_gap = (q - left_max).max(0.0);
                let right_gap = (right_min - q).max(0.0);
                let old = off[dim];
                let children = if left_gap <= right_gap {
                    [(left, left_gap), (right, right_gap)]
                } else {
                    [(right, right_gap), (left, left_gap)]
                };
                for (child, gap) in children {
                    let child_bound = bound - old * old + gap * gap;
                    if child_bound <= s.limit() {
                        off[dim] = gap;
                        self.search(child, child_bound, off, s);
                        off[dim] = old;
                    }
                }
            }
        }
    }
}

/// Mean and eigenvectors of the row covariance, largest variance first.
fn principal_axes(data: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (data.len() / width).max(1) as f64;
    let mut mean = vec![0.0; width];
    for row in data.chunks_exact(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(width, width);
    for row in data.chunks_exact(width) {
        for a in 0..width {
            let da = row[a] - mean[a];
            for b in a..width {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..width {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut axes: Vec<usize> = (0..width).collect();
    axes.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let basis = if eig.eigenvectors.iter().all(|v| v.is_finite()) {
        axes.iter()
            .flat_map(|&j| eig.eigenvectors.column(j).iter().copied().collect::<Vec<_>>())
            .collect()
    } else {
        (0..width * width).map(|i| f64::from(u8::from(i % (width + 1) == 0))).collect()
    };
    (mean, basis)
}

/// Squared distance summed over four independent lanes. The order of
/// additions differs from [`squared_distance`], so it only serves pruning.
#[inline]
fn bound_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (a4, a_rest) = a.split_at(a.len() / 4 * 4);
    let (b4, b_rest) = b.split_at(a4.len());
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    for (l, (x, y)) in a_rest.iter().zip(b_rest).enumerate() {
        let d = x - y;
        acc[l] += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(data: &WindowMatrix, k: usize, x: &[f64]) -> (Vec<usize>, u8) {
        let mut all: Vec<(f64, usize)> = data
            .rows()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let idx: Vec<usize> = all[..k].iter().map(|p| p.1).collect();
        let on = idx.iter().filter(|&&i| data.labels()[i] == 1).count();
        let label = if 2 * on > k {
            1
        } else if 2 * on < k {
            0
        } else {
            data.labels()[idx[0]]
        };
        (idx, label)
    }

    fn random(n: usize, d: usize, seed: u64, grid: bool) -> WindowMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d)
            .map(|_| {
                if grid {
                    rng.random_range(0..4) as f64 * 0.25
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let labels = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
        WindowMatrix::new(d, data, labels).unwrap()
    }

    #[test]
    fn matches_brute_force() {
        for (grid, k) in [(false, 5), (true, 5), (true, 4), (false, 1)] {
            let data = random(700, 3, 1, grid);
            let model = KnnModel::train(&data, k).unwrap();
            let queries = random(200, 3, 2, grid);
            for q in queries.rows() {
                let (idx, label) = brute(&data, k, q);
                let got: Vec<usize> = model.neighbours(q).iter().map(|p| p.1).collect();
                assert_eq!(got, idx);
                assert_eq!(model.predict(q), label);
            }
        }
    }

    #[test]
    fn run_over_clustered_windows_matches_brute_force() {
        // A slow random walk, windowed, with labels from a threshold: nearby
        // rows share labels, so whole subtrees are single-label.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut level = 0.5f64;
        let walk: Vec<f64> = (0..3000)
            .map(|_| {
                level = (level + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
                level
            })
            .collect();
        let width = 4;
        let rows: Vec<f64> = walk.windows(width).flatten().copied().collect();
        let labels: Vec<u8> = walk.windows(width).map(|w| u8::from(w[width - 1] > 0.5)).collect();
        let (train_rows, test_rows) = rows.split_at(2000 * width);
        let data = WindowMatrix::new(width, train_rows.to_vec(), labels[..2000].to_vec()).unwrap();
        for k in [3, 5, 6] {
            let model = KnnModel::train(&data, k).unwrap();
            let expected: Vec<u8> = test_rows.chunks_exact(width).map(|q| brute(&data, k, q).1).collect();
            assert_eq!(model.predict_run(test_rows), expected);
            for q in test_rows.chunks_exact(width).step_by(17) {
                assert_eq!(model.predict(q), brute(&data, k, q).1);
            }
        }
    }

    #[test]
    fn exact_training_row_k1() {
        let data = random(100, 4, 3, false);
        let model = KnnModel::train(&data, 1).unwrap();
        for (i, row) in data.rows().enumerate() {
            assert_eq!(model.predict(row), data.labels()[i]);
        }
    }

    #[test]
    fn fixed_majority() {
        let data = WindowMatrix::new(1, vec![0.0, 1.0, 2.0], vec![1, 1, 0]).unwrap();
        let model = KnnModel::train(&data, 3).unwrap();
        for q in [-100.0, 0.0, 1.7, 2.0, 1e6] {
            assert_eq!(model.predict(&[q]), 1);
        }
    }

    #[test]
    fn even_k_tie_uses_nearest() {
        let data = WindowMatrix::new(1, vec![0.0, 1.0, 5.0, 6.0], vec![1, 0, 0, 1]).unwrap();
        let model = KnnModel::train(&data, 2).unwrap();
        assert_eq!(model.predict(&[0.4]), 1);
        assert_eq!(model.predict(&[0.6]), 0);
        // Equidistant neighbours: the lower row index wins the tie.
        assert_eq!(model.predict(&[0.5]), 1);
    }

    #[test]
    fn k_larger_than_data() {
        let data = WindowMatrix::new(1, vec![0.0, 1.0], vec![0, 1]).unwrap();
        assert!(KnnModel::train(&data, 3).is_err());
        assert!(KnnModel::train(&data, 0).is_err());
    }
}
