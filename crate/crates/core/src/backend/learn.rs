//! Small regressors used by predictors and learned verifiers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Inverse-distance-weighted k-nearest-neighbour regression.
///
/// A query that coincides with stored points returns the mean of those
/// points' targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnRegressor {
    k: usize,
    dims: usize,
    points: Vec<f64>,
    targets: Vec<f64>,
}

impl KnnRegressor {
    pub fn fit(points: &[Vec<f64>], targets: &[f64], k: usize) -> Self {
        assert_eq!(points.len(), targets.len());
        assert!(!points.is_empty() && k > 0);
        let dims = points[0].len();
        KnnRegressor {
            k,
            dims,
            points: points.concat(),
            targets: targets.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn predict(&self, query: &[f64]) -> f64 {
        let mut dist: Vec<(f64, usize)> = self
            .points
            .chunks_exact(self.dims)
            .enumerate()
            .map(|(i, p)| {
                (
                    p.iter()
                        .zip(query)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt(),
                    i,
                )
            })
            .collect();
        let exact: Vec<f64> = dist
            .iter()
            .filter(|(d, _)| *d == 0.0)
            .map(|&(_, i)| self.targets[i])
            .collect();
        if !exact.is_empty() {
            return exact.iter().sum::<f64>() / exact.len() as f64;
        }
        let k = self.k.min(dist.len());
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (mut num, mut den) = (0.0, 0.0);
        for &(d, i) in &dist[..k] {
            let w = 1.0 / d;
            num += w * self.targets[i];
            den += w;
        }
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub n_trees: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            n_trees: 50,
            min_leaf: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        dim: u16,
        threshold: f64,
        left: u32,
        right: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    dim,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*dim as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

/// Extremely randomized trees: every split draws one uniform threshold per
/// input dimension and keeps the one with the largest variance reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraTrees {
    trees: Vec<Tree>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    min_leaf: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

fn sum_sq(y: &[f64], idx: &[usize]) -> (f64, f64) {
    idx.iter()
        .fold((0.0, 0.0), |(s, q), &i| (s + y[i], q + y[i] * y[i]))
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> u32 {
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node::Leaf(mean));
        (self.nodes.len() - 1) as u32
    }

    fn build(&mut self, idx: &mut [usize]) -> u32 {
        let n = idx.len();
        if n < 2 * self.min_leaf {
            return self.leaf(idx);
        }
        let (s, q) = sum_sq(self.y, idx);
        let parent_sse = q - s * s / n as f64;
        if parent_sse <= 1e-18 * q.abs().max(1.0) {
            return self.leaf(idx);
        }
        let dims = self.x[0].len();
        let mut best: Option<(f64, usize, f64)> = None;
        for dim in 0..dims {
            let (lo, hi) = idx
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(self.x[i][dim]), hi.max(self.x[i][dim]))
                });
            if lo >= hi {
                continue;
            }
            let threshold = self.rng.random_range(lo..hi);
            let (mut ls, mut lq, mut ln) = (0.0, 0.0, 0usize);
            for &i in idx.iter() {
                if self.x[i][dim] <= threshold {
                    ls += self.y[i];
                    lq += self.y[i] * self.y[i];
                    ln += 1;
                }
            }
            let rn = n - ln;
            if ln < self.min_leaf || rn < self.min_leaf {
                continue;
            }
            let (rs, rq) = (s - ls, q - lq);
            let sse = (lq - ls * ls / ln as f64) + (rq - rs * rs / rn as f64);
            if best.is_none_or(|(b, _, _)| sse < b) {
                best = Some((sse, dim, threshold));
            }
        }
        let Some((_, dim, threshold)) = best else {
            return self.leaf(idx);
        };
        let mut split = 0;
        for j in 0..n {
            if self.x[idx[j]][dim] <= threshold {
                idx.swap(j, split);
                split += 1;
            }
        }
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf(0.0));
        let (l, r) = idx.split_at_mut(split);
        let left = self.build(l);
        let right = self.build(r);
        self.nodes[at] = Node::Split {
            dim: dim as u16,
            threshold,
            left,
            right,
        };
        at as u32
    }
}

impl ExtraTrees {
    pub fn fit(x: &[Vec<f64>], y: &[f64], params: TreeParams) -> Self {
        assert_eq!(x.len(), y.len());
        assert!(!x.is_empty() && params.n_trees > 0 && params.min_leaf > 0);
        let mut seeder = ChaCha8Rng::seed_from_u64(params.seed);
        let trees = (0..params.n_trees)
            .map(|_| {
                let mut b = Builder {
                    x,
                    y,
                    min_leaf: params.min_leaf,
                    rng: ChaCha8Rng::seed_from_u64(seeder.random()),
                    nodes: Vec::new(),
                };
                let mut idx: Vec<usize> = (0..x.len()).collect();
                b.build(&mut idx);
                Tree { nodes: b.nodes }
            })
            .collect();
        ExtraTrees { trees }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn knn_returns_training_target_at_its_own_point() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 19.0]).collect();
        let y: Vec<f64> = (0..20).map(|i| 3.0 * i as f64 + 1.0).collect();
        let knn = KnnRegressor::fit(&x, &y, 1);
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(knn.predict(xi), *yi);
        }
    }

    #[test]
    fn knn_interpolates_between_neighbours() {
        let x = vec![vec![0.0], vec![1.0]];
        let y = vec![0.0, 10.0];
        let knn = KnnRegressor::fit(&x, &y, 2);
        assert!((knn.predict(&[0.5]) - 5.0).abs() < 1e-12);
        assert!((knn.predict(&[0.25]) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn trees_fit_a_step_function() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 200.0]).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| if v[0] < 0.5 { 1.0 } else { 5.0 })
            .collect();
        let f = ExtraTrees::fit(
            &x,
            &y,
            TreeParams {
                n_trees: 20,
                min_leaf: 2,
                seed: 1,
            },
        );
        assert!((f.predict(&[0.1]) - 1.0).abs() < 0.05);
        assert!((f.predict(&[0.9]) - 5.0).abs() < 0.05);
    }

    #[test]
    fn trees_are_seeded() {
        let x: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i % 7) as f64, (i % 5) as f64])
            .collect();
        let y: Vec<f64> = (0..50).map(|i| (i * i % 13) as f64).collect();
        let p = TreeParams {
            n_trees: 5,
            min_leaf: 2,
            seed: 3,
        };
        assert_eq!(ExtraTrees::fit(&x, &y, p), ExtraTrees::fit(&x, &y, p));
    }

    proptest! {
        #[test]
        fn predictions_stay_within_target_range(
            ys in prop::collection::vec(-1e3f64..1e3, 8..60),
            q in 0.0f64..1.0,
        ) {
            let x: Vec<Vec<f64>> = (0..ys.len()).map(|i| vec![i as f64 / ys.len() as f64]).collect();
            let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let knn = KnnRegressor::fit(&x, &ys, 5).predict(&[q]);
            let trees = ExtraTrees::fit(&x, &ys, TreeParams { n_trees: 5, min_leaf: 2, seed: 0 }).predict(&[q]);
            prop_assert!(knn >= lo - 1e-9 && knn <= hi + 1e-9);
            prop_assert!(trees >= lo - 1e-9 && trees <= hi + 1e-9);
        }
    }
}
