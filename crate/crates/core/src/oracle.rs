//! Ground truth by brute force: exhaustive max-marginals of tiny graphs,
//! log-sum-exp chain messages, and a central finite-difference checker.

use rand::Rng;

use crate::chain_dp::ChainView;
use crate::error::{Error, Result};
use crate::grid_model::{eval_pairwise, Direction, PairwiseSpec, Volume};

/// Largest number of labelings [`brute_max_marginals`] will enumerate.
pub const ENUMERATION_LIMIT: usize = 1_000_000;

/// A small pairwise model on an arbitrary graph.
///
/// `unary` is `num_nodes × labels`; every edge `(i, j, m)` contributes
/// `m[x_i * labels + x_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyGraph {
    pub labels: usize,
    pub unary: Vec<f64>,
    pub edges: Vec<(usize, usize, Vec<f64>)>,
}

impl TinyGraph {
    pub fn num_nodes(&self) -> usize {
        self.unary.len() / self.labels
    }

    pub fn score(&self, x: &[usize]) -> f64 {
        let l = self.labels;
        let mut v: f64 = x.iter().enumerate().map(|(i, &s)| self.unary[i * l + s]).sum();
        for (i, j, m) in &self.edges {
            v += m[x[*i] * l + x[*j]];
        }
        v
    }

    /// The model of a chain, nodes in travel order.
    pub fn from_chain(chain: &ChainView<'_>) -> Self {
        let l = chain.labels();
        let edges = (0..chain.len().saturating_sub(1))
            .map(|k| {
                let m = (0..l * l).map(|i| chain.score(k, i / l, i % l)).collect();
                (k, k + 1, m)
            })
            .collect();
        Self {
            labels: l,
            unary: chain.unary().to_vec(),
            edges,
        }
    }

    /// The whole grid model (all horizontal and vertical edges).
    pub fn from_grid(g: &Volume, spec: &PairwiseSpec) -> Self {
        Self::grid_subgraph(g, spec, |_| true)
    }

    /// The cross tree of pixel `(y, x)`: every horizontal edge plus the
    /// vertical edges of column `x`. Nodes are pixels in row-major order.
    pub fn cross_tree(g: &Volume, spec: &PairwiseSpec, _y: usize, x: usize) -> Self {
        Self::grid_subgraph(g, spec, |col| col == x)
    }

    fn grid_subgraph(g: &Volume, spec: &PairwiseSpec, keep_column: impl Fn(usize) -> bool) -> Self {
        let shape = g.shape();
        let (h, w, l) = (shape.height, shape.width, shape.labels);
        let table = |y: usize, x: usize, dir: Direction| -> Vec<f64> {
            (0..l * l)
                .map(|i| eval_pairwise(spec, y, x, dir, i / l, i % l))
                .collect()
        };
        let mut edges = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    edges.push((y * w + x, y * w + x + 1, table(y, x, Direction::Right)));
                }
                if y + 1 < h && keep_column(x) {
                    edges.push((y * w + x, (y + 1) * w + x, table(y, x, Direction::Down)));
                }
            }
        }
        Self {
            labels: l,
            unary: g.data().to_vec(),
            edges,
        }
    }
}

/// For every node and label, the best total score over all labelings with
/// that node fixed to that label, by full enumeration.
pub fn brute_max_marginals(graph: &TinyGraph) -> Result<Vec<f64>> {
    let l = graph.labels;
    let n = graph.num_nodes();
    let count = (l as f64).powi(n as i32);
    if count > ENUMERATION_LIMIT as f64 {
        return Err(Error::TooLarge {
            labelings: count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut best = vec![f64::NEG_INFINITY; n * l];
    let mut x = vec![0usize; n];
    loop {
        let v = graph.score(&x);
        for (i, &s) in x.iter().enumerate() {
            let b = &mut best[i * l + s];
            if v > *b {
                *b = v;
            }
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == n {
                return Ok(best);
            }
            x[k] += 1;
            if x[k] < l {
                break;
            }
            x[k] = 0;
            k += 1;
        }
    }
}

/// Best total score over all labelings.
pub fn brute_max_score(graph: &TinyGraph) -> Result<f64> {
    let mm = brute_max_marginals(graph)?;
    Ok(mm[..graph.labels].iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Numerically stable `log Σ exp(v)`.
pub fn smax(values: &[f64]) -> f64 {
    let mx = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + values.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Chain messages with the max of the DP recurrence replaced by [`smax`].
pub fn smax_chain_messages(chain: &ChainView<'_>) -> Vec<f64> {
    let l = chain.labels();
    let n = chain.len();
    let mut m = vec![0.0; n * l];
    let mut cand = vec![0.0; l];
    for i in 0..n.saturating_sub(1) {
        for t in 0..l {
            for s in 0..l {
                cand[s] = chain.unary()[i * l + s] + m[i * l + s] + chain.score(i, s, t);
            }
            m[(i + 1) * l + t] = smax(&cand);
        }
    }
    m
}

/// Worst relative error between central differences of `f` at `point` along
/// each direction and the analytic directional derivative `grad · e`.
///
/// Relative error is `|fd - an| / max(|fd|, |an|, 1e-6)`.
pub fn fd_gradcheck<F>(mut f: F, point: &[f64], grad: &[f64], directions: &[Vec<f64>], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if grad.len() != point.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for a {}-dimensional point",
            grad.len(),
            point.len()
        )));
    }
    let mut worst: f64 = 0.0;
    let mut x = point.to_vec();
    for e in directions {
        if e.len() != point.len() {
            return Err(Error::Shape("direction dimension differs from point".into()));
        }
        for ((xi, pi), ei) in x.iter_mut().zip(point).zip(e) {
            *xi = pi + step * ei;
        }
        let fp = f(&x)?;
        for ((xi, pi), ei) in x.iter_mut().zip(point).zip(e) {
            *xi = pi - step * ei;
        }
        let fm = f(&x)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("function value during gradient check".into()));
        }
        let fd = (fp - fm) / (2.0 * step);
        let an: f64 = grad.iter().zip(e).map(|(g, d)| g * d).sum();
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// `count` random unit vectors of dimension `dim`.
pub fn random_directions(dim: usize, count: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
            v.into_iter().map(|a| a / n).collect()
        })
        .collect()
}

/// Adds uniform noise in `[0, 1e-3]` so that maximizers become unique.
pub fn perturb_ties(values: &mut [f64], rng: &mut impl Rng) {
    for v in values {
        *v += rng.gen_range(0.0..1e-3);
    }
}

/// Largest deviation between `a` and `b` after removing the best constant
/// offset per block of `labels` entries (both inputs are log-domain).
pub fn max_deviation_up_to_constants(a: &[f64], b: &[f64], labels: usize) -> f64 {
    a.chunks(labels)
        .zip(b.chunks(labels))
        .map(|(x, y)| {
            let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (hi - lo) / 2.0
        })
        .fold(0.0, f64::max)
}

/// Index of the first maximum of each block of `labels` entries.
pub fn block_argmax(values: &[f64], labels: usize) -> Vec<usize> {
    values
        .chunks(labels)
        .map(|row| {
            let mut arg = 0;
            for (s, v) in row.iter().enumerate() {
                if *v > row[arg] {
                    arg = s;
                }
            }
            arg
        })
        .collect()
}
