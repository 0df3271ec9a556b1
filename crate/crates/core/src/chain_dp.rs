//! Max-product dynamic programming along a single chain and its backprop.
//!
//! A chain has `n` nodes enumerated in the direction of message travel.
//! [`dp_forward`] computes `m[i+1](t) = max_s (g[i](s) + m[i](s) + f_i(s, t))`
//! with `m[0] = 0` and records the maximizing `s`; [`dp_backward`] replays the
//! recorded maximizers in reverse, which is exact wherever the maximizers are
//! unique. The redistribution variants [`rdp_forward`] / [`rdp_backward`]
//! scale the recursion by per-node coefficients `r`.
//!
//! Ties in every argmax resolve to the smallest label.

use crate::error::{Error, Result};
use crate::grid_model::{oriented_delta, Direction, GridShape, JumpParams, PairwiseSpec, Volume, JUMP_BINS};

/// Pairwise scores of one chain edge, oriented sender `s` -> receiver `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeScores<'a> {
    /// `f(s, t) = -weight * theta(delta)`, `delta = t - s` when `forward`,
    /// `s - t` otherwise.
    Jump {
        weight: f64,
        bins: [f64; JUMP_BINS],
        forward: bool,
    },
    /// `f(s, t) = weight * matrix[s][t]`, or `weight * matrix[t][s]` when
    /// `transposed`.
    Matrix {
        weight: f64,
        matrix: &'a [f64],
        transposed: bool,
    },
}

impl EdgeScores<'_> {
    /// Scores of an edge whose sending pixel is `(y, x)`.
    pub fn from_spec(spec: &PairwiseSpec, y: usize, x: usize, dir: Direction) -> EdgeScores<'_> {
        match spec {
            PairwiseSpec::TruncatedJump(p) => EdgeScores::Jump {
                weight: p.weight(y, x, dir),
                bins: p.bins(),
                forward: dir.is_forward(),
            },
            PairwiseSpec::FullMatrix(m) => EdgeScores::Matrix {
                weight: m.weight(y, x, dir),
                matrix: m.axis(dir.is_horizontal()),
                transposed: !dir.is_forward(),
            },
        }
    }

    #[inline]
    pub fn score(&self, labels: usize, s: usize, t: usize) -> f64 {
        match *self {
            EdgeScores::Jump { weight, bins, forward } => -(weight * theta(&bins, oriented_delta(forward, s, t))),
            EdgeScores::Matrix {
                weight,
                matrix,
                transposed,
            } => {
                if transposed {
                    weight * matrix[t * labels + s]
                } else {
                    weight * matrix[s * labels + t]
                }
            }
        }
    }

    /// The same edge traversed in the opposite direction.
    pub fn reversed(&self) -> Self {
        match *self {
            EdgeScores::Jump { weight, bins, forward } => EdgeScores::Jump {
                weight,
                bins,
                forward: !forward,
            },
            EdgeScores::Matrix {
                weight,
                matrix,
                transposed,
            } => EdgeScores::Matrix {
                weight,
                matrix,
                transposed: !transposed,
            },
        }
    }
}

#[inline]
fn theta(bins: &[f64; JUMP_BINS], delta: i64) -> f64 {
    match JumpParams::bin(delta) {
        None => 0.0,
        Some(b) => bins[b],
    }
}

/// One chain: unary scores (`n × labels`, in travel order) and `n - 1` edges.
#[derive(Debug, Clone)]
pub struct ChainView<'a> {
    labels: usize,
    unary: Vec<f64>,
    edges: Vec<EdgeScores<'a>>,
}

impl<'a> ChainView<'a> {
    pub fn new(labels: usize, unary: Vec<f64>, edges: Vec<EdgeScores<'a>>) -> Result<Self> {
        if labels == 0 || unary.is_empty() || !unary.len().is_multiple_of(labels) {
            return Err(Error::Shape(format!(
                "chain unaries must be a non-empty n x {labels} array"
            )));
        }
        let n = unary.len() / labels;
        if edges.len() != n - 1 {
            return Err(Error::Shape(format!(
                "a chain of {n} nodes needs {} edges, got {}",
                n - 1,
                edges.len()
            )));
        }
        if let Some(EdgeScores::Matrix { matrix, .. }) = edges
            .iter()
            .find(|e| matches!(e, EdgeScores::Matrix { matrix, .. } if matrix.len() != labels * labels))
        {
            return Err(Error::Shape(format!(
                "edge matrix has {} entries, expected {}",
                matrix.len(),
                labels * labels
            )));
        }
        Ok(Self { labels, unary, edges })
    }

    /// The chain through `nodes` (consecutive 4-neighbours, listed in travel
    /// direction `dir`) of a grid model.
    pub fn from_grid(unary: &Volume, spec: &'a PairwiseSpec, dir: Direction, nodes: &[(usize, usize)]) -> Self {
        let labels = unary.shape().labels;
        let mut u = Vec::with_capacity(nodes.len() * labels);
        for &(y, x) in nodes {
            u.extend_from_slice(unary.pixel(y, x));
        }
        let edges = nodes[..nodes.len().saturating_sub(1)]
            .iter()
            .map(|&(y, x)| EdgeScores::from_spec(spec, y, x, dir))
            .collect();
        Self {
            labels,
            unary: u,
            edges,
        }
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.unary.len() / self.labels
    }

    pub fn is_empty(&self) -> bool {
        self.unary.is_empty()
    }

    pub fn unary(&self) -> &[f64] {
        &self.unary
    }

    pub fn unary_mut(&mut self) -> &mut [f64] {
        &mut self.unary
    }

    pub fn edges(&self) -> &[EdgeScores<'a>] {
        &self.edges
    }

    #[inline]
    pub fn score(&self, edge: usize, s: usize, t: usize) -> f64 {
        self.edges[edge].score(self.labels, s, t)
    }

    /// The chain traversed from its last node to its first.
    pub fn reversed(&self) -> Self {
        let l = self.labels;
        let unary = self.unary.chunks(l).rev().flatten().copied().collect();
        let edges = self.edges.iter().rev().map(EdgeScores::reversed).collect();
        Self {
            labels: l,
            unary,
            edges,
        }
    }
}

/// Output of a forward DP: messages and the maximizer for every
/// `(node, receiver label)`; row 0 of both is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMessages {
    pub messages: Vec<f64>,
    pub argmax: Vec<u32>,
}

/// Sparse pairwise-gradient entry: `d f_edge(s, t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseEntry {
    pub edge: usize,
    pub s: usize,
    pub t: usize,
    pub grad: f64,
}

/// Redistribution coefficients `r_i ∈ [0, 1]`, one per chain node.
#[derive(Debug, Clone, PartialEq)]
pub struct RedistCoeffs(Vec<f64>);

impl RedistCoeffs {
    pub fn new(r: Vec<f64>) -> Result<Self> {
        if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "redistribution coefficients must lie in [0, 1]".into(),
            ));
        }
        Ok(Self(r))
    }

    pub fn uniform(n: usize, r: f64) -> Result<Self> {
        Self::new(vec![r; n])
    }

    /// `r` everywhere except the last node, which keeps the remainder
    /// (`r = 0`; it never enters the recursion).
    pub fn interior(n: usize, r: f64) -> Result<Self> {
        let mut v = vec![r; n];
        if let Some(last) = v.last_mut() {
            *last = 0.0;
        }
        Self::new(v)
    }

    /// [`RedistCoeffs::interior`] with `r = 0.5`.
    pub fn default_for(n: usize) -> Self {
        Self::interior(n, 0.5).expect("0.5 is a valid coefficient")
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `out_m[t] = max_s (h[s] + f(s, t))`, `out_o[t]` the smallest maximizer.
fn relax(h: &[f64], edge: &EdgeScores<'_>, scratch: &mut Scratch, out_m: &mut [f64], out_o: &mut [u32]) {
    match *edge {
        EdgeScores::Jump { weight, bins, forward } => relax_jump(h, weight, &bins, forward, scratch, out_m, out_o),
        EdgeScores::Matrix { .. } => relax_dense(h, edge, out_m, out_o),
    }
}

fn relax_dense(h: &[f64], edge: &EdgeScores<'_>, out_m: &mut [f64], out_o: &mut [u32]) {
    let l = h.len();
    for t in 0..l {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0usize;
        for (s, &hs) in h.iter().enumerate() {
            let v = hs + edge.score(l, s, t);
            if v > best {
                best = v;
                arg = s;
            }
        }
        out_m[t] = best;
        out_o[t] = arg as u32;
    }
}

#[derive(Default)]
struct Scratch {
    prefix: Vec<u32>,
    suffix: Vec<u32>,
}

/// Linear-time relaxation for truncated jumps: explicit offsets `|t - s| <= 2`
/// plus prefix/suffix maxima for the truncated region `|t - s| >= 3`.
fn relax_jump(
    h: &[f64],
    weight: f64,
    bins: &[f64; JUMP_BINS],
    forward: bool,
    scratch: &mut Scratch,
    out_m: &mut [f64],
    out_o: &mut [u32],
) {
    let l = h.len();
    scratch.prefix.resize(l, 0);
    scratch.suffix.resize(l, 0);
    let mut arg = 0usize;
    for s in 0..l {
        if h[s] > h[arg] {
            arg = s;
        }
        scratch.prefix[s] = arg as u32;
    }
    arg = l - 1;
    for s in (0..l).rev() {
        if h[s] >= h[arg] {
            arg = s;
        }
        scratch.suffix[s] = arg as u32;
    }
    let far = -(weight * bins[4]);
    for t in 0..l {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0usize;
        if t >= 3 {
            let s = scratch.prefix[t - 3] as usize;
            best = h[s] + far;
            arg = s;
        }
        for s in t.saturating_sub(2)..(t + 3).min(l) {
            let v = h[s] + -(weight * theta(bins, oriented_delta(forward, s, t)));
            if v > best {
                best = v;
                arg = s;
            }
        }
        if t + 3 < l {
            let s = scratch.suffix[t + 3] as usize;
            let v = h[s] + far;
            if v > best {
                best = v;
                arg = s;
            }
        }
        out_m[t] = best;
        out_o[t] = arg as u32;
    }
}

/// One max-product step across a single edge: `max_s (h[s] + f(s, t))` for
/// every receiver label `t`.
pub fn max_product_step(h: &[f64], edge: &EdgeScores<'_>) -> Vec<f64> {
    let mut out = vec![0.0; h.len()];
    let mut arg = vec![0u32; h.len()];
    relax(h, edge, &mut Scratch::default(), &mut out, &mut arg);
    out
}

fn subtract_max(m: &mut [f64]) {
    let mx = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in m {
        *v -= mx;
    }
}

/// Forward DP along `chain`. With `normalize`, each new message has its
/// maximum over labels subtracted (beliefs are unaffected).
pub fn dp_forward(chain: &ChainView<'_>, normalize: bool) -> ChainMessages {
    let l = chain.labels;
    let n = chain.len();
    let mut messages = vec![0.0; n * l];
    let mut argmax = vec![0u32; n * l];
    let mut h = vec![0.0; l];
    let mut scratch = Scratch::default();
    for i in 0..n.saturating_sub(1) {
        for s in 0..l {
            h[s] = chain.unary[i * l + s] + messages[i * l + s];
        }
        let (_, rest) = messages.split_at_mut((i + 1) * l);
        let out_m = &mut rest[..l];
        relax(
            &h,
            &chain.edges[i],
            &mut scratch,
            out_m,
            &mut argmax[(i + 1) * l..(i + 2) * l],
        );
        if normalize {
            subtract_max(out_m);
        }
    }
    ChainMessages { messages, argmax }
}

/// Reference forward DP that always scans all `L²` label pairs.
pub fn dp_forward_dense(chain: &ChainView<'_>, normalize: bool) -> ChainMessages {
    let l = chain.labels;
    let n = chain.len();
    let mut messages = vec![0.0; n * l];
    let mut argmax = vec![0u32; n * l];
    let mut h = vec![0.0; l];
    for i in 0..n.saturating_sub(1) {
        for s in 0..l {
            h[s] = chain.unary[i * l + s] + messages[i * l + s];
        }
        let (_, rest) = messages.split_at_mut((i + 1) * l);
        let out_m = &mut rest[..l];
        relax_dense(&h, &chain.edges[i], out_m, &mut argmax[(i + 1) * l..(i + 2) * l]);
        if normalize {
            subtract_max(out_m);
        }
    }
    ChainMessages { messages, argmax }
}

/// Backprop of [`dp_forward`]: returns `d g` and reports every non-zero
/// pairwise gradient `(edge, s, t, z)` to `sink`.
pub fn dp_backward_with(
    labels: usize,
    argmax: &[u32],
    d_messages: &[f64],
    sink: impl FnMut(usize, usize, usize, f64),
) -> Vec<f64> {
    backward_impl(labels, argmax, d_messages, None, sink)
}

/// Backprop of [`dp_forward`] collecting pairwise gradients sparsely.
pub fn dp_backward(labels: usize, argmax: &[u32], d_messages: &[f64]) -> (Vec<f64>, Vec<PairwiseEntry>) {
    let mut entries = Vec::new();
    let dg = dp_backward_with(labels, argmax, d_messages, |edge, s, t, grad| {
        entries.push(PairwiseEntry { edge, s, t, grad })
    });
    (dg, entries)
}

fn backward_impl(
    labels: usize,
    argmax: &[u32],
    d_messages: &[f64],
    coeffs: Option<&[f64]>,
    mut sink: impl FnMut(usize, usize, usize, f64),
) -> Vec<f64> {
    let l = labels;
    let n = argmax.len() / l;
    debug_assert_eq!(d_messages.len(), argmax.len());
    let mut dg = vec![0.0; n * l];
    for i in (0..n.saturating_sub(1)).rev() {
        let r_next = coeffs.map_or(1.0, |r| r[i + 1]);
        for t in 0..l {
            let s = argmax[(i + 1) * l + t] as usize;
            let z = d_messages[(i + 1) * l + t] + r_next * dg[(i + 1) * l + t];
            if z != 0.0 {
                dg[i * l + s] += z;
                sink(i, s, t, z);
            }
        }
    }
    dg
}

/// Redistribution DP:
/// `m[i+1](t) = max_s (g[i](s) + (1 - r[i]) mr[i](s) + r[i] m[i](s) + f_i(s, t))`.
///
/// `right_messages` is indexed like the chain. No normalization is applied.
pub fn rdp_forward(chain: &ChainView<'_>, right_messages: &[f64], coeffs: &RedistCoeffs) -> ChainMessages {
    let l = chain.labels;
    let n = chain.len();
    assert_eq!(right_messages.len(), n * l, "right messages must match the chain");
    assert_eq!(coeffs.len(), n, "one coefficient per chain node");
    let r = coeffs.values();
    let mut messages = vec![0.0; n * l];
    let mut argmax = vec![0u32; n * l];
    let mut h = vec![0.0; l];
    let mut scratch = Scratch::default();
    for i in 0..n.saturating_sub(1) {
        for s in 0..l {
            h[s] = (chain.unary[i * l + s] + (1.0 - r[i]) * right_messages[i * l + s]) + r[i] * messages[i * l + s];
        }
        let (_, rest) = messages.split_at_mut((i + 1) * l);
        relax(
            &h,
            &chain.edges[i],
            &mut scratch,
            &mut rest[..l],
            &mut argmax[(i + 1) * l..(i + 2) * l],
        );
    }
    ChainMessages { messages, argmax }
}

/// Backprop of [`rdp_forward`]. Returns the gradient in the effective unaries
/// `g~ = g + (1 - r) mr`; the caller splits it into `d g = d g~` and
/// `d mr = (1 - r) d g~`.
pub fn rdp_backward(
    labels: usize,
    argmax: &[u32],
    coeffs: &RedistCoeffs,
    d_messages: &[f64],
) -> (Vec<f64>, Vec<PairwiseEntry>) {
    let mut entries = Vec::new();
    let dg = backward_impl(labels, argmax, d_messages, Some(coeffs.values()), |edge, s, t, grad| {
        entries.push(PairwiseEntry { edge, s, t, grad })
    });
    (dg, entries)
}

/// Exact max-marginals `g + m_fwd + m_bwd` of a chain.
pub fn chain_max_marginals(chain: &ChainView<'_>, normalize: bool) -> Vec<f64> {
    let fwd = dp_forward(chain, normalize);
    let bwd = dp_forward(&chain.reversed(), normalize);
    let l = chain.labels;
    let n = chain.len();
    let mut out = chain.unary.clone();
    for i in 0..n {
        let j = n - 1 - i;
        for s in 0..l {
            out[i * l + s] += fwd.messages[i * l + s] + bwd.messages[j * l + s];
        }
    }
    out
}

/// Nodes of chain `index` of the grid for travel direction `dir`: row `index`
/// for horizontal directions, column `index` otherwise, listed in travel order.
pub fn grid_chain_nodes(shape: GridShape, dir: Direction, index: usize) -> Vec<(usize, usize)> {
    let (h, w) = (shape.height, shape.width);
    match dir {
        Direction::Right => (0..w).map(|x| (index, x)).collect(),
        Direction::Left => (0..w).rev().map(|x| (index, x)).collect(),
        Direction::Down => (0..h).map(|y| (y, index)).collect(),
        Direction::Up => (0..h).rev().map(|y| (y, index)).collect(),
    }
}

/// Number of chains for a direction: rows for horizontal travel, columns
/// otherwise.
pub fn grid_chain_count(shape: GridShape, dir: Direction) -> usize {
    if dir.is_horizontal() {
        shape.height
    } else {
        shape.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_model::CompatMatrix;
    use crate::oracle::fd_gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn potts_edge() -> EdgeScores<'static> {
        EdgeScores::Jump {
            weight: 1.0,
            bins: [1.0; JUMP_BINS],
            forward: true,
        }
    }

    fn example_chain() -> ChainView<'static> {
        ChainView::new(2, vec![0.0, 2.0, 1.0, 0.0, 0.0, 0.0], vec![potts_edge(); 2]).unwrap()
    }

    /// Messages by enumerating every labeling of the prefix before each node.
    fn brute_messages(chain: &ChainView<'_>) -> Vec<f64> {
        let l = chain.labels();
        let n = chain.len();
        let mut out = vec![0.0; n * l];
        for i in 1..n {
            for t in 0..l {
                let mut best = f64::NEG_INFINITY;
                for code in 0..l.pow(i as u32) {
                    let mut xs = Vec::with_capacity(i + 1);
                    let mut c = code;
                    for _ in 0..i {
                        xs.push(c % l);
                        c /= l;
                    }
                    xs.push(t);
                    let mut v = 0.0;
                    for k in 0..i {
                        v += chain.unary()[k * l + xs[k]] + chain.score(k, xs[k], xs[k + 1]);
                    }
                    best = best.max(v);
                }
                out[i * l + t] = best;
            }
        }
        out
    }

    fn random_edge<'m>(rng: &mut ChaCha8Rng, matrices: &'m [Vec<f64>], k: usize) -> EdgeScores<'m> {
        if rng.gen_bool(0.5) {
            EdgeScores::Jump {
                weight: rng.gen_range(0.2..2.0),
                bins: std::array::from_fn(|_| rng.gen_range(0.0..2.0)),
                forward: rng.gen_bool(0.5),
            }
        } else {
            EdgeScores::Matrix {
                weight: rng.gen_range(0.2..2.0),
                matrix: &matrices[k],
                transposed: rng.gen_bool(0.5),
            }
        }
    }

    #[test]
    fn single_node_gives_zero_message() {
        let c = ChainView::new(3, vec![1.0, 5.0, -2.0], vec![]).unwrap();
        let out = dp_forward(&c, true);
        assert_eq!(out.messages, vec![0.0; 3]);
        let (dg, entries) = dp_backward(3, &out.argmax, &[1.0, 2.0, 3.0]);
        assert_eq!(dg, vec![0.0; 3]);
        assert!(entries.is_empty());
    }

    #[test]
    fn worked_example_messages_and_argmax() {
        let out = dp_forward(&example_chain(), false);
        assert_eq!(out.messages, vec![0.0, 0.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(&out.argmax[2..], &[1, 1, 0, 1]);
        assert_eq!(out.messages, brute_messages(&example_chain()));
    }

    #[test]
    fn worked_example_backward() {
        let chain = example_chain();
        let out = dp_forward(&chain, false);
        let mut dm = vec![0.0; 6];
        dm[4] = 1.0;
        let (dg, entries) = dp_backward(2, &out.argmax, &dm);
        assert_eq!(dg, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let mut e: Vec<_> = entries.iter().map(|e| (e.edge, e.s, e.t, e.grad)).collect();
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(e, vec![(0, 1, 0, 1.0), (1, 0, 0, 1.0)]);

        // central differences of m_2(0) in every unary
        for k in 0..6 {
            let h = 1e-4;
            let eval = |d: f64| {
                let mut c = chain.clone();
                c.unary_mut()[k] += d;
                dp_forward(&c, false).messages[4]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - dg[k]).abs() < 1e-9, "unary {k}: fd {fd} vs {}", dg[k]);
        }
    }

    #[test]
    fn zero_gradient_in_zero_gradient_out() {
        let out = dp_forward(&example_chain(), false);
        let (dg, entries) = dp_backward(2, &out.argmax, &[0.0; 6]);
        assert!(dg.iter().all(|v| *v == 0.0));
        assert!(entries.is_empty());
    }

    #[test]
    fn pairwise_free_messages_are_flat() {
        let edge = EdgeScores::Jump {
            weight: 1.0,
            bins: [0.0; JUMP_BINS],
            forward: true,
        };
        let c = ChainView::new(3, vec![0.3, -1.0, 2.0, 0.5, 0.5, 0.1, 1.0, 1.0, 1.0], vec![edge; 2]).unwrap();
        let out = dp_forward(&c, false);
        assert_eq!(&out.messages[3..6], &[2.0, 2.0, 2.0]);
        assert_eq!(&out.messages[6..9], &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn fast_jump_kernel_matches_dense_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let l = rng.gen_range(1..20);
            let n = rng.gen_range(1..8);
            let unary: Vec<f64> = (0..n * l).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let edges = (0..n - 1)
                .map(|_| EdgeScores::Jump {
                    weight: rng.gen_range(0.0..2.0),
                    bins: std::array::from_fn(|_| rng.gen_range(0.0..3.0)),
                    forward: rng.gen_bool(0.5),
                })
                .collect();
            let c = ChainView::new(l, unary, edges).unwrap();
            let normalize = rng.gen_bool(0.5);
            assert_eq!(dp_forward(&c, normalize), dp_forward_dense(&c, normalize));
        }
    }

    #[test]
    fn forward_matches_prefix_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let l = rng.gen_range(1..4);
            let n = rng.gen_range(1..6);
            let matrices: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..l * l).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let unary: Vec<f64> = (0..n * l).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let edges = (0..n - 1).map(|k| random_edge(&mut rng, &matrices, k)).collect();
            let c = ChainView::new(l, unary, edges).unwrap();
            let got = dp_forward(&c, false).messages;
            let want = brute_messages(&c);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unary_shift_shifts_next_message() {
        let c = example_chain();
        let base = dp_forward(&c, false);
        let mut shifted = c.clone();
        for v in &mut shifted.unary_mut()[2..4] {
            *v += 0.75;
        }
        let out = dp_forward(&shifted, false);
        assert_eq!(out.argmax, base.argmax);
        for t in 0..2 {
            assert_eq!(out.messages[4 + t], base.messages[4 + t] + 0.75);
        }
    }

    #[test]
    fn normalized_messages_differ_by_node_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = 5;
        let unary: Vec<f64> = (0..6 * l).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let c = ChainView::new(l, unary, vec![potts_edge(); 5]).unwrap();
        let a = dp_forward(&c, false);
        let b = dp_forward(&c, true);
        assert_eq!(a.argmax, b.argmax);
        for i in 0..6 {
            let d: Vec<f64> = (0..l).map(|s| a.messages[i * l + s] - b.messages[i * l + s]).collect();
            assert!(d.iter().all(|v| (v - d[0]).abs() < 1e-12));
            let mx = b.messages[i * l..(i + 1) * l].iter().copied().fold(f64::MIN, f64::max);
            assert_eq!(mx, 0.0);
        }
    }

    #[test]
    fn max_marginals_match_reference_on_reversal() {
        let m = CompatMatrix::new(2, vec![0.0, -1.0, -0.5, 0.2], vec![0.0; 4]).unwrap();
        let e = EdgeScores::Matrix {
            weight: 1.0,
            matrix: m.horizontal(),
            transposed: false,
        };
        let c = ChainView::new(2, vec![0.1, 0.4, -0.3, 0.2, 0.9, -1.0], vec![e; 2]).unwrap();
        let mm = chain_max_marginals(&c, false);
        let rev = c.reversed();
        let mm_rev = chain_max_marginals(&rev, false);
        for i in 0..3 {
            for s in 0..2 {
                assert!((mm[i * 2 + s] - mm_rev[(2 - i) * 2 + s]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rdp_with_unit_coeffs_is_plain_dp() {
        let c = example_chain();
        let mr = vec![3.0, -1.0, 0.5, 0.25, 7.0, 1.0];
        let out = rdp_forward(&c, &mr, &RedistCoeffs::uniform(3, 1.0).unwrap());
        assert_eq!(out, dp_forward(&c, false));
        let dm = vec![0.3, -0.2, 1.0, 0.5, -0.7, 2.0];
        let (a, ea) = rdp_backward(2, &out.argmax, &RedistCoeffs::uniform(3, 1.0).unwrap(), &dm);
        let (b, eb) = dp_backward(2, &out.argmax, &dm);
        assert_eq!(a, b);
        assert_eq!(ea, eb);
    }

    #[test]
    fn rdp_with_zero_coeffs_drops_recursion() {
        let c = example_chain();
        let mr = vec![3.0, -1.0, 0.5, 0.25, 7.0, 1.0];
        let out = rdp_forward(&c, &mr, &RedistCoeffs::uniform(3, 0.0).unwrap());
        for i in 0..2 {
            for t in 0..2 {
                let want = (0..2)
                    .map(|s| c.unary()[i * 2 + s] + mr[i * 2 + s] + c.score(i, s, t))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(out.messages[(i + 1) * 2 + t], want);
            }
        }
        let (dg, _) = rdp_backward(2, &out.argmax, &RedistCoeffs::uniform(3, 0.0).unwrap(), &[0.0; 6]);
        assert!(dg.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rdp_half_coeffs_match_direct_recurrence() {
        let c = example_chain();
        let mr = dp_forward(&c.reversed(), false).messages;
        // back into chain order
        let mr: Vec<f64> = mr.chunks(2).rev().flatten().copied().collect();
        assert_eq!(mr, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let out = rdp_forward(&c, &mr, &RedistCoeffs::uniform(3, 0.5).unwrap());
        // m1(t) = max_s(g0 + 0.5 mr0 + f) with g0 + 0.5 mr0 = (0.5, 2): (1, 2)
        // m2(t) = max_s(g1 + 0.5 mr1 + 0.5 m1 + f) with h = (1.5, 1): (1.5, 1)
        assert_eq!(out.messages, vec![0.0, 0.0, 1.0, 2.0, 1.5, 1.0]);
        assert_eq!(&out.argmax[2..], &[1, 1, 0, 1]);
    }

    #[test]
    fn rdp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let l = 3;
            let n = 4;
            let unary: Vec<f64> = (0..n * l).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mr: Vec<f64> = (0..n * l).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let r = RedistCoeffs::new((0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            let edges = (0..n - 1)
                .map(|_| EdgeScores::Jump {
                    weight: 1.0,
                    bins: std::array::from_fn(|_| rng.gen_range(0.1..1.5)),
                    forward: true,
                })
                .collect();
            let base = ChainView::new(l, unary.clone(), edges).unwrap();
            let w: Vec<f64> = (0..n * l).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = rdp_forward(&base, &mr, &r);
            let (dgt, _) = rdp_backward(l, &out.argmax, &r, &w);
            // d(loss)/d g = d g~ ; d/d mr = (1 - r) d g~
            let mut analytic = dgt.clone();
            for i in 0..n {
                for s in 0..l {
                    analytic.push((1.0 - r.values()[i]) * dgt[i * l + s]);
                }
            }
            let point: Vec<f64> = unary.iter().chain(&mr).copied().collect();
            let f = |p: &[f64]| -> Result<f64> {
                let mut c = base.clone();
                c.unary_mut().copy_from_slice(&p[..n * l]);
                let m = rdp_forward(&c, &p[n * l..], &r).messages;
                Ok(m.iter().zip(&w).map(|(a, b)| a * b).sum())
            };
            let dirs: Vec<Vec<f64>> = (0..point.len())
                .map(|k| (0..point.len()).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
                .collect();
            let err = fd_gradcheck(f, &point, &analytic, &dirs, 1e-4).unwrap();
            assert!(err <= 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let unary: Vec<f64> = (0..40).map(|_| rng.gen_range(-1i32..2) as f64).collect();
        let c = ChainView::new(4, unary, vec![potts_edge(); 9]).unwrap();
        let a = dp_forward(&c, true);
        let b = dp_forward(&c, true);
        assert_eq!(
            a.messages.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.messages.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.argmax, b.argmax);
    }

    #[test]
    fn chain_constructor_rejects_bad_shapes() {
        assert!(ChainView::new(2, vec![0.0; 3], vec![]).is_err());
        assert!(ChainView::new(2, vec![0.0; 4], vec![]).is_err());
        assert!(RedistCoeffs::new(vec![0.5, 1.5]).is_err());
    }
}
