//! Grid inference drivers built from chain DP: sweep BP and its backward
//! pass, SGM, TRW-T, TBCA, the softmax readout and winner-takes-all.
//!
//! Message fields are indexed by [`Direction::index`] of the direction the
//! messages travel: `messages[Right]` holds, at every pixel, the message
//! arriving from its left neighbour.

use rayon::prelude::*;

use crate::chain_dp::{
    dp_backward_with, dp_forward, grid_chain_count, grid_chain_nodes, max_product_step, rdp_forward, ChainView,
    EdgeScores, RedistCoeffs,
};
use crate::error::{Error, Result};
use crate::grid_model::{
    oriented_delta, ArgmaxRecord, BeliefVolume, Direction, GradBundle, JumpParams, MessageField, PairwiseGrad,
    PairwiseSpec, Plane, Volume,
};

/// Options shared by the DP-based drivers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpOptions {
    /// Subtract the per-node maximum from every new message.
    pub normalize: bool,
}

impl Default for BpOptions {
    fn default() -> Self {
        Self { normalize: true }
    }
}

fn check_inputs(g: &Volume, spec: &PairwiseSpec) -> Result<()> {
    g.ensure_finite("unary scores")?;
    spec.validate(g.shape())
}

/// Messages of one direction family over the whole grid: every row (for
/// horizontal directions) or column runs [`dp_forward`] on `input`.
pub fn directional_messages(
    input: &Volume,
    spec: &PairwiseSpec,
    dir: Direction,
    normalize: bool,
) -> (MessageField, ArgmaxRecord) {
    let shape = input.shape();
    let l = shape.labels;
    let per_chain: Vec<_> = (0..grid_chain_count(shape, dir))
        .into_par_iter()
        .map(|c| {
            let nodes = grid_chain_nodes(shape, dir, c);
            let out = dp_forward(&ChainView::from_grid(input, spec, dir, &nodes), normalize);
            (nodes, out)
        })
        .collect();
    let mut messages = Volume::zeros(shape);
    let mut argmax = ArgmaxRecord::zeros(shape);
    for (nodes, out) in per_chain {
        for (k, &(y, x)) in nodes.iter().enumerate() {
            let o = shape.offset(y, x);
            messages.data_mut()[o..o + l].copy_from_slice(&out.messages[k * l..(k + 1) * l]);
            argmax.data_mut()[o..o + l].copy_from_slice(&out.argmax[k * l..(k + 1) * l]);
        }
    }
    (messages, argmax)
}

/// Per-chain pairwise gradient, reduced serially after the parallel section.
enum LocalGrad {
    Jump { bins: [f64; 5], weights: Option<Vec<f64>> },
    Matrix(Vec<f64>),
}

/// Backprop of [`directional_messages`]: returns the gradient in the DP
/// input and the pairwise-parameter gradient of this direction family.
fn directional_backward(
    argmax: &ArgmaxRecord,
    d_messages: &Volume,
    spec: &PairwiseSpec,
    dir: Direction,
) -> (Volume, PairwiseGrad) {
    let shape = argmax.shape();
    let l = shape.labels;
    let forward = dir.is_forward();
    let per_chain: Vec<_> = (0..grid_chain_count(shape, dir))
        .into_par_iter()
        .map(|c| {
            let nodes = grid_chain_nodes(shape, dir, c);
            let mut o = Vec::with_capacity(nodes.len() * l);
            let mut dm = Vec::with_capacity(nodes.len() * l);
            for &(y, x) in &nodes {
                let off = shape.offset(y, x);
                o.extend_from_slice(&argmax.data()[off..off + l]);
                dm.extend_from_slice(&d_messages.data()[off..off + l]);
            }
            let mut local = match spec {
                PairwiseSpec::TruncatedJump(p) => LocalGrad::Jump {
                    bins: [0.0; 5],
                    weights: p.weights.as_ref().map(|_| vec![0.0; nodes.len()]),
                },
                PairwiseSpec::FullMatrix(_) => LocalGrad::Matrix(vec![0.0; l * l]),
            };
            let dg = dp_backward_with(l, &o, &dm, |edge, s, t, z| match (&mut local, spec) {
                (LocalGrad::Jump { bins, weights }, PairwiseSpec::TruncatedJump(p)) => {
                    if let Some(b) = JumpParams::bin(oriented_delta(forward, s, t)) {
                        let (y, x) = nodes[edge];
                        bins[b] -= p.weight(y, x, dir) * z;
                        if let Some(w) = weights {
                            w[edge] -= p.bins()[b] * z;
                        }
                    }
                }
                (LocalGrad::Matrix(m), PairwiseSpec::FullMatrix(mm)) => {
                    let (y, x) = nodes[edge];
                    let z = mm.weight(y, x, dir) * z;
                    if forward {
                        m[s * l + t] += z;
                    } else {
                        m[t * l + s] += z;
                    }
                }
                _ => unreachable!("local gradient follows the spec"),
            });
            (nodes, dg, local)
        })
        .collect();

    let mut d_input = Volume::zeros(shape);
    let mut grad = PairwiseGrad::zeros_like(spec);
    for (nodes, dg, local) in per_chain {
        for (k, &(y, x)) in nodes.iter().enumerate() {
            let off = shape.offset(y, x);
            d_input.data_mut()[off..off + l].copy_from_slice(&dg[k * l..(k + 1) * l]);
        }
        match (&mut grad, local) {
            (PairwiseGrad::Jump { bins, weights }, LocalGrad::Jump { bins: lb, weights: lw }) => {
                for (a, b) in bins.iter_mut().zip(lb) {
                    *a += b;
                }
                if let (Some(ws), Some(lw)) = (weights, lw) {
                    for (k, &(y, x)) in nodes.iter().enumerate() {
                        *ws[dir.index()].get_mut(y, x) += lw[k];
                    }
                }
            }
            (PairwiseGrad::Matrix { horizontal, vertical }, LocalGrad::Matrix(m)) => {
                let target = if dir.is_horizontal() { horizontal } else { vertical };
                for (a, b) in target.iter_mut().zip(m) {
                    *a += b;
                }
            }
            _ => unreachable!("local gradient follows the spec"),
        }
    }
    (d_input, grad)
}

fn run_pair(
    input: &Volume,
    spec: &PairwiseSpec,
    dirs: [Direction; 2],
    normalize: bool,
) -> [(MessageField, ArgmaxRecord); 2] {
    let (a, b) = rayon::join(
        || directional_messages(input, spec, dirs[0], normalize),
        || directional_messages(input, spec, dirs[1], normalize),
    );
    [a, b]
}

fn backward_pair(
    argmax: &[ArgmaxRecord; 4],
    d_messages: &Volume,
    spec: &PairwiseSpec,
    dirs: [Direction; 2],
) -> [(Volume, PairwiseGrad); 2] {
    let (a, b) = rayon::join(
        || directional_backward(&argmax[dirs[0].index()], d_messages, spec, dirs[0]),
        || directional_backward(&argmax[dirs[1].index()], d_messages, spec, dirs[1]),
    );
    [a, b]
}

const HORIZONTAL: [Direction; 2] = [Direction::Left, Direction::Right];
const VERTICAL: [Direction; 2] = [Direction::Up, Direction::Down];

fn sum_of(base: &Volume, parts: &[&Volume]) -> Volume {
    let mut out = base.clone();
    for p in parts {
        out.add_assign(p);
    }
    out
}

fn into_fields(
    h: [(MessageField, ArgmaxRecord); 2],
    v: [(MessageField, ArgmaxRecord); 2],
) -> ([MessageField; 4], [ArgmaxRecord; 4]) {
    // Direction::ALL order is Left, Right, Up, Down
    let [(ml, ol), (mr, or)] = h;
    let [(mu, ou), (md, od)] = v;
    ([ml, mr, mu, md], [ol, or, ou, od])
}

/// Everything sweep BP's backward pass needs.
#[derive(Debug, Clone)]
pub struct SweepTape {
    pub spec: PairwiseSpec,
    pub normalize: bool,
    pub messages: [MessageField; 4],
    pub argmax: [ArgmaxRecord; 4],
    /// Unaries plus both horizontal messages.
    pub a: Volume,
    pub log_beliefs: Volume,
    pub beliefs: BeliefVolume,
}

/// Sweep BP: horizontal DP in both directions gives `a = g + m_L + m_R`,
/// vertical DP on `a` gives `b = a + m_U + m_D`, and `B = softmax(b)`.
pub fn sweep_bp_forward(g: &Volume, spec: &PairwiseSpec, opts: BpOptions) -> Result<SweepTape> {
    check_inputs(g, spec)?;
    let h = run_pair(g, spec, HORIZONTAL, opts.normalize);
    let a = sum_of(g, &[&h[0].0, &h[1].0]);
    let v = run_pair(&a, spec, VERTICAL, opts.normalize);
    let b = sum_of(&a, &[&v[0].0, &v[1].0]);
    let beliefs = read_beliefs(&b);
    let (messages, argmax) = into_fields(h, v);
    Ok(SweepTape {
        spec: spec.clone(),
        normalize: opts.normalize,
        messages,
        argmax,
        a,
        log_beliefs: b,
        beliefs,
    })
}

/// Backward pass of [`sweep_bp_forward`] from a belief gradient.
/// `d_temperature` is left at zero; temperature enters upstream.
pub fn sweep_bp_backward(tape: &SweepTape, d_beliefs: &Volume) -> Result<GradBundle> {
    d_beliefs.check_shape(tape.beliefs.shape(), "belief gradient")?;
    d_beliefs.ensure_finite("belief gradient")?;
    let db = softmax_backward(&tape.beliefs, d_beliefs);
    Ok(sweep_bp_backward_log(tape, &db))
}

/// Backward pass of sweep BP from a gradient in the log-beliefs `b`.
pub fn sweep_bp_backward_log(tape: &SweepTape, d_log_beliefs: &Volume) -> GradBundle {
    let spec = &tape.spec;
    let [(du, gu), (dd, gd)] = backward_pair(&tape.argmax, d_log_beliefs, spec, VERTICAL);
    let da = sum_of(d_log_beliefs, &[&du, &dd]);
    let [(dl, gl), (dr, gr)] = backward_pair(&tape.argmax, &da, spec, HORIZONTAL);
    let d_unary = sum_of(&da, &[&dl, &dr]);
    let mut d_pairwise = gl;
    for g in [&gr, &gu, &gd] {
        d_pairwise.add_assign(g);
    }
    GradBundle {
        d_unary,
        d_pairwise,
        d_temperature: 0.0,
    }
}

/// Tape of [`sgm`].
#[derive(Debug, Clone)]
pub struct SgmTape {
    pub spec: PairwiseSpec,
    pub argmax: [ArgmaxRecord; 4],
    pub log_beliefs: Volume,
}

/// Semi-global matching: `b = g + Σ_k m_k` over four independent direction
/// families, all computed on `g`.
pub fn sgm(g: &Volume, spec: &PairwiseSpec, opts: BpOptions) -> Result<SgmTape> {
    check_inputs(g, spec)?;
    let (h, v) = rayon::join(
        || run_pair(g, spec, HORIZONTAL, opts.normalize),
        || run_pair(g, spec, VERTICAL, opts.normalize),
    );
    let b = sum_of(g, &[&h[0].0, &h[1].0, &v[0].0, &v[1].0]);
    let (_, argmax) = into_fields(h, v);
    Ok(SgmTape {
        spec: spec.clone(),
        argmax,
        log_beliefs: b,
    })
}

/// Backward pass of [`sgm`] from a gradient in its log-beliefs.
///
/// Offsets subtracted by message normalization are held constant, so the
/// result is the exact gradient when normalization is off or when the
/// downstream loss ignores per-pixel constants (as a softmax does).
pub fn sgm_backward(tape: &SgmTape, d_log_beliefs: &Volume) -> Result<GradBundle> {
    d_log_beliefs.check_shape(tape.log_beliefs.shape(), "log-belief gradient")?;
    let spec = &tape.spec;
    let [(dl, gl), (dr, gr)] = backward_pair(&tape.argmax, d_log_beliefs, spec, HORIZONTAL);
    let [(du, gu), (dd, gd)] = backward_pair(&tape.argmax, d_log_beliefs, spec, VERTICAL);
    let d_unary = sum_of(d_log_beliefs, &[&dl, &dr, &du, &dd]);
    let mut d_pairwise = gl;
    for g in [&gr, &gu, &gd] {
        d_pairwise.add_assign(g);
    }
    Ok(GradBundle {
        d_unary,
        d_pairwise,
        d_temperature: 0.0,
    })
}

/// Exact max-marginals of every chain of one axis, computed on `input`.
fn chain_family_max_marginals(input: &Volume, spec: &PairwiseSpec, horizontal: bool) -> Volume {
    let dirs = if horizontal { HORIZONTAL } else { VERTICAL };
    let [(m0, _), (m1, _)] = run_pair(input, spec, dirs, true);
    sum_of(input, &[&m0, &m1])
}

/// Result of [`trw_t`]: the final log-beliefs and the two unary splits.
#[derive(Debug, Clone)]
pub struct TrwResult {
    pub log_beliefs: Volume,
    pub horizontal_unary: Volume,
    pub vertical_unary: Volume,
}

/// Tree-reweighted BP over the horizontal and vertical chain families.
pub fn trw_t(g: &Volume, spec: &PairwiseSpec, iters: usize) -> Result<TrwResult> {
    check_inputs(g, spec)?;
    if iters == 0 {
        return Err(Error::InvalidArgument("TRW-T needs at least one iteration".into()));
    }
    let mut gh = g.scaled(0.5);
    let mut gv = g.scaled(0.5);
    let mut b = Volume::zeros(g.shape());
    for _ in 0..iters {
        let (bh, bv) = rayon::join(
            || chain_family_max_marginals(&gh, spec, true),
            || chain_family_max_marginals(&gv, spec, false),
        );
        b = sum_of(&bh, &[&bv]);
        for (((h, v), (ph, pv)), total) in gh
            .data_mut()
            .iter_mut()
            .zip(gv.data_mut().iter_mut())
            .zip(bh.data().iter().zip(bv.data()))
            .zip(b.data())
        {
            *h += 0.5 * total - ph;
            *v += 0.5 * total - pv;
        }
    }
    Ok(TrwResult {
        log_beliefs: b,
        horizontal_unary: gh,
        vertical_unary: gv,
    })
}

/// Result of [`tbca`].
#[derive(Debug, Clone)]
pub struct TbcaResult {
    /// Reparametrized node scores `g + Σ λ` after the last pass.
    pub log_beliefs: Volume,
    /// Lower bound after every pass (two per iteration): the negated dual
    /// objective, non-decreasing.
    pub dual_trace: Vec<f64>,
    /// Edge-to-node messages indexed by the side of the edge.
    pub edge_messages: [Volume; 4],
}

/// Tree block-coordinate ascent alternating all horizontal chains and all
/// vertical chains.
///
/// The state is one message per (edge, endpoint). A chain update computes
/// the messages from the far side by DP, then a redistribution DP from the
/// near side leaves node `i` with the share `1 - r_i` of its max-marginal
/// (the last node keeps the remainder), which makes the chain subproblem
/// tight. `r` is the interior coefficient in `[0, 1]`.
pub fn tbca(g: &Volume, spec: &PairwiseSpec, r: f64, iters: usize) -> Result<TbcaResult> {
    check_inputs(g, spec)?;
    if iters == 0 {
        return Err(Error::InvalidArgument("TBCA needs at least one iteration".into()));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidArgument(format!(
            "redistribution coefficient {r} outside [0, 1]"
        )));
    }
    let shape = g.shape();
    let mut lam: [Volume; 4] = std::array::from_fn(|_| Volume::zeros(shape));
    let mut trace = Vec::with_capacity(2 * iters);
    for _ in 0..iters {
        for horizontal in [true, false] {
            tbca_pass(g, spec, r, horizontal, &mut lam);
            trace.push(-tbca_dual(g, spec, &lam));
        }
    }
    let log_beliefs = sum_of(g, &[&lam[0], &lam[1], &lam[2], &lam[3]]);
    Ok(TbcaResult {
        log_beliefs,
        dual_trace: trace,
        edge_messages: lam,
    })
}

fn tbca_pass(g: &Volume, spec: &PairwiseSpec, r: f64, horizontal: bool, lam: &mut [Volume; 4]) {
    let shape = g.shape();
    let l = shape.labels;
    let (near, far, other) = if horizontal {
        (Direction::Left, Direction::Right, [Direction::Up, Direction::Down])
    } else {
        (Direction::Up, Direction::Down, [Direction::Left, Direction::Right])
    };
    // travel from the near side to the far side
    let travel = far;
    let lam_ro: &[Volume; 4] = lam;
    let updates: Vec<_> = (0..grid_chain_count(shape, travel))
        .into_par_iter()
        .map(|c| {
            let nodes = grid_chain_nodes(shape, travel, c);
            let n = nodes.len();
            let mut a = Vec::with_capacity(n * l);
            for &(y, x) in &nodes {
                for s in 0..l {
                    a.push(
                        g.get(y, x, s) + lam_ro[other[0].index()].get(y, x, s) + lam_ro[other[1].index()].get(y, x, s),
                    );
                }
            }
            let edges: Vec<EdgeScores<'_>> = nodes[..n - 1]
                .iter()
                .map(|&(y, x)| EdgeScores::from_spec(spec, y, x, travel))
                .collect();
            let chain = ChainView::new(l, a, edges).expect("grid chain is well formed");
            let back = dp_forward(&chain.reversed(), false).messages;
            let m_far: Vec<f64> = back.chunks(l).rev().flatten().copied().collect();
            let right: Vec<f64> = chain.unary().iter().zip(&m_far).map(|(a, m)| -(a + m)).collect();
            let coeffs = RedistCoeffs::interior(n, r).expect("coefficient checked by caller");
            let c_near = rdp_forward(&chain, &right, &coeffs).messages;
            let mut to_near = vec![0.0; n * l];
            let mut to_far = vec![0.0; n * l];
            for i in 0..n {
                let ri = coeffs.values()[i];
                for s in 0..l {
                    let k = i * l + s;
                    let a = chain.unary()[k];
                    let theta = (1.0 - ri) * (a + c_near[k] + m_far[k]);
                    to_near[k] = c_near[k];
                    to_far[k] = theta - a - c_near[k];
                }
            }
            (nodes, to_near, to_far)
        })
        .collect();
    for (nodes, to_near, to_far) in updates {
        for (k, &(y, x)) in nodes.iter().enumerate() {
            lam[near.index()]
                .pixel_mut(y, x)
                .copy_from_slice(&to_near[k * l..(k + 1) * l]);
            lam[far.index()]
                .pixel_mut(y, x)
                .copy_from_slice(&to_far[k * l..(k + 1) * l]);
        }
    }
}

/// Dual objective: node maxima of the reparametrized unaries plus edge
/// maxima of the reparametrized pairwise scores.
fn tbca_dual(g: &Volume, spec: &PairwiseSpec, lam: &[Volume; 4]) -> f64 {
    let shape = g.shape();
    let (h, w, l) = (shape.height, shape.width, shape.labels);
    let theta = sum_of(g, &[&lam[0], &lam[1], &lam[2], &lam[3]]);
    let mut total: f64 = theta
        .pixels()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    let mut hvec = vec![0.0; l];
    let mut edge_max = |y: usize, x: usize, dir: Direction, send: &[f64], recv: &[f64]| -> f64 {
        for (hs, v) in hvec.iter_mut().zip(send) {
            *hs = -v;
        }
        let m = max_product_step(&hvec, &EdgeScores::from_spec(spec, y, x, dir));
        m.iter().zip(recv).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max)
    };
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                total += edge_max(
                    y,
                    x,
                    Direction::Right,
                    lam[Direction::Right.index()].pixel(y, x),
                    lam[Direction::Left.index()].pixel(y, x + 1),
                );
            }
            if y + 1 < h {
                total += edge_max(
                    y,
                    x,
                    Direction::Down,
                    lam[Direction::Down.index()].pixel(y, x),
                    lam[Direction::Up.index()].pixel(y + 1, x),
                );
            }
        }
    }
    total
}

/// Softmax over labels at every pixel, shift-invariant.
pub fn read_beliefs(log_beliefs: &Volume) -> BeliefVolume {
    let mut out = log_beliefs.clone();
    let l = log_beliefs.shape().labels;
    out.data_mut().par_chunks_mut(l).for_each(|row| {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    });
    BeliefVolume::new_unchecked(out)
}

/// Softmax backward: `d b_s = B_s (d B_s - Σ_t d B_t B_t)`.
pub fn softmax_backward(beliefs: &BeliefVolume, d_beliefs: &Volume) -> Volume {
    let l = beliefs.shape().labels;
    let mut out = d_beliefs.clone();
    out.data_mut()
        .par_chunks_mut(l)
        .zip(beliefs.data().par_chunks(l))
        .for_each(|(d, b)| {
            let dot: f64 = d.iter().zip(b).map(|(x, y)| x * y).sum();
            for (v, p) in d.iter_mut().zip(b) {
                *v = p * (*v - dot);
            }
        });
    out
}

/// Per-pixel argmax over labels, smallest label on ties.
pub fn wta(volume: &Volume) -> Plane<usize> {
    let s = volume.shape();
    let labels: Vec<usize> = volume
        .pixels()
        .map(|row| {
            let mut arg = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[arg] {
                    arg = k;
                }
            }
            arg
        })
        .collect();
    Plane::from_vec(s.height, s.width, labels).expect("one label per pixel")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_model::{CompatMatrix, GridShape};
    use crate::oracle::{block_argmax, brute_max_marginals, brute_max_score, max_deviation_up_to_constants, TinyGraph};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, h: usize, w: usize, l: usize) -> Volume {
        let shape = GridShape::new(h, w, l).unwrap();
        Volume::from_fn(shape, |_, _, _| rng.gen_range(-2.0..2.0))
    }

    fn random_spec(rng: &mut ChaCha8Rng, l: usize, matrix: bool) -> PairwiseSpec {
        if matrix {
            let mut v = || (0..l * l).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>();
            let (hm, vm) = (v(), v());
            PairwiseSpec::FullMatrix(CompatMatrix::new(l, hm, vm).unwrap())
        } else {
            PairwiseSpec::TruncatedJump(JumpParams::new(
                rng.gen_range(0.0..1.5),
                rng.gen_range(0.0..1.5),
                rng.gen_range(0.0..1.5),
                rng.gen_range(0.0..1.5),
                rng.gen_range(0.0..1.5),
            ))
        }
    }

    #[test]
    fn zero_pairwise_gives_softmax_of_unaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_volume(&mut rng, 3, 4, 3);
        let tape = sweep_bp_forward(&g, &PairwiseSpec::zero(), BpOptions::default()).unwrap();
        let want = read_beliefs(&g);
        assert!(tape.beliefs.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn single_pixel_gives_softmax() {
        let shape = GridShape::new(1, 1, 3).unwrap();
        let g = Volume::from_vec(shape, vec![0.0, 1.0, -1.0]).unwrap();
        let tape = sweep_bp_forward(&g, &PairwiseSpec::potts(1.0), BpOptions::default()).unwrap();
        assert!(tape.beliefs.max_abs_diff(&read_beliefs(&g)) < 1e-15);
    }

    #[test]
    fn sweep_bp_matches_cross_tree_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..6 {
            let l = 2 + trial % 2;
            let g = random_volume(&mut rng, 3, 3, l);
            let spec = random_spec(&mut rng, l, trial % 3 == 0);
            let tape = sweep_bp_forward(&g, &spec, BpOptions::default()).unwrap();
            for y in 0..3 {
                for x in 0..3 {
                    let mm = brute_max_marginals(&TinyGraph::cross_tree(&g, &spec, y, x)).unwrap();
                    let p = y * 3 + x;
                    let want = &mm[p * l..(p + 1) * l];
                    let dev = max_deviation_up_to_constants(tape.log_beliefs.pixel(y, x), want, l);
                    assert!(dev < 1e-9, "pixel ({y},{x}) deviates by {dev}");
                }
            }
        }
    }

    #[test]
    fn row_grid_matches_chain_max_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..20 {
            let l = rng.gen_range(2..4);
            let n = rng.gen_range(1..6);
            let g = random_volume(&mut rng, 1, n, l);
            let spec = random_spec(&mut rng, l, trial % 2 == 0);
            let tape = sweep_bp_forward(&g, &spec, BpOptions::default()).unwrap();
            let mm = brute_max_marginals(&TinyGraph::from_grid(&g, &spec)).unwrap();
            assert!(max_deviation_up_to_constants(tape.a.data(), &mm, l) < 1e-9);
            assert_eq!(block_argmax(tape.a.data(), l), block_argmax(&mm, l));
            let s = sgm(&g, &spec, BpOptions::default()).unwrap();
            assert!(s.log_beliefs.max_abs_diff(&tape.a) <= 1e-12);
        }
    }

    #[test]
    fn zero_belief_gradient_gives_zero_bundle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_volume(&mut rng, 3, 3, 3);
        let spec = random_spec(&mut rng, 3, false);
        let tape = sweep_bp_forward(&g, &spec, BpOptions::default()).unwrap();
        let gb = sweep_bp_backward(&tape, &Volume::zeros(g.shape())).unwrap();
        assert!(gb.d_unary.data().iter().all(|v| *v == 0.0));
        assert!(gb.d_pairwise.is_zero());
    }

    #[test]
    fn sgm_two_by_two_matches_direct_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = random_volume(&mut rng, 2, 2, 2);
        let spec = random_spec(&mut rng, 2, true);
        let b = sgm(&g, &spec, BpOptions { normalize: false }).unwrap().log_beliefs;
        let f = |y, x, dir, s, t| crate::grid_model::eval_pairwise(&spec, y, x, dir, s, t);
        for y in 0..2usize {
            for x in 0..2usize {
                for t in 0..2 {
                    // each direction family reaches (y, x) from at most one neighbour
                    let mut want = g.get(y, x, t);
                    let from = [
                        (x.checked_sub(1).map(|xx| (y, xx)), Direction::Right),
                        ((x + 1 < 2).then_some((y, x + 1)), Direction::Left),
                        (y.checked_sub(1).map(|yy| (yy, x)), Direction::Down),
                        ((y + 1 < 2).then_some((y + 1, x)), Direction::Up),
                    ];
                    for (src, dir) in from {
                        if let Some((sy, sx)) = src {
                            want += (0..2)
                                .map(|s| g.get(sy, sx, s) + f(sy, sx, dir, s, t))
                                .fold(f64::NEG_INFINITY, f64::max);
                        }
                    }
                    assert!((b.get(y, x, t) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn normalization_does_not_change_beliefs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_volume(&mut rng, 5, 6, 4);
        let spec = random_spec(&mut rng, 4, false);
        let a = sweep_bp_forward(&g, &spec, BpOptions { normalize: true }).unwrap();
        let b = sweep_bp_forward(&g, &spec, BpOptions { normalize: false }).unwrap();
        assert!(a.beliefs.max_abs_diff(&b.beliefs) <= 1e-9);
    }

    #[test]
    fn trw_keeps_unary_split_and_is_exact_on_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_volume(&mut rng, 4, 4, 3);
        let spec = random_spec(&mut rng, 3, false);
        for iters in 1..6 {
            let res = trw_t(&g, &spec, iters).unwrap();
            let sum = sum_of(&res.horizontal_unary, &[&res.vertical_unary]);
            assert!(sum.max_abs_diff(&g) < 1e-9);
        }
        let row = random_volume(&mut rng, 1, 5, 3);
        let res = trw_t(&row, &spec, 50).unwrap();
        let mm = brute_max_marginals(&TinyGraph::from_grid(&row, &spec)).unwrap();
        assert_eq!(block_argmax(res.log_beliefs.data(), 3), block_argmax(&mm, 3));
    }

    #[test]
    fn tbca_zero_pairwise_dual_is_sum_of_maxima() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_volume(&mut rng, 3, 4, 3);
        let res = tbca(&g, &PairwiseSpec::zero(), 0.5, 2).unwrap();
        let sum_max: f64 = g
            .pixels()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum();
        assert!(res.dual_trace.iter().all(|d| (d + sum_max).abs() < 1e-9));
        assert!(wta(&res.log_beliefs) == wta(&g));
    }

    #[test]
    fn tbca_solves_a_row_in_one_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..10 {
            let g = random_volume(&mut rng, 1, 5, 3);
            let spec = random_spec(&mut rng, 3, trial % 2 == 0);
            let res = tbca(&g, &spec, 0.5, 3).unwrap();
            let opt = brute_max_score(&TinyGraph::from_grid(&g, &spec)).unwrap();
            for d in &res.dual_trace {
                assert!((d + opt).abs() < 1e-9, "dual {d} vs optimum {opt}");
            }
        }
    }

    #[test]
    fn tbca_dual_is_monotone_and_bounds_the_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..10 {
            let g = random_volume(&mut rng, 3, 3, 2);
            let spec = random_spec(&mut rng, 2, trial % 2 == 1);
            let res = tbca(&g, &spec, 0.5, 10).unwrap();
            let opt = brute_max_score(&TinyGraph::from_grid(&g, &spec)).unwrap();
            for w in res.dual_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9);
            }
            assert!(res.dual_trace.iter().all(|d| -d >= opt - 1e-9));
        }
    }

    #[test]
    fn wta_rules() {
        let shape = GridShape::new(1, 3, 3).unwrap();
        let v = Volume::from_vec(shape, vec![0.0, 1.0, 0.0, 0.2, 0.2, 0.2, 0.5, 0.1, 0.9]).unwrap();
        assert_eq!(wta(&v).data(), &[1, 0, 2]);
    }

    #[test]
    fn read_beliefs_examples() {
        let shape = GridShape::new(1, 2, 2).unwrap();
        let b = Volume::from_vec(shape, vec![0.0, 0.0, 0.0, 3f64.ln()]).unwrap();
        let bel = read_beliefs(&b);
        assert_eq!(bel.pixel(0, 0), &[0.5, 0.5]);
        assert!((bel.get(0, 1, 0) - 0.25).abs() < 1e-15);
        assert!((bel.get(0, 1, 1) - 0.75).abs() < 1e-15);
        let shifted = read_beliefs(&Volume::from_vec(shape, vec![5.0, 5.0, 7.0, 7.0 + 3f64.ln()]).unwrap());
        assert!(shifted.max_abs_diff(&bel) < 1e-15);
    }
}
