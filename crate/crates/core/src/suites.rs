//! Reproducible experiments behind the acceptance checks. Each returns raw
//! measurements; callers decide pass or fail.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain_dp::{dp_backward, dp_forward, rdp_backward, rdp_forward, ChainView, EdgeScores, RedistCoeffs};
use crate::error::{Error, Result};
use crate::grid_model::{
    weights_from_edges, CompatMatrix, Direction, GridShape, JumpParams, PairwiseSpec, Plane, Volume,
};
use crate::inference::{
    directional_messages, read_beliefs, sgm, sgm_backward, softmax_backward, sweep_bp_backward, sweep_bp_forward, tbca,
    trw_t, wta, BpOptions,
};
use crate::learning::{
    disparity_metrics, huber_loss, nll_loss, refine_backward, refine_basic, run_model, sample_loss, stereo_sample,
    train_toy, LevelData, ModelParams, StereoInputOptions, TrainConfig, TrainSample,
};
use crate::oracle::{
    block_argmax, brute_max_marginals, fd_gradcheck, max_deviation_up_to_constants, perturb_ties, random_directions,
    smax, TinyGraph,
};
use crate::pipeline::PairwiseKind;
use crate::pyramid::{hierarchy_backward, run_hierarchy, upsample_beliefs, upsample_beliefs_backward};
use crate::synth::{segmentation_scene, stereo_scene, StereoSceneConfig};

fn random_volume(rng: &mut ChaCha8Rng, h: usize, w: usize, l: usize) -> Volume {
    let shape = GridShape::new(h, w, l).expect("positive sizes");
    let mut v = Volume::from_fn(shape, |_, _, _| rng.gen_range(-2.0..2.0));
    perturb_ties(v.data_mut(), rng);
    v
}

/// A random pairwise model; on grids with at least two rows and columns it
/// also gets random per-edge weights.
fn random_spec(rng: &mut ChaCha8Rng, shape: GridShape, matrix: bool) -> PairwiseSpec {
    let l = shape.labels;
    let weights = (shape.height >= 2 && shape.width >= 2).then(|| {
        let hw = Plane::from_fn(shape.height, shape.width - 1, |_, _| rng.gen_range(0.2..1.5));
        let vw = Plane::from_fn(shape.height - 1, shape.width, |_, _| rng.gen_range(0.2..1.5));
        weights_from_edges(&hw, &vw).expect("consistent edge planes")
    });
    if matrix {
        let mut m = || (0..l * l).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>();
        let (hm, vm) = (m(), m());
        let mut c = CompatMatrix::new(l, hm, vm).expect("square matrices");
        if let Some(w) = weights {
            c = c.with_weights(w);
        }
        return PairwiseSpec::FullMatrix(c);
    }
    let mut p = JumpParams::new(
        rng.gen_range(0.0..1.5),
        rng.gen_range(0.0..1.5),
        rng.gen_range(0.0..1.5),
        rng.gen_range(0.0..1.5),
        rng.gen_range(0.0..1.5),
    );
    if let Some(w) = weights {
        p = p.with_weights(w);
    }
    PairwiseSpec::TruncatedJump(p)
}

/// Parameters of a pairwise model in the layout of `PairwiseGrad::to_flat`.
fn spec_to_flat(spec: &PairwiseSpec) -> Vec<f64> {
    match spec {
        PairwiseSpec::TruncatedJump(p) => {
            let mut v = p.bins().to_vec();
            if let Some(ws) = &p.weights {
                for w in ws {
                    v.extend_from_slice(w.data());
                }
            }
            v
        }
        PairwiseSpec::FullMatrix(m) => m.horizontal().iter().chain(m.vertical()).copied().collect(),
    }
}

fn spec_from_flat(template: &PairwiseSpec, v: &[f64]) -> PairwiseSpec {
    let mut spec = template.clone();
    match &mut spec {
        PairwiseSpec::TruncatedJump(p) => {
            p.set_bins(std::array::from_fn(|i| v[i]));
            if let Some(ws) = &mut p.weights {
                let mut at = 5;
                for w in ws.iter_mut() {
                    let n = w.data().len();
                    w.data_mut().copy_from_slice(&v[at..at + n]);
                    at += n;
                }
            }
        }
        PairwiseSpec::FullMatrix(m) => {
            let n = m.horizontal().len();
            m.horizontal_mut().copy_from_slice(&v[..n]);
            m.vertical_mut().copy_from_slice(&v[n..2 * n]);
        }
    }
    spec
}

/// Worst deviation between sweep BP and exact enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactnessReport {
    pub instances: usize,
    pub max_deviation: f64,
    pub argmax_mismatches: usize,
    pub seconds: f64,
}

/// Horizontal max-marginals of sweep BP on random `1×N` chains against
/// brute force, alternating jump and matrix models.
pub fn chain_exactness(instances: usize, seed: u64) -> Result<ExactnessReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_deviation: f64 = 0.0;
    let mut argmax_mismatches = 0;
    for i in 0..instances {
        let n = rng.gen_range(1..=6);
        let l = rng.gen_range(2..=4);
        let g = random_volume(&mut rng, 1, n, l);
        let spec = random_spec(&mut rng, g.shape(), i % 2 == 1);
        let tape = sweep_bp_forward(&g, &spec, BpOptions::default())?;
        let exact = brute_max_marginals(&TinyGraph::from_grid(&g, &spec))?;
        max_deviation = max_deviation.max(max_deviation_up_to_constants(tape.a.data(), &exact, l));
        argmax_mismatches += block_argmax(tape.a.data(), l)
            .iter()
            .zip(block_argmax(&exact, l))
            .filter(|(a, b)| **a != *b)
            .count();
    }
    Ok(ExactnessReport {
        instances,
        max_deviation,
        argmax_mismatches,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Sweep-BP log-beliefs of every pixel of random `3×3` grids against
/// enumeration of that pixel's cross tree (all rows plus its column).
pub fn cross_tree_equivalence(instances: usize, seed: u64) -> Result<ExactnessReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_deviation: f64 = 0.0;
    let mut argmax_mismatches = 0;
    for i in 0..instances {
        let l = rng.gen_range(2..=3);
        let g = random_volume(&mut rng, 3, 3, l);
        let spec = random_spec(&mut rng, g.shape(), i % 2 == 1);
        let tape = sweep_bp_forward(&g, &spec, BpOptions::default())?;
        for y in 0..3 {
            for x in 0..3 {
                let exact = brute_max_marginals(&TinyGraph::cross_tree(&g, &spec, y, x))?;
                let node = y * 3 + x;
                let want = &exact[node * l..(node + 1) * l];
                let got = tape.log_beliefs.pixel(y, x);
                max_deviation = max_deviation.max(max_deviation_up_to_constants(got, want, l));
                if block_argmax(got, l) != block_argmax(want, l) {
                    argmax_mismatches += 1;
                }
            }
        }
    }
    Ok(ExactnessReport {
        instances,
        max_deviation,
        argmax_mismatches,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Worst finite-difference relative error of one backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub operation: String,
    pub instances: usize,
    /// Draws discarded because a kink fell inside the stencil.
    pub redrawn: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn coordinate_and_random(dim: usize, extra: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = (0..dim)
        .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    dirs.extend(random_directions(dim, extra, rng));
    dirs
}

/// Central difference of `f` along `dir`.
fn central<F>(f: &mut F, point: &[f64], dir: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let at = |sign: f64| {
        point
            .iter()
            .zip(dir)
            .map(|(p, d)| p + sign * step * d)
            .collect::<Vec<_>>()
    };
    Ok((f(&at(1.0))? - f(&at(-1.0))?) / (2.0 * step))
}

/// Disagreement between central differences at `step` and `step / 2`,
/// relative to the larger of the two and 1, above which the function is taken to have a kink (an argmax
/// switch) inside the difference stencil.
pub const KINK_TOLERANCE: f64 = 1e-5;

/// [`fd_gradcheck`] on instances that are smooth within the stencil;
/// `None` when some direction crosses a kink, so the caller redraws.
fn guarded<F>(mut f: F, point: &[f64], grad: &[f64], dirs: &[Vec<f64>], step: f64) -> Result<Option<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    for d in dirs {
        let wide = central(&mut f, point, d, step)?;
        let narrow = central(&mut f, point, d, step / 2.0)?;
        if (wide - narrow).abs() > KINK_TOLERANCE * wide.abs().max(narrow.abs()).max(1.0) {
            return Ok(None);
        }
    }
    fd_gradcheck(f, point, grad, dirs, step).map(Some)
}

fn check_chain_dp(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<f64>> {
    let n = rng.gen_range(3..=6);
    let l = rng.gen_range(2..=4);
    let unary: Vec<f64> = (0..n * l).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mats: Vec<Vec<f64>> = (0..n - 1)
        .map(|_| (0..l * l).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let w: Vec<f64> = (0..n * l).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eval = |p: &[f64]| -> Result<Vec<f64>> {
        let edges = (0..n - 1)
            .map(|k| EdgeScores::Matrix {
                weight: 1.0,
                matrix: &p[n * l + k * l * l..n * l + (k + 1) * l * l],
                transposed: false,
            })
            .collect();
        let chain = ChainView::new(l, p[..n * l].to_vec(), edges)?;
        Ok(dp_forward(&chain, false).messages)
    };
    let point: Vec<f64> = unary.iter().chain(mats.iter().flatten()).copied().collect();
    let edges = mats
        .iter()
        .map(|m| EdgeScores::Matrix {
            weight: 1.0,
            matrix: m,
            transposed: false,
        })
        .collect();
    let out = dp_forward(&ChainView::new(l, unary.clone(), edges)?, false);
    let (dg, entries) = dp_backward(l, &out.argmax, &w);
    let mut grad = dg;
    grad.resize(point.len(), 0.0);
    for e in entries {
        grad[n * l + e.edge * l * l + e.s * l + e.t] += e.grad;
    }
    let dirs = coordinate_and_random(point.len(), 4, rng);
    guarded(|p| Ok(dot(&eval(p)?, &w)), &point, &grad, &dirs, step)
}

fn check_rdp(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<f64>> {
    let n = rng.gen_range(3..=6);
    let l = rng.gen_range(2..=4);
    let unary: Vec<f64> = (0..n * l).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mr: Vec<f64> = (0..n * l).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let r = RedistCoeffs::new((0..n).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let bins: Vec<[f64; 5]> = (0..n - 1)
        .map(|_| std::array::from_fn(|_| rng.gen_range(0.1..1.5)))
        .collect();
    let chain_of = |u: &[f64]| -> Result<ChainView<'static>> {
        let edges = bins
            .iter()
            .map(|b| EdgeScores::Jump {
                weight: 1.0,
                bins: *b,
                forward: true,
            })
            .collect();
        ChainView::new(l, u.to_vec(), edges)
    };
    let w: Vec<f64> = (0..n * l).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let out = rdp_forward(&chain_of(&unary)?, &mr, &r);
    let (dgt, _) = rdp_backward(l, &out.argmax, &r, &w);
    let mut grad = dgt.clone();
    for i in 0..n {
        for s in 0..l {
            grad.push((1.0 - r.values()[i]) * dgt[i * l + s]);
        }
    }
    let point: Vec<f64> = unary.iter().chain(&mr).copied().collect();
    let f = |p: &[f64]| Ok(dot(&rdp_forward(&chain_of(&p[..n * l])?, &p[n * l..], &r).messages, &w));
    let dirs = coordinate_and_random(point.len(), 4, rng);
    guarded(f, &point, &grad, &dirs, step)
}

fn check_sweep(rng: &mut ChaCha8Rng, step: f64, matrix: bool) -> Result<Option<f64>> {
    let g = random_volume(rng, 4, 4, 3);
    let spec = random_spec(rng, g.shape(), matrix);
    let gt = Plane::from_fn(4, 4, |_, _| Some(rng.gen_range(0..3)));
    let tape = sweep_bp_forward(&g, &spec, BpOptions::default())?;
    let (_, db) = nll_loss(&tape.beliefs, &gt)?;
    let gb = sweep_bp_backward(&tape, &db)?;
    let ng = g.data().len();
    let point: Vec<f64> = g.data().iter().copied().chain(spec_to_flat(&spec)).collect();
    let grad: Vec<f64> = gb
        .d_unary
        .data()
        .iter()
        .copied()
        .chain(gb.d_pairwise.to_flat())
        .collect();
    let f = |p: &[f64]| {
        let gv = Volume::from_vec(g.shape(), p[..ng].to_vec())?;
        let t = sweep_bp_forward(&gv, &spec_from_flat(&spec, &p[ng..]), BpOptions::default())?;
        Ok(nll_loss(&t.beliefs, &gt)?.0)
    };
    let dirs = random_directions(point.len(), 12, rng);
    guarded(f, &point, &grad, &dirs, step)
}

fn check_sgm(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<f64>> {
    let g = random_volume(rng, 4, 4, 3);
    let matrix = rng.gen_bool(0.5);
    let spec = random_spec(rng, g.shape(), matrix);
    let w = Volume::from_fn(g.shape(), |_, _, _| rng.gen_range(-1.0..1.0));
    let raw = BpOptions { normalize: false };
    let tape = sgm(&g, &spec, raw)?;
    let gb = sgm_backward(&tape, &w)?;
    let ng = g.data().len();
    let point: Vec<f64> = g.data().iter().copied().chain(spec_to_flat(&spec)).collect();
    let grad: Vec<f64> = gb
        .d_unary
        .data()
        .iter()
        .copied()
        .chain(gb.d_pairwise.to_flat())
        .collect();
    let f = |p: &[f64]| {
        let gv = Volume::from_vec(g.shape(), p[..ng].to_vec())?;
        Ok(sgm(&gv, &spec_from_flat(&spec, &p[ng..]), raw)?.log_beliefs.dot(&w))
    };
    let dirs = random_directions(point.len(), 12, rng);
    guarded(f, &point, &grad, &dirs, step)
}

fn check_nll(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<f64>> {
    let x = random_volume(rng, 2, 3, 4);
    let gt = Plane::from_fn(2, 3, |_, _| rng.gen_bool(0.8).then(|| rng.gen_range(0..4)));
    let gt = if gt.data().iter().all(|l| l.is_none()) {
        Plane::filled(2, 3, Some(0))
    } else {
        gt
    };
    let b = read_beliefs(&x);
    let (_, db) = nll_loss(&b, &gt)?;
    let grad = softmax_backward(&b, &db);
    let f = |p: &[f64]| Ok(nll_loss(&read_beliefs(&Volume::from_vec(x.shape(), p.to_vec())?), &gt)?.0);
    let dirs = coordinate_and_random(x.data().len(), 4, rng);
    guarded(f, x.data(), grad.data(), &dirs, step)
}

fn check_huber(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<f64>> {
    let delta = rng.gen_range(0.5..2.0);
    let gt = Plane::from_fn(3, 3, |_, _| rng.gen_range(0.0..8.0));
    let y: Vec<f64> = gt
        .data()
        .iter()
        .map(|t| {
            // keep residuals away from the branch point |r| = delta
            let mag = if rng.gen_bool(0.5) {
                rng.gen_range(0.0..0.8)
            } else {
                rng.gen_range(1.2..3.0)
            } * delta;
            t + if rng.gen_bool(0.5) { mag } else { -mag }
        })
        .collect();
    let (_, g) = huber_loss(&Plane::from_vec(3, 3, y.clone())?, &gt, delta)?;
    let f = |p: &[f64]| Ok(huber_loss(&Plane::from_vec(3, 3, p.to_vec())?, &gt, delta)?.0);
    let dirs = coordinate_and_random(9, 4, rng);
    guarded(f, &y, g.data(), &dirs, step)
}

fn check_refine(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<f64>> {
    let x = random_volume(rng, 2, 3, 9);
    let tau = rng.gen_range(1..=3);
    let w = Plane::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
    let b = read_beliefs(&x);
    let (_, tape) = refine_basic(&b, tau);
    let grad = softmax_backward(&b, &refine_backward(&tape, &w)?);
    let f = |p: &[f64]| {
        let (y, _) = refine_basic(&read_beliefs(&Volume::from_vec(x.shape(), p.to_vec())?), tau);
        Ok(dot(y.data(), w.data()))
    };
    let dirs = coordinate_and_random(x.data().len(), 4, rng);
    guarded(f, x.data(), grad.data(), &dirs, step)
}

fn check_upsample(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<f64>> {
    let x = random_volume(rng, 2, 3, 3);
    let b = read_beliefs(&x);
    let (up, tape) = upsample_beliefs(&b);
    let w = Volume::from_fn(up.shape(), |_, _, _| rng.gen_range(-1.0..1.0));
    let grad = softmax_backward(&b, &upsample_beliefs_backward(&tape, &w)?);
    let f = |p: &[f64]| {
        Ok(
            upsample_beliefs(&read_beliefs(&Volume::from_vec(x.shape(), p.to_vec())?))
                .0
                .dot(&w),
        )
    };
    let dirs = coordinate_and_random(x.data().len(), 4, rng);
    guarded(f, x.data(), grad.data(), &dirs, step)
}

fn check_hierarchy(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<f64>> {
    let labels = [3usize, 6];
    let levels: Vec<LevelData> = labels
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let side = 4 << k;
            LevelData {
                q: read_beliefs(&random_volume(rng, side, side, l)).into_volume(),
                weights: None,
                gt_labels: Plane::from_fn(side, side, |_, _| Some(rng.gen_range(0..l))),
            }
        })
        .collect();
    let sample = TrainSample {
        levels,
        gt_disparity: Some(Plane::from_fn(8, 8, |_, _| rng.gen_range(0.0..5.0))),
    };
    let mut jump = || {
        PairwiseSpec::TruncatedJump(JumpParams::new(
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.1..1.0),
        ))
    };
    let (a, b) = (jump(), jump());
    let params = ModelParams::new(rng.gen_range(0.5..2.0), vec![a, b])?;
    let cfg = TrainConfig::default();
    let (_, grad) = sample_loss(&params, &sample, &cfg)?;
    let point = params.to_flat();
    let f = |p: &[f64]| {
        let mut m = params.clone();
        m.set_flat(p)?;
        Ok(sample_loss(&m, &sample, &cfg)?.0)
    };
    let dirs = coordinate_and_random(point.len(), 4, rng);
    guarded(f, &point, &grad, &dirs, step)
}

/// Operations covered by [`gradcheck_suite`].
pub const GRADCHECK_OPERATIONS: [&str; 10] = [
    "chain_dp",
    "chain_rdp",
    "sweep_bp_jump",
    "sweep_bp_matrix",
    "sgm",
    "nll_softmax",
    "huber",
    "refine",
    "upsample",
    "hierarchy",
];

const MAX_REDRAWS_PER_INSTANCE: usize = 10;

/// Central-difference checks of every backward pass on random
/// tie-perturbed instances.
pub fn gradcheck_suite(instances: usize, step: f64, seed: u64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut entries = Vec::new();
    for (k, op) in GRADCHECK_OPERATIONS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut worst: f64 = 0.0;
        let (mut checked, mut redrawn) = (0, 0);
        while checked < instances {
            if redrawn > MAX_REDRAWS_PER_INSTANCE * instances {
                return Err(Error::InvalidArgument(format!(
                    "{op}: no kink-free instance after {redrawn} draws"
                )));
            }
            let err = match *op {
                "chain_dp" => check_chain_dp(&mut rng, step),
                "chain_rdp" => check_rdp(&mut rng, step),
                "sweep_bp_jump" => check_sweep(&mut rng, step, false),
                "sweep_bp_matrix" => check_sweep(&mut rng, step, true),
                "sgm" => check_sgm(&mut rng, step),
                "nll_softmax" => check_nll(&mut rng, step),
                "huber" => check_huber(&mut rng, step),
                "refine" => check_refine(&mut rng, step),
                "upsample" => check_upsample(&mut rng, step),
                _ => check_hierarchy(&mut rng, step),
            }?;
            match err {
                Some(e) => {
                    worst = worst.max(e);
                    checked += 1;
                }
                None => redrawn += 1,
            }
        }
        entries.push(GradcheckEntry {
            operation: op.to_string(),
            instances,
            redrawn,
            max_rel_error: worst,
        });
    }
    Ok(GradcheckReport {
        entries,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub instances: usize,
    /// Largest drop between consecutive dual-trace entries (0 if none).
    pub worst_decrease: f64,
}

/// Runs TBCA on random `6×6`, `L = 3` grids and records the largest
/// decrease of the dual trace.
pub fn tbca_monotonicity(instances: usize, iters: usize, seed: u64) -> Result<MonotonicityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let g = random_volume(&mut rng, 6, 6, 3);
        let spec = random_spec(&mut rng, g.shape(), i % 2 == 1);
        let out = tbca(&g, &spec, 0.5, iters)?;
        for w in out.dual_trace.windows(2) {
            worst = worst.max(w[0] - w[1]);
        }
    }
    Ok(MonotonicityReport {
        instances,
        worst_decrease: worst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    /// Percent of pixels whose argmax differs from the clean labels.
    pub input_error: f64,
    pub bp_error: f64,
    pub relative_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub rectangles: usize,
    pub noise: f64,
    pub temperature: f64,
    /// Score for equal labels on neighbouring pixels; other pairs score 0.
    pub diagonal: f64,
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 5,
            rectangles: 8,
            noise: 0.1,
            temperature: 1.0,
            diagonal: 1.0,
            seed: 0,
        }
    }
}

fn percent_wrong(pred: &Plane<usize>, truth: &Plane<usize>) -> f64 {
    let wrong = pred.data().iter().zip(truth.data()).filter(|(a, b)| a != b).count();
    100.0 * wrong as f64 / truth.data().len() as f64
}

/// Smooths noisy one-hot class probabilities with a diagonal compatibility
/// matrix and compares pixel error against the input argmax.
pub fn segmentation_smoothing(cfg: &SegmentationConfig) -> Result<SegmentationReport> {
    let scene = segmentation_scene(cfg.height, cfg.width, cfg.classes, cfg.rectangles, cfg.noise, cfg.seed)?;
    let input_error = percent_wrong(&wta(&scene.probs), &scene.truth);
    let spec = PairwiseSpec::FullMatrix(CompatMatrix::diagonal(cfg.classes, cfg.diagonal, 0.0));
    let tape = sweep_bp_forward(&scene.probs.scaled(cfg.temperature), &spec, BpOptions::default())?;
    let bp_error = percent_wrong(&wta(&tape.log_beliefs), &scene.truth);
    Ok(SegmentationReport {
        input_error,
        bp_error,
        relative_reduction: if input_error > 0.0 {
            1.0 - bp_error / input_error
        } else {
            0.0
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub samples: usize,
    /// Smallest `smax - max` seen (should not be below zero).
    pub min_lower_slack: f64,
    /// Smallest `max + log n - smax` seen (should not be below zero).
    pub min_upper_slack: f64,
}

/// Checks `max ≤ smax ≤ max + log n` on random vectors of length `1..=64`.
pub fn smax_sandwich(samples: usize, seed: u64) -> SandwichReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lower = f64::INFINITY;
    let mut upper = f64::INFINITY;
    for _ in 0..samples {
        let n = rng.gen_range(1..=64);
        let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = smax(&v);
        lower = lower.min(s - mx);
        upper = upper.min(mx + (n as f64).ln() - s);
    }
    SandwichReport {
        samples,
        min_lower_slack: lower,
        min_upper_slack: upper,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub labels: Vec<usize>,
    pub jump_seconds: Vec<f64>,
    pub matrix_seconds: Vec<f64>,
    pub jump_slope: f64,
    pub matrix_slope: f64,
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Median wall-clock seconds of one direction of message passing over a
/// `size × size` grid for each label count, on a single thread.
pub fn time_messages(kind: PairwiseKind, labels: &[usize], size: usize, reps: usize, seed: u64) -> Result<Vec<f64>> {
    if labels.is_empty() || labels.contains(&0) || reps == 0 || size == 0 {
        return Err(Error::InvalidArgument(
            "timing needs label counts, a grid and repetitions".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build a thread pool: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels
        .iter()
        .map(|&l| {
            let g = random_volume(&mut rng, size, size, l);
            let spec = match kind {
                PairwiseKind::Jump => PairwiseSpec::TruncatedJump(JumpParams::symmetric(0.5, 1.0, 2.0)),
                PairwiseKind::Matrix => random_spec(&mut rng, g.shape(), true),
            };
            let times: Vec<f64> = (0..reps)
                .map(|_| {
                    pool.install(|| {
                        let t = Instant::now();
                        std::hint::black_box(directional_messages(&g, &spec, Direction::Right, true));
                        t.elapsed().as_secs_f64()
                    })
                })
                .collect();
            Ok(median(times))
        })
        .collect()
}

/// [`time_messages`] for both pairwise models, with fitted slopes.
pub fn message_timing(labels: &[usize], size: usize, reps: usize, seed: u64) -> Result<ComplexityReport> {
    if labels.len() < 2 {
        return Err(Error::InvalidArgument("a slope needs at least two label counts".into()));
    }
    let jump_seconds = time_messages(PairwiseKind::Jump, labels, size, reps, seed)?;
    let matrix_seconds = time_messages(PairwiseKind::Matrix, labels, size, reps, seed)?;
    let xs: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    Ok(ComplexityReport {
        labels: labels.to_vec(),
        jump_slope: log_log_slope(&xs, &jump_seconds),
        matrix_slope: log_log_slope(&xs, &matrix_seconds),
        jump_seconds,
        matrix_seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeutralityReport {
    pub instances: usize,
    /// Largest belief difference with and without per-step normalization.
    pub max_belief_diff: f64,
    /// Every repeated run (also across thread counts) gave identical bits.
    pub deterministic: bool,
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Everything a seeded pipeline run produces, as raw bits.
fn seeded_run(seed: u64) -> Result<Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_volume(&mut rng, 8, 8, 4);
    let spec = random_spec(&mut rng, g.shape(), false);
    let tape = sweep_bp_forward(&g, &spec, BpOptions::default())?;
    let w = Volume::from_fn(g.shape(), |_, _, _| rng.gen_range(-1.0..1.0));
    let gb = sweep_bp_backward(&tape, &w)?;
    let coarse = random_volume(&mut rng, 4, 4, 2);
    let plain = PairwiseSpec::TruncatedJump(JumpParams::symmetric(0.3, 0.6, 1.2));
    let h = run_hierarchy(
        &[read_beliefs(&coarse).into_volume(), read_beliefs(&g).into_volume()],
        &[plain.clone(), plain],
        crate::grid_model::Temperature::new(1.5)?,
        BpOptions::default(),
    )?;
    let hg = hierarchy_backward(&h, &[None, Some(w.clone())])?;
    let mut out = bits(tape.beliefs.data());
    out.extend(bits(gb.d_unary.data()));
    out.extend(bits(&gb.d_pairwise.to_flat()));
    out.extend(bits(h.finest().data()));
    out.extend(bits(&[hg.d_temperature]));
    out.extend(bits(sgm(&g, &spec, BpOptions::default())?.log_beliefs.data()));
    out.extend(bits(trw_t(&g, &spec, 5)?.log_beliefs.data()));
    let t = tbca(&g, &spec, 0.5, 3)?;
    out.extend(bits(t.log_beliefs.data()));
    out.extend(bits(&t.dual_trace));
    Ok(out)
}

/// Beliefs with and without message normalization, and bitwise
/// reproducibility of seeded runs across repetitions and thread counts.
pub fn normalization_and_determinism(instances: usize, seed: u64) -> Result<NeutralityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_belief_diff: f64 = 0.0;
    for i in 0..instances {
        let g = random_volume(&mut rng, 6, 7, 4);
        let spec = random_spec(&mut rng, g.shape(), i % 2 == 1);
        let on = sweep_bp_forward(&g, &spec, BpOptions { normalize: true })?;
        let off = sweep_bp_forward(&g, &spec, BpOptions { normalize: false })?;
        max_belief_diff = max_belief_diff.max(on.beliefs.max_abs_diff(&off.beliefs));
    }
    let reference = seeded_run(seed)?;
    let mut deterministic = seeded_run(seed)? == reference;
    for threads in [1, 3] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot build a thread pool: {e}")))?;
        deterministic &= pool.install(|| seeded_run(seed))? == reference;
    }
    Ok(NeutralityReport {
        instances,
        max_belief_diff,
        deterministic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub instances: usize,
    pub max_diff: f64,
}

/// SGM against the horizontal max-marginals of sweep BP on `1×N` grids.
pub fn sgm_chain_identity(instances: usize, seed: u64) -> Result<IdentityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_diff: f64 = 0.0;
    for i in 0..instances {
        let n = rng.gen_range(1..=8);
        let l = rng.gen_range(2..=5);
        let g = random_volume(&mut rng, 1, n, l);
        let spec = random_spec(&mut rng, g.shape(), i % 2 == 1);
        let a = sweep_bp_forward(&g, &spec, BpOptions::default())?.a;
        let s = sgm(&g, &spec, BpOptions::default())?.log_beliefs;
        max_diff = max_diff.max(a.max_abs_diff(&s));
    }
    Ok(IdentityReport { instances, max_diff })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub losses: Vec<f64>,
    /// Final loss over initial loss.
    pub ratio: f64,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub scene: StereoSceneConfig,
    pub inputs: StereoInputOptions,
    pub init: ModelParams,
    pub train: TrainConfig,
    /// Drop ground truth at pixels whose match is not visible in the right view.
    pub mask_hidden: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let levels = 3;
        Self {
            scene: StereoSceneConfig {
                height: 32,
                width: 32,
                ..StereoSceneConfig::default()
            },
            inputs: StereoInputOptions {
                levels,
                ..StereoInputOptions::default()
            },
            init: ModelParams {
                temperature: 1.0,
                levels: vec![PairwiseSpec::TruncatedJump(JumpParams::symmetric(0.0, 0.0, 0.0)); levels],
            },
            train: TrainConfig::default(),
            mask_hidden: true,
        }
    }
}

/// Disparity map with NaN at pixels that have no visible match.
pub fn visible_disparity(disparity: &Plane<f64>, visible: &Plane<bool>) -> Plane<f64> {
    Plane::from_fn(disparity.height(), disparity.width(), |y, x| {
        if visible.at(y, x) {
            disparity.at(y, x)
        } else {
            f64::NAN
        }
    })
}

/// Trains on one synthetic pair and reports the loss curve.
pub fn training_reduction(cfg: &TrainingConfig) -> Result<TrainingReport> {
    let scene = stereo_scene(&cfg.scene)?;
    let inputs = StereoInputOptions {
        max_disp: cfg.scene.max_disp,
        ..cfg.inputs.clone()
    };
    let gt = if cfg.mask_hidden {
        visible_disparity(&scene.disparity, &scene.visible)
    } else {
        scene.disparity.clone()
    };
    let sample = stereo_sample(&scene.left, &scene.right, Some(&gt), &inputs)?;
    let out = train_toy(&cfg.init, &[sample], &cfg.train)?;
    let first = out.losses[0];
    let last = *out.losses.last().expect("at least one step");
    Ok(TrainingReport {
        ratio: last / first,
        losses: out.losses,
        params: out.params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereoOrderingConfig {
    pub scene: StereoSceneConfig,
    /// Scenes used to fit the parameters of each BP variant.
    pub train_scenes: usize,
    /// Held-out scenes the error is measured on.
    pub test_scenes: usize,
    pub inputs: StereoInputOptions,
    pub init_temperature: f64,
    pub init_jump: JumpParams,
    pub train: TrainConfig,
    /// Train and score only on pixels whose match is visible.
    pub mask_hidden: bool,
}

impl Default for StereoOrderingConfig {
    fn default() -> Self {
        Self {
            scene: StereoSceneConfig {
                noise: 0.1,
                texture_block: 2,
                contrast: 0.2,
                ..StereoSceneConfig::default()
            },
            train_scenes: 2,
            test_scenes: 6,
            inputs: StereoInputOptions {
                feature_noise: 0.1,
                ..StereoInputOptions::default()
            },
            init_temperature: 1.0,
            init_jump: JumpParams::symmetric(0.5, 1.0, 2.0),
            train: TrainConfig {
                learning_rate: 0.1,
                steps: 100,
                ..TrainConfig::default()
            },
            mask_hidden: true,
        }
    }
}

/// Mean bad1 (percent) of each method over the test scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereoOrdering {
    pub wta: f64,
    pub bp: f64,
    pub bp_ms: f64,
    pub bp_params: ModelParams,
    pub ms_params: ModelParams,
}

fn labels_as_reals(p: &Plane<usize>) -> Plane<f64> {
    p.map(|&v| v as f64)
}

fn scene_samples(cfg: &StereoOrderingConfig, first_seed: u64, count: usize) -> Result<Vec<(TrainSample, Plane<f64>)>> {
    (0..count)
        .map(|i| {
            let seed = first_seed.wrapping_add(i as u64);
            let scene = stereo_scene(&StereoSceneConfig {
                seed,
                ..cfg.scene.clone()
            })?;
            let inputs = StereoInputOptions {
                max_disp: cfg.scene.max_disp,
                seed,
                ..cfg.inputs.clone()
            };
            let gt = if cfg.mask_hidden {
                visible_disparity(&scene.disparity, &scene.visible)
            } else {
                scene.disparity
            };
            let sample = stereo_sample(&scene.left, &scene.right, Some(&gt), &inputs)?;
            Ok((sample, gt))
        })
        .collect()
}

fn finest_only(s: &TrainSample) -> TrainSample {
    TrainSample {
        levels: vec![s.levels.last().expect("at least one level").clone()],
        gt_disparity: s.gt_disparity.clone(),
    }
}

/// Compares winner-takes-all on the finest matching distributions, single
/// level sweep BP, and the coarse-to-fine hierarchy on synthetic scenes.
/// Both BP variants start from the same parameters and are trained with
/// [`train_toy`] on their own inputs before testing.
pub fn stereo_ordering(cfg: &StereoOrderingConfig) -> Result<StereoOrdering> {
    let levels = cfg.inputs.levels;
    let train = scene_samples(cfg, cfg.scene.seed, cfg.train_scenes)?;
    let test = scene_samples(cfg, cfg.scene.seed.wrapping_add(1_000_000), cfg.test_scenes)?;
    let jump = PairwiseSpec::TruncatedJump(cfg.init_jump.clone());

    let bp_init = ModelParams::new(cfg.init_temperature, vec![jump.clone()])?;
    let bp_train: Vec<TrainSample> = train.iter().map(|(s, _)| finest_only(s)).collect();
    let bp_params = train_toy(&bp_init, &bp_train, &cfg.train)?.params;

    let ms_init = ModelParams::new(cfg.init_temperature, vec![jump; levels])?;
    let ms_train: Vec<TrainSample> = train.into_iter().map(|(s, _)| s).collect();
    let ms_params = train_toy(&ms_init, &ms_train, &cfg.train)?.params;

    let (mut wta_err, mut bp_err, mut ms_err) = (0.0, 0.0, 0.0);
    for (sample, gt) in &test {
        let fine = finest_only(sample);
        wta_err += disparity_metrics(&labels_as_reals(&wta(&fine.levels[0].q)), gt)?.bad1;
        let tape = run_model(&bp_params, &fine.levels, BpOptions::default())?;
        bp_err += disparity_metrics(&labels_as_reals(&wta(tape.finest())), gt)?.bad1;
        let tape = run_model(&ms_params, &sample.levels, BpOptions::default())?;
        ms_err += disparity_metrics(&labels_as_reals(&wta(tape.finest())), gt)?.bad1;
    }
    let n = cfg.test_scenes as f64;
    Ok(StereoOrdering {
        wta: wta_err / n,
        bp: bp_err / n,
        bp_ms: ms_err / n,
        bp_params,
        ms_params,
    })
}

/// Names accepted by [`run_check`], in acceptance order.
pub const CHECK_SUITES: [&str; 10] = [
    "chain",
    "cross_tree",
    "gradcheck",
    "tbca",
    "stereo",
    "segmentation",
    "sandwich",
    "complexity",
    "determinism",
    "sgm",
];

pub const EXACT_TOLERANCE: f64 = 1e-9;
pub const CHAIN_SECONDS: f64 = 10.0;
pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_SECONDS: f64 = 120.0;
pub const MONOTONE_TOLERANCE: f64 = 1e-9;
pub const ORDERING_GAP: f64 = 1.0;
pub const TRAINING_RATIO: f64 = 0.5;
pub const SEGMENTATION_REDUCTION: f64 = 0.3;
pub const SANDWICH_TOLERANCE: f64 = 1e-12;
pub const JUMP_SLOPE_MAX: f64 = 1.3;
pub const MATRIX_SLOPE_MIN: f64 = 1.7;
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;
pub const SGM_TOLERANCE: f64 = 1e-12;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub suite: String,
    pub passed: bool,
    pub detail: String,
}

/// Runs one suite with the acceptance sizes and thresholds.
pub fn run_check(name: &str) -> Result<CheckLine> {
    let (passed, detail) = match name {
        "chain" => {
            let r = chain_exactness(200, 1)?;
            (
                r.max_deviation <= EXACT_TOLERANCE && r.argmax_mismatches == 0 && r.seconds < CHAIN_SECONDS,
                format!(
                    "max dev {:.3e}, {} argmax mismatches, {:.2}s",
                    r.max_deviation, r.argmax_mismatches, r.seconds
                ),
            )
        }
        "cross_tree" => {
            let r = cross_tree_equivalence(100, 2)?;
            (
                r.max_deviation <= EXACT_TOLERANCE && r.argmax_mismatches == 0,
                format!(
                    "max dev {:.3e}, {} argmax mismatches",
                    r.max_deviation, r.argmax_mismatches
                ),
            )
        }
        "gradcheck" => {
            let r = gradcheck_suite(50, GRADCHECK_STEP, 3)?;
            let worst = r
                .entries
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                .expect("operations");
            (
                r.max_rel_error() <= GRADCHECK_TOLERANCE && r.seconds < GRADCHECK_SECONDS,
                format!(
                    "max rel err {:.3e} ({}), {:.1}s",
                    worst.max_rel_error, worst.operation, r.seconds
                ),
            )
        }
        "tbca" => {
            let r = tbca_monotonicity(50, 20, 4)?;
            (
                r.worst_decrease <= MONOTONE_TOLERANCE,
                format!("worst dual decrease {:.3e}", r.worst_decrease),
            )
        }
        "stereo" => {
            let o = stereo_ordering(&StereoOrderingConfig::default())?;
            let t = training_reduction(&TrainingConfig::default())?;
            (
                o.wta - o.bp >= ORDERING_GAP && o.bp - o.bp_ms >= ORDERING_GAP && t.ratio <= TRAINING_RATIO,
                format!(
                    "bad1 wta {:.2} bp {:.2} bp+ms {:.2}; training loss ratio {:.3}",
                    o.wta, o.bp, o.bp_ms, t.ratio
                ),
            )
        }
        "segmentation" => {
            let r = segmentation_smoothing(&SegmentationConfig::default())?;
            (
                r.relative_reduction >= SEGMENTATION_REDUCTION,
                format!(
                    "error {:.2}% -> {:.2}%, reduction {:.3}",
                    r.input_error, r.bp_error, r.relative_reduction
                ),
            )
        }
        "sandwich" => {
            let r = smax_sandwich(100_000, 5);
            (
                r.min_lower_slack >= -SANDWICH_TOLERANCE && r.min_upper_slack >= -SANDWICH_TOLERANCE,
                format!("slacks {:.3e} / {:.3e}", r.min_lower_slack, r.min_upper_slack),
            )
        }
        "complexity" => {
            let r = message_timing(&[16, 32, 64, 128], 64, 7, 6)?;
            (
                r.jump_slope < JUMP_SLOPE_MAX && r.matrix_slope > MATRIX_SLOPE_MIN,
                format!("slopes jump {:.2} matrix {:.2}", r.jump_slope, r.matrix_slope),
            )
        }
        "determinism" => {
            let r = normalization_and_determinism(50, 7)?;
            (
                r.max_belief_diff <= NORMALIZATION_TOLERANCE && r.deterministic,
                format!(
                    "normalization diff {:.3e}, bit-identical {}",
                    r.max_belief_diff, r.deterministic
                ),
            )
        }
        "sgm" => {
            let r = sgm_chain_identity(100, 8)?;
            (r.max_diff <= SGM_TOLERANCE, format!("max diff {:.3e}", r.max_diff))
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown suite {other:?}; expected one of {}",
                CHECK_SUITES.join(", ")
            )))
        }
    };
    Ok(CheckLine {
        suite: name.to_string(),
        passed,
        detail,
    })
}
