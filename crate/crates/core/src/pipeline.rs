//! End-to-end estimation from images or probability volumes, shared by
//! the command-line tool and the Python bindings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{
    apply_temperature, weights_from_image, CompatMatrix, JumpParams, PairwiseSpec, Plane, Temperature, Volume,
};
use crate::inference::{read_beliefs, sgm, sweep_bp_forward, wta, BpOptions};
use crate::learning::{refine_basic, run_model, stereo_sample, LevelData, ModelParams, StereoInputOptions};
use crate::matching::{census_features, flow_unaries};
use crate::pyramid::level_labels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    /// Sweep BP, coarse to fine when there are several levels.
    Bp,
    /// Semi-global matching on the finest level.
    Sgm,
    /// Per-pixel argmax of the matching probabilities.
    Wta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseKind {
    Jump,
    Matrix,
}

/// Jump penalties used when no trained parameters are supplied.
pub fn default_jump() -> JumpParams {
    JumpParams::symmetric(0.5, 1.0, 2.0)
}

/// The default jump model written out as a dense `labels × labels` matrix.
pub fn jump_matrix(labels: usize) -> CompatMatrix {
    dense_jump(&default_jump(), labels)
}

/// Unweighted `p` as an equivalent dense matrix.
pub fn dense_jump(p: &JumpParams, labels: usize) -> CompatMatrix {
    // entry [s][t] scores the step t - s along the forward direction
    let m: Vec<f64> = (0..labels * labels)
        .map(|i| -p.theta((i % labels) as i64 - (i / labels) as i64))
        .collect();
    CompatMatrix::new(labels, m.clone(), m).expect("square matrix")
}

/// Temperature 1 and one default pairwise model per level.
pub fn default_params(kind: PairwiseKind, label_counts: &[usize]) -> ModelParams {
    let levels = label_counts
        .iter()
        .map(|&l| match kind {
            PairwiseKind::Jump => PairwiseSpec::TruncatedJump(default_jump()),
            PairwiseKind::Matrix => PairwiseSpec::FullMatrix(jump_matrix(l)),
        })
        .collect();
    ModelParams {
        temperature: 1.0,
        levels,
    }
}

/// Checks that `params` has one model per level and matrices of the
/// right size.
pub fn check_params(params: &ModelParams, label_counts: &[usize]) -> Result<()> {
    params.validate()?;
    if params.levels.len() != label_counts.len() {
        return Err(Error::InvalidArgument(format!(
            "parameters have {} levels, the pyramid has {}",
            params.levels.len(),
            label_counts.len()
        )));
    }
    for (k, (spec, &l)) in params.levels.iter().zip(label_counts).enumerate() {
        if let PairwiseSpec::FullMatrix(m) = spec {
            if m.labels() != l {
                return Err(Error::Shape(format!(
                    "level {k} has {l} labels but its matrix is {0}x{0}",
                    m.labels()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StereoOptions {
    pub max_disp: usize,
    pub levels: usize,
    pub algo: Algo,
    pub refine_tau: usize,
    pub census_window: usize,
    /// Edge-aware weight sharpness; `None` leaves the pairwise model unweighted.
    pub beta: Option<f64>,
}

impl Default for StereoOptions {
    fn default() -> Self {
        Self {
            max_disp: 15,
            levels: 1,
            algo: Algo::Bp,
            refine_tau: 3,
            census_window: 5,
            beta: None,
        }
    }
}

impl StereoOptions {
    pub fn label_counts(&self) -> Result<Vec<usize>> {
        level_labels(self.max_disp + 1, self.levels)
    }
}

/// Integer argmax labels for WTA, otherwise the refined real-valued
/// estimate from the finest beliefs.
fn finest_estimate(params: &ModelParams, levels: &[LevelData], algo: Algo, tau: usize) -> Result<Plane<f64>> {
    let finest = levels.last().expect("at least one level");
    let beliefs = match algo {
        Algo::Wta => return Ok(wta(&finest.q).map(|&l| l as f64)),
        Algo::Bp => run_model(params, levels, BpOptions::default())?.finest().clone(),
        Algo::Sgm => {
            let mut spec = params.levels.last().expect("validated").clone();
            if let Some(w) = &finest.weights {
                spec = spec.with_weights(w.clone());
            }
            let g = apply_temperature(&finest.q, Temperature::new(params.temperature)?);
            read_beliefs(&sgm(&g, &spec, BpOptions::default())?.log_beliefs)
        }
    };
    Ok(refine_basic(&beliefs, tau).0)
}

/// Left-view disparity of a rectified pair.
pub fn estimate_disparity(
    left: &Plane<f64>,
    right: &Plane<f64>,
    params: &ModelParams,
    opts: &StereoOptions,
) -> Result<Plane<f64>> {
    let counts = opts.label_counts()?;
    check_params(params, &counts)?;
    let inputs = StereoInputOptions {
        max_disp: opts.max_disp,
        levels: opts.levels,
        census_window: opts.census_window,
        beta: opts.beta,
        ..StereoInputOptions::default()
    };
    let sample = stereo_sample(left, right, None, &inputs)?;
    finest_estimate(params, &sample.levels, opts.algo, opts.refine_tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowOptions {
    pub radius: usize,
    pub algo: Algo,
    pub refine_tau: usize,
    pub census_window: usize,
    pub beta: Option<f64>,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            radius: 4,
            algo: Algo::Bp,
            refine_tau: 3,
            census_window: 5,
            beta: None,
        }
    }
}

/// Horizontal and vertical flow from `first` to `second`. Each component
/// is solved as its own labelling problem over displacements `-R..=R`.
pub fn estimate_flow(
    first: &Plane<f64>,
    second: &Plane<f64>,
    params: &ModelParams,
    opts: &FlowOptions,
) -> Result<[Plane<f64>; 2]> {
    if !first.same_size(second) {
        return Err(Error::Shape("flow images differ in size".into()));
    }
    check_params(params, &[2 * opts.radius + 1])?;
    let f0 = census_features(first, opts.census_window)?;
    let f1 = census_features(second, opts.census_window)?;
    let (q1, q2) = flow_unaries(&f0, &f1, opts.radius)?;
    let weights = opts.beta.map(|b| weights_from_image(first, b));
    let (h, w) = (first.height(), first.width());
    let component = |q: Volume| -> Result<Plane<f64>> {
        let level = LevelData {
            q,
            weights: weights.clone(),
            gt_labels: Plane::filled(h, w, None),
        };
        let est = finest_estimate(params, std::slice::from_ref(&level), opts.algo, opts.refine_tau)?;
        Ok(est.map(|v| v - opts.radius as f64))
    };
    Ok([component(q1)?, component(q2)?])
}

/// Sweep BP with a compatibility matrix on class probabilities, then
/// per-pixel argmax.
pub fn segment(
    probs: &Volume,
    matrix: &CompatMatrix,
    temperature: f64,
    weights: Option<[Plane<f64>; 4]>,
) -> Result<Plane<usize>> {
    if matrix.labels() != probs.shape().labels {
        return Err(Error::Shape(format!(
            "probabilities have {} classes but the matrix is {1}x{1}",
            probs.shape().labels,
            matrix.labels()
        )));
    }
    let mut m = matrix.clone();
    if let Some(w) = weights {
        m = m.with_weights(w);
    }
    let g = apply_temperature(probs, Temperature::new(temperature)?);
    let tape = sweep_bp_forward(&g, &PairwiseSpec::FullMatrix(m), BpOptions::default())?;
    Ok(wta(&tape.log_beliefs))
}
