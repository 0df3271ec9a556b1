//! Losses, sub-pixel refinement, deep supervision, a gradient-descent
//! trainer over the temperature and pairwise parameters, and error metrics.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{weights_from_image, BeliefVolume, PairwiseGrad, PairwiseSpec, Plane, Temperature, Volume};
use crate::inference::BpOptions;
use crate::matching::{census_features, stereo_unaries};
use crate::pyramid::{build_levels, downsample_labels, hierarchy_backward, level_labels, run_hierarchy, HierarchyTape};
use crate::synth::add_gaussian_noise;

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Lower bound kept on the temperature during training.
pub const MIN_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub huber_delta: f64,
    pub refine_tau: usize,
    pub seed: u64,
    /// Samples per step; all samples when absent.
    pub batch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            steps: 200,
            huber_delta: 1.0,
            refine_tau: 3,
            seed: 0,
            batch_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be positive".into()));
        }
        if !self.huber_delta.is_finite() || self.huber_delta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "huber delta must be positive, got {}",
                self.huber_delta
            )));
        }
        if self.refine_tau == 0 {
            return Err(Error::InvalidArgument("refine tau must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean `-log B_i(gt_i)` over pixels with a label, with its gradient in `B`.
pub fn nll_loss(b: &BeliefVolume, gt: &Plane<Option<usize>>) -> Result<(f64, Volume)> {
    let shape = b.shape();
    if gt.height() != shape.height || gt.width() != shape.width {
        return Err(Error::Shape(format!(
            "ground truth is {}x{}, beliefs are {}x{}",
            gt.height(),
            gt.width(),
            shape.height,
            shape.width
        )));
    }
    if let Some(l) = gt.data().iter().flatten().find(|&&l| l >= shape.labels) {
        return Err(Error::InvalidArgument(format!(
            "ground-truth label {l} outside 0..{}",
            shape.labels
        )));
    }
    let n = gt.data().iter().filter(|l| l.is_some()).count();
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let mut loss = 0.0;
    let mut grad = Volume::zeros(shape);
    for (i, label) in gt.data().iter().enumerate() {
        if let Some(l) = *label {
            let p = b.data()[i * shape.labels + l].max(PROB_FLOOR);
            loss -= p.ln();
            grad.data_mut()[i * shape.labels + l] = -1.0 / (n as f64 * p);
        }
    }
    Ok((loss / n as f64, grad))
}

/// Mean Huber penalty of `y - gt` over pixels with finite ground truth.
pub fn huber_loss(y: &Plane<f64>, gt: &Plane<f64>, delta: f64) -> Result<(f64, Plane<f64>)> {
    if !y.same_size(gt) {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            y.height(),
            y.width(),
            gt.height(),
            gt.width()
        )));
    }
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "huber delta must be positive, got {delta}"
        )));
    }
    let n = gt.data().iter().filter(|v| v.is_finite()).count();
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let nf = n as f64;
    let mut loss = 0.0;
    let mut grad = Plane::filled(y.height(), y.width(), 0.0);
    for ((p, t), g) in y.data().iter().zip(gt.data()).zip(grad.data_mut()) {
        if !t.is_finite() {
            continue;
        }
        let r = p - t;
        if r.abs() <= delta {
            loss += r * r / (2.0 * delta);
            *g = r / delta / nf;
        } else {
            loss += r.abs() - delta / 2.0;
            *g = r.signum() / nf;
        }
    }
    Ok((loss / nf, grad))
}

/// What [`refine_backward`] needs from [`refine_basic`].
#[derive(Debug, Clone)]
pub struct RefineTape {
    labels: usize,
    /// Inclusive label window per pixel.
    windows: Vec<(usize, usize)>,
    sums: Vec<f64>,
    y: Vec<f64>,
}

/// Window average around the most likely label:
/// `y = Σ_{|d - d̂| ≤ τ} d B(d) / Σ_{|d - d̂| ≤ τ} B(d)`, window clipped to the
/// label range.
pub fn refine_basic(b: &BeliefVolume, tau: usize) -> (Plane<f64>, RefineTape) {
    let shape = b.shape();
    let mut windows = Vec::with_capacity(shape.pixels());
    let mut sums = Vec::with_capacity(shape.pixels());
    let mut ys = Vec::with_capacity(shape.pixels());
    for p in b.pixels() {
        let best = (0..p.len()).fold(0, |m, d| if p[d] > p[m] { d } else { m });
        let lo = best.saturating_sub(tau);
        let hi = (best + tau).min(shape.labels - 1);
        let sum: f64 = p[lo..=hi].iter().sum();
        let num: f64 = (lo..=hi).map(|d| d as f64 * p[d]).sum();
        windows.push((lo, hi));
        sums.push(sum);
        ys.push(num / sum);
    }
    let y = Plane::from_vec(shape.height, shape.width, ys.clone()).expect("one value per pixel");
    (
        y,
        RefineTape {
            labels: shape.labels,
            windows,
            sums,
            y: ys,
        },
    )
}

/// Gradient of [`refine_basic`] in the beliefs, holding each window fixed.
pub fn refine_backward(tape: &RefineTape, d_y: &Plane<f64>) -> Result<Volume> {
    if d_y.data().len() != tape.y.len() {
        return Err(Error::Shape("refinement gradient has the wrong size".into()));
    }
    let shape = crate::grid_model::GridShape::new(d_y.height(), d_y.width(), tape.labels)?;
    let mut grad = Volume::zeros(shape);
    for (i, (p, &dy)) in grad.data_mut().chunks_mut(tape.labels).zip(d_y.data()).enumerate() {
        let (lo, hi) = tape.windows[i];
        for d in lo..=hi {
            p[d] = dy * (d as f64 - tape.y[i]) / tape.sums[i];
        }
    }
    Ok(grad)
}

/// Gradients of [`deep_supervised_loss`].
#[derive(Debug, Clone)]
pub struct DeepSupervisionGrad {
    pub d_level_beliefs: Vec<Volume>,
    pub d_refined: Option<Plane<f64>>,
}

/// Refined output and its target for the regression term.
pub struct RefinedTarget<'a> {
    pub y: &'a Plane<f64>,
    pub gt: &'a Plane<f64>,
}

/// Unweighted sum of the per-level NLL losses plus the Huber loss on the
/// refined output when one is given.
pub fn deep_supervised_loss(
    level_beliefs: &[&BeliefVolume],
    level_gt: &[Plane<Option<usize>>],
    refined: Option<RefinedTarget<'_>>,
    cfg: &TrainConfig,
) -> Result<(f64, DeepSupervisionGrad)> {
    if level_beliefs.is_empty() || level_beliefs.len() != level_gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} belief levels for {} ground-truth levels",
            level_beliefs.len(),
            level_gt.len()
        )));
    }
    let mut loss = 0.0;
    let mut d_level_beliefs = Vec::with_capacity(level_beliefs.len());
    for (b, gt) in level_beliefs.iter().zip(level_gt) {
        let (l, g) = nll_loss(b, gt)?;
        loss += l;
        d_level_beliefs.push(g);
    }
    let d_refined = match refined {
        Some(r) => {
            let (l, g) = huber_loss(r.y, r.gt, cfg.huber_delta)?;
            loss += l;
            Some(g)
        }
        None => None,
    };
    Ok((
        loss,
        DeepSupervisionGrad {
            d_level_beliefs,
            d_refined,
        },
    ))
}

/// Learnable model: shared temperature and one pairwise model per level,
/// coarse to fine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub temperature: f64,
    pub levels: Vec<PairwiseSpec>,
}

impl ModelParams {
    pub fn new(temperature: f64, levels: Vec<PairwiseSpec>) -> Result<Self> {
        let p = Self { temperature, levels };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        Temperature::new(self.temperature)?;
        if self.levels.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one level".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        p.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Flat parameter vector: temperature, then each level's pairwise
    /// parameters.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = vec![self.temperature];
        for spec in &self.levels {
            match spec {
                PairwiseSpec::TruncatedJump(p) => v.extend(p.bins()),
                PairwiseSpec::FullMatrix(m) => {
                    v.extend_from_slice(m.horizontal());
                    v.extend_from_slice(m.vertical());
                }
            }
        }
        v
    }

    /// Inverse of [`ModelParams::to_flat`] for a model of the same layout.
    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.to_flat().len() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                v.len(),
                self.to_flat().len()
            )));
        }
        self.temperature = v[0];
        let mut at = 1;
        for spec in &mut self.levels {
            match spec {
                PairwiseSpec::TruncatedJump(p) => {
                    let mut b = [0.0; 5];
                    b.copy_from_slice(&v[at..at + 5]);
                    p.set_bins(b);
                    at += 5;
                }
                PairwiseSpec::FullMatrix(m) => {
                    let n = m.horizontal().len();
                    m.horizontal_mut().copy_from_slice(&v[at..at + n]);
                    m.vertical_mut().copy_from_slice(&v[at + n..at + 2 * n]);
                    at += 2 * n;
                }
            }
        }
        Ok(())
    }
}

/// Per-level inputs of one training example.
#[derive(Debug, Clone)]
pub struct LevelData {
    pub q: Volume,
    /// Per-pixel edge weights for the pairwise model.
    pub weights: Option<[Plane<f64>; 4]>,
    pub gt_labels: Plane<Option<usize>>,
}

/// One training example, coarse to fine.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub levels: Vec<LevelData>,
    /// Real-valued finest-level target for the refined output.
    pub gt_disparity: Option<Plane<f64>>,
}

/// Rounds real labels to the nearest index; non-finite or out-of-range
/// entries become `None`.
pub fn labels_from_map(map: &Plane<f64>, labels: usize) -> Plane<Option<usize>> {
    map.map(|&v| {
        let r = v.round();
        (v.is_finite() && r >= 0.0 && r < labels as f64).then_some(r as usize)
    })
}

/// How [`stereo_sample`] turns an image pair into model inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StereoInputOptions {
    pub max_disp: usize,
    pub levels: usize,
    pub census_window: usize,
    /// Edge weights `exp(-beta |ΔI|)` from the left image when present.
    pub beta: Option<f64>,
    /// Standard deviation of Gaussian noise added to the census features.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for StereoInputOptions {
    fn default() -> Self {
        Self {
            max_disp: 15,
            levels: 3,
            census_window: 5,
            beta: None,
            feature_noise: 0.0,
            seed: 0,
        }
    }
}

/// Builds the multi-level stereo input for a left/right pair: census
/// features on an image pyramid, matching distributions with the label
/// count halved per level, and optionally image-driven edge weights.
pub fn stereo_sample(
    left: &Plane<f64>,
    right: &Plane<f64>,
    gt: Option<&Plane<f64>>,
    opts: &StereoInputOptions,
) -> Result<TrainSample> {
    if !left.same_size(right) {
        return Err(Error::Shape("left and right images differ in size".into()));
    }
    let levels = opts.levels;
    let counts = level_labels(opts.max_disp + 1, levels)?;
    let lefts = build_levels(left, levels)?;
    let rights = build_levels(right, levels)?;
    let mut gts: Vec<Option<Plane<f64>>> = vec![None; levels];
    if let Some(g) = gt {
        if !g.same_size(left) {
            return Err(Error::Shape("ground truth and images differ in size".into()));
        }
        gts[levels - 1] = Some(g.clone());
        for k in (0..levels - 1).rev() {
            let finer = gts[k + 1].as_ref().expect("filled from the finest level");
            gts[k] = Some(downsample_labels(finer)?);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::with_capacity(levels);
    for k in 0..levels {
        let mut f0 = census_features(&lefts[k], opts.census_window)?;
        let mut f1 = census_features(&rights[k], opts.census_window)?;
        add_gaussian_noise(&mut f0, opts.feature_noise, &mut rng)?;
        add_gaussian_noise(&mut f1, opts.feature_noise, &mut rng)?;
        let q = stereo_unaries(&f0, &f1, counts[k] - 1)?;
        let gt_labels = match &gts[k] {
            Some(g) => labels_from_map(g, counts[k]),
            None => Plane::filled(lefts[k].height(), lefts[k].width(), None),
        };
        out.push(LevelData {
            q,
            weights: opts.beta.map(|b| weights_from_image(&lefts[k], b)),
            gt_labels,
        });
    }
    Ok(TrainSample {
        levels: out,
        gt_disparity: gt.cloned(),
    })
}

fn level_specs(params: &ModelParams, levels: &[LevelData]) -> Result<Vec<PairwiseSpec>> {
    if params.levels.len() != levels.len() {
        return Err(Error::InvalidArgument(format!(
            "model has {} levels, input has {}",
            params.levels.len(),
            levels.len()
        )));
    }
    Ok(params
        .levels
        .iter()
        .zip(levels)
        .map(|(spec, level)| match &level.weights {
            Some(w) => spec.clone().with_weights(w.clone()),
            None => spec.clone(),
        })
        .collect())
}

/// Runs the coarse-to-fine model on prepared inputs.
pub fn run_model(params: &ModelParams, levels: &[LevelData], opts: BpOptions) -> Result<HierarchyTape> {
    let specs = level_specs(params, levels)?;
    let q: Vec<Volume> = levels.iter().map(|l| l.q.clone()).collect();
    run_hierarchy(&q, &specs, Temperature::new(params.temperature)?, opts)
}

/// Deep-supervised loss of one sample and its gradient in
/// [`ModelParams::to_flat`] order.
pub fn sample_loss(params: &ModelParams, sample: &TrainSample, cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let tape = run_model(params, &sample.levels, BpOptions::default())?;
    let n = tape.levels.len();
    let beliefs: Vec<&BeliefVolume> = (0..n).map(|k| tape.beliefs(k)).collect();
    let gts: Vec<Plane<Option<usize>>> = sample.levels.iter().map(|l| l.gt_labels.clone()).collect();
    let refined = sample
        .gt_disparity
        .as_ref()
        .map(|gt| (refine_basic(tape.finest(), cfg.refine_tau), gt));
    let target = refined.as_ref().map(|((y, _), gt)| RefinedTarget { y, gt });
    let (loss, grads) = deep_supervised_loss(&beliefs, &gts, target, cfg)?;
    let mut d_beliefs: Vec<Option<Volume>> = grads.d_level_beliefs.into_iter().map(Some).collect();
    if let (Some(((_, rtape), _)), Some(dy)) = (&refined, &grads.d_refined) {
        let d = refine_backward(rtape, dy)?;
        d_beliefs[n - 1]
            .as_mut()
            .expect("every level has a loss")
            .add_assign(&d);
    }
    let hg = hierarchy_backward(&tape, &d_beliefs)?;
    let mut flat = vec![hg.d_temperature];
    for g in &hg.d_pairwise {
        match g {
            PairwiseGrad::Jump { bins, .. } => flat.extend(bins),
            PairwiseGrad::Matrix { .. } => flat.extend(g.to_flat()),
        }
    }
    Ok((loss, flat))
}

fn batch_loss(params: &ModelParams, samples: &[&TrainSample], cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.to_flat().len()];
    for s in samples {
        let (l, g) = sample_loss(params, s, cfg)?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let n = samples.len() as f64;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((loss / n, grad))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Loss at each step, evaluated before that step's update.
    pub losses: Vec<f64>,
}

/// Plain gradient descent on the temperature and pairwise parameters.
/// Pairwise parameters are clamped to be non-negative and the temperature
/// to at least [`MIN_TEMPERATURE`] after every step.
pub fn train_toy(init: &ModelParams, samples: &[TrainSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init.clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&TrainSample> = match cfg.batch_size {
            Some(b) if b < samples.len() => {
                let mut idx = sample(&mut rng, samples.len(), b).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| &samples[i]).collect()
            }
            _ => samples.iter().collect(),
        };
        let (loss, grad) = batch_loss(&params, &batch, cfg)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "training loss or gradient at step {step} (loss {loss}, temperature {})",
                params.temperature
            )));
        }
        log::debug!("step {step}: loss {loss:.6}");
        losses.push(loss);
        let mut flat = params.to_flat();
        for (p, g) in flat.iter_mut().zip(&grad) {
            *p -= cfg.learning_rate * g;
        }
        params.set_flat(&flat)?;
        params.temperature = params.temperature.max(MIN_TEMPERATURE);
        for spec in &mut params.levels {
            match spec {
                PairwiseSpec::TruncatedJump(p) => p.clamp_non_negative(),
                PairwiseSpec::FullMatrix(m) => m.clamp_non_negative(),
            }
        }
    }
    Ok(TrainOutcome { params, losses })
}

/// Disparity error statistics over pixels with finite ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisparityMetrics {
    pub bad1: f64,
    pub bad2: f64,
    pub bad3: f64,
    pub mae: f64,
    pub valid: usize,
}

pub fn disparity_metrics(pred: &Plane<f64>, gt: &Plane<f64>) -> Result<DisparityMetrics> {
    if !pred.same_size(gt) {
        return Err(Error::Shape("prediction and ground truth differ in size".into()));
    }
    let errs: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(_, g)| g.is_finite())
        .map(|(p, g)| (p - g).abs())
        .collect();
    if errs.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let n = errs.len() as f64;
    let bad = |x: f64| 100.0 * errs.iter().filter(|e| **e > x).count() as f64 / n;
    Ok(DisparityMetrics {
        bad1: bad(1.0),
        bad2: bad(2.0),
        bad3: bad(3.0),
        mae: errs.iter().sum::<f64>() / n,
        valid: errs.len(),
    })
}

/// Mean endpoint error over pixels where both ground-truth components are
/// finite.
pub fn flow_epe(pred: [&Plane<f64>; 2], gt: [&Plane<f64>; 2]) -> Result<f64> {
    if !pred[0].same_size(pred[1]) || !pred[0].same_size(gt[0]) || !pred[0].same_size(gt[1]) {
        return Err(Error::Shape("flow components differ in size".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred[0].data().len() {
        let (g1, g2) = (gt[0].data()[i], gt[1].data()[i]);
        if g1.is_finite() && g2.is_finite() {
            sum += (pred[0].data()[i] - g1).hypot(pred[1].data()[i] - g2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_model::{GridShape, JumpParams};
    use crate::inference::{read_beliefs, softmax_backward};
    use crate::oracle::{fd_gradcheck, perturb_ties, random_directions};
    use proptest::prelude::*;
    use rand::Rng;

    fn belief(l: usize, p: &[f64]) -> BeliefVolume {
        BeliefVolume::new(Volume::from_vec(GridShape::new(1, 1, l).unwrap(), p.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn nll_examples() {
        let gt = Plane::filled(1, 1, Some(0));
        assert_eq!(nll_loss(&belief(2, &[1.0, 0.0]), &gt).unwrap().0, 0.0);
        let (l, g) = nll_loss(&belief(2, &[0.5, 0.5]), &gt).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.data(), &[-2.0, 0.0]);
        assert!(matches!(
            nll_loss(&belief(2, &[0.5, 0.5]), &Plane::filled(1, 1, None)),
            Err(Error::NoValidPixels)
        ));
        let (l0, _) = nll_loss(&belief(2, &[0.0, 1.0]), &gt).unwrap();
        assert!((l0 + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn nll_gradient_through_read_beliefs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let shape = GridShape::new(2, 2, 3).unwrap();
        let x0: Vec<f64> = (0..shape.len()).map(|_| rng.gen::<f64>() * 2.0).collect();
        let gt = Plane::from_vec(2, 2, vec![Some(0), Some(2), None, Some(1)]).unwrap();
        let f = |x: &[f64]| {
            let b = read_beliefs(&Volume::from_vec(shape, x.to_vec())?);
            Ok(nll_loss(&b, &gt)?.0)
        };
        let b = read_beliefs(&Volume::from_vec(shape, x0.clone()).unwrap());
        let (_, db) = nll_loss(&b, &gt).unwrap();
        let grad = softmax_backward(&b, &db);
        let dirs = random_directions(x0.len(), 8, &mut rng);
        let err = fd_gradcheck(f, &x0, grad.data(), &dirs, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn huber_examples() {
        let gt = Plane::filled(1, 1, 0.0);
        let at = |r: f64| huber_loss(&Plane::filled(1, 1, r), &gt, 1.0).unwrap();
        assert_eq!(at(0.0).0, 0.0);
        assert_eq!(at(0.5).0, 0.125);
        assert_eq!(at(2.0).0, 1.5);
        assert_eq!(at(1.0).1.at(0, 0), 1.0);
        assert_eq!(at(1.0 + 1e-12).1.at(0, 0), 1.0);
        assert_eq!(at(-3.0).1.at(0, 0), -1.0);
        let masked = Plane::from_vec(1, 2, vec![f64::NAN, 0.0]).unwrap();
        let (l, g) = huber_loss(&Plane::from_vec(1, 2, vec![9.0, 0.5]).unwrap(), &masked, 1.0).unwrap();
        assert_eq!(l, 0.125);
        assert_eq!(g.data(), &[0.0, 0.5]);
        assert!(huber_loss(&gt, &Plane::filled(1, 1, f64::NAN), 1.0).is_err());
        assert!(huber_loss(&gt, &gt, 0.0).is_err());
    }

    #[test]
    fn huber_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = Plane::from_fn(3, 3, |_, _| rng.gen::<f64>() * 4.0);
        let y0: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() * 4.0).collect();
        let f = |y: &[f64]| Ok(huber_loss(&Plane::from_vec(3, 3, y.to_vec())?, &gt, 0.7)?.0);
        let (_, g) = huber_loss(&Plane::from_vec(3, 3, y0.clone()).unwrap(), &gt, 0.7).unwrap();
        let dirs = random_directions(9, 6, &mut rng);
        assert!(fd_gradcheck(f, &y0, g.data(), &dirs, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn refine_examples() {
        let mut one_hot = vec![0.0; 8];
        one_hot[5] = 1.0;
        assert_eq!(refine_basic(&belief(8, &one_hot), 3).0.at(0, 0), 5.0);
        let mut pair = vec![0.0; 8];
        pair[4] = 0.5;
        pair[5] = 0.5;
        assert_eq!(refine_basic(&belief(8, &pair), 3).0.at(0, 0), 4.5);
        assert_eq!(refine_basic(&belief(8, &[0.125; 8]), 3).0.at(0, 0), 1.5);
    }

    #[test]
    fn refine_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shape = GridShape::new(2, 3, 9).unwrap();
        let mut x0 = Volume::from_fn(shape, |_, _, _| rng.gen::<f64>() * 3.0);
        perturb_ties(x0.data_mut(), &mut rng);
        let b = read_beliefs(&x0);
        let (y, tape) = refine_basic(&b, 2);
        let w = Plane::from_fn(2, 3, |_, _| rng.gen::<f64>() - 0.5);
        let loss = |y: &Plane<f64>| y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
        let _ = loss(&y);
        let grad = softmax_backward(&b, &refine_backward(&tape, &w).unwrap());
        let f = |x: &[f64]| {
            let b = read_beliefs(&Volume::from_vec(shape, x.to_vec())?);
            Ok(loss(&refine_basic(&b, 2).0))
        };
        let dirs = random_directions(shape.len(), 8, &mut rng);
        let err = fd_gradcheck(f, x0.data(), grad.data(), &dirs, 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn deep_supervision_sums_components() {
        let cfg = TrainConfig::default();
        let b = belief(2, &[0.5, 0.5]);
        let gt = Plane::filled(1, 1, Some(1));
        let (l, g) = deep_supervised_loss(&[&b], std::slice::from_ref(&gt), None, &cfg).unwrap();
        assert_eq!((l, g.d_level_beliefs[0].clone()), {
            let (l, g) = nll_loss(&b, &gt).unwrap();
            (l, g)
        });
        assert!(g.d_refined.is_none());
        // e^-0.3 and e^-0.5 give NLL 0.3 and 0.5; a residual of 0.2 with delta 0.1 gives Huber 0.15
        let b1 = belief(2, &[(-0.3f64).exp(), 1.0 - (-0.3f64).exp()]);
        let b2 = belief(2, &[(-0.5f64).exp(), 1.0 - (-0.5f64).exp()]);
        let cfg2 = TrainConfig {
            huber_delta: 0.1,
            ..cfg.clone()
        };
        let y = Plane::filled(1, 1, 0.2);
        let zero = Plane::filled(1, 1, 0.0);
        let gt0 = Plane::filled(1, 1, Some(0));
        let (total, _) = deep_supervised_loss(
            &[&b1, &b2],
            &[gt0.clone(), gt0.clone()],
            Some(RefinedTarget { y: &y, gt: &zero }),
            &cfg2,
        )
        .unwrap();
        assert!((total - 0.95).abs() < 1e-12);
        let perfect = belief(2, &[1.0, 0.0]);
        let (z, zg) =
            deep_supervised_loss(&[&perfect], &[gt0], Some(RefinedTarget { y: &zero, gt: &zero }), &cfg).unwrap();
        assert_eq!(z, 0.0);
        assert!(zg.d_level_beliefs[0].data().iter().all(|v| *v == -1.0 || *v == 0.0));
        assert!(zg.d_refined.unwrap().data().iter().all(|v| *v == 0.0));
    }

    fn random_sample(rng: &mut ChaCha8Rng, h: usize, w: usize, labels: &[usize]) -> TrainSample {
        let n = labels.len();
        let levels = labels
            .iter()
            .enumerate()
            .map(|(k, &l)| {
                let f = 1 << (n - 1 - k);
                let shape = GridShape::new(h / f, w / f, l).unwrap();
                let mut raw = Volume::from_fn(shape, |_, _, _| rng.gen::<f64>() * 3.0);
                perturb_ties(raw.data_mut(), rng);
                LevelData {
                    q: read_beliefs(&raw).into_volume(),
                    weights: Some(weights_from_image(&Plane::from_fn(h / f, w / f, |_, _| rng.gen()), 2.0)),
                    gt_labels: Plane::from_fn(h / f, w / f, |_, _| Some(rng.gen_range(0..l))),
                }
            })
            .collect();
        let gt_disparity = Some(Plane::from_fn(h, w, |_, _| {
            rng.gen::<f64>() * (labels[n - 1] - 1) as f64
        }));
        TrainSample { levels, gt_disparity }
    }

    #[test]
    fn sample_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sample = random_sample(&mut rng, 8, 8, &[3, 6]);
        let params = ModelParams::new(
            1.3,
            vec![
                PairwiseSpec::TruncatedJump(JumpParams::new(0.3, 0.2, 0.5, 0.4, 0.9)),
                PairwiseSpec::TruncatedJump(JumpParams::new(0.2, 0.25, 0.6, 0.3, 0.8)),
            ],
        )
        .unwrap();
        let cfg = TrainConfig::default();
        let (_, grad) = sample_loss(&params, &sample, &cfg).unwrap();
        let x0 = params.to_flat();
        let f = |x: &[f64]| {
            let mut p = params.clone();
            p.set_flat(x)?;
            Ok(sample_loss(&p, &sample, &cfg)?.0)
        };
        let mut dirs: Vec<Vec<f64>> = (0..x0.len())
            .map(|i| (0..x0.len()).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        dirs.extend(random_directions(x0.len(), 4, &mut rng));
        let err = fd_gradcheck(f, &x0, &grad, &dirs, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn matrix_model_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut sample = random_sample(&mut rng, 4, 4, &[3]);
        sample.levels[0].weights = None;
        let m = crate::grid_model::CompatMatrix::new(
            3,
            (0..9).map(|_| rng.gen::<f64>()).collect(),
            (0..9).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap();
        let params = ModelParams::new(0.8, vec![PairwiseSpec::FullMatrix(m)]).unwrap();
        let cfg = TrainConfig::default();
        let (_, grad) = sample_loss(&params, &sample, &cfg).unwrap();
        let x0 = params.to_flat();
        let f = |x: &[f64]| {
            let mut p = params.clone();
            p.set_flat(x)?;
            Ok(sample_loss(&p, &sample, &cfg)?.0)
        };
        let dirs = random_directions(x0.len(), 8, &mut rng);
        let err = fd_gradcheck(f, &x0, &grad, &dirs, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let sample = random_sample(&mut rng, 4, 4, &[4]);
        let params = ModelParams::new(1.0, vec![PairwiseSpec::potts(0.3)]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            steps: 5,
            ..TrainConfig::default()
        };
        let out = train_toy(&params, &[sample], &cfg).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.losses.len(), 5);
        assert!(out.losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn single_pixel_temperature_grows() {
        let q = Volume::from_vec(GridShape::new(1, 1, 2).unwrap(), vec![0.7, 0.3]).unwrap();
        let sample = TrainSample {
            levels: vec![LevelData {
                q,
                weights: None,
                gt_labels: Plane::filled(1, 1, Some(0)),
            }],
            gt_disparity: None,
        };
        let params = ModelParams::new(0.5, vec![PairwiseSpec::zero()]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 2.0,
            steps: 300,
            ..TrainConfig::default()
        };
        let out = train_toy(&params, std::slice::from_ref(&sample), &cfg).unwrap();
        assert!(out.losses.windows(2).all(|w| w[1] < w[0]));
        assert!(out.params.temperature > 10.0);
        // the loss is -log sigmoid(0.4 T)
        let t = out.params.temperature;
        let closed = (1.0 + (-0.4 * t).exp()).ln();
        assert!((sample_loss(&out.params, &sample, &cfg).unwrap().0 - closed).abs() < 1e-12);
        assert!(closed < 0.02);
    }

    #[test]
    fn training_rejects_bad_input() {
        let params = ModelParams::new(1.0, vec![PairwiseSpec::zero()]).unwrap();
        assert!(train_toy(&params, &[], &TrainConfig::default()).is_err());
        let bad = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(ModelParams::new(0.0, vec![PairwiseSpec::zero()]).is_err());
    }

    #[test]
    fn params_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let params = ModelParams::new(
            2.5,
            vec![
                PairwiseSpec::potts(0.5),
                PairwiseSpec::FullMatrix(crate::grid_model::CompatMatrix::diagonal(2, 1.0, 0.0)),
            ],
        )
        .unwrap();
        params.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), params);
        fs::write(&path, "{\"temperature\": -1, \"levels\": []}").unwrap();
        let err = ModelParams::load(&path).unwrap_err().to_string();
        assert!(err.contains("p.json"), "{err}");
    }

    #[test]
    fn stereo_sample_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let img = Plane::from_fn(16, 16, |_, _| rng.gen::<f64>());
        let gt = Plane::filled(16, 16, 6.0);
        let opts = StereoInputOptions {
            max_disp: 7,
            levels: 2,
            census_window: 3,
            beta: Some(5.0),
            ..StereoInputOptions::default()
        };
        let s = stereo_sample(&img, &img, Some(&gt), &opts).unwrap();
        assert_eq!(s.levels.len(), 2);
        assert_eq!(s.levels[0].q.shape(), GridShape::new(8, 8, 4).unwrap());
        assert_eq!(s.levels[1].q.shape(), GridShape::new(16, 16, 8).unwrap());
        assert!(s.levels[0].gt_labels.data().iter().all(|l| *l == Some(3)));
        assert!(s.levels[1].gt_labels.data().iter().all(|l| *l == Some(6)));
        assert!(s.levels[1].weights.is_some());
        let odd = StereoInputOptions { max_disp: 6, ..opts };
        assert!(stereo_sample(&img, &img, None, &odd).is_err());
    }

    #[test]
    fn metric_examples() {
        let gt = Plane::from_vec(1, 2, vec![1.0, 4.0]).unwrap();
        let m = disparity_metrics(&gt, &gt).unwrap();
        assert_eq!((m.bad1, m.bad2, m.bad3, m.mae), (0.0, 0.0, 0.0, 0.0));
        let one = Plane::filled(1, 1, 0.0);
        let m = disparity_metrics(&Plane::filled(1, 1, 2.5), &one).unwrap();
        assert_eq!((m.bad1, m.bad2, m.bad3, m.mae), (100.0, 100.0, 0.0, 2.5));
        let epe = flow_epe([&Plane::filled(1, 1, 3.0), &Plane::filled(1, 1, 4.0)], [&one, &one]).unwrap();
        assert_eq!(epe, 5.0);
        assert!(disparity_metrics(&one, &Plane::filled(1, 1, f64::NAN)).is_err());
    }

    proptest! {
        #[test]
        fn refine_stays_in_window(p in proptest::collection::vec(0.01f64..1.0, 2..12), tau in 1usize..4) {
            let s: f64 = p.iter().sum();
            let b = belief(p.len(), &p.iter().map(|v| v / s).collect::<Vec<_>>());
            let (y, tape) = refine_basic(&b, tau);
            let (lo, hi) = tape.windows[0];
            prop_assert!(y.at(0, 0) >= lo as f64 - 1e-12 && y.at(0, 0) <= hi as f64 + 1e-12);
        }

        #[test]
        fn nll_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = GridShape::new(1, 6, 3).unwrap();
            let raw = Volume::from_fn(shape, |_, _, _| rng.gen::<f64>());
            let b = read_beliefs(&raw);
            let gt = Plane::from_fn(1, 6, |_, _| Some(rng.gen_range(0..3)));
            let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
            let pb = BeliefVolume::new(Volume::from_fn(shape, |_, x, s| b.get(0, perm[x], s))).unwrap();
            let pg = Plane::from_fn(1, 6, |_, x| gt.at(0, perm[x]));
            let (a, _) = nll_loss(&b, &gt).unwrap();
            let (c, _) = nll_loss(&pb, &pg).unwrap();
            prop_assert!((a - c).abs() < 1e-12);
        }

        #[test]
        fn bad_is_monotone(errs in proptest::collection::vec(-6.0f64..6.0, 1..20)) {
            let n = errs.len();
            let pred = Plane::from_vec(1, n, errs).unwrap();
            let m = disparity_metrics(&pred, &Plane::filled(1, n, 0.0)).unwrap();
            prop_assert!(m.bad1 >= m.bad2 && m.bad2 >= m.bad3);
        }
    }
}
