//! Coarse-to-fine machinery: image pyramids, belief upsampling and the
//! level-by-level combination `g = T (q + B_up)`.
//!
//! Every level halves the resolution and the label count of the one above,
//! so a coarse label `k` sits at fine label `2k`.

use crate::error::{Error, Result};
use crate::grid_model::{BeliefVolume, GridShape, PairwiseGrad, PairwiseSpec, Plane, Temperature, Volume};
use crate::inference::{sweep_bp_backward, sweep_bp_forward, BpOptions, SweepTape};

/// 2×2 average pooling; both dimensions must be even.
pub fn downsample(image: &Plane<f64>) -> Result<Plane<f64>> {
    let (h, w) = (image.height(), image.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot halve a {h}x{w} image")));
    }
    Ok(Plane::from_fn(h / 2, w / 2, |y, x| {
        0.25 * (image.at(2 * y, 2 * x)
            + image.at(2 * y, 2 * x + 1)
            + image.at(2 * y + 1, 2 * x)
            + image.at(2 * y + 1, 2 * x + 1))
    }))
}

/// Image pyramid ordered coarse to fine (the input is the last entry).
pub fn build_levels(image: &Plane<f64>, levels: usize) -> Result<Vec<Plane<f64>>> {
    if levels == 0 {
        return Err(Error::InvalidArgument("need at least one pyramid level".into()));
    }
    let factor = 1usize << (levels - 1);
    if !image.height().is_multiple_of(factor) || !image.width().is_multiple_of(factor) {
        return Err(Error::Shape(format!(
            "a {}x{} image cannot form {levels} levels (dimensions must be multiples of {factor})",
            image.height(),
            image.width()
        )));
    }
    let mut out = vec![image.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().expect("non-empty"))?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// Label counts per level, coarse to fine, for `fine_labels` at the finest
/// level.
pub fn level_labels(fine_labels: usize, levels: usize) -> Result<Vec<usize>> {
    if levels == 0 {
        return Err(Error::InvalidArgument("need at least one pyramid level".into()));
    }
    let factor = 1usize << (levels - 1);
    if !fine_labels.is_multiple_of(factor) || fine_labels / factor < 1 {
        return Err(Error::InvalidArgument(format!(
            "{fine_labels} labels cannot be halved over {levels} levels"
        )));
    }
    Ok((0..levels).rev().map(|k| fine_labels >> k).collect())
}

/// Downsamples a real-valued label map (e.g. disparity): valid entries of
/// each 2×2 block are averaged and halved; blocks without a finite entry
/// become NaN.
pub fn downsample_labels(map: &Plane<f64>) -> Result<Plane<f64>> {
    let (h, w) = (map.height(), map.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot halve a {h}x{w} label map")));
    }
    Ok(Plane::from_fn(h / 2, w / 2, |y, x| {
        let vals = [
            map.at(2 * y, 2 * x),
            map.at(2 * y, 2 * x + 1),
            map.at(2 * y + 1, 2 * x),
            map.at(2 * y + 1, 2 * x + 1),
        ];
        let (sum, n) = vals
            .iter()
            .filter(|v| v.is_finite())
            .fold((0.0, 0), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            0.5 * sum / n as f64
        }
    }))
}

/// Interpolation taps `(index, weight)` of fine position `i` on an axis of
/// `coarse` samples.
fn taps(coord: f64, coarse: usize) -> [(usize, f64); 2] {
    let c = coord.clamp(0.0, (coarse - 1) as f64);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(coarse - 1);
    let f = c - i0 as f64;
    [(i0, 1.0 - f), (i1, f)]
}

fn spatial_taps(fine: usize, coarse: usize) -> Vec<[(usize, f64); 2]> {
    (0..fine).map(|i| taps((i as f64 + 0.5) / 2.0 - 0.5, coarse)).collect()
}

fn label_taps(fine: usize, coarse: usize) -> Vec<[(usize, f64); 2]> {
    (0..fine).map(|l| taps(l as f64 / 2.0, coarse)).collect()
}

/// The linear part of belief upsampling: bilinear in space, linear along
/// labels, output shape `(2H, 2W, 2L)`.
pub fn upsample_linear(v: &Volume) -> Volume {
    let c = v.shape();
    let fine = GridShape {
        height: 2 * c.height,
        width: 2 * c.width,
        labels: 2 * c.labels,
    };
    let ty = spatial_taps(fine.height, c.height);
    let tx = spatial_taps(fine.width, c.width);
    let tl = label_taps(fine.labels, c.labels);
    Volume::from_fn(fine, |y, x, l| {
        let mut acc = 0.0;
        for &(yy, wy) in &ty[y] {
            for &(xx, wx) in &tx[x] {
                let row = v.pixel(yy, xx);
                for &(ll, wl) in &tl[l] {
                    acc += wy * wx * wl * row[ll];
                }
            }
        }
        acc
    })
}

/// Transpose of [`upsample_linear`]; `coarse` is the shape of its input.
pub fn upsample_linear_adjoint(d: &Volume, coarse: GridShape) -> Result<Volume> {
    let fine = d.shape();
    if fine.height != 2 * coarse.height || fine.width != 2 * coarse.width || fine.labels != 2 * coarse.labels {
        return Err(Error::Shape(format!("{:?} is not the doubling of {:?}", fine, coarse)));
    }
    let ty = spatial_taps(fine.height, coarse.height);
    let tx = spatial_taps(fine.width, coarse.width);
    let tl = label_taps(fine.labels, coarse.labels);
    let mut out = Volume::zeros(coarse);
    for y in 0..fine.height {
        for x in 0..fine.width {
            let row = d.pixel(y, x);
            for &(yy, wy) in &ty[y] {
                for &(xx, wx) in &tx[x] {
                    let dst = out.pixel_mut(yy, xx);
                    for (l, &g) in row.iter().enumerate() {
                        for &(ll, wl) in &tl[l] {
                            dst[ll] += wy * wx * wl * g;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Values kept by [`upsample_beliefs`] for its backward pass.
#[derive(Debug, Clone)]
pub struct UpsampleTape {
    coarse: GridShape,
    sums: Vec<f64>,
    out: Volume,
}

/// Upsamples beliefs to twice the resolution and label count, then
/// renormalizes every pixel.
pub fn upsample_beliefs(coarse: &BeliefVolume) -> (BeliefVolume, UpsampleTape) {
    let mut u = upsample_linear(coarse.volume());
    let l = u.shape().labels;
    let mut sums = Vec::with_capacity(u.shape().pixels());
    for row in u.data_mut().chunks_mut(l) {
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
        sums.push(s);
    }
    let tape = UpsampleTape {
        coarse: coarse.shape(),
        sums,
        out: u.clone(),
    };
    (BeliefVolume::new_unchecked(u), tape)
}

/// Backward pass of [`upsample_beliefs`].
pub fn upsample_beliefs_backward(tape: &UpsampleTape, d_out: &Volume) -> Result<Volume> {
    d_out.check_shape(tape.out.shape(), "upsampled belief gradient")?;
    let l = d_out.shape().labels;
    let mut du = d_out.clone();
    for ((d, p), s) in du
        .data_mut()
        .chunks_mut(l)
        .zip(tape.out.data().chunks(l))
        .zip(&tape.sums)
    {
        let dot: f64 = d.iter().zip(p).map(|(a, b)| a * b).sum();
        for v in d.iter_mut() {
            *v = (*v - dot) / s;
        }
    }
    upsample_linear_adjoint(&du, tape.coarse)
}

/// `g = T (q + B_up)`.
pub fn combine_level(q: &Volume, b_up: &Volume, t: Temperature) -> Result<Volume> {
    b_up.check_shape(q.shape(), "upsampled beliefs")?;
    let mut g = q.clone();
    g.add_assign(b_up);
    Ok(g.scaled(t.value()))
}

/// One level of a hierarchy run.
#[derive(Debug, Clone)]
pub struct LevelTape {
    /// `q + B_up` (just `q` at the coarsest level).
    pub evidence: Volume,
    pub upsample: Option<UpsampleTape>,
    pub sweep: SweepTape,
}

/// Tape of [`run_hierarchy`], coarse to fine.
#[derive(Debug, Clone)]
pub struct HierarchyTape {
    pub temperature: Temperature,
    pub levels: Vec<LevelTape>,
}

impl HierarchyTape {
    pub fn beliefs(&self, level: usize) -> &BeliefVolume {
        &self.levels[level].sweep.beliefs
    }

    pub fn finest(&self) -> &BeliefVolume {
        self.beliefs(self.levels.len() - 1)
    }
}

/// Sweep BP on every level, coarse to fine, feeding each level's beliefs
/// into the next through [`upsample_beliefs`] and [`combine_level`].
pub fn run_hierarchy(q: &[Volume], specs: &[PairwiseSpec], t: Temperature, opts: BpOptions) -> Result<HierarchyTape> {
    if q.is_empty() || q.len() != specs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probability levels for {} pairwise specs",
            q.len(),
            specs.len()
        )));
    }
    let mut levels: Vec<LevelTape> = Vec::with_capacity(q.len());
    for (k, (qk, spec)) in q.iter().zip(specs).enumerate() {
        let (evidence, upsample) = match levels.last() {
            None => (qk.clone(), None),
            Some(prev) => {
                let (b_up, tape) = upsample_beliefs(&prev.sweep.beliefs);
                b_up.check_shape(qk.shape(), &format!("level {k} probabilities"))?;
                let mut e = qk.clone();
                e.add_assign(&b_up);
                (e, Some(tape))
            }
        };
        let g = evidence.scaled(t.value());
        let sweep = sweep_bp_forward(&g, spec, opts)?;
        levels.push(LevelTape {
            evidence,
            upsample,
            sweep,
        });
    }
    Ok(HierarchyTape { temperature: t, levels })
}

/// Gradients of a hierarchy run.
#[derive(Debug, Clone)]
pub struct HierarchyGrad {
    pub d_temperature: f64,
    /// Per level, coarse to fine.
    pub d_pairwise: Vec<PairwiseGrad>,
    /// Gradient in each level's probabilities `q`.
    pub d_q: Vec<Volume>,
}

/// Backward pass of [`run_hierarchy`]. `d_beliefs[k]` is the loss gradient
/// in level `k`'s beliefs (`None` for levels without a loss).
pub fn hierarchy_backward(tape: &HierarchyTape, d_beliefs: &[Option<Volume>]) -> Result<HierarchyGrad> {
    let n = tape.levels.len();
    if d_beliefs.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} belief gradients for {n} levels",
            d_beliefs.len()
        )));
    }
    let t = tape.temperature.value();
    let mut d_temperature = 0.0;
    let mut d_pairwise = Vec::with_capacity(n);
    let mut d_q = Vec::with_capacity(n);
    let mut carry: Option<Volume> = None;
    for k in (0..n).rev() {
        let level = &tape.levels[k];
        let shape = level.sweep.beliefs.shape();
        let mut db = match &d_beliefs[k] {
            Some(d) => {
                d.check_shape(shape, &format!("level {k} belief gradient"))?;
                d.clone()
            }
            None => Volume::zeros(shape),
        };
        if let Some(c) = carry.take() {
            db.add_assign(&c);
        }
        let gb = sweep_bp_backward(&level.sweep, &db)?;
        d_temperature += gb.d_unary.dot(&level.evidence);
        let de = gb.d_unary.scaled(t);
        if let Some(up) = &level.upsample {
            carry = Some(upsample_beliefs_backward(up, &de)?);
        }
        d_pairwise.push(gb.d_pairwise);
        d_q.push(de);
    }
    d_pairwise.reverse();
    d_q.reverse();
    Ok(HierarchyGrad {
        d_temperature,
        d_pairwise,
        d_q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::read_beliefs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_beliefs(rng: &mut ChaCha8Rng, h: usize, w: usize, l: usize) -> BeliefVolume {
        let shape = GridShape::new(h, w, l).unwrap();
        read_beliefs(&Volume::from_fn(shape, |_, _, _| rng.gen_range(-2.0..2.0)))
    }

    #[test]
    fn pyramid_sizes_and_constants() {
        let img = Plane::filled(8, 8, 0.3);
        let levels = build_levels(&img, 3).unwrap();
        let sizes: Vec<_> = levels.iter().map(|p| (p.height(), p.width())).collect();
        assert_eq!(sizes, vec![(2, 2), (4, 4), (8, 8)]);
        assert!(levels.iter().all(|p| p.data().iter().all(|v| (v - 0.3).abs() < 1e-15)));
        assert_eq!(build_levels(&img, 1).unwrap(), vec![img.clone()]);
        assert!(build_levels(&Plane::filled(6, 8, 0.0), 3).is_err());
        assert_eq!(level_labels(16, 3).unwrap(), vec![4, 8, 16]);
    }

    #[test]
    fn one_hot_upsampling_example() {
        let shape = GridShape::new(1, 1, 2).unwrap();
        let b = BeliefVolume::new(Volume::from_vec(shape, vec![1.0, 0.0]).unwrap()).unwrap();
        let (up, _) = upsample_beliefs(&b);
        for y in 0..2 {
            for x in 0..2 {
                let p = up.pixel(y, x);
                assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
                assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
                assert_eq!(&p[2..], &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn upsampling_keeps_constants_and_normalization() {
        let shape = GridShape::new(3, 2, 4).unwrap();
        let c = Volume::from_fn(shape, |_, _, _| 0.25);
        assert!(upsample_linear(&c).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = random_beliefs(&mut rng, 3, 5, 3);
        let (up, _) = upsample_beliefs(&b);
        for row in up.pixels() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn adjoint_dot_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cs = GridShape::new(3, 4, 3).unwrap();
        let x = Volume::from_fn(cs, |_, _, _| rng.gen_range(-1.0..1.0));
        let fs = GridShape::new(6, 8, 6).unwrap();
        let y = Volume::from_fn(fs, |_, _, _| rng.gen_range(-1.0..1.0));
        let lhs = upsample_linear(&x).dot(&y);
        let rhs = x.dot(&upsample_linear_adjoint(&y, cs).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn combine_level_examples() {
        let shape = GridShape::new(1, 1, 2).unwrap();
        let q = Volume::from_vec(shape, vec![0.1, 0.9]).unwrap();
        let b = Volume::from_vec(shape, vec![0.5, 0.5]).unwrap();
        let g = combine_level(&q, &b, Temperature::new(2.0).unwrap()).unwrap();
        assert!((g.get(0, 0, 0) - 1.2).abs() < 1e-15 && (g.get(0, 0, 1) - 2.8).abs() < 1e-15);
        let z = combine_level(&q, &Volume::zeros(shape), Temperature::new(3.0).unwrap()).unwrap();
        assert_eq!(z, q.scaled(3.0));
    }

    #[test]
    fn single_level_hierarchy_is_plain_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_beliefs(&mut rng, 4, 4, 3).into_volume();
        let t = Temperature::new(1.7).unwrap();
        let spec = PairwiseSpec::potts(0.4);
        let h = run_hierarchy(
            std::slice::from_ref(&q),
            std::slice::from_ref(&spec),
            t,
            BpOptions::default(),
        )
        .unwrap();
        let direct = sweep_bp_forward(&q.scaled(1.7), &spec, BpOptions::default()).unwrap();
        assert_eq!(h.finest().data(), direct.beliefs.data());
    }

    #[test]
    fn two_level_zero_pairwise_composes_softmaxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qc = random_beliefs(&mut rng, 2, 2, 2).into_volume();
        let qf = random_beliefs(&mut rng, 4, 4, 4).into_volume();
        let t = Temperature::new(2.5).unwrap();
        let h = run_hierarchy(
            &[qc.clone(), qf.clone()],
            &[PairwiseSpec::zero(), PairwiseSpec::zero()],
            t,
            BpOptions::default(),
        )
        .unwrap();
        let coarse = read_beliefs(&qc.scaled(2.5));
        let (up, _) = upsample_beliefs(&coarse);
        let mut e = qf.clone();
        e.add_assign(&up);
        let want = read_beliefs(&e.scaled(2.5));
        assert!(h.finest().max_abs_diff(&want) < 1e-12);
    }
}
