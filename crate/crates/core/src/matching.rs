//! Classical unary construction: census features, stereo matching
//! distributions, flow min-projections and CSV probability volumes.
//!
//! Feature maps reuse [`Volume`] with the channel count in the `labels`
//! slot.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid_model::{GridShape, Plane, Volume};

/// Census transform: one channel per neighbour of a `window × window`
/// patch (raster order, centre skipped), 1 where the neighbour is darker
/// than the centre. Borders use clamped indexing.
pub fn census_features(image: &Plane<f64>, window: usize) -> Result<Volume> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "census window must be odd and at least 3, got {window}"
        )));
    }
    let (h, w) = (image.height(), image.width());
    let r = (window / 2) as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&o| o != (0, 0))
        .collect();
    let shape = GridShape::new(h, w, offsets.len())?;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    Ok(Volume::from_fn(shape, |y, x, c| {
        let (dy, dx) = offsets[c];
        let n = image.at(clamp(y as isize + dy, h), clamp(x as isize + dx, w));
        if n < image.at(y, x) {
            1.0
        } else {
            0.0
        }
    }))
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// In-place `softmax(-d)`.
fn softmax_neg(d: &mut [f64]) {
    let mn = d.iter().copied().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for v in d.iter_mut() {
        *v = (mn - *v).exp();
        sum += *v;
    }
    for v in d.iter_mut() {
        *v /= sum;
    }
}

fn check_features(f0: &Volume, f1: &Volume) -> Result<()> {
    if f0.shape() != f1.shape() {
        return Err(Error::Shape(format!(
            "feature maps differ: {:?} vs {:?}",
            f0.shape(),
            f1.shape()
        )));
    }
    f0.ensure_finite("left features")?;
    f1.ensure_finite("right features")
}

/// Stereo matching distributions over disparities `0..=max_disp`:
/// `q(k) = softmax_k(-|f0(y, x) - f1(y, x - k)|_1)`. Disparities reaching
/// outside the image take the largest in-range distance of that pixel.
pub fn stereo_unaries(f0: &Volume, f1: &Volume, max_disp: usize) -> Result<Volume> {
    check_features(f0, f1)?;
    let fs = f0.shape();
    if max_disp == 0 || max_disp >= fs.width {
        return Err(Error::InvalidArgument(format!(
            "max disparity must be in 1..{}, got {max_disp}",
            fs.width
        )));
    }
    let l = max_disp + 1;
    let shape = fs.with_labels(l);
    let mut out = Volume::zeros(shape);
    out.data_mut()
        .par_chunks_mut(fs.width * l)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, q) in row.chunks_mut(l).enumerate() {
                let mut maxd = f64::NEG_INFINITY;
                for (k, v) in q.iter_mut().enumerate().take(x + 1) {
                    *v = l1(f0.pixel(y, x), f1.pixel(y, x - k));
                    maxd = maxd.max(*v);
                }
                for v in q.iter_mut().skip(x + 1) {
                    *v = maxd;
                }
                softmax_neg(q);
            }
        });
    Ok(out)
}

/// Flow matching distributions by min-projection of the
/// `(2R+1)²` window: `q1(u1) = softmax(max_{u2} -d(u1, u2))` and likewise
/// for `q2`, where `u1` is the horizontal and `u2` the vertical
/// displacement. Label `k` stands for displacement `k - R`. The window is
/// streamed; only two `(2R+1)`-vectors are kept per pixel.
pub fn flow_unaries(f0: &Volume, f1: &Volume, radius: usize) -> Result<(Volume, Volume)> {
    check_features(f0, f1)?;
    let fs = f0.shape();
    if radius == 0 || radius >= fs.height.min(fs.width) {
        return Err(Error::InvalidArgument(format!(
            "flow radius must be in 1..{}, got {radius}",
            fs.height.min(fs.width)
        )));
    }
    let n = 2 * radius + 1;
    let r = radius as isize;
    let shape = fs.with_labels(n);
    let mut q1 = Volume::zeros(shape);
    let mut q2 = Volume::zeros(shape);
    q1.data_mut()
        .par_chunks_mut(fs.width * n)
        .zip(q2.data_mut().par_chunks_mut(fs.width * n))
        .enumerate()
        .for_each(|(y, (row1, row2))| {
            let mut best1 = vec![f64::INFINITY; n];
            let mut best2 = vec![f64::INFINITY; n];
            for x in 0..fs.width {
                best1.fill(f64::INFINITY);
                best2.fill(f64::INFINITY);
                let mut maxd = f64::NEG_INFINITY;
                for (j, u2) in (-r..=r).enumerate() {
                    let ty = y as isize + u2;
                    for (i, u1) in (-r..=r).enumerate() {
                        let tx = x as isize + u1;
                        if ty < 0 || tx < 0 || ty >= fs.height as isize || tx >= fs.width as isize {
                            continue;
                        }
                        let d = l1(f0.pixel(y, x), f1.pixel(ty as usize, tx as usize));
                        maxd = maxd.max(d);
                        best1[i] = best1[i].min(d);
                        best2[j] = best2[j].min(d);
                    }
                }
                let fill = |best: &[f64], out: &mut [f64]| {
                    for (o, b) in out.iter_mut().zip(best) {
                        *o = if b.is_finite() { *b } else { maxd };
                    }
                    softmax_neg(out);
                };
                fill(&best1, &mut row1[x * n..(x + 1) * n]);
                fill(&best2, &mut row2[x * n..(x + 1) * n]);
            }
        });
    Ok((q1, q2))
}

/// Tolerance on row sums before a probability row is renormalized.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Parses the CSV probability-volume format: a `H,W,L` header followed by
/// `H·W` rows of `L` comma-separated reals in row-major pixel order.
pub fn parse_probability_volume(text: &str, path: &Path) -> Result<Volume> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file, expected an H,W,L header"))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, format!("bad header {header:?}, expected H,W,L")))?;
    if dims.len() != 3 {
        return Err(Error::format(path, format!("bad header {header:?}, expected H,W,L")));
    }
    let shape = GridShape::new(dims[0], dims[1], dims[2]).map_err(|e| Error::format(path, e.to_string()))?;
    let l = shape.labels;
    let rows = shape.pixels();
    let mut data = Vec::with_capacity(shape.len());
    let mut renormalized = 0usize;
    for row in 0..rows {
        let (lineno, line) = lines.next().ok_or_else(|| {
            Error::format(
                path,
                format!(
                    "missing row {row} (pixel y={}, x={}): file ends after {row} of {rows} rows",
                    row / shape.width,
                    row % shape.width
                ),
            )
        })?;
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("line {}: unparsable number", lineno + 1)))?;
        if vals.len() != l {
            return Err(Error::format(
                path,
                format!("line {}: {} values, expected {l}", lineno + 1, vals.len()),
            ));
        }
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::format(
                path,
                format!("line {}: probabilities must be finite and non-negative", lineno + 1),
            ));
        }
        let sum: f64 = vals.iter().sum();
        if sum <= 0.0 {
            return Err(Error::format(path, format!("line {}: row sums to zero", lineno + 1)));
        }
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            renormalized += 1;
            data.extend(vals.iter().map(|v| v / sum));
        } else {
            data.extend(vals);
        }
    }
    if let Some((lineno, _)) = lines.next() {
        return Err(Error::format(
            path,
            format!("line {}: more than the declared {rows} rows", lineno + 1),
        ));
    }
    if renormalized > 0 {
        log::warn!(
            "{}: renormalized {renormalized} probability rows that did not sum to 1",
            path.display()
        );
    }
    Volume::from_vec(shape, data)
}

pub fn load_probability_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_probability_volume(&text, path)
}

pub fn format_probability_volume(v: &Volume) -> String {
    let s = v.shape();
    let mut out = format!("{},{},{}\n", s.height, s.width, s.labels);
    for row in v.pixels() {
        for (i, p) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{p}").expect("writing to a string");
        }
        out.push('\n');
    }
    out
}

pub fn write_probability_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_probability_volume(v)).map_err(|e| Error::io(path, e))
}
