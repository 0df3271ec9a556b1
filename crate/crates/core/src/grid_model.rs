//! Grid CRF data types and pairwise-score evaluation.
//!
//! A model lives on a 4-connected `height × width` pixel grid with `labels`
//! discrete states per pixel. Scores follow the "higher is better" convention:
//! unary scores `g` carry data evidence, pairwise scores `f` are added for
//! every grid edge. Edges are implicit and never stored.
//!
//! Volumes are stored row-major as `[(y * width + x) * labels + s]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub labels: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize, labels: usize) -> Result<Self> {
        if height == 0 || width == 0 || labels == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {height}x{width}x{labels}"
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.labels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn offset(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * self.labels
    }

    pub fn with_labels(&self, labels: usize) -> Self {
        Self { labels, ..*self }
    }
}

/// A dense `height × width` scalar field (images, weights, label maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Plane<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Plane<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, y: usize, x: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Plane<U> {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_size<U>(&self, other: &Plane<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl<T: Copy> Plane<T> {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }
}

/// Per-pixel per-label real values: unary scores, messages, log-beliefs.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: GridShape,
    data: Vec<f64>,
}

/// Unary scores `g`.
pub type UnaryVolume = Volume;
/// Log-domain messages for one sweep direction.
pub type MessageField = Volume;

impl Volume {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "volume {}x{}x{} needs {} values, got {}",
                shape.height,
                shape.width,
                shape.labels,
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: GridShape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for y in 0..shape.height {
            for x in 0..shape.width {
                for s in 0..shape.labels {
                    data.push(f(y, x, s));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, s: usize) -> f64 {
        self.data[self.shape.offset(y, x) + s]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, s: usize, v: f64) {
        let o = self.shape.offset(y, x);
        self.data[o + s] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = self.shape.offset(y, x);
        &self.data[o..o + self.shape.labels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = self.shape.offset(y, x);
        let l = self.shape.labels;
        &mut self.data[o..o + l]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.shape.labels)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn check_shape(&self, shape: GridShape, what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "{what}: expected {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Volume) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn dot(&self, other: &Volume) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Volume) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-pixel label distributions; every row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefVolume(Volume);

impl BeliefVolume {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    /// Wraps `probs`, checking non-negativity and row normalization.
    pub fn new(probs: Volume) -> Result<Self> {
        for (i, row) in probs.pixels().enumerate() {
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "belief row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE * probs.shape().labels as f64 {
                return Err(Error::InvalidArgument(format!("belief row {i} sums to {sum}")));
            }
        }
        Ok(Self(probs))
    }

    pub(crate) fn new_unchecked(probs: Volume) -> Self {
        Self(probs)
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn shape(&self) -> GridShape {
        self.0.shape()
    }
}

impl std::ops::Deref for BeliefVolume {
    type Target = Volume;

    fn deref(&self) -> &Volume {
        &self.0
    }
}

/// Maximizing labels recorded by a DP pass, stored like a [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxRecord {
    shape: GridShape,
    data: Vec<u32>,
}

impl ArgmaxRecord {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            data: vec![0; shape.len()],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, t: usize) -> usize {
        self.data[self.shape.offset(y, x) + t] as usize
    }
}

/// Direction in which a message travels, from sender to receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn index(self) -> usize {
        match self {
            Direction::Left => 0,
            Direction::Right => 1,
            Direction::Up => 2,
            Direction::Down => 3,
        }
    }

    pub fn is_horizontal(self) -> bool {
        matches!(self, Direction::Left | Direction::Right)
    }

    /// True when the sender is the left (or upper) end of the edge.
    pub fn is_forward(self) -> bool {
        matches!(self, Direction::Right | Direction::Down)
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }

    /// Receiver of a message sent from `(y, x)`, if it lies on the grid.
    pub fn step(self, shape: GridShape, y: usize, x: usize) -> Option<(usize, usize)> {
        match self {
            Direction::Left => x.checked_sub(1).map(|x| (y, x)),
            Direction::Right => (x + 1 < shape.width).then_some((y, x + 1)),
            Direction::Up => y.checked_sub(1).map(|y| (y, x)),
            Direction::Down => (y + 1 < shape.height).then_some((y + 1, x)),
        }
    }
}

/// Number of penalty bins of the truncated jump model.
pub const JUMP_BINS: usize = 5;

/// Truncated, possibly asymmetric jump penalties (stored as non-negative
/// magnitudes, applied as negative scores).
///
/// The label difference is oriented along the grid axis:
/// `delta = label(right or lower pixel) - label(left or upper pixel)`, so an
/// edge scores the same whichever way a message crosses it. Positive deltas
/// use the `*_pos` penalties, `|delta| >= 3` uses `p3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpParams {
    pub p1_pos: f64,
    pub p1_neg: f64,
    pub p2_pos: f64,
    pub p2_neg: f64,
    pub p3: f64,
    /// Optional per-pixel edge weights indexed by [`Direction::index`] and
    /// the sending pixel.
    #[serde(skip)]
    pub weights: Option<[Plane<f64>; 4]>,
}

impl JumpParams {
    pub fn new(p1_pos: f64, p1_neg: f64, p2_pos: f64, p2_neg: f64, p3: f64) -> Self {
        Self {
            p1_pos,
            p1_neg,
            p2_pos,
            p2_neg,
            p3,
            weights: None,
        }
    }

    pub fn symmetric(p1: f64, p2: f64, p3: f64) -> Self {
        Self::new(p1, p1, p2, p2, p3)
    }

    pub fn with_weights(mut self, weights: [Plane<f64>; 4]) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn bins(&self) -> [f64; JUMP_BINS] {
        [self.p1_pos, self.p1_neg, self.p2_pos, self.p2_neg, self.p3]
    }

    pub fn set_bins(&mut self, bins: [f64; JUMP_BINS]) {
        self.p1_pos = bins[0];
        self.p1_neg = bins[1];
        self.p2_pos = bins[2];
        self.p2_neg = bins[3];
        self.p3 = bins[4];
    }

    /// Bin index for an oriented label difference; `None` for zero jumps.
    #[inline]
    pub fn bin(delta: i64) -> Option<usize> {
        match delta {
            0 => None,
            1 => Some(0),
            -1 => Some(1),
            2 => Some(2),
            -2 => Some(3),
            _ => Some(4),
        }
    }

    /// Penalty magnitude for an oriented label difference.
    #[inline]
    pub fn theta(&self, delta: i64) -> f64 {
        match delta {
            0 => 0.0,
            1 => self.p1_pos,
            -1 => self.p1_neg,
            2 => self.p2_pos,
            -2 => self.p2_neg,
            _ => self.p3,
        }
    }

    #[inline]
    pub fn weight(&self, y: usize, x: usize, dir: Direction) -> f64 {
        match &self.weights {
            Some(w) => w[dir.index()].at(y, x),
            None => 1.0,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.bins().iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(
                "jump penalties must be finite and non-negative".into(),
            ));
        }
        validate_weights(&self.weights, height, width)
    }

    pub fn clamp_non_negative(&mut self) {
        let mut b = self.bins();
        for v in &mut b {
            *v = v.max(0.0);
        }
        self.set_bins(b);
    }
}

fn validate_weights(weights: &Option<[Plane<f64>; 4]>, height: usize, width: usize) -> Result<()> {
    if let Some(ws) = weights {
        for w in ws {
            if w.height() != height || w.width() != width {
                return Err(Error::Shape(format!(
                    "edge weights are {}x{}, grid is {height}x{width}",
                    w.height(),
                    w.width()
                )));
            }
            if w.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument(
                    "edge weights must be finite and non-negative".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Expands per-edge weights into the four per-direction arrays so that both
/// messages across an edge see the same weight.
///
/// `horizontal` is `H × (W-1)` (edge between `x` and `x+1`), `vertical` is
/// `(H-1) × W`. Border entries with no receiver are set to 1.
pub fn weights_from_edges(horizontal: &Plane<f64>, vertical: &Plane<f64>) -> Result<[Plane<f64>; 4]> {
    let height = vertical.height() + 1;
    let width = horizontal.width() + 1;
    if horizontal.height() != height || vertical.width() != width {
        return Err(Error::Shape(format!(
            "edge weights {}x{} / {}x{} do not describe one grid",
            horizontal.height(),
            horizontal.width(),
            vertical.height(),
            vertical.width()
        )));
    }
    let left = Plane::from_fn(height, width, |y, x| if x > 0 { horizontal.at(y, x - 1) } else { 1.0 });
    let right = Plane::from_fn(
        height,
        width,
        |y, x| {
            if x + 1 < width {
                horizontal.at(y, x)
            } else {
                1.0
            }
        },
    );
    let up = Plane::from_fn(height, width, |y, x| if y > 0 { vertical.at(y - 1, x) } else { 1.0 });
    let down = Plane::from_fn(
        height,
        width,
        |y, x| {
            if y + 1 < height {
                vertical.at(y, x)
            } else {
                1.0
            }
        },
    );
    Ok([left, right, up, down])
}

/// Edge-aware weights `w = exp(-beta * |I(j) - I(i)|)` from a grayscale image.
pub fn weights_from_image(image: &Plane<f64>, beta: f64) -> [Plane<f64>; 4] {
    let (h, w) = (image.height(), image.width());
    let horizontal = Plane::from_fn(h, w.saturating_sub(1), |y, x| {
        (-beta * (image.at(y, x + 1) - image.at(y, x)).abs()).exp()
    });
    let vertical = Plane::from_fn(h.saturating_sub(1), w, |y, x| {
        (-beta * (image.at(y + 1, x) - image.at(y, x)).abs()).exp()
    });
    weights_from_edges(&horizontal, &vertical).expect("shapes derived from one image")
}

/// Full label-compatibility matrices, one per grid axis.
///
/// `horizontal[s][t]` scores label `s` on the left pixel next to `t` on the
/// right; `vertical[s][t]` scores `s` above `t`. Messages travelling left or
/// up read the transposed entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CompatMatrixRepr", into = "CompatMatrixRepr")]
pub struct CompatMatrix {
    labels: usize,
    horizontal: Vec<f64>,
    vertical: Vec<f64>,
    /// Optional per-pixel edge weights scaling every entry, as for jumps.
    weights: Option<[Plane<f64>; 4]>,
}

#[derive(Serialize, Deserialize)]
struct CompatMatrixRepr {
    horizontal: Vec<Vec<f64>>,
    vertical: Vec<Vec<f64>>,
}

impl TryFrom<CompatMatrixRepr> for CompatMatrix {
    type Error = Error;

    fn try_from(r: CompatMatrixRepr) -> Result<Self> {
        let labels = r.horizontal.len();
        let square = |m: &Vec<Vec<f64>>| m.len() == labels && m.iter().all(|row| row.len() == labels);
        if !square(&r.horizontal) || !square(&r.vertical) {
            return Err(Error::Shape("compatibility matrices must both be L x L".into()));
        }
        CompatMatrix::new(labels, r.horizontal.concat(), r.vertical.concat())
    }
}

impl From<CompatMatrix> for CompatMatrixRepr {
    fn from(m: CompatMatrix) -> Self {
        let rows = |v: &[f64]| v.chunks(m.labels).map(|r| r.to_vec()).collect();
        CompatMatrixRepr {
            horizontal: rows(&m.horizontal),
            vertical: rows(&m.vertical),
        }
    }
}

impl CompatMatrix {
    pub fn new(labels: usize, horizontal: Vec<f64>, vertical: Vec<f64>) -> Result<Self> {
        if labels == 0 || horizontal.len() != labels * labels || vertical.len() != labels * labels {
            return Err(Error::Shape(format!(
                "compatibility matrices must hold {labels}x{labels} entries"
            )));
        }
        if horizontal.iter().chain(&vertical).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("compatibility matrix".into()));
        }
        Ok(Self {
            labels,
            horizontal,
            vertical,
            weights: None,
        })
    }

    pub fn zeros(labels: usize) -> Self {
        Self {
            labels,
            horizontal: vec![0.0; labels * labels],
            vertical: vec![0.0; labels * labels],
            weights: None,
        }
    }

    /// Same matrix on both axes: `diagonal` on matching labels, `off` elsewhere.
    pub fn diagonal(labels: usize, diagonal: f64, off: f64) -> Self {
        let m: Vec<f64> = (0..labels * labels)
            .map(|i| if i / labels == i % labels { diagonal } else { off })
            .collect();
        Self {
            labels,
            horizontal: m.clone(),
            vertical: m,
            weights: None,
        }
    }

    /// Scales the entries of each edge by per-pixel weights, indexed like
    /// [`JumpParams::weights`]. Weights are not serialized.
    pub fn with_weights(mut self, weights: [Plane<f64>; 4]) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn weights(&self) -> Option<&[Plane<f64>; 4]> {
        self.weights.as_ref()
    }

    #[inline]
    pub fn weight(&self, y: usize, x: usize, dir: Direction) -> f64 {
        match &self.weights {
            Some(w) => w[dir.index()].at(y, x),
            None => 1.0,
        }
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn horizontal(&self) -> &[f64] {
        &self.horizontal
    }

    pub fn vertical(&self) -> &[f64] {
        &self.vertical
    }

    pub fn horizontal_mut(&mut self) -> &mut [f64] {
        &mut self.horizontal
    }

    pub fn vertical_mut(&mut self) -> &mut [f64] {
        &mut self.vertical
    }

    pub fn axis(&self, horizontal: bool) -> &[f64] {
        if horizontal {
            &self.horizontal
        } else {
            &self.vertical
        }
    }

    /// Projects entries onto the non-negative orthant.
    pub fn clamp_non_negative(&mut self) {
        for v in self.horizontal.iter_mut().chain(self.vertical.iter_mut()) {
            *v = v.max(0.0);
        }
    }
}

/// Pairwise score model `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseSpec {
    TruncatedJump(JumpParams),
    FullMatrix(CompatMatrix),
}

impl PairwiseSpec {
    /// The same model with per-pixel edge weights attached.
    pub fn with_weights(self, weights: [Plane<f64>; 4]) -> Self {
        match self {
            PairwiseSpec::TruncatedJump(p) => PairwiseSpec::TruncatedJump(p.with_weights(weights)),
            PairwiseSpec::FullMatrix(m) => PairwiseSpec::FullMatrix(m.with_weights(weights)),
        }
    }

    /// The all-zero pairwise model (no interaction).
    pub fn zero() -> Self {
        PairwiseSpec::TruncatedJump(JumpParams::symmetric(0.0, 0.0, 0.0))
    }

    pub fn potts(penalty: f64) -> Self {
        PairwiseSpec::TruncatedJump(JumpParams::symmetric(penalty, penalty, penalty))
    }

    pub fn validate(&self, shape: GridShape) -> Result<()> {
        match self {
            PairwiseSpec::TruncatedJump(p) => p.validate(shape.height, shape.width),
            PairwiseSpec::FullMatrix(m) => {
                if m.labels() != shape.labels {
                    return Err(Error::Shape(format!(
                        "compatibility matrix is {0}x{0} but the volume has {1} labels",
                        m.labels(),
                        shape.labels
                    )));
                }
                validate_weights(&m.weights, shape.height, shape.width)
            }
        }
    }
}

/// Pairwise score for a message sent from `(y, x)` in direction `dir`, with
/// sender label `s` and receiver label `t`.
///
/// Panics on an out-of-range label, since that is a programming error.
pub fn eval_pairwise(spec: &PairwiseSpec, y: usize, x: usize, dir: Direction, s: usize, t: usize) -> f64 {
    match spec {
        PairwiseSpec::TruncatedJump(p) => {
            let w = p.weight(y, x, dir);
            -(w * p.theta(oriented_delta(dir.is_forward(), s, t)))
        }
        PairwiseSpec::FullMatrix(m) => {
            let l = m.labels();
            assert!(s < l && t < l, "label out of range");
            let mat = m.axis(dir.is_horizontal());
            let w = m.weight(y, x, dir);
            if dir.is_forward() {
                w * mat[s * l + t]
            } else {
                w * mat[t * l + s]
            }
        }
    }
}

/// `label(right/lower) - label(left/upper)` for sender label `s`, receiver `t`.
#[inline]
pub fn oriented_delta(forward: bool, s: usize, t: usize) -> i64 {
    if forward {
        t as i64 - s as i64
    } else {
        s as i64 - t as i64
    }
}

/// Temperature `T > 0` scaling probabilities into unary scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Self(t))
        } else {
            Err(Error::InvalidArgument(format!(
                "temperature must be positive and finite, got {t}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(t: f64) -> Result<Self> {
        Temperature::new(t)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// `g = T * q`, elementwise.
pub fn apply_temperature(q: &Volume, t: Temperature) -> UnaryVolume {
    q.scaled(t.value())
}

/// Gradient with respect to the parameters of a [`PairwiseSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum PairwiseGrad {
    Jump {
        /// Gradients in `[p1_pos, p1_neg, p2_pos, p2_neg, p3]`.
        bins: [f64; JUMP_BINS],
        /// Present iff the spec has per-pixel weights.
        weights: Option<[Plane<f64>; 4]>,
    },
    Matrix {
        horizontal: Vec<f64>,
        vertical: Vec<f64>,
    },
}

impl PairwiseGrad {
    pub fn zeros_like(spec: &PairwiseSpec) -> Self {
        match spec {
            PairwiseSpec::TruncatedJump(p) => PairwiseGrad::Jump {
                bins: [0.0; JUMP_BINS],
                weights: p.weights.as_ref().map(|ws| {
                    let z = Plane::filled(ws[0].height(), ws[0].width(), 0.0);
                    [z.clone(), z.clone(), z.clone(), z]
                }),
            },
            PairwiseSpec::FullMatrix(m) => PairwiseGrad::Matrix {
                horizontal: vec![0.0; m.labels() * m.labels()],
                vertical: vec![0.0; m.labels() * m.labels()],
            },
        }
    }

    pub fn add_assign(&mut self, other: &PairwiseGrad) {
        match (self, other) {
            (PairwiseGrad::Jump { bins, weights }, PairwiseGrad::Jump { bins: ob, weights: ow }) => {
                for (a, b) in bins.iter_mut().zip(ob) {
                    *a += b;
                }
                if let (Some(w), Some(ow)) = (weights, ow) {
                    for (p, op) in w.iter_mut().zip(ow) {
                        for (a, b) in p.data_mut().iter_mut().zip(op.data()) {
                            *a += b;
                        }
                    }
                }
            }
            (
                PairwiseGrad::Matrix { horizontal, vertical },
                PairwiseGrad::Matrix {
                    horizontal: oh,
                    vertical: ov,
                },
            ) => {
                for (a, b) in horizontal.iter_mut().zip(oh) {
                    *a += b;
                }
                for (a, b) in vertical.iter_mut().zip(ov) {
                    *a += b;
                }
            }
            _ => panic!("pairwise gradient layouts differ"),
        }
    }

    /// Flattened view in a fixed order (bins, then weights L/R/U/D; or
    /// horizontal then vertical matrix).
    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            PairwiseGrad::Jump { bins, weights } => {
                let mut v = bins.to_vec();
                if let Some(ws) = weights {
                    for w in ws {
                        v.extend_from_slice(w.data());
                    }
                }
                v
            }
            PairwiseGrad::Matrix { horizontal, vertical } => horizontal.iter().chain(vertical).copied().collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.to_flat().iter().all(|v| *v == 0.0)
    }
}

/// Gradients of a scalar loss in the unaries, the pairwise parameters and
/// the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub d_unary: Volume,
    pub d_pairwise: PairwiseGrad,
    pub d_temperature: f64,
}

impl GradBundle {
    pub fn zeros(shape: GridShape, spec: &PairwiseSpec) -> Self {
        Self {
            d_unary: Volume::zeros(shape),
            d_pairwise: PairwiseGrad::zeros_like(spec),
            d_temperature: 0.0,
        }
    }
}
