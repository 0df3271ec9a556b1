use gridbp::learning::ModelParams;
use gridbp::pipeline::{self, Algo, FlowOptions, PairwiseKind, StereoOptions};
use gridbp::{CompatMatrix, GridShape, Plane, Volume};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;

fn py_err(e: gridbp::Error) -> PyErr {
    match e {
        gridbp::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn plane(rows: Rows, what: &str) -> PyResult<Plane<f64>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err(format!("{what}: rows differ in length")));
    }
    Plane::from_vec(h, w, rows.concat()).map_err(py_err)
}

fn rows<T: Copy>(p: &Plane<T>) -> Vec<Vec<T>> {
    p.data().chunks(p.width().max(1)).map(<[T]>::to_vec).collect()
}

fn parse<T: serde::de::DeserializeOwned>(name: &str, what: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_owned()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {name:?}")))
}

fn params(json: Option<&str>, kind: &str, counts: &[usize]) -> PyResult<ModelParams> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(pipeline::default_params(
            parse::<PairwiseKind>(kind, "pairwise kind")?,
            counts,
        )),
    }
}

/// Default parameters as JSON, one pairwise model per level.
#[pyfunction]
#[pyo3(signature = (label_counts, pairwise="jump"))]
fn default_params(label_counts: Vec<usize>, pairwise: &str) -> PyResult<String> {
    let p = pipeline::default_params(parse(pairwise, "pairwise kind")?, &label_counts);
    serde_json::to_string_pretty(&p).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Left-view disparity of a rectified pair given as lists of rows in [0, 1].
#[pyfunction]
#[pyo3(signature = (left, right, max_disp=15, levels=1, algo="bp", pairwise="jump", params=None, refine_tau=3, census_window=5, beta=None))]
#[allow(clippy::too_many_arguments)]
fn estimate_disparity(
    py: Python<'_>,
    left: Rows,
    right: Rows,
    max_disp: usize,
    levels: usize,
    algo: &str,
    pairwise: &str,
    params: Option<&str>,
    refine_tau: usize,
    census_window: usize,
    beta: Option<f64>,
) -> PyResult<Rows> {
    let (left, right) = (plane(left, "left")?, plane(right, "right")?);
    let opts = StereoOptions {
        max_disp,
        levels,
        algo: parse::<Algo>(algo, "algorithm")?,
        refine_tau,
        census_window,
        beta,
    };
    let p = self::params(params, pairwise, &opts.label_counts().map_err(py_err)?)?;
    let d = py
        .detach(|| pipeline::estimate_disparity(&left, &right, &p, &opts))
        .map_err(py_err)?;
    Ok(rows(&d))
}

/// Horizontal and vertical flow from `first` to `second`.
#[pyfunction]
#[pyo3(signature = (first, second, radius=4, algo="bp", pairwise="jump", params=None, refine_tau=3, census_window=5, beta=None))]
#[allow(clippy::too_many_arguments)]
fn estimate_flow(
    py: Python<'_>,
    first: Rows,
    second: Rows,
    radius: usize,
    algo: &str,
    pairwise: &str,
    params: Option<&str>,
    refine_tau: usize,
    census_window: usize,
    beta: Option<f64>,
) -> PyResult<(Rows, Rows)> {
    let (first, second) = (plane(first, "first")?, plane(second, "second")?);
    let opts = FlowOptions {
        radius,
        algo: parse::<Algo>(algo, "algorithm")?,
        refine_tau,
        census_window,
        beta,
    };
    let p = self::params(params, pairwise, &[2 * radius + 1])?;
    let [u1, u2] = py
        .detach(|| pipeline::estimate_flow(&first, &second, &p, &opts))
        .map_err(py_err)?;
    Ok((rows(&u1), rows(&u2)))
}

/// Class labels after smoothing `probs[y][x][class]` with compatibility
/// `matrix[s][t]`, used for both axes.
#[pyfunction]
#[pyo3(signature = (probs, matrix, temperature=1.0))]
fn segment(py: Python<'_>, probs: Vec<Rows>, matrix: Rows, temperature: f64) -> PyResult<Vec<Vec<usize>>> {
    let h = probs.len();
    let w = probs.first().map_or(0, Vec::len);
    let l = matrix.len();
    if probs.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("probs: rows differ in length"));
    }
    let shape = GridShape::new(h, w, l).map_err(py_err)?;
    let data: Vec<f64> = probs.into_iter().flatten().flatten().collect();
    let vol = Volume::from_vec(shape, data).map_err(py_err)?;
    let m = matrix.concat();
    let m = CompatMatrix::new(l, m.clone(), m).map_err(py_err)?;
    let labels = py
        .detach(|| pipeline::segment(&vol, &m, temperature, None))
        .map_err(py_err)?;
    Ok(rows(&labels))
}

/// Runs one named self-check and returns `(passed, detail)`.
#[pyfunction]
fn run_check(py: Python<'_>, suite: &str) -> PyResult<(bool, String)> {
    let line = py.detach(|| gridbp::suites::run_check(suite)).map_err(py_err)?;
    Ok((line.passed, line.detail))
}

#[pymodule]
fn gridbp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_params, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_disparity, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_flow, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(run_check, m)?)?;
    m.add("CHECK_SUITES", gridbp::suites::CHECK_SUITES.to_vec())?;
    Ok(())
}
