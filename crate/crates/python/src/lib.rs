//! Python bindings for the structure losses, the contrastive objective and
//! the gradient checker. Images cross the boundary as flat channel-major
//! lists of `3 * height * width` floats in `[0, 1]`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use sesim::analysis::error_grid;
use sesim::config::{Metric, SesimConfig};
use sesim::contrast::{infonce as infonce_loss, ContrastBatch, NegativeRef, NegativeSource};
use sesim::extractor::{ArchSpec, Extractor};
use sesim::gradcheck::gradcheck_suite;
use sesim::selection::StructureNet;
use sesim::Tensor;

fn err(e: sesim::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn image(data: Vec<f32>, height: usize, width: usize) -> PyResult<Tensor<f32>> {
    Tensor::from_vec([1, 3, height, width], data).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn metric(name: &str) -> PyResult<Metric> {
    match name {
        "cos" => Ok(Metric::Cos),
        "l1" => Ok(Metric::L1),
        _ => Err(PyValueError::new_err(format!("unknown metric {name:?}, expected \"cos\" or \"l1\""))),
    }
}

/// Mean fixed self-similarity error between two images on the first tap of a
/// randomly initialised trunk.
#[pyfunction]
#[pyo3(signature = (x, y, height, width, metric_name="cos", normalize=true, trunk_seed=0))]
fn structure_distance(
    x: Vec<f32>,
    y: Vec<f32>,
    height: usize,
    width: usize,
    metric_name: &str,
    normalize: bool,
    trunk_seed: u64,
) -> PyResult<f64> {
    let (x, y) = (image(x, height, width)?, image(y, height, width)?);
    let cfg = SesimConfig {
        taps: vec!["tapA".into()],
        normalize_features: normalize,
        metric: metric(metric_name)?,
        ..SesimConfig::default()
    };
    let ex = Extractor::<f32>::seeded(ArchSpec::default(), trunk_seed).map_err(err)?;
    Ok(error_grid(&x, &y, &cfg, &StructureNet::fixed(&ex)).map_err(err)?.mean())
}

/// Contrastive loss over rows of queries, positives and per-query negatives.
#[pyfunction]
#[pyo3(signature = (queries, positives, negatives, tau=0.07))]
fn infonce(queries: Vec<Vec<f64>>, positives: Vec<Vec<f64>>, negatives: Vec<Vec<Vec<f64>>>, tau: f64) -> PyResult<f64> {
    let n = queries.len();
    let n_points = queries.first().map_or(0, Vec::len);
    let k = negatives.first().map_or(0, Vec::len);
    let rows_ok = |rows: &[Vec<f64>]| rows.iter().all(|r| r.len() == n_points);
    if n == 0 || positives.len() != n || negatives.len() != n || !rows_ok(&queries) || !rows_ok(&positives) {
        return Err(PyValueError::new_err("queries and positives must be equal-length lists of equal-length rows"));
    }
    if negatives.iter().any(|q| q.len() != k || !rows_ok(q)) {
        return Err(PyValueError::new_err("every query needs the same number of negatives of the row length"));
    }
    let batch = ContrastBatch {
        n_points,
        k,
        queries: queries.concat(),
        positives: positives.concat(),
        negatives: negatives.concat().concat(),
        provenance: vec![NegativeRef { source: NegativeSource::External, index: 0 }; n * k],
    };
    Ok(infonce_loss(&batch, tau).map_err(err)?.loss)
}

/// Runs the finite-difference suite; returns `(passed, report)`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(seed: u64) -> PyResult<(bool, String)> {
    let report = gradcheck_suite(seed).map_err(err)?;
    Ok((report.passed(), report.to_text()))
}

#[pymodule]
fn pysesim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(structure_distance, m)?)?;
    m.add_function(wrap_pyfunction!(infonce, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
