use engine::energy::{self, builtin_profile, builtin_profiles, OpCostTable, WorkloadSpec};
use engine::error::Error;
use engine::mfmac::{self, AccumulatorMode, OpCensus};
use engine::potnum::{self, BitWidth};
use engine::quantizer::{self, ClipParam, Scaling};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn width(bits: u8) -> PyResult<BitWidth> {
    BitWidth::new(bits).map_err(err)
}

/// Quantize one value without scaling; returns `(code_bits, value)`.
#[pyfunction]
#[pyo3(signature = (value, bits = 5))]
fn quantize_scalar(value: f64, bits: u8) -> PyResult<(u8, f64)> {
    let code = potnum::quantize_scalar(value, width(bits)?).map_err(err)?;
    Ok((code.to_bits(), potnum::dequantize_scalar(code)))
}

/// Every representable value of a width, ascending.
#[pyfunction]
#[pyo3(signature = (bits = 5))]
fn pot_values(bits: u8) -> PyResult<Vec<f64>> {
    Ok(potnum::pot_values(width(bits)?))
}

/// A quantized tensor: exponents, signs and one power-of-two scale.
#[pyclass(name = "QuantBlock", module = "mftrain", frozen)]
struct PyQuantBlock {
    inner: quantizer::QuantBlock,
}

#[pymethods]
impl PyQuantBlock {
    /// Quantize `values` with the adaptive scale, or a fixed `beta` if given.
    #[staticmethod]
    #[pyo3(signature = (values, shape = None, bits = 5, beta = None))]
    fn quantize(values: Vec<f64>, shape: Option<Vec<usize>>, bits: u8, beta: Option<i16>) -> PyResult<Self> {
        let shape = shape.unwrap_or_else(|| vec![values.len()]);
        let scaling = beta.map_or(Scaling::Adaptive, Scaling::Fixed);
        let (inner, _) = quantizer::quantize_block(&values, &shape, width(bits)?, scaling).map_err(err)?;
        Ok(PyQuantBlock { inner })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let (inner, used) = quantizer::QuantBlock::from_bytes(data).map_err(err)?;
        if used != data.len() {
            return Err(PyValueError::new_err("trailing bytes after block"));
        }
        Ok(PyQuantBlock { inner })
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    fn dequantize(&self) -> Vec<f64> {
        self.inner.dequantize()
    }

    fn transpose(&self) -> PyResult<Self> {
        Ok(PyQuantBlock {
            inner: self.inner.transpose().map_err(err)?,
        })
    }

    #[getter]
    fn beta(&self) -> Option<i16> {
        self.inner.beta()
    }

    #[getter]
    fn bits(&self) -> u8 {
        self.inner.bits().bits()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn exps(&self) -> Vec<i8> {
        self.inner.exps().to_vec()
    }

    #[getter]
    fn signs(&self) -> Vec<bool> {
        self.inner.signs().to_vec()
    }

    #[getter]
    fn zero_fraction(&self) -> f64 {
        self.inner.zero_fraction()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "QuantBlock(shape={:?}, bits={}, beta={:?})",
            self.inner.shape(),
            self.inner.bits().bits(),
            self.inner.beta()
        )
    }
}

fn census_dict<'py>(py: Python<'py>, c: &OpCensus) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in [
        ("mac_slots", c.mac_slots),
        ("small_int_adds", c.small_int_adds),
        ("xors", c.xors),
        ("accumulations", c.accumulations),
        ("final_shifts", c.final_shifts),
        ("exponent_scalings", c.exponent_scalings),
        ("roundings", c.roundings),
        ("saturations", c.saturations),
        ("multiplies", c.multiplies),
        ("fp_adds", c.fp_adds),
        ("scalar_ops", c.scalar_ops),
    ] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Multiplication-free dot products with operation counting.
#[pyclass(name = "MacEngine", module = "mftrain", frozen)]
struct PyMacEngine {
    inner: mfmac::MacEngine,
}

#[pymethods]
impl PyMacEngine {
    /// `mode` is `"wide"` or `"strict32"`.
    #[new]
    #[pyo3(signature = (mode = "wide"))]
    fn new(mode: &str) -> PyResult<Self> {
        let mode = match mode {
            "wide" => AccumulatorMode::Wide,
            "strict32" => AccumulatorMode::Strict32,
            other => return Err(PyValueError::new_err(format!("unknown accumulator mode {other:?}"))),
        };
        Ok(PyMacEngine {
            inner: mfmac::MacEngine::new(mode),
        })
    }

    fn dot(&self, a: &PyQuantBlock, b: &PyQuantBlock) -> PyResult<f64> {
        self.inner.dot(&a.inner, &b.inner).map_err(err)
    }

    fn matmul(&self, a: &PyQuantBlock, b: &PyQuantBlock) -> PyResult<Vec<f64>> {
        self.inner.matmul(&a.inner, &b.inner).map_err(err)
    }

    fn census<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        census_dict(py, &self.inner.census())
    }
}

#[pyfunction]
fn mf_dot(a: &PyQuantBlock, b: &PyQuantBlock) -> PyResult<f64> {
    mfmac::mf_dot(&a.inner, &b.inner).map_err(err)
}

/// Row-major product of an `m x k` and a `k x n` block.
#[pyfunction]
fn mf_matmul(a: &PyQuantBlock, b: &PyQuantBlock) -> PyResult<Vec<f64>> {
    mfmac::mf_matmul(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn reference_dot(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    mfmac::reference_dot(&a, &b).map_err(err)
}

#[pyfunction]
fn weight_bias_correction(weights: Vec<f64>) -> PyResult<Vec<f64>> {
    quantizer::weight_bias_correction(&weights).map_err(err)
}

/// Returns the clipped values and the mask of clipped positions.
#[pyfunction]
#[pyo3(signature = (values, gamma = 1.0))]
fn ratio_clip(values: Vec<f64>, gamma: f64) -> PyResult<(Vec<f64>, Vec<bool>)> {
    let gamma = ClipParam::new(gamma).map_err(err)?;
    let (clipped, mask) = quantizer::ratio_clip(&values, gamma).map_err(err)?;
    Ok((clipped, mask.as_slice().to_vec()))
}

/// Default per-operation energies in pJ.
#[pyfunction]
fn op_costs() -> Vec<(String, f64)> {
    OpCostTable::default().iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[pyfunction]
fn methods() -> Vec<String> {
    builtin_profiles().into_iter().map(|p| p.name).collect()
}

/// Per-iteration energy in J on the calibrated ResNet-50 workload, or on
/// `fw_macs` forward MACs when given.
#[pyfunction]
#[pyo3(signature = (method, fw_macs = None))]
fn iteration_energy<'py>(py: Python<'py>, method: &str, fw_macs: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
    let table = OpCostTable::default();
    let workload = match fw_macs {
        Some(n) => WorkloadSpec::new("custom", n),
        None => WorkloadSpec::resnet50(),
    }
    .map_err(err)?;
    let profile = builtin_profile(method).map_err(err)?;
    let e = energy::iteration_energy(&profile, &workload, &table).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("fw", e.fw)?;
    d.set_item("bw", e.bw)?;
    d.set_item("total", e.total)?;
    d.set_item("xor", e.side)?;
    d.set_item("quant_overhead", e.overhead)?;
    d.set_item("total_with_overhead", e.total_with_overhead())?;
    Ok(d)
}

/// Quantizer cost of one `m x n` block in pJ: `(elements, block, per_number)`.
#[pyfunction]
fn quant_overhead(m: usize, n: usize) -> PyResult<(f64, f64, f64)> {
    let q = energy::quant_overhead(m, n, &OpCostTable::default()).map_err(err)?;
    Ok((q.elements_pj, q.block_pj, q.per_number_pj))
}

#[pymodule]
fn mftrain(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuantBlock>()?;
    m.add_class::<PyMacEngine>()?;
    m.add_function(wrap_pyfunction!(quantize_scalar, m)?)?;
    m.add_function(wrap_pyfunction!(pot_values, m)?)?;
    m.add_function(wrap_pyfunction!(mf_dot, m)?)?;
    m.add_function(wrap_pyfunction!(mf_matmul, m)?)?;
    m.add_function(wrap_pyfunction!(reference_dot, m)?)?;
    m.add_function(wrap_pyfunction!(weight_bias_correction, m)?)?;
    m.add_function(wrap_pyfunction!(ratio_clip, m)?)?;
    m.add_function(wrap_pyfunction!(op_costs, m)?)?;
    m.add_function(wrap_pyfunction!(methods, m)?)?;
    m.add_function(wrap_pyfunction!(iteration_energy, m)?)?;
    m.add_function(wrap_pyfunction!(quant_overhead, m)?)?;
    Ok(())
}
