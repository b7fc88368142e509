//! Python bindings: vocabularies, relative matrices, the fusion primitives and
//! the seeded toy world.

use std::sync::Arc;

use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use relfuse::decode::{EnsembleMember, EnsembleSession};
use relfuse::fusion::{self, AbsoluteDistribution, EnsembleConfig, RelativeRepresentation};
use relfuse::harness::toy::{build_toy_world, ToyWorld, ToyWorldConfig};
use relfuse::harness::{build_members, evaluate, evaluate_individual};
use relfuse::relspace::{self, EmbeddingTable};
use relfuse::vocab::{common_tokens, AnchorStrategy, Vocabulary};
use relfuse::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::Config(_) | Error::Argument(_) | Error::EmptyIntersection | Error::AnchorMismatch(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn config(eta: f64, steps: usize) -> PyResult<EnsembleConfig> {
    let cfg = EnsembleConfig::default().with_eta(eta).with_steps(steps);
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn distribution(values: Vec<f64>) -> PyResult<AbsoluteDistribution> {
    AbsoluteDistribution::new(values, 0).map_err(py_err)
}

#[pyclass(name = "Vocabulary", frozen)]
struct PyVocabulary(Arc<Vocabulary>);

#[pymethods]
impl PyVocabulary {
    #[new]
    fn new(surfaces: Vec<String>) -> PyResult<Self> {
        Vocabulary::from_surfaces(surfaces.into_iter().map(String::into_bytes))
            .map(|v| PyVocabulary(Arc::new(v)))
            .map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn surface(&self, id: u32) -> PyResult<String> {
        self.0
            .surface(id)
            .map(|s| String::from_utf8_lossy(s).into_owned())
            .ok_or_else(|| PyValueError::new_err(format!("token id {id} out of range")))
    }

    fn id_of(&self, surface: &str) -> Option<u32> {
        self.0.id_of(surface.as_bytes())
    }

    /// Greedy longest-match tokenization.
    fn tokenize(&self, text: &str) -> PyResult<Vec<u32>> {
        self.0.tokenize(text.as_bytes()).map_err(|(offset, byte)| {
            PyValueError::new_err(format!("no token covers byte {byte:#04x} at offset {offset}"))
        })
    }

    fn detokenize(&self, ids: Vec<u32>) -> String {
        String::from_utf8_lossy(&self.0.detokenize(&ids)).into_owned()
    }
}

/// Surfaces shared by every vocabulary, in canonical byte order.
#[pyfunction]
fn common_surfaces(vocabularies: Vec<Bound<'_, PyVocabulary>>) -> PyResult<Vec<String>> {
    let vocabs: Vec<&Vocabulary> = vocabularies.iter().map(|v| v.get().0.as_ref()).collect();
    let common = common_tokens(&vocabs).map_err(py_err)?;
    Ok(common.iter().map(|s| String::from_utf8_lossy(s).into_owned()).collect())
}

#[pyclass(name = "EmbeddingTable", frozen)]
struct PyEmbeddingTable(Arc<EmbeddingTable>);

#[pymethods]
impl PyEmbeddingTable {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        EmbeddingTable::from_rows(&rows)
            .map(|e| PyEmbeddingTable(Arc::new(e)))
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        EmbeddingTable::load(path)
            .map(|e| PyEmbeddingTable(Arc::new(e)))
            .map_err(py_err)
    }

    #[getter]
    fn rows(&self) -> usize {
        self.0.rows()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn cosine(&self, i: usize, j: usize) -> f64 {
        self.0.cosine(i, j)
    }
}

#[pyclass(name = "RelativeMatrix", frozen)]
struct PyRelativeMatrix(Arc<relspace::RelativeMatrix>);

#[pymethods]
impl PyRelativeMatrix {
    /// Cosines of every token against `anchor_ids`, row-softmaxed when
    /// `normalize` is set.
    #[new]
    #[pyo3(signature = (embeddings, anchor_ids, normalize = true))]
    fn new(embeddings: &PyEmbeddingTable, anchor_ids: Vec<u32>, normalize: bool) -> PyResult<Self> {
        let raw = relspace::relative_matrix_from_ids(&embeddings.0, &anchor_ids).map_err(py_err)?;
        let m = if normalize {
            relspace::normalize_rows(&raw).map_err(py_err)?
        } else {
            raw
        };
        Ok(PyRelativeMatrix(Arc::new(m)))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        relspace::RelativeMatrix::load(path)
            .map(|m| PyRelativeMatrix(Arc::new(m)))
            .map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }

    #[getter]
    fn rows(&self) -> usize {
        self.0.rows()
    }

    #[getter]
    fn anchors(&self) -> usize {
        self.0.anchors()
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.0.is_normalized()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.0.rows() {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok(self.0.row(i).to_vec())
    }
}

/// `p · M`: a distribution's image in the relative space.
#[pyfunction]
fn to_relative(p: Vec<f64>, matrix: &PyRelativeMatrix) -> PyResult<Vec<f64>> {
    let p = distribution(p)?;
    fusion::to_relative(&p, &matrix.0).map(|r| r.values).map_err(py_err)
}

/// Weighted sum of relative representations; `None` weights are uniform.
#[pyfunction]
#[pyo3(signature = (reps, weights = None))]
fn aggregate(reps: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let weights = weights.unwrap_or_else(|| vec![1.0 / reps.len().max(1) as f64; reps.len()]);
    let reps: Vec<RelativeRepresentation> = reps.into_iter().map(RelativeRepresentation::new).collect();
    fusion::aggregate(&reps, &weights).map(|r| r.values).map_err(py_err)
}

#[pyfunction]
fn kl_loss(target: Vec<f64>, candidate: Vec<f64>) -> PyResult<f64> {
    fusion::kl_loss(&RelativeRepresentation::new(target), &RelativeRepresentation::new(candidate)).map_err(py_err)
}

/// Gradient of `KL(target ‖ p · M)` with respect to `p`.
#[pyfunction]
fn kl_gradient(target: Vec<f64>, p: Vec<f64>, matrix: &PyRelativeMatrix) -> PyResult<Vec<f64>> {
    let p = distribution(p)?;
    fusion::kl_gradient(&RelativeRepresentation::new(target), &p, &matrix.0).map_err(py_err)
}

#[pyfunction]
fn project_simplex(v: Vec<f64>) -> Vec<f64> {
    fusion::project_simplex(&v)
}

/// Gradient search from `p_init` toward `target`; returns the final
/// distribution and the loss trace.
#[pyfunction]
#[pyo3(signature = (target, p_init, matrix, eta = 0.1, steps = 5))]
fn inverse_transform(
    target: Vec<f64>,
    p_init: Vec<f64>,
    matrix: &PyRelativeMatrix,
    eta: f64,
    steps: usize,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let cfg = config(eta, steps)?;
    let p = distribution(p_init)?;
    let out = fusion::inverse_transform(&RelativeRepresentation::new(target), &p, &matrix.0, &cfg).map_err(py_err)?;
    Ok((out.p_final.into_values(), out.trace))
}

/// The seeded two-model toy world with its dev and test items.
#[pyclass(name = "ToyWorld", frozen)]
struct PyToyWorld {
    world: ToyWorld,
    members: Vec<EnsembleMember>,
}

impl PyToyWorld {
    fn split(&self, split: &str) -> PyResult<&[relfuse::harness::EvalItem]> {
        match split {
            "dev" => Ok(&self.world.dev),
            "test" => Ok(&self.world.test),
            other => Err(PyValueError::new_err(format!("split must be `dev` or `test`, got `{other}`"))),
        }
    }

    fn check_main(&self, main: usize) -> PyResult<()> {
        if main < self.members.len() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("main index {main} out of range")))
        }
    }
}

#[pymethods]
impl PyToyWorld {
    #[new]
    #[pyo3(signature = (seed = 7))]
    fn new(seed: u64) -> PyResult<Self> {
        let world = build_toy_world(&ToyWorldConfig::standard(seed)).map_err(py_err)?;
        let (_, members) = build_members(&world.entries(), AnchorStrategy::Full, true).map_err(py_err)?;
        Ok(PyToyWorld { world, members })
    }

    #[getter]
    fn models(&self) -> Vec<String> {
        self.members.iter().map(|m| m.name().to_string()).collect()
    }

    fn vocabulary(&self, index: usize) -> PyResult<PyVocabulary> {
        self.check_main(index)?;
        Ok(PyVocabulary(self.world.models[index].vocab.clone()))
    }

    fn prompts(&self, split: &str) -> PyResult<Vec<String>> {
        Ok(self.split(split)?.iter().map(|i| i.prompt().to_string()).collect())
    }

    /// Ensemble generation fused into model `main`.
    #[pyo3(signature = (prompt, main = 0, eta = 0.1, steps = 5))]
    fn decode(&self, prompt: &str, main: usize, eta: f64, steps: usize) -> PyResult<String> {
        self.check_main(main)?;
        let mut s = EnsembleSession::new(self.members.clone(), main, config(eta, steps)?, self.world.stop.clone())
            .map_err(py_err)?;
        s.generate(prompt).map(|g| g.text).map_err(py_err)
    }

    /// Ensemble accuracy on `split`.
    #[pyo3(signature = (split = "test", main = 0, eta = 0.1, steps = 5))]
    fn evaluate(&self, split: &str, main: usize, eta: f64, steps: usize) -> PyResult<f64> {
        self.check_main(main)?;
        let items = self.split(split)?;
        evaluate(&self.members, main, &config(eta, steps)?, &self.world.stop, items)
            .map(|e| e.accuracy)
            .map_err(py_err)
    }

    /// Accuracy of model `index` on its own.
    #[pyo3(signature = (index, split = "test"))]
    fn evaluate_individual(&self, index: usize, split: &str) -> PyResult<f64> {
        self.check_main(index)?;
        let items = self.split(split)?;
        evaluate_individual(&self.members, index, &EnsembleConfig::default(), &self.world.stop, items)
            .map(|e| e.accuracy)
            .map_err(py_err)
    }
}

#[pymodule]
fn pyrelfuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyEmbeddingTable>()?;
    m.add_class::<PyRelativeMatrix>()?;
    m.add_class::<PyToyWorld>()?;
    m.add_function(wrap_pyfunction!(common_surfaces, m)?)?;
    m.add_function(wrap_pyfunction!(to_relative, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(kl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kl_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(project_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(inverse_transform, m)?)?;
    Ok(())
}
