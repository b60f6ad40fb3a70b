use std::sync::Arc;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Deserialize;

use skt_core::corpus::{
    self, generate_synthetic, load_episodes, write_episodes, CorpusFormat, EncodedEpisode, Episode,
    Split, SynthConfig,
};
use skt_core::evaluator::{self, evaluate_split, EvalReport};
use skt_core::model::{InferenceOptions, ModelConfig, SktModel};
use skt_core::service::{ChatEngine, MessageResult, SessionStore};
use skt_core::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig};

fn err(e: skt_core::Error) -> PyErr {
    match e {
        skt_core::Error::NotFound(m) => PyKeyError::new_err(m),
        skt_core::Error::InvalidInput(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Settings {
    model: ModelConfig,
    train: TrainConfig,
    synth: SynthConfig,
}

fn settings(toml_text: Option<&str>) -> PyResult<Settings> {
    toml_text.map_or(Ok(Settings::default()), |t| {
        toml::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))
    })
}

fn read(path: &str) -> PyResult<Vec<Episode>> {
    load_episodes(path, CorpusFormat::WowJsonl).map_err(err)
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("split", &r.split)?;
    d.set_item("ppl", r.ppl)?;
    d.set_item("r1", r.r1)?;
    d.set_item("r2", r.r2)?;
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("per_turn_accuracy", r.per_turn_accuracy.clone())?;
    d.set_item("samples", r.samples)?;
    d.set_item("labeled_turns", r.labeled_turns)?;
    Ok(d)
}

fn message_dict<'py>(py: Python<'py>, m: &MessageResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("response", &m.response)?;
    d.set_item("knowledge_index", m.knowledge_index)?;
    d.set_item("knowledge_sentence", &m.knowledge_sentence)?;
    d.set_item("prior", m.prior.clone())?;
    d.set_item("turn", m.turn)?;
    Ok(d)
}

/// Lower-cased word and punctuation tokens.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    corpus::tokenize(text)
}

#[pyfunction]
fn normalize_text(tokens: Vec<String>) -> Vec<String> {
    evaluator::normalize_text(&tokens)
}

/// Best unigram F1 of `pred` against any of `refs`.
#[pyfunction]
fn unigram_f1(pred: &str, refs: Vec<String>) -> f64 {
    let refs: Vec<Vec<String>> = refs.iter().map(|r| corpus::tokenize(r)).collect();
    evaluator::unigram_f1(&corpus::tokenize(pred), &refs)
}

#[pyfunction]
fn bigram_f1(pred: &str, refs: Vec<String>) -> f64 {
    let refs: Vec<Vec<String>> = refs.iter().map(|r| corpus::tokenize(r)).collect();
    evaluator::bigram_f1(&corpus::tokenize(pred), &refs)
}

/// Write a synthetic corpus to `path`; returns the episode count.
#[pyfunction]
#[pyo3(signature = (path, config = None))]
fn synthesize(path: &str, config: Option<&str>) -> PyResult<usize> {
    let cfg = settings(config)?.synth;
    let eps = generate_synthetic(&cfg).map_err(err)?;
    write_episodes(path, &eps).map_err(err)?;
    Ok(eps.len())
}

/// Trained model with its vocabulary.
#[pyclass(module = "skt")]
struct Model {
    model: SktModel<f32>,
    vocab: corpus::Vocab,
    train_config: Option<TrainConfig>,
}

#[pymethods]
impl Model {
    /// Train on the `train` split of an episode file (all episodes if none
    /// is marked `train`). `config` is TOML with `[model]` and `[train]`.
    #[staticmethod]
    #[pyo3(signature = (path, config = None))]
    fn train(path: &str, config: Option<&str>) -> PyResult<Model> {
        let s = settings(config)?;
        let all = read(path)?;
        let has_train = all.iter().any(|e| e.split == Split::Train);
        let eps: Vec<Episode> = all.into_iter().filter(|e| !has_train || e.split == Split::Train).collect();
        let t = train(&eps, &s.model, &s.train, |_| {}).map_err(err)?;
        Ok(Model {
            model: t.model,
            vocab: t.vocab,
            train_config: Some(s.train),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        let c = load_checkpoint(path).map_err(err)?;
        Ok(Model {
            model: c.model,
            vocab: c.vocab,
            train_config: c.train_config,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path, &self.model, &self.vocab, self.train_config.as_ref(), None).map_err(err)
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.model.d_model()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn num_parameters(&self) -> usize {
        self.model.store.iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Perplexity, F1 and knowledge accuracy on an episode file.
    #[pyo3(signature = (path, split = None, max_len = 40))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        path: &str,
        split: Option<&str>,
        max_len: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut eps = read(path)?;
        if let Some(s) = split {
            let want = Split::parse(s).ok_or_else(|| PyValueError::new_err(format!("unknown split `{s}`")))?;
            eps.retain(|e| e.split == want);
        }
        let data = EncodedEpisode::encode_all(&eps, &self.vocab);
        let opts = InferenceOptions {
            max_len,
            ..InferenceOptions::default()
        };
        let r = evaluate_split(&self.model, &self.vocab, &data, split.unwrap_or("all"), &opts).map_err(err)?;
        report_dict(py, &r)
    }

    /// Open a chat over a knowledge pool listed without the sentinel.
    #[pyo3(signature = (pool, max_len = 40))]
    fn chat(&self, pool: Vec<String>, max_len: usize) -> PyResult<Chat> {
        let mut engine = ChatEngine::new(self.model.clone(), self.vocab.clone());
        engine.max_len = max_len;
        let store = SessionStore::new(Arc::new(engine));
        let info = store.create_session(None, Some(&pool)).map_err(err)?;
        Ok(Chat {
            store,
            id: info.id,
            pool: info.pool,
        })
    }
}

/// Live dialogue; each `send` is one apprentice/wizard exchange.
#[pyclass(module = "skt")]
struct Chat {
    store: SessionStore,
    id: String,
    #[pyo3(get)]
    pool: Vec<String>,
}

#[pymethods]
impl Chat {
    fn send<'py>(&self, py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
        let r = self.store.post_message(&self.id, text).map_err(err)?;
        message_dict(py, &r)
    }

    fn transcript<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let t = self.store.get_transcript(&self.id).map_err(err)?;
        t.turns
            .iter()
            .map(|e| {
                let d = message_dict(py, &e.result)?;
                d.set_item("apprentice", &e.apprentice)?;
                Ok(d)
            })
            .collect()
    }
}

#[pymodule]
fn skt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Chat>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(unigram_f1, m)?)?;
    m.add_function(wrap_pyfunction!(bigram_f1, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    Ok(())
}
