//! Adapters for external encoders served over HTTP.

use std::time::Duration;

use ndarray::Array2;
use serde::Deserialize;

use super::{EncoderError, TextEncoder};
use crate::nn::init;

/// POSTs `{"texts": [...]}` and expects `{"embeddings": [[...], ...]}`.
pub struct HttpEncoder {
    agent: ureq::Agent,
    endpoint: String,
    version: String,
    dim: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

impl HttpEncoder {
    pub fn new(endpoint: impl Into<String>, version: impl Into<String>, dim: usize) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(60))).build().into();
        Self { agent, endpoint: endpoint.into(), version: version.into(), dim }
    }
}

impl TextEncoder for HttpEncoder {
    fn version(&self) -> String {
        self.version.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, texts: &[&str]) -> Result<Array2<f64>, EncoderError> {
        let fail = |e: String| EncoderError::Failure(format!("{}: {e}", self.endpoint));
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(serde_json::json!({ "texts": texts }))
            .map_err(|e| fail(e.to_string()))?;
        let body: EmbedResponse = resp.body_mut().read_json().map_err(|e| fail(e.to_string()))?;
        let mut out = Array2::zeros((body.embeddings.len(), self.dim));
        for (i, row) in body.embeddings.iter().enumerate() {
            if row.len() != self.dim {
                return Err(fail(format!("row {i} has width {}, expected {}", row.len(), self.dim)));
            }
            out.row_mut(i).assign(&ndarray::ArrayView1::from(row.as_slice()));
        }
        Ok(out)
    }
}

/// Maps an external encoder's width onto D_y with a linear map.
pub struct ProjectedEncoder<E> {
    inner: E,
    pub weight: Array2<f64>,
}

impl<E: TextEncoder> ProjectedEncoder<E> {
    pub fn new(inner: E, weight: Array2<f64>) -> Self {
        assert_eq!(weight.nrows(), inner.dim(), "projection input width must match the encoder");
        Self { inner, weight }
    }

    /// Glorot-initialised projection.
    pub fn seeded(inner: E, d_y: usize, seed: u64) -> Self {
        let w = init::xavier(&mut init::rng(seed), inner.dim(), d_y);
        Self::new(inner, w)
    }
}

impl<E: TextEncoder> TextEncoder for ProjectedEncoder<E> {
    fn version(&self) -> String {
        format!("{}+proj{}x{}", self.inner.version(), self.weight.nrows(), self.weight.ncols())
    }

    fn dim(&self) -> usize {
        self.weight.ncols()
    }

    fn embed_text(&self, texts: &[&str]) -> Result<Array2<f64>, EncoderError> {
        Ok(self.inner.embed_text(texts)?.dot(&self.weight))
    }
}
