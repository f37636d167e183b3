use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Activation, SpectralState};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Controller,
    Potential,
    ClassK,
}

/// One matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl LayerDoc {
    pub fn from_array(name: &str, a: &Array2<f64>) -> Self {
        Self {
            name: name.to_string(),
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone()).map_err(|_| {
            Error::ModelMismatch(format!(
                "layer {} declares {}x{} but holds {} values",
                self.name,
                self.rows,
                self.cols,
                self.data.len()
            ))
        })
    }
}

/// On-disk form shared by all three net kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub format_version: u32,
    pub kind: ModelKind,
    pub widths: Vec<usize>,
    pub layers: Vec<LayerDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral: Option<Vec<SpectralState>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature_nodes: Option<usize>,
    /// Digest of the configuration that produced the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl ModelDoc {
    pub fn new(kind: ModelKind, widths: &[usize]) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            widths: widths.to_vec(),
            layers: Vec::new(),
            activation: None,
            mask: None,
            spectral: None,
            epsilon: None,
            p: None,
            quadrature_nodes: None,
            config_digest: None,
        }
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::ModelMismatch(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.kind != kind {
            return Err(Error::ModelMismatch(format!(
                "expected a {kind:?} model, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn arrays(&self) -> Result<Vec<Array2<f64>>> {
        self.layers.iter().map(LayerDoc::to_array).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::ModelMismatch(format!("model file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_round_trip_is_exact() {
        let a = Array2::from_shape_fn((3, 2), |(i, j)| (i as f64 + 0.1) / (j as f64 + 3.0) * 1e-7);
        let doc = LayerDoc::from_array("w", &a);
        let json = serde_json::to_string(&doc).unwrap();
        let back: LayerDoc = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_array().unwrap(), a);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_versions() {
        let mut doc = ModelDoc::new(ModelKind::ClassK, &[1, 2, 1]);
        let json = doc.to_json().unwrap().replace("\"kind\"", "\"extra\": 1, \"kind\"");
        assert!(ModelDoc::from_json(&json).is_err());
        doc.format_version = 99;
        assert!(doc.expect_kind(ModelKind::ClassK).is_err());
        doc.format_version = FORMAT_VERSION;
        assert!(doc.expect_kind(ModelKind::Potential).is_err());
    }

    #[test]
    fn bad_layer_length_is_reported() {
        let doc = LayerDoc {
            name: "w0".into(),
            rows: 2,
            cols: 2,
            data: vec![1.0; 3],
        };
        assert!(matches!(doc.to_array(), Err(Error::ModelMismatch(_))));
    }
}
