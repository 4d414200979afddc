use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Layout, ModelParams};
use crate::error::{Error, Result};

/// On-disk model: the layout (which echoes the model config) and the flat
/// parameter vector in layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub layout: Layout,
    pub params: Vec<f64>,
}

const FORMAT: &str = "hybrid-dp-checkpoint/1";

impl Checkpoint {
    pub fn from_params(params: &ModelParams) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            layout: params.layout().as_ref().clone(),
            params: params.values().to_vec(),
        }
    }

    pub fn into_params(self) -> Result<ModelParams> {
        if self.format != FORMAT {
            return Err(Error::Parse(format!(
                "unknown checkpoint format `{}`",
                self.format
            )));
        }
        ModelParams::from_values(Arc::new(self.layout), self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{init_params, Layout};
    use super::*;

    #[test]
    fn save_load_is_exact() {
        let layout = Layout::new(&schema(), &tiny_config(5)).unwrap();
        let params = init_params(&layout);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::from_params(&params).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().into_params().unwrap();
        assert_eq!(back, params);
    }
}
