use serde::Deserialize;

use crate::error::{Error, Result};

const PRESETS_TOML: &str = include_str!("../../presets/models.toml");

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptedMatrix {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

/// The adapted matrices of one model: each entry of `matrices` appears once
/// per layer.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Display-only size of the full model, e.g. `"7B"`.
    #[serde(default)]
    pub full_params: Option<String>,
    pub matrices: Vec<AdaptedMatrix>,
}

#[derive(Deserialize)]
struct PresetFile {
    preset: Vec<ModelShape>,
}

impl ModelShape {
    /// Square `d x d` matrices named `names` in each of `num_layers` layers.
    pub fn uniform(hidden_dim: usize, num_layers: usize, names: &[&str]) -> Result<Self> {
        let shape = ModelShape {
            name: format!("custom-d{hidden_dim}-l{num_layers}"),
            description: String::new(),
            hidden_dim,
            num_layers,
            full_params: None,
            matrices: names
                .iter()
                .map(|n| AdaptedMatrix {
                    name: (*n).to_string(),
                    d_in: hidden_dim,
                    d_out: hidden_dim,
                })
                .collect(),
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn preset(name: &str) -> Result<Self> {
        presets()?.into_iter().find(|p| p.name == name).ok_or_else(|| {
            let known: Vec<String> = presets().unwrap_or_default().into_iter().map(|p| p.name).collect();
            Error::InvalidArgument(format!("unknown preset {name:?}; known: {}", known.join(", ")))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(Error::InvalidArgument(format!(
                "{}: dimensions must be positive",
                self.name
            )));
        }
        if self.matrices.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: no adapted matrices", self.name)));
        }
        if let Some(m) = self.matrices.iter().find(|m| m.d_in == 0 || m.d_out == 0) {
            return Err(Error::InvalidArgument(format!(
                "{}: matrix {} has a zero dimension",
                self.name, m.name
            )));
        }
        Ok(())
    }

    /// `(qualified_name, d_in, d_out)` for every adapted matrix, layer-major.
    pub fn adapted(&self) -> impl Iterator<Item = (String, usize, usize)> + '_ {
        (0..self.num_layers).flat_map(move |layer| {
            self.matrices
                .iter()
                .map(move |m| (format!("layer{layer}.{}", m.name), m.d_in, m.d_out))
        })
    }
}

/// All shipped presets.
pub fn presets() -> Result<Vec<ModelShape>> {
    let file: PresetFile = toml::from_str(PRESETS_TOML).map_err(|e| Error::Config(e.to_string()))?;
    for p in &file.preset {
        p.validate()?;
    }
    Ok(file.preset)
}
