//! Model configuration files: a TOML document with a `[rotor]` table, one
//! `[[pendulum]]` table per pendulum, and `[[perturbation.mode]]` entries.
//! Angles are radians. Parse errors surface the offending line.

use crate::error::{Error, Result};
use crate::model::{
    FourierSeries, Mode, Monomial, PendulumSpec, PerturbationSpec, RotorSpec, SystemSpec,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    epsilon: f64,
    rotor: RotorFile,
    #[serde(rename = "pendulum")]
    pendulums: Vec<PendulumFile>,
    #[serde(default)]
    perturbation: PerturbationFile,
}

#[derive(Debug, Serialize, Deserialize)]
struct RotorFile {
    coefficients: Vec<Monomial>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PendulumFile {
    sign: f64,
    /// Triples `(harmonic, cosine amplitude, sine amplitude)`.
    fourier_coeffs: Vec<(u32, f64, f64)>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct PerturbationFile {
    #[serde(default, rename = "mode")]
    modes: Vec<Mode>,
}

/// Parses a model document.
pub fn parse_model(text: &str) -> Result<SystemSpec> {
    let file: ModelFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if file.rotor.coefficients.is_empty() {
        return Err(Error::Config(
            "rotor needs at least one monomial to fix the action dimension".into(),
        ));
    }
    let dim = file.rotor.coefficients[0].powers.len();
    let rotor = RotorSpec::new(dim, file.rotor.coefficients)?;
    let pendulums: Result<Vec<PendulumSpec>> = file
        .pendulums
        .into_iter()
        .map(|p| PendulumSpec::new(FourierSeries::new(p.fourier_coeffs), p.sign))
        .collect();
    SystemSpec::new(
        rotor,
        pendulums?,
        PerturbationSpec {
            modes: file.perturbation.modes,
        },
        file.epsilon,
    )
}

pub fn load_model(path: &Path) -> Result<SystemSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_model(&text)
}

/// Serializes a system back to the model document format.
pub fn model_to_toml(system: &SystemSpec) -> Result<String> {
    let file = ModelFile {
        epsilon: system.epsilon,
        rotor: RotorFile {
            coefficients: system.rotor.coefficients.clone(),
        },
        pendulums: system
            .pendulums
            .iter()
            .map(|p| PendulumFile {
                sign: p.sign,
                fourier_coeffs: p.fourier_coeffs.terms.clone(),
            })
            .collect(),
        perturbation: PerturbationFile {
            modes: system.perturbation.modes.clone(),
        },
    };
    toml::to_string_pretty(&file).map_err(|e| Error::Config(e.to_string()))
}

pub fn save_model(system: &SystemSpec, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_toml(system)?)?;
    Ok(())
}
