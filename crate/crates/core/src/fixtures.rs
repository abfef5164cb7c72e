//! Published reference figures shipped with the crate.
//!
//! Manifests are embedded as TOML text in the same format users write, so
//! they also serve as format examples.

use crate::mixture::MixtureManifest;
use crate::trainer::PhaseAverages;
use crate::Result;

pub const PRETRAIN_MIX: &str = include_str!("../fixtures/pretrain_mix.toml");
pub const ANNEAL_BASELINE: &str = include_str!("../fixtures/anneal_baseline.toml");
pub const ANNEAL_EDU: &str = include_str!("../fixtures/anneal_edu.toml");
pub const CONTEXT_EXTENSION: &str = include_str!("../fixtures/context_extension.toml");
pub const RESOURCE_RUNS: &str = include_str!("../fixtures/resource_runs.txt");
pub const PUBLISHED_TOKENS: &str = include_str!("../fixtures/published_tokens.tsv");

/// Reported language distribution of the pretraining mix: (lang, billions, percent).
pub const LANGUAGE_SHARES: [(&str, f64, f64); 7] = [
    ("fin", 209.09, 53.6),
    ("eng", 80.77, 20.7),
    ("swe", 80.09, 20.5),
    ("code", 14.12, 3.6),
    ("xling", 3.98, 1.0),
    ("sme", 1.07, 0.3),
    ("lat", 0.94, 0.3),
];

/// Reported resource table: (model, wall hours, MWh, kg CO2eq).
pub const RESOURCE_ROWS: [(&str, f64, f64, f64); 6] = [
    ("tiny", 80.89, 1.51, 6.04),
    ("tiny-short", 194.91, 3.63, 14.52),
    ("base", 158.66, 2.96, 11.84),
    ("base-short", 236.60, 4.41, 17.64),
    ("large", 286.85, 5.35, 21.40),
    ("large-short", 299.23, 5.58, 22.32),
];
pub const RESOURCE_TOTAL_MWH: f64 = 23.44;
pub const RESOURCE_TOTAL_CO2: f64 = 93.76;

/// Predicted and rounded vocabulary sizes per model size.
pub const VOCAB_PLAN: [(&str, u64, u64); 3] = [
    ("tiny", 27_224, 27_264),
    ("base", 42_200, 42_240),
    ("large", 55_571, 55_616),
];

/// Length-bucket shares (percent) of the context-extension data.
pub const LENGTH_SHARES: [f64; 4] = [21.01, 77.56, 1.03, 0.4];

pub fn pretrain_manifest() -> Result<MixtureManifest> {
    MixtureManifest::from_toml_str(PRETRAIN_MIX)
}

pub fn anneal_baseline_manifest() -> Result<MixtureManifest> {
    MixtureManifest::from_toml_str(ANNEAL_BASELINE)
}

pub fn anneal_edu_manifest() -> Result<MixtureManifest> {
    MixtureManifest::from_toml_str(ANNEAL_EDU)
}

pub fn context_extension_manifest() -> Result<MixtureManifest> {
    MixtureManifest::from_toml_str(CONTEXT_EXTENSION)
}

/// One row of the per-model token table.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRow {
    pub model: String,
    /// Reported tokens per phase, W/S/C/A.
    pub phase_tokens: [f64; 4],
    pub total: f64,
    pub averages: PhaseAverages,
}

pub fn published_token_rows() -> Vec<TokenRow> {
    PUBLISHED_TOKENS
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let v: Vec<f64> = f[1..]
                .iter()
                .map(|x| x.parse().expect("fixture number"))
                .collect();
            TokenRow {
                model: f[0].to_string(),
                phase_tokens: [v[0], v[1], v[2], v[3]],
                total: v[4],
                averages: PhaseAverages([v[5], v[6], v[7], v[8]]),
            }
        })
        .collect()
}
