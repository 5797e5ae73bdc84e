//! Named experiment configs shipped as TOML files under `presets/`.

use super::ExperimentConfig;
use crate::error::{Error, Result};

const PRESETS: &[(&str, &str)] = &[
    ("yinyang-initial", include_str!("../../presets/yinyang-initial.toml")),
    ("yinyang-semi", include_str!("../../presets/yinyang-semi.toml")),
    ("yinyang-active", include_str!("../../presets/yinyang-active.toml")),
    ("yinyang-active-semi", include_str!("../../presets/yinyang-active-semi.toml")),
    ("yinyang-supervised-80", include_str!("../../presets/yinyang-supervised-80.toml")),
    ("yinyang-supervised-1000", include_str!("../../presets/yinyang-supervised-1000.toml")),
    ("mnist-alldata-maxent", include_str!("../../presets/mnist-alldata-maxent.toml")),
    ("mnist-alldata-aboveavg", include_str!("../../presets/mnist-alldata-aboveavg.toml")),
    ("mnist-stepwise-maxent", include_str!("../../presets/mnist-stepwise-maxent.toml")),
    ("mnist-stepwise-aboveavg", include_str!("../../presets/mnist-stepwise-aboveavg.toml")),
    ("mnist-semi-100", include_str!("../../presets/mnist-semi-100.toml")),
    ("mnist-semi-300", include_str!("../../presets/mnist-semi-300.toml")),
    ("mnist-supervised-100", include_str!("../../presets/mnist-supervised-100.toml")),
    ("mnist-supervised-300", include_str!("../../presets/mnist-supervised-300.toml")),
    ("mnist-supervised-1000", include_str!("../../presets/mnist-supervised-1000.toml")),
    ("mnist-reduced", include_str!("../../presets/mnist-reduced.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

/// The TOML source of a preset.
pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::Config(format!("unknown preset {name:?}; available: {}", preset_names().join(", "))))
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(preset_text(name)?)
}
