//! Shipped network descriptions. Entries ending in `-desk` are scaled-down
//! counterparts intended for CPU training.

use super::NetworkConfig;
use crate::error::{Error, Result};

const PRESETS: &[(&str, &str)] = &[
    ("hko-cnn2d", include_str!("../../presets/hko-cnn2d.toml")),
    ("hko-cnn2d-desk", include_str!("../../presets/hko-cnn2d-desk.toml")),
    ("hko-convgru", include_str!("../../presets/hko-convgru.toml")),
    ("hko-convgru-desk", include_str!("../../presets/hko-convgru-desk.toml")),
    ("hko-trajgru", include_str!("../../presets/hko-trajgru.toml")),
    ("hko-trajgru-desk", include_str!("../../presets/hko-trajgru-desk.toml")),
    ("mnistpp-cnn2d", include_str!("../../presets/mnistpp-cnn2d.toml")),
    ("mnistpp-cnn2d-desk", include_str!("../../presets/mnistpp-cnn2d-desk.toml")),
    ("mnistpp-convgru-k3", include_str!("../../presets/mnistpp-convgru-k3.toml")),
    ("mnistpp-convgru-k3-desk", include_str!("../../presets/mnistpp-convgru-k3-desk.toml")),
    ("mnistpp-convgru-k5", include_str!("../../presets/mnistpp-convgru-k5.toml")),
    ("mnistpp-convgru-k5-desk", include_str!("../../presets/mnistpp-convgru-k5-desk.toml")),
    ("mnistpp-convgru-k7", include_str!("../../presets/mnistpp-convgru-k7.toml")),
    ("mnistpp-convgru-k7-desk", include_str!("../../presets/mnistpp-convgru-k7-desk.toml")),
    ("mnistpp-dfn", include_str!("../../presets/mnistpp-dfn.toml")),
    ("mnistpp-dfn-desk", include_str!("../../presets/mnistpp-dfn-desk.toml")),
    ("mnistpp-trajgru-l13", include_str!("../../presets/mnistpp-trajgru-l13.toml")),
    ("mnistpp-trajgru-l13-desk", include_str!("../../presets/mnistpp-trajgru-l13-desk.toml")),
    ("mnistpp-trajgru-l17", include_str!("../../presets/mnistpp-trajgru-l17.toml")),
    ("mnistpp-trajgru-l17-desk", include_str!("../../presets/mnistpp-trajgru-l17-desk.toml")),
    ("mnistpp-trajgru-l5", include_str!("../../presets/mnistpp-trajgru-l5.toml")),
    ("mnistpp-trajgru-l5-desk", include_str!("../../presets/mnistpp-trajgru-l5-desk.toml")),
    ("mnistpp-trajgru-l9", include_str!("../../presets/mnistpp-trajgru-l9.toml")),
    ("mnistpp-trajgru-l9-desk", include_str!("../../presets/mnistpp-trajgru-l9-desk.toml")),
    ("radar-convgru-tiny", include_str!("../../presets/radar-convgru-tiny.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Parse and validate a shipped preset.
pub fn load(name: &str) -> Result<NetworkConfig> {
    let text = source(name).ok_or_else(|| {
        let known: Vec<&str> = names().collect();
        Error::InvalidArgument(format!("unknown preset `{name}`; known presets: {}", known.join(", ")))
    })?;
    NetworkConfig::from_toml(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for n in names() {
            let cfg = load(n).unwrap_or_else(|e| panic!("{n}: {e}"));
            assert_eq!(cfg.name, n);
        }
    }
}
