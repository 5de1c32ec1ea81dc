//! Versioned table of physical parameters.
//!
//! The shipped table lives in `constants/nv_default.json`. Every entry carries an
//! explicit unit; frequencies may be given as `rad_per_s` or `Hz_times_2pi`
//! (a value in Hz that is multiplied by 2π on load), rates as `per_s`.
//! Unknown parameter names and unknown units are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, TWO_PI};

const DEFAULT_TABLE: &str = include_str!("../constants/nv_default.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "rad_per_s")]
    RadPerSecond,
    #[serde(rename = "Hz_times_2pi")]
    HzTimesTwoPi,
    #[serde(rename = "per_s")]
    PerSecond,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quantity {
    pub value: f64,
    pub unit: Unit,
}

impl Quantity {
    fn angular(&self, name: &str) -> Result<f64> {
        match self.unit {
            Unit::RadPerSecond => Ok(self.value),
            Unit::HzTimesTwoPi => Ok(TWO_PI * self.value),
            Unit::PerSecond => Err(Error::Parse {
                path: format!("parameters.{name}.unit"),
                message: "expected a frequency unit (rad_per_s or Hz_times_2pi), found per_s".into(),
            }),
        }
    }

    fn rate(&self, name: &str) -> Result<f64> {
        match self.unit {
            Unit::PerSecond => Ok(self.value),
            _ => Err(Error::Parse {
                path: format!("parameters.{name}.unit"),
                message: "expected a rate unit (per_s)".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstantsFile {
    version: String,
    parameters: BTreeMap<String, Quantity>,
}

/// Physical parameters in internal units (rad/s, 1/s).
#[derive(Debug, Clone, PartialEq)]
pub struct Constants {
    pub version: String,
    pub zero_field_splitting: f64,
    pub spin_orbit_axial: f64,
    pub spin_orbit_transverse: f64,
    pub spin_spin_axial: f64,
    pub spin_spin_transverse: f64,
    /// Target A₁–A₂ splitting used to calibrate the strain of the modeled center.
    pub a1_a2_gap: f64,
    /// Radiative decay rate of the excited triplet. Literature-typical placeholder.
    pub excited_decay_rate: f64,
}

const KNOWN: [&str; 7] = [
    "zero_field_splitting",
    "spin_orbit_axial",
    "spin_orbit_transverse",
    "spin_spin_axial",
    "spin_spin_transverse",
    "a1_a2_gap",
    "excited_decay_rate",
];

impl Default for Constants {
    fn default() -> Self {
        Self::from_json_str(DEFAULT_TABLE).expect("shipped constants table is valid")
    }
}

impl Constants {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ConstantsFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        for key in file.parameters.keys() {
            if !KNOWN.contains(&key.as_str()) {
                return Err(Error::Parse {
                    path: format!("parameters.{key}"),
                    message: format!("unknown parameter `{key}`"),
                });
            }
        }
        let defaults: Option<Constants> = if text == DEFAULT_TABLE {
            None
        } else {
            Some(Constants::default())
        };
        let get = |name: &str| -> Option<&Quantity> { file.parameters.get(name) };
        let angular = |name: &str, fallback: Option<f64>| -> Result<f64> {
            match get(name) {
                Some(q) => q.angular(name),
                None => fallback.ok_or_else(|| Error::Parse {
                    path: format!("parameters.{name}"),
                    message: "missing parameter".into(),
                }),
            }
        };
        let d = defaults.as_ref();
        let constants = Constants {
            version: file.version.clone(),
            zero_field_splitting: angular("zero_field_splitting", d.map(|c| c.zero_field_splitting))?,
            spin_orbit_axial: angular("spin_orbit_axial", d.map(|c| c.spin_orbit_axial))?,
            spin_orbit_transverse: angular("spin_orbit_transverse", d.map(|c| c.spin_orbit_transverse))?,
            spin_spin_axial: angular("spin_spin_axial", d.map(|c| c.spin_spin_axial))?,
            spin_spin_transverse: angular("spin_spin_transverse", d.map(|c| c.spin_spin_transverse))?,
            a1_a2_gap: angular("a1_a2_gap", d.map(|c| c.a1_a2_gap))?,
            excited_decay_rate: match get("excited_decay_rate") {
                Some(q) => q.rate("excited_decay_rate")?,
                None => d.map(|c| c.excited_decay_rate).ok_or_else(|| Error::Parse {
                    path: "parameters.excited_decay_rate".into(),
                    message: "missing parameter".into(),
                })?,
            },
        };
        constants.validate()?;
        Ok(constants)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("zero_field_splitting", self.zero_field_splitting),
            ("a1_a2_gap", self.a1_a2_gap),
            ("excited_decay_rate", self.excited_decay_rate),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parse {
                    path: format!("parameters.{name}.value"),
                    message: format!("must be positive, got {v}"),
                });
            }
        }
        Ok(())
    }

    /// Renders the table back to JSON, frequencies as `Hz_times_2pi`.
    pub fn to_json(&self) -> String {
        let f = |w: f64| Quantity { value: w / TWO_PI, unit: Unit::HzTimesTwoPi };
        let mut parameters = BTreeMap::new();
        parameters.insert("zero_field_splitting".to_string(), f(self.zero_field_splitting));
        parameters.insert("spin_orbit_axial".to_string(), f(self.spin_orbit_axial));
        parameters.insert("spin_orbit_transverse".to_string(), f(self.spin_orbit_transverse));
        parameters.insert("spin_spin_axial".to_string(), f(self.spin_spin_axial));
        parameters.insert("spin_spin_transverse".to_string(), f(self.spin_spin_transverse));
        parameters.insert("a1_a2_gap".to_string(), f(self.a1_a2_gap));
        parameters.insert(
            "excited_decay_rate".to_string(),
            Quantity { value: self.excited_decay_rate, unit: Unit::PerSecond },
        );
        let file = ConstantsFile { version: self.version.clone(), parameters };
        serde_json::to_string_pretty(&file).expect("constants serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_table_loads() {
        let c = Constants::default();
        assert!((c.zero_field_splitting - TWO_PI * 2.88e9).abs() < 1.0);
        assert!((c.a1_a2_gap - TWO_PI * 3.2e9).abs() < 1.0);
        assert_eq!(c.version, "1.0.0");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = r#"{"version":"1","parameters":{"bogus":{"value":1,"unit":"per_s"}}}"#;
        let err = Constants::from_json_str(text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn unit_mismatch_is_rejected() {
        let text = r#"{"version":"1","parameters":{"zero_field_splitting":{"value":1,"unit":"per_s"}}}"#;
        assert!(Constants::from_json_str(text).is_err());
        let text = r#"{"version":"1","parameters":{"excited_decay_rate":{"value":1,"unit":"rad_per_s"}}}"#;
        assert!(Constants::from_json_str(text).is_err());
    }

    #[test]
    fn both_frequency_units_agree() {
        let a = r#"{"version":"1","parameters":{"a1_a2_gap":{"value":3.2e9,"unit":"Hz_times_2pi"}}}"#;
        let b = format!(
            r#"{{"version":"1","parameters":{{"a1_a2_gap":{{"value":{},"unit":"rad_per_s"}}}}}}"#,
            TWO_PI * 3.2e9
        );
        let a = Constants::from_json_str(a).unwrap();
        let b = Constants::from_json_str(&b).unwrap();
        assert!((a.a1_a2_gap - b.a1_a2_gap).abs() < 1e-3);
    }

    #[test]
    fn json_round_trip() {
        let c = Constants::default();
        let back = Constants::from_json_str(&c.to_json()).unwrap();
        assert!((back.spin_orbit_axial - c.spin_orbit_axial).abs() < 1e-3);
        assert_eq!(back.excited_decay_rate, c.excited_decay_rate);
    }
}
