use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_FEATURES: usize = 9;

pub const FEATURE_NAMES: [&str; N_FEATURES] =
    ["f1", "f2", "f3", "f4", "f5", "f6", "f7", "f8", "f9"];

/// One phone observation. Durations are seconds, temperatures °C, voltage V.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// F1, 1 when the screen is on.
    pub screen_on: f64,
    /// F2
    pub battery_voltage: f64,
    /// F3
    pub battery_temp: f64,
    /// F4, current on-streak while on, otherwise the last completed one.
    pub screen_on_time: f64,
    /// F5, current off-streak while off, otherwise the last completed one.
    pub screen_off_time: f64,
    /// F6, length of the off-streak that ended at the latest activation.
    pub off_time_before_on: f64,
    /// F7, length of the on-streak that ended at the latest screen-off.
    pub on_time_before_off: f64,
    /// F8, battery temperature at the latest activation.
    pub temp_at_last_on: f64,
    /// F9, battery temperature at the latest screen-off.
    pub temp_at_last_off: f64,
    /// Ground-truth ambient temperature.
    pub label: f64,
}

impl Sample {
    pub fn from_features(f: [f64; N_FEATURES], label: f64) -> Self {
        Self {
            screen_on: f[0],
            battery_voltage: f[1],
            battery_temp: f[2],
            screen_on_time: f[3],
            screen_off_time: f[4],
            off_time_before_on: f[5],
            on_time_before_off: f[6],
            temp_at_last_on: f[7],
            temp_at_last_off: f[8],
            label,
        }
    }

    pub fn features(&self) -> [f64; N_FEATURES] {
        [
            self.screen_on,
            self.battery_voltage,
            self.battery_temp,
            self.screen_on_time,
            self.screen_off_time,
            self.off_time_before_on,
            self.on_time_before_off,
            self.temp_at_last_on,
            self.temp_at_last_off,
        ]
    }

    pub fn with_label(mut self, label: f64) -> Self {
        self.label = label;
        self
    }

    /// Checks the schema ranges. Returns a description of the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.screen_on != 0.0 && self.screen_on != 1.0 {
            return Err(format!("f1 must be 0 or 1, got {}", self.screen_on));
        }
        if !(3.0..=5.0).contains(&self.battery_voltage) {
            return Err(format!(
                "f2 voltage {} outside [3, 5] V",
                self.battery_voltage
            ));
        }
        let durations = [
            ("f4", self.screen_on_time),
            ("f5", self.screen_off_time),
            ("f6", self.off_time_before_on),
            ("f7", self.on_time_before_off),
        ];
        for (name, d) in durations {
            if !(d >= 0.0) || !d.is_finite() {
                return Err(format!("{name} duration {d} must be finite and >= 0"));
            }
        }
        let temps = [
            ("f3", self.battery_temp),
            ("f8", self.temp_at_last_on),
            ("f9", self.temp_at_last_off),
            ("label", self.label),
        ];
        for (name, t) in temps {
            if !(-20.0..=60.0).contains(&t) {
                return Err(format!("{name} temperature {t} outside [-20, 60] °C"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Contributor,
    Participant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneDataset {
    pub phone_id: String,
    pub role: Role,
    pub samples: Vec<Sample>,
}

impl PhoneDataset {
    pub fn new(phone_id: impl Into<String>, role: Role, samples: Vec<Sample>) -> Result<Self> {
        let phone_id = phone_id.into();
        if samples.is_empty() {
            return Err(Error::contract(format!(
                "phone `{phone_id}` has no samples"
            )));
        }
        Ok(Self {
            phone_id,
            role,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.label)
    }
}

/// Rejects corpora with duplicate phone ids.
pub fn check_unique_ids(corpus: &[PhoneDataset]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for d in corpus {
        if !seen.insert(d.phone_id.as_str()) {
            return Err(Error::contract(format!(
                "duplicate phone id `{}`",
                d.phone_id
            )));
        }
    }
    Ok(())
}
