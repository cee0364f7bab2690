//! Focus schedules: training progress to `(alpha, beta)` mixing weights.
//!
//! The focus `F` is the value of `p_y` at which the true-class gradient of
//! `alpha * CE + beta * EL` peaks, `F = 0.5 (1 - alpha / beta)`. Inverting it
//! with `alpha = 1` gives `beta = 1 / (1 - 2F)`; `F = 0.5` is reached by
//! dropping CE entirely.
//!
//! Three protocols are supported, with the config strings
//!
//! | string   | protocol      | behaviour                                              |
//! |----------|---------------|--------------------------------------------------------|
//! | `f0`     | `ConstantF0`  | `F = 0` throughout                                     |
//! | `f0-05`  | `TwoPhase`    | `F = 0`, then `F = 0.5` for the last part of training  |
//! | `f0..05` | `Gradual`     | equal-length phases walking up a ladder of `F` values  |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::MixWeights;

pub const DEFAULT_SWITCH_FRACTION: f64 = 0.95;
pub const DEFAULT_FOCUS_LADDER: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Weights active during one phase of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseWeights {
    pub alpha: f64,
    pub beta: f64,
    pub focus: f64,
}

impl PhaseWeights {
    pub fn mix(&self) -> MixWeights {
        MixWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

/// Weights that put the gradient peak at `p_y = focus`.
pub fn weights_for_focus(focus: f64) -> Result<PhaseWeights> {
    if !(0.0..=0.5).contains(&focus) {
        return Err(invalid(format!("focus must lie in [0, 0.5], got {focus}")));
    }
    if focus == 0.5 {
        return Ok(PhaseWeights {
            alpha: 0.0,
            beta: 1.0,
            focus,
        });
    }
    Ok(PhaseWeights {
        alpha: 1.0,
        beta: 1.0 / (1.0 - 2.0 * focus),
        focus,
    })
}

/// Focus point of a mixture, clamped to `[0, 0.5]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocusPoint {
    pub focus: f64,
    /// The unclamped value `0.5 (1 - alpha / beta)` fell outside `[0, 0.5]`.
    pub clamped: bool,
}

pub fn focus_of(w: MixWeights) -> Result<FocusPoint> {
    if w.beta <= 0.0 {
        return Err(invalid("focus is undefined for beta = 0 (pure cross-entropy)"));
    }
    let raw = 0.5 * (1.0 - w.alpha / w.beta);
    let focus = raw.clamp(0.0, 0.5);
    Ok(FocusPoint {
        focus,
        clamped: focus != raw,
    })
}

/// One of the three focus protocols.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleSpec {
    ConstantF0,
    TwoPhase { switch_fraction: f64 },
    Gradual { focus_ladder: Vec<f64> },
}

impl ScheduleSpec {
    pub fn two_phase() -> Self {
        ScheduleSpec::TwoPhase {
            switch_fraction: DEFAULT_SWITCH_FRACTION,
        }
    }

    pub fn gradual() -> Self {
        ScheduleSpec::Gradual {
            focus_ladder: DEFAULT_FOCUS_LADDER.to_vec(),
        }
    }

    pub fn protocol(&self) -> &'static str {
        match self {
            ScheduleSpec::ConstantF0 => "f0",
            ScheduleSpec::TwoPhase { .. } => "f0-05",
            ScheduleSpec::Gradual { .. } => "f0..05",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScheduleSpec::ConstantF0 => Ok(()),
            ScheduleSpec::TwoPhase { switch_fraction } => {
                if *switch_fraction > 0.0 && *switch_fraction < 1.0 {
                    Ok(())
                } else {
                    Err(invalid(format!(
                        "switch_fraction must lie in (0, 1), got {switch_fraction}"
                    )))
                }
            }
            ScheduleSpec::Gradual { focus_ladder } => {
                if focus_ladder.is_empty() {
                    return Err(Error::Empty("focus ladder"));
                }
                if focus_ladder.iter().any(|f| !(0.0..=0.5).contains(f)) {
                    return Err(invalid("focus ladder values must lie in [0, 0.5]"));
                }
                if focus_ladder.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(invalid("focus ladder must be strictly increasing"));
                }
                Ok(())
            }
        }
    }

    /// First epoch of each phase after the first.
    ///
    /// Two-phase switches at `floor(switch_fraction * T)` (at least 1). Gradual
    /// uses `L` phases of `floor(T / L)` epochs with the remainder in the last
    /// phase; phase `k` starts at `k * floor(T / L)`.
    pub fn boundaries(&self, total_epochs: usize) -> Vec<usize> {
        match self {
            ScheduleSpec::ConstantF0 => Vec::new(),
            ScheduleSpec::TwoPhase { switch_fraction } => {
                let switch = two_phase_switch(*switch_fraction, total_epochs);
                if switch < total_epochs {
                    vec![switch]
                } else {
                    Vec::new()
                }
            }
            ScheduleSpec::Gradual { focus_ladder } => {
                let len = (total_epochs / focus_ladder.len()).max(1);
                (1..focus_ladder.len())
                    .map(|k| k * len)
                    .filter(|&b| b < total_epochs)
                    .collect()
            }
        }
    }
}

fn two_phase_switch(fraction: f64, total_epochs: usize) -> usize {
    // the small offset keeps 0.95 * 100 from landing on 94.999...
    let raw = (fraction * total_epochs as f64 + 1e-9).floor() as usize;
    raw.max(1)
}

/// Weights for `epoch` (0-based) of a run with `total_epochs` epochs.
pub fn schedule_at(spec: &ScheduleSpec, epoch: usize, total_epochs: usize) -> Result<PhaseWeights> {
    if total_epochs == 0 {
        return Err(invalid("total_epochs must be >= 1"));
    }
    if epoch >= total_epochs {
        return Err(invalid(format!("epoch {epoch} out of range for {total_epochs} epochs")));
    }
    spec.validate()?;
    let focus = match spec {
        ScheduleSpec::ConstantF0 => 0.0,
        ScheduleSpec::TwoPhase { switch_fraction } => {
            if epoch < two_phase_switch(*switch_fraction, total_epochs) {
                0.0
            } else {
                0.5
            }
        }
        ScheduleSpec::Gradual { focus_ladder } => {
            let phases = focus_ladder.len();
            let len = (total_epochs / phases).max(1);
            focus_ladder[(epoch / len).min(phases - 1)]
        }
    };
    weights_for_focus(focus)
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.protocol())
    }
}

impl FromStr for ScheduleSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f0" => Ok(ScheduleSpec::ConstantF0),
            "f0-05" => Ok(ScheduleSpec::two_phase()),
            "f0..05" => Ok(ScheduleSpec::gradual()),
            other => Err(invalid(format!(
                "unknown schedule {other:?}, expected one of f0, f0-05, f0..05"
            ))),
        }
    }
}

/// Either a bare protocol string or an object with overrides:
/// `"f0..05"` or `{"protocol": "f0-05", "switch_fraction": 0.9}`.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScheduleRepr {
    Short(String),
    Full {
        protocol: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        switch_fraction: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        focus_ladder: Option<Vec<f64>>,
    },
}

impl Serialize for ScheduleSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match self {
            ScheduleSpec::TwoPhase { switch_fraction } if *switch_fraction != DEFAULT_SWITCH_FRACTION => {
                ScheduleRepr::Full {
                    protocol: self.protocol().into(),
                    switch_fraction: Some(*switch_fraction),
                    focus_ladder: None,
                }
            }
            ScheduleSpec::Gradual { focus_ladder } if focus_ladder[..] != DEFAULT_FOCUS_LADDER[..] => {
                ScheduleRepr::Full {
                    protocol: self.protocol().into(),
                    switch_fraction: None,
                    focus_ladder: Some(focus_ladder.clone()),
                }
            }
            _ => ScheduleRepr::Short(self.protocol().into()),
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ScheduleSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let spec = match ScheduleRepr::deserialize(d)? {
            ScheduleRepr::Short(s) => s.parse().map_err(D::Error::custom)?,
            ScheduleRepr::Full {
                protocol,
                switch_fraction,
                focus_ladder,
            } => {
                let mut spec: ScheduleSpec = protocol.parse().map_err(D::Error::custom)?;
                match &mut spec {
                    ScheduleSpec::TwoPhase { switch_fraction: f } => {
                        if let Some(v) = switch_fraction {
                            *f = v;
                        }
                    }
                    ScheduleSpec::Gradual { focus_ladder: l } => {
                        if let Some(v) = focus_ladder {
                            *l = v;
                        }
                    }
                    ScheduleSpec::ConstantF0 => {}
                }
                spec
            }
        };
        spec.validate().map_err(D::Error::custom)?;
        Ok(spec)
    }
}
