//! bfloat16 storage emulation, grid spacing, master-copy update policies and
//! the update-truncation audit.
//!
//! Values are held as exact `f64`s that lie on the bfloat16 grid (1 sign bit,
//! 8 exponent bits, 7 stored mantissa bits). Rounding is nearest-even and
//! results below the smallest normal are flushed to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Format, Matrix};

const F64_MANTISSA_BITS: u32 = 52;
const BF16_MANTISSA_BITS: u32 = 7;
const DROPPED_BITS: u32 = F64_MANTISSA_BITS - BF16_MANTISSA_BITS;
const SIGN_MASK: u64 = 1 << 63;

/// Smallest positive normal bfloat16 (same exponent range as binary32).
pub const BF16_MIN_NORMAL: f64 = 1.175_494_350_822_287_5e-38; // 2^-126
/// Largest finite bfloat16: (2 - 2^-7) · 2^127.
pub const BF16_MAX: f64 = 3.389_531_389_251_535_5e38;

/// A real number that is exactly representable in bfloat16.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Bf16Scalar(f64);

impl Bf16Scalar {
    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_nan(self) -> bool {
        self.0.is_nan()
    }

    /// The 16-bit storage word.
    pub fn to_bits(self) -> u16 {
        ((self.0 as f32).to_bits() >> 16) as u16
    }

    pub fn from_bits(bits: u16) -> Self {
        let v = f32::from_bits(u32::from(bits) << 16) as f64;
        // stored subnormals are flushed on load as well
        if v != 0.0 && v.abs() < BF16_MIN_NORMAL {
            Bf16Scalar(0.0f64.copysign(v))
        } else {
            Bf16Scalar(v)
        }
    }
}

impl From<Bf16Scalar> for f64 {
    fn from(v: Bf16Scalar) -> f64 {
        v.0
    }
}

/// Rounds `x` to the nearest bfloat16, ties to even.
pub fn bf16_round(x: f64) -> Bf16Scalar {
    if x.is_nan() || x.is_infinite() {
        return Bf16Scalar(x);
    }
    let bits = x.to_bits();
    let sign = bits & SIGN_MASK;
    let mag = bits & !SIGN_MASK;
    let lsb = (mag >> DROPPED_BITS) & 1;
    let rounded = (mag + ((1u64 << (DROPPED_BITS - 1)) - 1) + lsb) & !((1u64 << DROPPED_BITS) - 1);
    let v = f64::from_bits(rounded);
    let v = if v > BF16_MAX {
        f64::INFINITY
    } else if v < BF16_MIN_NORMAL {
        0.0
    } else {
        v
    };
    Bf16Scalar(f64::from_bits(v.to_bits() | sign))
}

/// Grid spacing of bfloat16 at a magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bf16Ulp {
    pub spacing: f64,
    /// The input was zero or below the normal range; `spacing` is then the
    /// spacing of the smallest normal binade.
    pub below_normal: bool,
}

/// `2^(floor(log2|x|) - 7)`, the distance between neighbouring bfloat16 values at `|x|`.
pub fn ulp_bf16(x: f64) -> Bf16Ulp {
    let a = x.abs();
    if !(a >= BF16_MIN_NORMAL) {
        return Bf16Ulp {
            spacing: exp2i(-126 - BF16_MANTISSA_BITS as i32),
            below_normal: true,
        };
    }
    let exponent = ((a.to_bits() >> F64_MANTISSA_BITS) & 0x7ff) as i32 - 1023;
    Bf16Ulp {
        spacing: exp2i(exponent - BF16_MANTISSA_BITS as i32),
        below_normal: false,
    }
}

fn exp2i(e: i32) -> f64 {
    2f64.powi(e)
}

/// Quantizes every entry onto the bfloat16 grid.
pub fn quantize_bf16(m: &Matrix) -> Matrix {
    m.map(|v| bf16_round(v).value()).with_format(Format::Bf16)
}

/// Where the authoritative parameter values live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MasterFormat {
    /// Wide master: never quantized, updates accumulate exactly at working precision.
    #[default]
    Wide32,
    /// Every accumulation is rounded to IEEE binary32.
    Binary32,
    /// Master itself is bfloat16; sub-half-ULP updates vanish.
    Bf16,
}

/// Format of the copies the forward pass computes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComputeFormat {
    #[default]
    Wide32,
    Bf16,
}

/// Learning-rate multipliers per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupLrMultipliers {
    pub gate: f64,
    pub shared: f64,
    pub routed: f64,
}

impl Default for GroupLrMultipliers {
    fn default() -> Self {
        Self {
            gate: 1.0,
            shared: 1.0,
            routed: 1.0,
        }
    }
}

/// Numeric-format contract for master copies versus compute copies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PrecisionPolicy {
    pub master_format: MasterFormat,
    pub compute_format: ComputeFormat,
    pub lr_multipliers: GroupLrMultipliers,
}

impl PrecisionPolicy {
    /// Wide masters with bfloat16 compute copies (autocast-style).
    pub fn mixed() -> Self {
        Self {
            master_format: MasterFormat::Wide32,
            compute_format: ComputeFormat::Bf16,
            lr_multipliers: GroupLrMultipliers::default(),
        }
    }

    /// Masters and compute copies both on the bfloat16 grid.
    pub fn pure_bf16() -> Self {
        Self {
            master_format: MasterFormat::Bf16,
            compute_format: ComputeFormat::Bf16,
            lr_multipliers: GroupLrMultipliers::default(),
        }
    }

    /// Copy used by the forward pass; masters are left untouched.
    pub fn compute_copy(&self, master: &Matrix) -> Matrix {
        match self.compute_format {
            ComputeFormat::Wide32 => master.clone(),
            ComputeFormat::Bf16 => quantize_bf16(master),
        }
    }

    /// Rounds a freshly initialized master onto its storage grid.
    pub fn store(&self, m: &Matrix) -> Matrix {
        match self.master_format {
            MasterFormat::Wide32 => m.clone(),
            MasterFormat::Binary32 => m.map(|v| v as f32 as f64).with_format(Format::Wide32),
            MasterFormat::Bf16 => quantize_bf16(m),
        }
    }
}

/// Adds `delta` to `master` under the master format.
///
/// The whole update is rejected, leaving `master` untouched, if any delta
/// entry is non-finite.
pub fn apply_update(master: &mut Matrix, delta: &Matrix, format: MasterFormat) -> Result<()> {
    if master.shape() != delta.shape() {
        return Err(Error::Shape(format!(
            "update {:?} for parameter {:?}",
            delta.shape(),
            master.shape()
        )));
    }
    if let Some(pos) = delta.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Evaluation(format!(
            "update rejected: entry {pos} is {}",
            delta.data()[pos]
        )));
    }
    let step: fn(f64, f64) -> f64 = match format {
        MasterFormat::Wide32 => |w, d| w + d,
        MasterFormat::Binary32 => |w, d| (w as f32 + d as f32) as f64,
        MasterFormat::Bf16 => |w, d| bf16_round(w + d).value(),
    };
    for (w, &d) in master.data_mut().iter_mut().zip(delta.data()) {
        *w = step(*w, d);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationVerdict {
    /// The update is smaller than half a ULP and rounds away.
    Truncated,
    /// The update moves the stored value.
    Resolved,
    /// No update to speak of (zero gradient or zero learning rate).
    Vacuous,
}

/// One row of an update-truncation audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub magnitude: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub update: f64,
    pub ulp: f64,
    pub half_ulp: f64,
    pub below_normal: bool,
    pub verdict: TruncationVerdict,
}

/// Spacing values that published tables quote for the bf16 trap, checked
/// against the grid formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulatedUlp {
    pub magnitude: f64,
    pub tabulated: f64,
    pub formula: f64,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
    /// lr 0.04, gradient 0.005, weight 115.5: the canonical truncated update.
    pub worked_example: AuditEntry,
    pub tabulated: Vec<TabulatedUlp>,
}

/// Verdict for a single parameter magnitude.
pub fn audit_entry(name: &str, magnitude: f64, grad_norm: f64, lr: f64) -> Result<AuditEntry> {
    if !(lr > 0.0) {
        return Err(Error::Argument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !magnitude.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Argument(format!(
            "non-finite audit input for {name:?}"
        )));
    }
    let update = lr * grad_norm.abs();
    let ulp = ulp_bf16(magnitude);
    let half_ulp = 0.5 * ulp.spacing;
    let verdict = if update == 0.0 {
        TruncationVerdict::Vacuous
    } else if update < half_ulp {
        TruncationVerdict::Truncated
    } else {
        TruncationVerdict::Resolved
    };
    Ok(AuditEntry {
        name: name.to_owned(),
        magnitude,
        lr,
        grad_norm,
        update,
        ulp: ulp.spacing,
        half_ulp,
        below_normal: ulp.below_normal,
        verdict,
    })
}

/// Per-magnitude truncation verdicts for an `lr × grad_norm` update.
pub fn audit_truncation(lr: f64, grad_norm: f64, magnitudes: &[f64]) -> Result<AuditReport> {
    if magnitudes.is_empty() {
        return Err(Error::Argument("no weight magnitudes to audit".into()));
    }
    let entries = magnitudes
        .iter()
        .map(|&m| audit_entry("", m, grad_norm, lr))
        .collect::<Result<Vec<_>>>()?;
    Ok(AuditReport {
        entries,
        worked_example: audit_entry("worked_example", 115.5, 0.005, 0.04)?,
        tabulated: tabulated_ulps(),
    })
}

/// The two bf16 spacings usually quoted for this trap. The one at 0.01
/// (7e-8) is not the grid spacing there (2^-14); it is reported, not adopted.
pub fn tabulated_ulps() -> Vec<TabulatedUlp> {
    [(115.5, 0.5), (0.01, 7e-8)]
        .into_iter()
        .map(|(magnitude, tabulated)| {
            let formula = ulp_bf16(magnitude).spacing;
            TabulatedUlp {
                magnitude,
                tabulated,
                formula,
                agrees: (formula - tabulated).abs() <= 0.1 * formula,
            }
        })
        .collect()
}
