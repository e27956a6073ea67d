//! XNOR / GXNOR arithmetic, thresholded activations and single-neuron forward.

use serde::{Deserialize, Serialize};

use super::ternary::{Ternary, TernaryTensor};
use crate::error::{Error, Result};

/// XNOR of two binary (`±1`) values.
pub fn xnor(w: Ternary, x: Ternary) -> Result<Ternary> {
    if w.is_zero() || x.is_zero() {
        return Err(Error::domain("xnor is only defined on ±1 inputs"));
    }
    Ok(w * x)
}

/// Gated XNOR: the product of two ternary values.
pub fn gxnor(w: Ternary, x: Ternary) -> Ternary {
    w * x
}

/// `sum_i gxnor(w_i, x_i)` over bit planes. Both inputs must be aligned at
/// bit 0 with all bits beyond the logical length cleared.
pub fn dot_planes(wp: &[u64], wm: &[u64], xp: &[u64], xm: &[u64]) -> i32 {
    let mut agree = 0u32;
    let mut differ = 0u32;
    for i in 0..wp.len() {
        agree += (wp[i] & xp[i]).count_ones() + (wm[i] & xm[i]).count_ones();
        differ += (wp[i] & xm[i]).count_ones() + (wm[i] & xp[i]).count_ones();
    }
    agree as i32 - differ as i32
}

pub fn gxnor_dot(w_row: &TernaryTensor, x: &TernaryTensor) -> Result<i64> {
    if w_row.len() != x.len() {
        return Err(Error::Shape {
            expected: vec![w_row.len()],
            actual: vec![x.len()],
        });
    }
    Ok(dot_planes(w_row.plus_plane(), w_row.minus_plane(), x.plus_plane(), x.minus_plane()) as i64)
}

/// Dead-zone ternary activation: `+1` above `delta`, `-1` below `-delta`.
pub fn phi(s: f64, delta: f64) -> Ternary {
    if s > delta {
        Ternary::Pos
    } else if s < -delta {
        Ternary::Neg
    } else {
        Ternary::Zero
    }
}

/// Binary sign with `sign(0) = +1`.
pub fn sign(s: f64) -> Ternary {
    if s >= 0.0 {
        Ternary::Pos
    } else {
        Ternary::Neg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ActivationKind {
    Sign,
    Phi { delta: f64 },
    None,
}

impl ActivationKind {
    pub fn apply(self, y: f64) -> Option<Ternary> {
        match self {
            ActivationKind::Sign => Some(sign(y)),
            ActivationKind::Phi { delta } => Some(phi(y, delta)),
            ActivationKind::None => None,
        }
    }
}

/// Per-neuron batch normalization; `std` is `sqrt(running_var + eps)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: f64,
    pub beta: f64,
    pub mean: f64,
    pub std: f64,
}

impl BatchNormParams {
    pub fn from_variance(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> Result<Self> {
        if !(var + eps > 0.0) {
            return Err(Error::domain(format!("batchnorm variance must be positive, got {var}")));
        }
        Ok(Self {
            gamma,
            beta,
            mean,
            std: (var + eps).sqrt(),
        })
    }

    pub fn apply(&self, s: f64) -> f64 {
        self.gamma * (s - self.mean) / self.std + self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    /// Integer threshold subtracted from the accumulation.
    pub threshold: i64,
    pub batchnorm: Option<BatchNormParams>,
    pub activation: ActivationKind,
}

/// Integer comparison equivalent to batchnorm followed by an activation.
///
/// Unflipped: `+1` when `s >= pos`, `-1` when `s <= neg`, `0` otherwise.
/// Flipped (negative gamma): `+1` when `s <= pos`, `-1` when `s >= neg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldedThreshold {
    pub pos: i64,
    pub neg: i64,
    pub flip: bool,
}

impl FoldedThreshold {
    pub fn apply(&self, s: i64) -> Ternary {
        let (is_pos, is_neg) = if self.flip {
            (s <= self.pos, s >= self.neg)
        } else {
            (s >= self.pos, s <= self.neg)
        };
        if is_pos {
            Ternary::Pos
        } else if is_neg {
            Ternary::Neg
        } else {
            Ternary::Zero
        }
    }

    fn constant(v: Ternary) -> Self {
        match v {
            Ternary::Pos => Self { pos: i64::MIN, neg: i64::MIN, flip: false },
            Ternary::Neg => Self { pos: i64::MAX, neg: i64::MAX, flip: false },
            Ternary::Zero => Self { pos: i64::MAX, neg: i64::MIN, flip: false },
        }
    }
}

/// Smallest integer `s` with `s > x` / `s >= x` and the mirrored largest
/// integers, saturating on overflow.
fn int_above(x: f64, strict: bool) -> i64 {
    let c = if strict { x.floor() + 1.0 } else { x.ceil() };
    c.clamp(i64::MIN as f64, i64::MAX as f64) as i64
}

fn int_below(x: f64, strict: bool) -> i64 {
    let f = if strict { x.ceil() - 1.0 } else { x.floor() };
    f.clamp(i64::MIN as f64, i64::MAX as f64) as i64
}

impl NeuronParams {
    fn pre_activation(&self, dot: i64) -> f64 {
        let s = (dot - self.threshold) as f64;
        match &self.batchnorm {
            Some(bn) => bn.apply(s),
            None => s,
        }
    }

    /// Folds threshold, batchnorm and activation into integer comparisons on
    /// the raw accumulation. Returns `None` for a linear (no activation) neuron.
    pub fn fold(&self) -> Option<FoldedThreshold> {
        let t = self.threshold as f64;
        // y = a * (s - t) + b; with no batchnorm a = 1, b = 0
        let (a, b) = match &self.batchnorm {
            Some(bn) => (bn.gamma / bn.std, bn.beta - bn.gamma * bn.mean / bn.std),
            None => (1.0, 0.0),
        };
        let (up, up_strict, down, down_strict) = match self.activation {
            ActivationKind::None => return None,
            // +1 iff y >= 0
            ActivationKind::Sign => (0.0, false, 0.0, true),
            // +1 iff y > delta, -1 iff y < -delta
            ActivationKind::Phi { delta } => (delta, true, -delta, true),
        };
        if a == 0.0 {
            return Some(FoldedThreshold::constant(self.activation.apply(b).unwrap()));
        }
        // y > up  <=>  s > t + (up - b) / a  when a > 0, s < ... when a < 0
        let s_up = t + (up - b) / a;
        let s_down = t + (down - b) / a;
        Some(if a > 0.0 {
            FoldedThreshold {
                pos: int_above(s_up, up_strict),
                neg: int_below(s_down, down_strict),
                flip: false,
            }
        } else {
            FoldedThreshold {
                pos: int_below(s_up, up_strict),
                neg: int_above(s_down, down_strict),
                flip: true,
            }
        })
    }
}

/// Forward pass of one neuron: activation of the (optionally normalized)
/// `gxnor_dot(w_row, x) - T_j`. Linear neurons return `Err` since they have no
/// ternary output; use [`neuron_preactivation`] for those.
pub fn neuron_forward(w_row: &TernaryTensor, x: &TernaryTensor, params: &NeuronParams) -> Result<Ternary> {
    let dot = gxnor_dot(w_row, x)?;
    params
        .activation
        .apply(params.pre_activation(dot))
        .ok_or_else(|| Error::domain("neuron has no activation"))
}

pub fn neuron_preactivation(w_row: &TernaryTensor, x: &TernaryTensor, params: &NeuronParams) -> Result<f64> {
    Ok(params.pre_activation(gxnor_dot(w_row, x)?))
}
