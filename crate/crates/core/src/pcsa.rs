//! Behavioral model of the precharge sense amplifier (PCSA).
//!
//! After precharge both branch nodes sit at Vdd and discharge through their
//! resistive device: `V_i(t) = Vdd * exp(-t / (R_i * C))`. The latch resolves at
//! the earliest instant where the faster node has crossed the inverter trip
//! point and the two nodes differ by at least the regeneration differential.
//! The reported switching time adds a fixed latch delay.
//!
//! All thresholds are fractions of Vdd, so time scales with `R_min * C` and the
//! normalized problem depends only on the resistance ratio.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supply voltage of the near-threshold operating point.
pub const VDD_NEAR_THRESHOLD: f64 = 0.6;
/// Nominal supply voltage of the process.
pub const VDD_NOMINAL: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcsaParams {
    /// Supply voltage (V).
    pub vdd: f64,
    /// Branch node capacitance (F).
    pub branch_capacitance: f64,
    /// Inverter trip point as a fraction of Vdd.
    pub trip_fraction: f64,
    /// Branch separation, as a fraction of Vdd, needed for the latch to regenerate.
    pub min_differential: f64,
    /// Fixed regeneration delay added to the resolution time (s).
    pub latch_delay: f64,
    /// Lognormal shape of the multiplicative trial-to-trial jitter.
    pub jitter_sigma: f64,
}

impl PcsaParams {
    /// Parameters fitted to the default near-threshold anchor set
    /// (see [`near_threshold_anchors`]); `calibrate` reproduces them.
    pub fn near_threshold() -> Self {
        Self {
            vdd: VDD_NEAR_THRESHOLD,
            branch_capacitance: NT_CAPACITANCE,
            trip_fraction: NT_TRIP_FRACTION,
            min_differential: NT_MIN_DIFFERENTIAL,
            latch_delay: NT_LATCH_DELAY,
            jitter_sigma: DEFAULT_JITTER_SIGMA,
        }
    }

    /// Nominal-voltage parameters derived from a near-threshold set: the
    /// latch regenerates three times faster and needs a third of the
    /// differential.
    pub fn nominal_from(near_threshold: &PcsaParams) -> Self {
        Self {
            vdd: VDD_NOMINAL,
            min_differential: near_threshold.min_differential / 3.0,
            latch_delay: near_threshold.latch_delay / 3.0,
            ..*near_threshold
        }
    }

    pub fn nominal() -> Self {
        Self::nominal_from(&Self::near_threshold())
    }

    /// Built-in parameter set for a supply voltage (0.6 V or 1.2 V).
    pub fn for_vdd(vdd: f64) -> Result<Self> {
        if (vdd - VDD_NEAR_THRESHOLD).abs() < 1e-9 {
            Ok(Self::near_threshold())
        } else if (vdd - VDD_NOMINAL).abs() < 1e-9 {
            Ok(Self::nominal())
        } else {
            Err(Error::config(format!(
                "no built-in sense amplifier parameters for vdd = {vdd} V (use 0.6 or 1.2)"
            )))
        }
    }

    pub fn without_jitter(mut self) -> Self {
        self.jitter_sigma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let p = self;
        let ok = p.vdd.is_finite()
            && p.vdd > 0.0
            && p.branch_capacitance.is_finite()
            && p.branch_capacitance > 0.0
            && p.trip_fraction > 0.0
            && p.trip_fraction < 1.0
            && p.min_differential > 0.0
            && p.min_differential < 1.0
            && p.latch_delay.is_finite()
            && p.latch_delay >= 0.0
            && p.jitter_sigma.is_finite()
            && p.jitter_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid sense amplifier parameters: {p:?}")))
        }
    }
}

const NT_CAPACITANCE: f64 = 4.7765e-13;
const NT_TRIP_FRACTION: f64 = 0.78;
const NT_MIN_DIFFERENTIAL: f64 = 0.032934;
const NT_LATCH_DELAY: f64 = 44.120e-9;
pub const DEFAULT_JITTER_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Bl,
    Blb,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SenseOutcome {
    Resolved { winner: Branch, switching_time: f64 },
    Unresolved,
}

impl SenseOutcome {
    pub fn is_resolved(&self) -> bool {
        matches!(self, SenseOutcome::Resolved { .. })
    }
}

fn check_resistances(r_bl: f64, r_blb: f64) -> Result<()> {
    if !(r_bl.is_finite() && r_bl > 0.0 && r_blb.is_finite() && r_blb > 0.0) {
        return Err(Error::domain(format!(
            "branch resistances must be positive and finite (r_bl {r_bl}, r_blb {r_blb})"
        )));
    }
    Ok(())
}

/// Normalized separation `exp(-s/rho) - exp(-s)` between the slow and fast
/// branch voltages, with `s = t / (R_min C)` and `rho = R_max / R_min`.
fn separation(s: f64, rho: f64) -> f64 {
    (-s).exp() * (s * (rho - 1.0) / rho).exp_m1()
}

/// Normalized resolution instant, or `None` when the race never separates
/// enough while the fast node is past its trip point.
fn normalized_resolution(rho: f64, trip_fraction: f64, min_differential: f64) -> Option<f64> {
    if rho <= 1.0 {
        return None;
    }
    let s_trip = (1.0 / trip_fraction).ln();
    // separation peaks at s_peak and decays afterwards
    let s_peak = rho * rho.ln() / (rho - 1.0);
    if separation(s_peak, rho) < min_differential {
        return None;
    }
    if separation(s_trip, rho) >= min_differential {
        return Some(s_trip);
    }
    if s_trip > s_peak {
        return None;
    }
    let (mut lo, mut hi) = (s_trip, s_peak);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if separation(mid, rho) >= min_differential {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Time from sense enable until both conditions hold, without latch delay.
/// Returns `f64::INFINITY` when the amplifier never resolves.
pub fn resolution_time(r_bl: f64, r_blb: f64, params: &PcsaParams) -> Result<f64> {
    check_resistances(r_bl, r_blb)?;
    let (lo, hi) = if r_bl <= r_blb { (r_bl, r_blb) } else { (r_blb, r_bl) };
    let rho = hi / lo;
    Ok(
        match normalized_resolution(rho, params.trip_fraction, params.min_differential) {
            Some(s) => s * lo * params.branch_capacitance,
            None => f64::INFINITY,
        },
    )
}

/// Deterministic switching time (s); `f64::INFINITY` encodes non-resolution.
pub fn switching_time(r_bl: f64, r_blb: f64, params: &PcsaParams) -> Result<f64> {
    Ok(resolution_time(r_bl, r_blb, params)? + params.latch_delay)
}

/// One jittered sense operation within `window` seconds.
///
/// Exactly one normal variate is drawn per call when jitter is enabled, so
/// streams stay aligned whatever the outcome.
pub fn sense<R: Rng + ?Sized>(
    r_bl: f64,
    r_blb: f64,
    params: &PcsaParams,
    window: f64,
    rng: &mut R,
) -> Result<SenseOutcome> {
    if !(window > 0.0) {
        return Err(Error::domain(format!("sense window must be positive, got {window}")));
    }
    let t_det = switching_time(r_bl, r_blb, params)?;
    let t = if params.jitter_sigma > 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        t_det * (params.jitter_sigma * z).exp()
    } else {
        t_det
    };
    if r_bl == r_blb || !(t <= window) {
        return Ok(SenseOutcome::Unresolved);
    }
    let winner = if r_bl < r_blb { Branch::Bl } else { Branch::Blb };
    Ok(SenseOutcome::Resolved {
        winner,
        switching_time: t,
    })
}

/// Switching times over the grid: `map[i][j]` is `t_sw(grid[i], grid[j])`
/// with `grid[i]` on BL.
pub fn switching_time_map(grid: &[f64], params: &PcsaParams) -> Result<Vec<Vec<f64>>> {
    grid.iter()
        .map(|&r_bl| {
            grid.iter()
                .map(|&r_blb| switching_time(r_bl, r_blb, params))
                .collect()
        })
        .collect()
}

/// `n` log-spaced resistances from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            let mut g: Vec<f64> = (0..n)
                .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
                .collect();
            g[0] = lo;
            g[n - 1] = hi;
            g
        }
    }
}

/// Number of map cells slower than `threshold` (non-resolving cells count).
pub fn count_slower_than(map: &[Vec<f64>], threshold: f64) -> usize {
    map.iter().flatten().filter(|&&t| t > threshold).count()
}

pub fn write_map_csv<W: Write>(out: &mut W, grid: &[f64], map: &[Vec<f64>]) -> std::io::Result<()> {
    writeln!(out, "r_bl_ohm,r_blb_ohm,t_sw_ns")?;
    for (i, &r_bl) in grid.iter().enumerate() {
        for (j, &r_blb) in grid.iter().enumerate() {
            writeln!(out, "{},{},{}", r_bl, r_blb, map[i][j] * 1e9)?;
        }
    }
    Ok(())
}

/// A measured or simulated switching time the model should reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub r_bl: f64,
    pub r_blb: f64,
    pub vdd: f64,
    /// Target switching time (s).
    pub target: f64,
}

impl Anchor {
    pub const fn new(r_bl: f64, r_blb: f64, vdd: f64, target: f64) -> Self {
        Self {
            r_bl,
            r_blb,
            vdd,
            target,
        }
    }
}

/// Default near-threshold anchors: the LRS/HRS (20k/350k, 50 ns) and HRS/HRS
/// (320k/350k, 200 ns) transients, plus the edge of the 50 ns convergence
/// region measured against a 100 kOhm BLb device.
pub fn near_threshold_anchors() -> Vec<Anchor> {
    vec![
        Anchor::new(20e3, 350e3, VDD_NEAR_THRESHOLD, 50e-9),
        Anchor::new(320e3, 350e3, VDD_NEAR_THRESHOLD, 200e-9),
        Anchor::new(80e3, 100e3, VDD_NEAR_THRESHOLD, 50e-9),
    ]
}

/// Which parameters `calibrate` may move. The others keep their initial value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeParams {
    pub capacitance: bool,
    pub trip_fraction: bool,
    pub min_differential: bool,
    pub latch_delay: bool,
}

impl FreeParams {
    pub const ALL: FreeParams = FreeParams {
        capacitance: true,
        trip_fraction: true,
        min_differential: true,
        latch_delay: true,
    };

    /// Default for the near-threshold fit: the trip point stays at its
    /// initial value.
    pub const DEFAULT: FreeParams = FreeParams {
        capacitance: true,
        trip_fraction: false,
        min_differential: true,
        latch_delay: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub params: PcsaParams,
    pub anchors: Vec<Anchor>,
    /// Fitted switching time per anchor (s).
    pub fitted: Vec<f64>,
    /// Signed relative error per anchor.
    pub relative_errors: Vec<f64>,
}

impl Calibration {
    pub fn worst_relative_error(&self) -> f64 {
        self.relative_errors.iter().fold(0.0, |m, e| m.max(e.abs()))
    }

    pub fn report(&self) -> String {
        let mut s = String::from("r_bl_ohm,r_blb_ohm,vdd_v,target_ns,fitted_ns,rel_error\n");
        for ((a, t), e) in self.anchors.iter().zip(&self.fitted).zip(&self.relative_errors) {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                a.r_bl,
                a.r_blb,
                a.vdd,
                a.target * 1e9,
                t * 1e9,
                e
            ));
        }
        s
    }
}

/// Relative error above which no acceptable fit exists.
pub const CALIBRATION_FAILURE_TOLERANCE: f64 = 0.25;
/// Relative error every anchor should meet after a successful fit.
pub const CALIBRATION_TARGET_TOLERANCE: f64 = 0.10;

// Search box; log-space for C and dv_min, logit-space for the trip point.
const LN_C_RANGE: (f64, f64) = (-36.0, -22.0); // ~2e-16 .. 2.8e-10 F
const LOGIT_TRIP_RANGE: (f64, f64) = (-4.0, 4.0);
const LN_DV_RANGE: (f64, f64) = (-11.5, -0.1); // ~1e-5 .. 0.9

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Objective<'a> {
    anchors: &'a [Anchor],
    base: PcsaParams,
    free: FreeParams,
}

impl Objective<'_> {
    /// Coordinates: [ln C, logit trip, ln dv]; fixed ones are ignored.
    fn params_at(&self, x: [f64; 3]) -> PcsaParams {
        let mut p = self.base;
        if self.free.capacitance {
            p.branch_capacitance = x[0].exp();
        }
        if self.free.trip_fraction {
            p.trip_fraction = logistic(x[1]);
        }
        if self.free.min_differential {
            p.min_differential = x[2].exp();
        }
        p
    }

    /// Sum of squared relative errors, with the latch delay solved in closed
    /// form when it is free.
    fn evaluate(&self, x: [f64; 3]) -> (f64, PcsaParams) {
        let mut p = self.params_at(x);
        let mut res = Vec::with_capacity(self.anchors.len());
        for a in self.anchors {
            let r = match resolution_time(a.r_bl, a.r_blb, &p) {
                Ok(r) if r.is_finite() => r,
                _ => return (f64::INFINITY, p),
            };
            res.push(r);
        }
        if self.free.latch_delay {
            let (num, den) = self
                .anchors
                .iter()
                .zip(&res)
                .fold((0.0, 0.0), |(n, d), (a, r)| {
                    (n + (a.target - r) / (a.target * a.target), d + 1.0 / (a.target * a.target))
                });
            p.latch_delay = (num / den).max(0.0);
        }
        let cost = self
            .anchors
            .iter()
            .zip(&res)
            .map(|(a, r)| ((r + p.latch_delay - a.target) / a.target).powi(2))
            .sum();
        (cost, p)
    }
}

/// Fits the free parameters to the anchors by minimizing the sum of squared
/// relative switching-time errors: a deterministic grid search followed by a
/// shrinking coordinate pattern search.
pub fn calibrate(anchors: &[Anchor], free: FreeParams, initial: &PcsaParams) -> Result<Calibration> {
    if anchors.is_empty() {
        return Err(Error::config("calibration needs at least one anchor"));
    }
    for a in anchors {
        check_resistances(a.r_bl, a.r_blb)?;
        if !(a.target > 0.0 && a.target.is_finite()) {
            return Err(Error::config(format!("anchor target must be positive: {a:?}")));
        }
        if (a.vdd - anchors[0].vdd).abs() > 1e-9 {
            return Err(Error::config("all anchors of one calibration must share a supply voltage"));
        }
        if a.r_bl == a.r_blb {
            return Err(Error::config(format!("anchor with tied resistances never resolves: {a:?}")));
        }
    }
    let mut base = *initial;
    base.vdd = anchors[0].vdd;
    base.validate()?;

    let objective = Objective { anchors, base, free };
    let ranges = [LN_C_RANGE, LOGIT_TRIP_RANGE, LN_DV_RANGE];
    let start = [
        base.branch_capacitance.ln(),
        (base.trip_fraction / (1.0 - base.trip_fraction)).ln(),
        base.min_differential.ln(),
    ];
    let active = [free.capacitance, free.trip_fraction, free.min_differential];
    let n_active = active.iter().filter(|&&a| a).count();
    let points = match n_active {
        0 => 1,
        1 => 400,
        2 => 160,
        _ => 40,
    };

    let axis = |d: usize| -> Vec<f64> {
        if !active[d] {
            return vec![start[d]];
        }
        let (lo, hi) = ranges[d];
        (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect()
    };
    let (ax0, ax1, ax2) = (axis(0), axis(1), axis(2));
    // free coordinates start from the grid, not from the initial values
    let mut found: Option<(f64, [f64; 3])> = None;
    for &a in &ax0 {
        for &b in &ax1 {
            for &c in &ax2 {
                let x = [a, b, c];
                let cost = objective.evaluate(x).0;
                if found.is_none_or(|(best, _)| cost < best) {
                    found = Some((cost, x));
                }
            }
        }
    }
    let (mut best, mut best_x) = found.expect("grid has at least one point");

    let mut step: [f64; 3] = std::array::from_fn(|d| {
        let (lo, hi) = ranges[d];
        (hi - lo) / (points.max(2) - 1) as f64
    });
    if best.is_finite() && n_active > 0 {
        for _ in 0..80 {
            let mut improved = false;
            for d in (0..3).filter(|&d| active[d]) {
                for dir in [-1.0, 1.0] {
                    let mut x = best_x;
                    x[d] += dir * step[d];
                    let cost = objective.evaluate(x).0;
                    if cost < best {
                        best = cost;
                        best_x = x;
                        improved = true;
                    }
                }
            }
            if !improved {
                step.iter_mut().for_each(|s| *s *= 0.5);
            }
        }
    }

    let (cost, params) = objective.evaluate(best_x);
    if !cost.is_finite() {
        return Err(Error::Calibration {
            worst: f64::INFINITY,
            report: "no parameter set resolves every anchor".into(),
        });
    }
    let fitted: Vec<f64> = anchors
        .iter()
        .map(|a| switching_time(a.r_bl, a.r_blb, &params))
        .collect::<Result<_>>()?;
    let relative_errors = anchors
        .iter()
        .zip(&fitted)
        .map(|(a, t)| (t - a.target) / a.target)
        .collect();
    let cal = Calibration {
        params,
        anchors: anchors.to_vec(),
        fitted,
        relative_errors,
    };
    let worst = cal.worst_relative_error();
    if worst > CALIBRATION_FAILURE_TOLERANCE {
        return Err(Error::Calibration {
            worst,
            report: cal.report(),
        });
    }
    Ok(cal)
}
