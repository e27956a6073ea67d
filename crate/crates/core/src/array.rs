//! 2T2R differential weight storage read through the PCSA.
//!
//! A ternary weight is a pair of complementary devices: `+1` is LRS/HRS,
//! `-1` is HRS/LRS and `0` is HRS/HRS. Reading races the two branches; a
//! race that does not settle within the sense window decodes as `0`.

use std::io::{BufRead, Write};

use rand::Rng;

use crate::device::{program_cell, DeviceMode, ProgrammingProfile};
use crate::error::{Error, Result};
use crate::pcsa::{sense, Branch, PcsaParams, SenseOutcome};
use crate::rng::stream;
use crate::tnn::{Ternary, TernaryTensor};

/// Sense window used when decoding weights for inference (s).
pub const DEFAULT_READ_WINDOW: f64 = 70e-9;
/// Sense window of the read-convergence experiment (s).
pub const SWEEP_WINDOW: f64 = 50e-9;

const STREAM_PROGRAM: u64 = 0x5052;
const STREAM_READ: u64 = 0x5244;
const STREAM_SWEEP: u64 = 0x5357;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynapsePair {
    pub r_bl: f64,
    pub r_blb: f64,
}

impl SynapsePair {
    pub fn new(r_bl: f64, r_blb: f64) -> Result<Self> {
        if !(r_bl > 0.0 && r_bl.is_finite() && r_blb > 0.0 && r_blb.is_finite()) {
            return Err(Error::domain(format!("pair resistances must be positive, got ({r_bl}, {r_blb})")));
        }
        Ok(Self { r_bl, r_blb })
    }

    pub fn swapped(self) -> Self {
        Self { r_bl: self.r_blb, r_blb: self.r_bl }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadConfig {
    /// Sense window (s).
    pub window: f64,
    pub pcsa: PcsaParams,
    /// Decode once and reuse the readout for every inference run. When
    /// false, each run index gets a fresh readout.
    pub freeze: bool,
}

impl Default for ReadConfig {
    fn default() -> Self {
        Self { window: DEFAULT_READ_WINDOW, pcsa: PcsaParams::near_threshold(), freeze: true }
    }
}

impl ReadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window > 0.0 && self.window.is_finite()) {
            return Err(Error::config(format!("read window must be positive, got {}", self.window)));
        }
        self.pcsa.validate()
    }
}

/// Programs one weight into a device pair. The BL device is drawn first.
pub fn encode<R: Rng + ?Sized>(w: Ternary, profile: &ProgrammingProfile, rng: &mut R) -> Result<SynapsePair> {
    let (bl, blb) = match w {
        Ternary::Pos => (DeviceMode::Lrs, DeviceMode::Hrs),
        Ternary::Neg => (DeviceMode::Hrs, DeviceMode::Lrs),
        Ternary::Zero => (DeviceMode::Hrs, DeviceMode::Hrs),
    };
    let r_bl = program_cell(bl, profile, rng)?;
    let r_blb = program_cell(blb, profile, rng)?;
    SynapsePair::new(r_bl, r_blb)
}

pub fn decode<R: Rng + ?Sized>(pair: SynapsePair, cfg: &ReadConfig, rng: &mut R) -> Result<Ternary> {
    Ok(match sense(pair.r_bl, pair.r_blb, &cfg.pcsa, cfg.window, rng)? {
        SenseOutcome::Resolved { winner: Branch::Bl, .. } => Ternary::Pos,
        SenseOutcome::Resolved { winner: Branch::Blb, .. } => Ternary::Neg,
        SenseOutcome::Unresolved => Ternary::Zero,
    })
}

/// A programmed array together with the weights it was meant to hold.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightArray {
    rows: usize,
    cols: usize,
    pairs: Vec<SynapsePair>,
    truth: Vec<Ternary>,
}

impl WeightArray {
    pub fn from_parts(rows: usize, cols: usize, pairs: Vec<SynapsePair>, truth: Vec<Ternary>) -> Result<Self> {
        let n = rows * cols;
        if pairs.len() != n || truth.len() != n {
            return Err(Error::Shape { expected: vec![rows, cols], actual: vec![pairs.len(), truth.len()] });
        }
        for p in &pairs {
            SynapsePair::new(p.r_bl, p.r_blb)?;
        }
        Ok(Self { rows, cols, pairs, truth })
    }

    /// Programs `weights`, viewed as a matrix of `shape[0]` rows. Element
    /// `(r, c)` draws from its own stream derived from `(seed, r, c)`.
    pub fn program(weights: &TernaryTensor, profile: &ProgrammingProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        let (rows, cols) = matrix_dims(weights);
        let truth = weights.to_vec();
        let pairs = truth
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let mut rng = stream(seed, &[STREAM_PROGRAM, (i / cols) as u64, (i % cols) as u64]);
                encode(w, profile, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows, cols, pairs, truth })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pairs(&self) -> &[SynapsePair] {
        &self.pairs
    }

    pub fn truth(&self) -> &[Ternary] {
        &self.truth
    }

    pub fn pair(&self, row: usize, col: usize) -> SynapsePair {
        self.pairs[row * self.cols + col]
    }

    /// Writes `row,col,true_w,r_bl_ohm,r_blb_ohm` records.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "row,col,true_w,r_bl_ohm,r_blb_ohm")?;
        for (i, (p, w)) in self.pairs.iter().zip(&self.truth).enumerate() {
            writeln!(out, "{},{},{},{},{}", i / self.cols, i % self.cols, w.value(), p.r_bl, p.r_blb)?;
        }
        Ok(())
    }

    /// Reads the CSV written by [`WeightArray::write_csv`]; records must be in
    /// row-major order. Lines starting with `#` are ignored.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(s) if s.starts_with('#')));
        let bad = |line: usize, msg: &str| Error::config(format!("array csv line {}: {msg}", line + 1));
        match lines.next() {
            Some((_, Ok(h))) if h.trim() == "row,col,true_w,r_bl_ohm,r_blb_ohm" => {}
            Some((i, _)) => return Err(bad(i, "unexpected header")),
            None => return Err(bad(0, "empty file")),
        }
        let (mut pairs, mut truth) = (Vec::new(), Vec::new());
        let (mut rows, mut cols) = (0usize, 0usize);
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io("<array csv>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 5 {
                return Err(bad(i, "expected 5 fields"));
            }
            let r: usize = f[0].parse().map_err(|_| bad(i, "bad row"))?;
            let c: usize = f[1].parse().map_err(|_| bad(i, "bad col"))?;
            let w: i8 = f[2].parse().map_err(|_| bad(i, "bad weight"))?;
            let r_bl: f64 = f[3].parse().map_err(|_| bad(i, "bad r_bl"))?;
            let r_blb: f64 = f[4].parse().map_err(|_| bad(i, "bad r_blb"))?;
            if r == 0 {
                cols = cols.max(c + 1);
            }
            if cols == 0 || r * cols + c != pairs.len() || c >= cols {
                return Err(bad(i, "records must be row-major and complete"));
            }
            rows = r + 1;
            truth.push(Ternary::from_i8(w)?);
            pairs.push(SynapsePair::new(r_bl, r_blb)?);
        }
        Self::from_parts(rows, cols, pairs, truth)
    }
}

fn matrix_dims(t: &TernaryTensor) -> (usize, usize) {
    match t.shape().first() {
        Some(&rows) if rows > 0 => (rows, t.len() / rows),
        _ => (1, t.len()),
    }
}

/// Decodes every element. Element `(r, c)` uses a stream derived from
/// `(seed, run, r, c)`; with `cfg.freeze` the run index is ignored so all
/// runs see the same readout.
pub fn read_array(arr: &WeightArray, cfg: &ReadConfig, seed: u64, run: u64) -> Result<Vec<Ternary>> {
    cfg.validate()?;
    let run = if cfg.freeze { 0 } else { run };
    arr.pairs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut rng = stream(seed, &[STREAM_READ, run, (i / arr.cols) as u64, (i % arr.cols) as u64]);
            decode(p, cfg, &mut rng)
        })
        .collect()
}

/// Fraction of `trials` sense operations that resolved within `window`
/// for each BL resistance against a fixed BLb device.
pub fn convergence_sweep(
    r_blb: f64,
    r_bl_values: &[f64],
    window: f64,
    trials: usize,
    pcsa: &PcsaParams,
    seed: u64,
) -> Result<Vec<f64>> {
    if trials == 0 {
        return Err(Error::domain("convergence sweep needs at least one trial"));
    }
    pcsa.validate()?;
    r_bl_values
        .iter()
        .enumerate()
        .map(|(i, &r_bl)| {
            let mut rng = stream(seed, &[STREAM_SWEEP, i as u64]);
            let mut hits = 0usize;
            for _ in 0..trials {
                if sense(r_bl, r_blb, pcsa, window, &mut rng)?.is_resolved() {
                    hits += 1;
                }
            }
            Ok(hits as f64 / trials as f64)
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(out: &mut W, r_bl_values: &[f64], probs: &[f64]) -> std::io::Result<()> {
    writeln!(out, "r_bl_ohm,p_converged")?;
    for (r, p) in r_bl_values.iter().zip(probs) {
        writeln!(out, "{r},{p}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReadoutErrors {
    pub type1_count: usize,
    pub type2_count: usize,
    pub total: usize,
    pub type1_rate: f64,
    pub type2_rate: f64,
}

/// Sign switches (type 1) and zero/nonzero confusions (type 2).
pub fn readout_error_stats(truth: &[Ternary], decoded: &[Ternary]) -> Result<ReadoutErrors> {
    if truth.len() != decoded.len() {
        return Err(Error::Shape { expected: vec![truth.len()], actual: vec![decoded.len()] });
    }
    let mut e = ReadoutErrors { total: truth.len(), ..Default::default() };
    for (&t, &d) in truth.iter().zip(decoded) {
        if t.is_zero() != d.is_zero() {
            e.type2_count += 1;
        } else if t != d {
            e.type1_count += 1;
        }
    }
    if e.total > 0 {
        e.type1_rate = e.type1_count as f64 / e.total as f64;
        e.type2_rate = e.type2_count as f64 / e.total as f64;
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcsa::{log_grid, switching_time};
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn det() -> ReadConfig {
        ReadConfig { pcsa: PcsaParams::near_threshold().without_jitter(), ..Default::default() }
    }

    fn pair(a: f64, b: f64) -> SynapsePair {
        SynapsePair::new(a, b).unwrap()
    }

    #[test]
    fn encode_uses_medians_without_variability() {
        let p = ProgrammingProfile::ideal();
        let mut rng = seeded(0);
        assert_eq!(encode(Ternary::Pos, &p, &mut rng).unwrap(), pair(20e3, 350e3));
        assert_eq!(encode(Ternary::Neg, &p, &mut rng).unwrap(), pair(350e3, 20e3));
        assert_eq!(encode(Ternary::Zero, &p, &mut rng).unwrap(), pair(350e3, 350e3));
    }

    #[test]
    fn decode_examples() {
        let cfg = det();
        let mut rng = seeded(0);
        assert_eq!(decode(pair(20e3, 350e3), &cfg, &mut rng).unwrap(), Ternary::Pos);
        assert_eq!(decode(pair(350e3, 20e3), &cfg, &mut rng).unwrap(), Ternary::Neg);
        assert_eq!(decode(pair(320e3, 350e3), &cfg, &mut rng).unwrap(), Ternary::Zero);
        assert_eq!(decode(pair(350e3, 350e3), &cfg, &mut rng).unwrap(), Ternary::Zero);
        // LRS/LRS is not an error
        assert_eq!(decode(pair(15e3, 25e3), &cfg, &mut rng).unwrap(), Ternary::Pos);
    }

    /// Resolution within the window holds iff the branch separation reaches
    /// the latch differential somewhere between the fast node crossing the
    /// trip point and the end of the window. The separation is unimodal, so
    /// its maximum over that interval is at the clamped peak.
    fn region_oracle(r_bl: f64, r_blb: f64, p: &PcsaParams, window: f64) -> Ternary {
        if r_bl == r_blb {
            return Ternary::Zero;
        }
        let (lo, hi) = (r_bl.min(r_blb), r_bl.max(r_blb));
        let c = p.branch_capacitance;
        let t_end = window - p.latch_delay;
        let t_trip = -p.trip_fraction.ln() * lo * c;
        if t_end < t_trip {
            return Ternary::Zero;
        }
        let (a, b) = (1.0 / (lo * c), 1.0 / (hi * c));
        // d/dt (e^{-bt} - e^{-at}) = 0
        let t_peak = (a / b).ln() / (a - b);
        let t = t_peak.clamp(t_trip, t_end);
        let sep = (-b * t).exp() - (-a * t).exp();
        if sep >= p.min_differential {
            if r_bl < r_blb { Ternary::Pos } else { Ternary::Neg }
        } else {
            Ternary::Zero
        }
    }

    #[test]
    fn deterministic_decode_matches_region_oracle_on_grid() {
        let grid = log_grid(10e3, 1e6, 100);
        for cfg in [det(), ReadConfig { window: SWEEP_WINDOW, ..det() }] {
            let mut rng = seeded(0);
            let mut nonzero = 0;
            for &a in &grid {
                for &b in &grid {
                    let got = decode(pair(a, b), &cfg, &mut rng).unwrap();
                    assert_eq!(got, region_oracle(a, b, &cfg.pcsa, cfg.window), "({a}, {b})");
                    nonzero += usize::from(!got.is_zero());
                }
            }
            assert!(nonzero > 1000 && nonzero < 9900, "{nonzero}");
        }
    }

    #[test]
    fn zero_variability_recovers_programmed_matrix() {
        let mut rng = seeded(4);
        let v: Vec<i8> = (0..600).map(|_| rng.random_range(-1..=1)).collect();
        let w = TernaryTensor::from_i8(&[20, 30], &v).unwrap();
        let arr = WeightArray::program(&w, &ProgrammingProfile::ideal(), 9).unwrap();
        assert_eq!((arr.rows(), arr.cols()), (20, 30));
        assert_eq!(read_array(&arr, &det(), 1, 0).unwrap(), w.to_vec());

        let zeros = WeightArray::program(&TernaryTensor::zeros(&[4, 4]), &ProgrammingProfile::ideal(), 9).unwrap();
        assert!(read_array(&zeros, &det(), 1, 0).unwrap().iter().all(|t| t.is_zero()));
    }

    #[test]
    fn partial_convergence_near_tie() {
        let p = PcsaParams::near_threshold();
        let prob = convergence_sweep(100e3, &[60e3], SWEEP_WINDOW, 100, &p, 3).unwrap()[0];
        assert!(prob > 0.0 && prob < 1.0, "{prob}");
        // Monte-Carlo oracle straight from the jitter distribution
        let t = switching_time(60e3, 100e3, &p).unwrap();
        let mut rng = seeded(77);
        let n = 200_000;
        let hits = (0..n)
            .filter(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                t * (p.jitter_sigma * z).exp() <= SWEEP_WINDOW
            })
            .count();
        let p_mc = hits as f64 / n as f64;
        let p_big = convergence_sweep(100e3, &[60e3], SWEEP_WINDOW, 20_000, &p, 4).unwrap()[0];
        assert!((p_big - p_mc).abs() < 4.0 * (p_mc * (1.0 - p_mc) / 20_000.0).sqrt() + 1e-3, "{p_big} vs {p_mc}");
    }

    #[test]
    fn convergence_sweep_examples() {
        let p = PcsaParams::near_threshold();
        let probs = convergence_sweep(100e3, &[10e3], SWEEP_WINDOW, 100, &p, 1).unwrap();
        assert!(probs[0] >= 0.95);
        let tie = convergence_sweep(100e3, &[100e3], SWEEP_WINDOW, 100, &p.without_jitter(), 1).unwrap();
        assert_eq!(tie, vec![0.0]);
        assert!(convergence_sweep(100e3, &[10e3], SWEEP_WINDOW, 0, &p, 1).is_err());
    }

    #[test]
    fn convergence_is_monotone_in_bl_resistance() {
        let p = PcsaParams::near_threshold();
        let grid = log_grid(10e3, 200e3, 25);
        let trials = 4000;
        let probs = convergence_sweep(100e3, &grid, SWEEP_WINDOW, trials, &p, 5).unwrap();
        for w in probs.windows(2) {
            let sd = ((w[0] * (1.0 - w[0]) + w[1] * (1.0 - w[1])) / trials as f64).sqrt();
            assert!(w[1] <= w[0] + 2.0 * sd + 1e-12, "{probs:?}");
        }
    }

    #[test]
    fn error_stats_examples() {
        use Ternary::*;
        let e = readout_error_stats(&[Pos, Neg], &[Pos, Neg]).unwrap();
        assert_eq!((e.type1_rate, e.type2_rate), (0.0, 0.0));
        let e = readout_error_stats(&[Pos; 5], &[Neg; 5]).unwrap();
        assert_eq!((e.type1_rate, e.type2_rate), (1.0, 0.0));
        let e = readout_error_stats(&[Pos, Zero, Neg], &[Pos, Pos, Zero]).unwrap();
        assert_eq!(e.type1_rate, 0.0);
        assert!((e.type2_rate - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(readout_error_stats(&[Pos], &[]), Err(Error::Shape { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = seeded(8);
        let v: Vec<i8> = (0..12).map(|_| rng.random_range(-1..=1)).collect();
        let w = TernaryTensor::from_i8(&[3, 4], &v).unwrap();
        let arr = WeightArray::program(&w, &ProgrammingProfile::default(), 2).unwrap();
        let mut buf = Vec::new();
        arr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("row,col,true_w,r_bl_ohm,r_blb_ohm\n0,0,"));
        assert_eq!(WeightArray::read_csv(&buf[..]).unwrap(), arr);
        assert!(WeightArray::read_csv(&b"row,col,true_w,r_bl_ohm,r_blb_ohm\n0,0,1,-5,3\n"[..]).is_err());
        assert!(WeightArray::read_csv(&b"row,col,true_w,r_bl_ohm,r_blb_ohm\n0,1,1,5,3\n"[..]).is_err());
    }

    #[test]
    fn freeze_shares_readout_across_runs() {
        let w = TernaryTensor::from_i8(&[50, 50], &vec![0i8; 2500]).unwrap();
        let arr = WeightArray::program(&w, &ProgrammingProfile::default(), 3).unwrap();
        let frozen = ReadConfig::default();
        assert_eq!(read_array(&arr, &frozen, 1, 0).unwrap(), read_array(&arr, &frozen, 1, 7).unwrap());
        let live = ReadConfig { freeze: false, ..frozen };
        assert_eq!(read_array(&arr, &live, 1, 3).unwrap(), read_array(&arr, &live, 1, 3).unwrap());
        assert_ne!(read_array(&arr, &live, 1, 0).unwrap(), read_array(&arr, &live, 1, 1).unwrap());
    }

    proptest! {
        #[test]
        fn round_trip_without_variability(w in -1i8..=1, seed in any::<u64>()) {
            let w = Ternary::from_i8(w).unwrap();
            let mut rng = seeded(seed);
            let pair = encode(w, &ProgrammingProfile::ideal(), &mut rng).unwrap();
            prop_assert_eq!(decode(pair, &det(), &mut rng).unwrap(), w);
        }

        #[test]
        fn decode_is_antisymmetric(a in 1e3f64..2e6, b in 1e3f64..2e6) {
            let mut rng = seeded(0);
            let fwd = decode(pair(a, b), &det(), &mut rng).unwrap();
            let back = decode(pair(a, b).swapped(), &det(), &mut rng).unwrap();
            prop_assert_eq!(fwd, -back);
            prop_assert_eq!(decode(pair(a, a), &det(), &mut rng).unwrap(), Ternary::Zero);
        }

        #[test]
        fn error_rates_are_bounded(t in prop::collection::vec(-1i8..=1, 1..200), seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let truth: Vec<Ternary> = t.iter().map(|&v| Ternary::from_i8(v).unwrap()).collect();
            let dec: Vec<Ternary> = truth.iter().map(|_| Ternary::from_i8(rng.random_range(-1..=1)).unwrap()).collect();
            let e = readout_error_stats(&truth, &dec).unwrap();
            prop_assert!(e.type1_rate >= 0.0 && e.type2_rate >= 0.0);
            prop_assert!(e.type1_rate + e.type2_rate <= 1.0 + 1e-12);
        }
    }
}
