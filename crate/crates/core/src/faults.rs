//! Inference-time weight corruption and bit-error-rate sweeps.

use std::io::Write;

use rand::Rng;

use crate::array::{read_array, readout_error_stats, ReadConfig, ReadoutErrors, WeightArray};
use crate::data::ImageSet;
use crate::device::ProgrammingProfile;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::tnn::{accuracy, CompiledModel, NetworkModel, Ternary, TernaryTensor};

const STREAM_INJECT: u64 = 0x494e;
const STREAM_ARRAY: u64 = 0x4152;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorSpec {
    /// Probability that a nonzero weight switches sign.
    pub type1_rate: f64,
    /// Probability of a zero/nonzero confusion.
    pub type2_rate: f64,
}

impl ErrorSpec {
    pub fn new(type1_rate: f64, type2_rate: f64) -> Result<Self> {
        let s = Self { type1_rate, type2_rate };
        s.validate()?;
        Ok(s)
    }

    pub fn of_type(error_type: ErrorType, rate: f64) -> Result<Self> {
        match error_type {
            ErrorType::SignSwitch => Self::new(rate, 0.0),
            ErrorType::ZeroConfusion => Self::new(0.0, rate),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("type1_rate", self.type1_rate), ("type2_rate", self.type2_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorType {
    /// Type 1: `+1 <-> -1`.
    SignSwitch,
    /// Type 2: `0 <-> +-1`.
    ZeroConfusion,
}

impl ErrorType {
    pub fn number(self) -> u8 {
        match self {
            ErrorType::SignSwitch => 1,
            ErrorType::ZeroConfusion => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(ErrorType::SignSwitch),
            2 => Ok(ErrorType::ZeroConfusion),
            _ => Err(Error::config(format!("error type must be 1 or 2, got {n}"))),
        }
    }
}

/// Corrupts a copy of `weights`. For each element the sign-switch draw is
/// made before the zero-confusion draw; a zero turned nonzero takes either
/// sign with equal probability. A zero rate consumes no randomness.
pub fn inject<R: Rng + ?Sized>(weights: &TernaryTensor, spec: &ErrorSpec, rng: &mut R) -> Result<TernaryTensor> {
    spec.validate()?;
    let mut out = weights.clone();
    if spec.type1_rate == 0.0 && spec.type2_rate == 0.0 {
        return Ok(out);
    }
    for i in 0..weights.len() {
        let mut w = weights.get(i);
        if !w.is_zero() && spec.type1_rate > 0.0 && rng.random_bool(spec.type1_rate) {
            w = -w;
        }
        if spec.type2_rate > 0.0 && rng.random_bool(spec.type2_rate) {
            w = if !w.is_zero() {
                Ternary::Zero
            } else if rng.random_bool(0.5) {
                Ternary::Pos
            } else {
                Ternary::Neg
            };
        }
        if w != weights.get(i) {
            out.set(i, w);
        }
    }
    Ok(out)
}

/// Default BER grid: 13 points spaced logarithmically over `[1e-4, 1e-1]`.
pub fn default_ber_grid() -> Vec<f64> {
    crate::pcsa::log_grid(1e-4, 1e-1, 13)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub ber: f64,
    pub accuracies: Vec<f64>,
}

impl SweepPoint {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Sample standard deviation; zero for a single run.
    pub fn sd(&self) -> f64 {
        let n = self.accuracies.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.accuracies.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Test accuracy of `model` with one corrupted copy of every weight tensor.
pub fn corrupted_accuracy(model: &NetworkModel, test: &ImageSet, spec: &ErrorSpec, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, &[STREAM_INJECT]);
    let weights = model
        .weight_tensors()
        .into_iter()
        .map(|w| inject(w, spec, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let corrupted = model.with_weights(weights)?;
    accuracy(&CompiledModel::new(&corrupted)?, &test.images(), test.labels())
}

/// Accuracy under each error rate, `runs` independent corruptions per rate.
/// Run `r` at rate index `k` uses a stream derived from `(seed, k, r)`.
/// Binarized models have no zero weights, so only sign switches apply.
pub fn ber_sweep(
    model: &NetworkModel,
    test: &ImageSet,
    rates: &[f64],
    error_type: ErrorType,
    runs: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if runs == 0 {
        return Err(Error::config("ber sweep needs at least one run"));
    }
    if error_type == ErrorType::ZeroConfusion && model.is_binary() {
        return Err(Error::config("type 2 errors are only defined for ternary networks"));
    }
    rates
        .iter()
        .enumerate()
        .map(|(k, &ber)| {
            let spec = ErrorSpec::of_type(error_type, ber)?;
            let accuracies = (0..runs)
                .map(|r| corrupted_accuracy(model, test, &spec, derive_seed(seed, &[k as u64, r as u64])))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepPoint { ber, accuracies })
        })
        .collect()
}

/// Smallest error rate at which the mean accuracy has fallen `drop` below
/// `clean`, interpolated linearly in log-rate between sweep points.
pub fn drop_ber(points: &[SweepPoint], clean: f64, drop: f64) -> Option<f64> {
    let target = clean - drop;
    let mut prev: Option<(f64, f64)> = None;
    for p in points {
        let m = p.mean();
        if m <= target {
            return Some(match prev {
                Some((b0, m0)) if b0 > 0.0 && m0 > m => {
                    let f = (m0 - target) / (m0 - m);
                    (b0.ln() + f * (p.ber.ln() - b0.ln())).exp()
                }
                _ => p.ber,
            });
        }
        prev = Some((p.ber, m));
    }
    None
}

pub fn write_sweep_runs_csv<W: Write>(out: &mut W, error_type: ErrorType, points: &[SweepPoint]) -> std::io::Result<()> {
    writeln!(out, "error_type,ber,run,accuracy")?;
    for p in points {
        for (r, a) in p.accuracies.iter().enumerate() {
            writeln!(out, "{},{},{r},{a}", error_type.number(), p.ber)?;
        }
    }
    Ok(())
}

pub fn write_sweep_summary_csv<W: Write>(out: &mut W, error_type: ErrorType, points: &[SweepPoint]) -> std::io::Result<()> {
    writeln!(out, "error_type,ber,mean_acc,sd_acc")?;
    for p in points {
        writeln!(out, "{},{},{},{}", error_type.number(), p.ber, p.mean(), p.sd())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayEval {
    pub accuracy: f64,
    pub errors: ReadoutErrors,
    /// Weight tensors as read back from the arrays.
    pub decoded: Vec<TernaryTensor>,
}

/// Stores every weight tensor in its own 2T2R array, reads it back through
/// the sense amplifier and evaluates the network on the decoded weights.
/// Tensor `k` is programmed and read with streams derived from `(seed, k)`.
pub fn array_backed_eval(
    model: &NetworkModel,
    profile: &ProgrammingProfile,
    read: &ReadConfig,
    test: &ImageSet,
    seed: u64,
    run: u64,
) -> Result<ArrayEval> {
    let mut decoded = Vec::new();
    let (mut truth_all, mut read_all) = (Vec::new(), Vec::new());
    for (k, w) in model.weight_tensors().into_iter().enumerate() {
        let layer_seed = derive_seed(seed, &[STREAM_ARRAY, k as u64]);
        let arr = WeightArray::program(w, profile, layer_seed)?;
        let values = read_array(&arr, read, layer_seed, run)?;
        truth_all.extend_from_slice(arr.truth());
        read_all.extend_from_slice(&values);
        decoded.push(TernaryTensor::from_values(w.shape(), &values)?);
    }
    let errors = readout_error_stats(&truth_all, &read_all)?;
    let read_model = model.with_weights(decoded.clone())?;
    let accuracy = accuracy(&CompiledModel::new(&read_model)?, &test.images(), test.labels())?;
    Ok(ArrayEval { accuracy, errors, decoded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcsa::PcsaParams;
    use crate::rng::seeded;
    use crate::tnn::{ActivationKind, InputSpec, Layer};
    use proptest::prelude::*;
    use rand::Rng;

    fn t(v: &[i8]) -> TernaryTensor {
        TernaryTensor::from_i8(&[v.len()], v).unwrap()
    }

    #[test]
    fn zero_rates_are_identity() {
        let w = t(&[1, -1, 0, 1]);
        assert_eq!(inject(&w, &ErrorSpec::default(), &mut seeded(0)).unwrap(), w);
    }

    #[test]
    fn full_sign_switch() {
        let w = t(&[1, -1, 0]);
        let spec = ErrorSpec::new(1.0, 0.0).unwrap();
        assert_eq!(inject(&w, &spec, &mut seeded(0)).unwrap(), t(&[-1, 1, 0]));
    }

    #[test]
    fn type2_rate_concentrates() {
        let mut rng = seeded(1);
        let v: Vec<i8> = (0..1_000_000).map(|_| rng.random_range(-1..=1)).collect();
        let w = TernaryTensor::from_i8(&[v.len()], &v).unwrap();
        let out = inject(&w, &ErrorSpec::new(0.0, 0.1).unwrap(), &mut rng).unwrap();
        let changed = w.iter().zip(out.iter()).filter(|(a, b)| a != b).count() as f64 / 1e6;
        assert!((changed - 0.1).abs() < 0.001, "{changed}");
        // zeros become both signs about equally often
        let (mut pos, mut neg) = (0, 0);
        for (a, b) in w.iter().zip(out.iter()) {
            if a.is_zero() {
                pos += usize::from(b == Ternary::Pos);
                neg += usize::from(b == Ternary::Neg);
            }
        }
        assert!((pos as f64 / neg as f64 - 1.0).abs() < 0.05, "{pos} {neg}");
        // no sign switches from a pure type-2 spec
        assert!(w.iter().zip(out.iter()).all(|(a, b)| a.value() * b.value() >= 0));
    }

    #[test]
    fn invalid_rates_rejected() {
        assert!(ErrorSpec::new(-0.1, 0.0).is_err());
        assert!(ErrorSpec::new(0.0, 1.5).is_err());
        assert!(ErrorSpec::new(f64::NAN, 0.0).is_err());
    }

    fn toy_model(rng: &mut impl Rng, act: ActivationKind) -> NetworkModel {
        let w1: Vec<i8> = (0..16 * 32).map(|_| rng.random_range(-1..=1)).collect();
        let w2: Vec<i8> = (0..32 * 4).map(|_| rng.random_range(-1..=1)).collect();
        NetworkModel::new(
            InputSpec { channels: 1, height: 4, width: 4 },
            vec![
                Layer::Dense { inputs: 16, outputs: 32, weights: TernaryTensor::from_i8(&[32, 16], &w1).unwrap(), thresholds: vec![0; 32] },
                Layer::Activation(act),
                Layer::Dense { inputs: 32, outputs: 4, weights: TernaryTensor::from_i8(&[4, 32], &w2).unwrap(), thresholds: vec![0; 4] },
            ],
        )
        .unwrap()
    }

    /// Labels the images with the clean model's own predictions, so clean
    /// accuracy is 1.
    fn self_labelled(model: &NetworkModel, rng: &mut impl Rng, n: usize) -> ImageSet {
        let pixels: Vec<u8> = (0..n * 16).map(|_| rng.random()).collect();
        let c = CompiledModel::new(model).unwrap();
        let labels = pixels.chunks(16).map(|img| c.predict(img).unwrap().label as u8).collect();
        ImageSet::new(model.input(), pixels, labels).unwrap()
    }

    #[test]
    fn sweep_at_zero_rate_is_clean_and_degrades() {
        let mut rng = seeded(2);
        let model = toy_model(&mut rng, ActivationKind::Phi { delta: 0.05 });
        let test = self_labelled(&model, &mut rng, 300);
        let rates = [0.0, 0.01, 0.1, 0.5];
        let pts = ber_sweep(&model, &test, &rates, ErrorType::SignSwitch, 10, 7).unwrap();
        assert!(pts[0].accuracies.iter().all(|&a| a == 1.0));
        for w in pts.windows(2) {
            let sd = (w[0].sd().powi(2) + w[1].sd().powi(2)).sqrt() / (10f64).sqrt();
            assert!(w[1].mean() <= w[0].mean() + 2.0 * sd + 1e-12);
        }
        assert!(pts[3].mean() < 0.7);
        assert_eq!(pts, ber_sweep(&model, &test, &rates, ErrorType::SignSwitch, 10, 7).unwrap());
    }

    #[test]
    fn binary_models_reject_type2() {
        let mut rng = seeded(3);
        let model = toy_model(&mut rng, ActivationKind::Sign);
        let test = self_labelled(&model, &mut rng, 10);
        assert!(ber_sweep(&model, &test, &[0.1], ErrorType::ZeroConfusion, 1, 0).is_err());
        assert!(ber_sweep(&model, &test, &[0.1], ErrorType::SignSwitch, 0, 0).is_err());
    }

    #[test]
    fn drop_ber_interpolates_in_log_rate() {
        let p = |ber, a| SweepPoint { ber, accuracies: vec![a] };
        let pts = [p(1e-3, 0.98), p(1e-2, 0.96), p(1e-1, 0.90)];
        let b = drop_ber(&pts, 0.98, 0.05).unwrap();
        // 0.93 sits halfway between 0.96 and 0.90 in accuracy
        assert!((b - 10f64.powf(-1.5)).abs() < 1e-12, "{b}");
        assert_eq!(drop_ber(&pts, 0.98, 0.5), None);
    }

    #[test]
    fn sweep_csv_layout() {
        let pts = [SweepPoint { ber: 0.01, accuracies: vec![0.5, 0.7] }];
        let mut a = Vec::new();
        write_sweep_runs_csv(&mut a, ErrorType::ZeroConfusion, &pts).unwrap();
        assert_eq!(String::from_utf8(a).unwrap(), "error_type,ber,run,accuracy\n2,0.01,0,0.5\n2,0.01,1,0.7\n");
        let mut b = Vec::new();
        write_sweep_summary_csv(&mut b, ErrorType::ZeroConfusion, &pts).unwrap();
        let s = String::from_utf8(b).unwrap();
        assert!(s.starts_with("error_type,ber,mean_acc,sd_acc\n2,0.01,0.6"), "{s}");
    }

    #[test]
    fn ideal_array_reproduces_clean_accuracy() {
        let mut rng = seeded(4);
        let model = toy_model(&mut rng, ActivationKind::Phi { delta: 0.05 });
        let test = self_labelled(&model, &mut rng, 100);
        let read = ReadConfig { pcsa: PcsaParams::near_threshold().without_jitter(), ..Default::default() };
        let r = array_backed_eval(&model, &ProgrammingProfile::ideal(), &read, &test, 1, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!((r.errors.type1_count, r.errors.type2_count), (0, 0));
        let originals: Vec<TernaryTensor> = model.weight_tensors().into_iter().cloned().collect();
        assert_eq!(r.decoded, originals);
    }

    #[test]
    fn array_error_counts_match_readout_stats() {
        let mut rng = seeded(5);
        let model = toy_model(&mut rng, ActivationKind::Phi { delta: 0.05 });
        let test = self_labelled(&model, &mut rng, 50);
        let r = array_backed_eval(&model, &ProgrammingProfile::default(), &ReadConfig::default(), &test, 9, 0).unwrap();
        let truth: Vec<Ternary> = model.weight_tensors().iter().flat_map(|w| w.iter()).collect();
        let dec: Vec<Ternary> = r.decoded.iter().flat_map(|w| w.iter()).collect();
        assert_eq!(readout_error_stats(&truth, &dec).unwrap(), r.errors);
        assert!(r.errors.type1_rate <= r.errors.type2_rate);
    }

    proptest! {
        #[test]
        fn inject_preserves_shape_and_domain(v in prop::collection::vec(-1i8..=1, 0..300), r1 in 0.0f64..=1.0, r2 in 0.0f64..=1.0, seed in any::<u64>()) {
            let w = TernaryTensor::from_i8(&[v.len()], &v).unwrap();
            let out = inject(&w, &ErrorSpec::new(r1, r2).unwrap(), &mut seeded(seed)).unwrap();
            prop_assert_eq!(out.shape(), w.shape());
            prop_assert!(out.to_i8().iter().all(|x| (-1..=1).contains(x)));
        }

        #[test]
        fn pure_type1_never_touches_zeros(v in prop::collection::vec(-1i8..=1, 0..300), r in 0.0f64..=1.0, seed in any::<u64>()) {
            let w = TernaryTensor::from_i8(&[v.len()], &v).unwrap();
            let out = inject(&w, &ErrorSpec::new(r, 0.0).unwrap(), &mut seeded(seed)).unwrap();
            for (a, b) in w.iter().zip(out.iter()) {
                prop_assert_eq!(a.is_zero(), b.is_zero());
            }
        }
    }
}
