//! Experiment configuration file (TOML) with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tnnsim_core::device::ProgrammingProfile;
use tnnsim_core::pcsa::{near_threshold_anchors, Anchor, FreeParams, PcsaParams};
use tnnsim_train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub device: ProgrammingProfile,
    pub pcsa: PcsaSection,
    pub array: ArraySection,
    pub train: TrainConfig,
    pub faults: FaultsSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcsaSection {
    /// Supply voltage (V) for reads, sweeps and calibration: 0.6 or 1.2.
    pub vdd: f64,
    /// Parameter files written by `calibrate`; the one matching the
    /// requested supply voltage replaces the built-in set.
    pub params_files: Vec<PathBuf>,
    pub branch_capacitance: Option<f64>,
    pub trip_fraction: Option<f64>,
    pub min_differential: Option<f64>,
    pub latch_delay: Option<f64>,
    pub jitter_sigma: Option<f64>,
    /// Calibration anchors `[r_bl_ohm, r_blb_ohm, vdd_v, target_ns]`.
    pub anchors: Option<Vec<[f64; 4]>>,
    /// Parameters `calibrate` may move: any of `capacitance`,
    /// `trip_fraction`, `min_differential`, `latch_delay`.
    pub free: Vec<String>,
}

impl Default for PcsaSection {
    fn default() -> Self {
        Self {
            vdd: tnnsim_core::pcsa::VDD_NEAR_THRESHOLD,
            params_files: Vec::new(),
            branch_capacitance: None,
            trip_fraction: None,
            min_differential: None,
            latch_delay: None,
            jitter_sigma: None,
            anchors: None,
            free: vec!["capacitance".into(), "min_differential".into(), "latch_delay".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArraySection {
    /// Sense window for weight reads (ns).
    pub read_window_ns: f64,
    /// Sense window of the convergence sweep (ns).
    pub sweep_window_ns: f64,
    /// Read weights once and reuse them for every evaluation run.
    pub freeze: bool,
    pub sweep_r_blb: f64,
    pub sweep_r_bl_min: f64,
    pub sweep_r_bl_max: f64,
    pub sweep_points: usize,
    pub sweep_trials: usize,
    pub map_r_min: f64,
    pub map_r_max: f64,
    pub map_points: usize,
    /// Switching times above this count as slow in the map summary (ns).
    pub map_slow_ns: f64,
    /// Evaluation runs of `array-eval`.
    pub runs: usize,
    /// Program a fresh array for every run. When false, one programmed array
    /// is read `runs` times (identically if `freeze` is set).
    pub reprogram: bool,
}

impl Default for ArraySection {
    fn default() -> Self {
        Self {
            read_window_ns: 70.0,
            sweep_window_ns: 50.0,
            freeze: true,
            sweep_r_blb: 100e3,
            sweep_r_bl_min: 10e3,
            sweep_r_bl_max: 1e6,
            sweep_points: 41,
            sweep_trials: 100,
            map_r_min: 10e3,
            map_r_max: 1e6,
            map_points: 50,
            map_slow_ns: 70.0,
            runs: 5,
            reprogram: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultsSection {
    /// Explicit error rates; when absent a log grid is used.
    pub rates: Option<Vec<f64>>,
    pub ber_min: f64,
    pub ber_max: f64,
    pub ber_points: usize,
    pub runs: usize,
    pub error_types: Vec<u8>,
}

impl Default for FaultsSection {
    fn default() -> Self {
        Self { rates: None, ber_min: 1e-4, ber_max: 1e-1, ber_points: 13, runs: 5, error_types: vec![1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `mnist` or `cifar10`.
    pub dataset: String,
    /// Directory with the dataset files; defaults to `$TNNSIM_MNIST_DIR` or
    /// `data/mnist` for MNIST and `data/cifar-10-batches-bin` for CIFAR-10.
    pub dir: Option<PathBuf>,
    /// Evaluate on the first `n` test images only.
    pub test_limit: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { dataset: "mnist".into(), dir: None, test_limit: None }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    /// SHA-256 of the effective configuration, serialized canonically.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("configuration serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn free_params(&self) -> anyhow::Result<FreeParams> {
        let mut f = FreeParams { capacitance: false, trip_fraction: false, min_differential: false, latch_delay: false };
        for name in &self.pcsa.free {
            match name.as_str() {
                "capacitance" => f.capacitance = true,
                "trip_fraction" => f.trip_fraction = true,
                "min_differential" => f.min_differential = true,
                "latch_delay" => f.latch_delay = true,
                other => bail!("unknown calibration parameter {other:?}"),
            }
        }
        Ok(f)
    }

    pub fn anchors(&self) -> Vec<Anchor> {
        match &self.pcsa.anchors {
            Some(list) => list.iter().map(|a| Anchor::new(a[0], a[1], a[2], a[3] * 1e-9)).collect(),
            None => near_threshold_anchors(),
        }
    }

    /// Sense amplifier parameters at `vdd`: a matching parameter file if one
    /// is configured, else the built-in set, then per-field overrides.
    pub fn pcsa_params(&self, vdd: f64) -> anyhow::Result<PcsaParams> {
        let mut p = None;
        for file in &self.pcsa.params_files {
            let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            let q: PcsaParams = toml::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
            if (q.vdd - vdd).abs() < 1e-9 {
                p = Some(q);
            }
        }
        let mut p = match p {
            Some(p) => p,
            None => PcsaParams::for_vdd(vdd)?,
        };
        let s = &self.pcsa;
        p.branch_capacitance = s.branch_capacitance.unwrap_or(p.branch_capacitance);
        p.trip_fraction = s.trip_fraction.unwrap_or(p.trip_fraction);
        p.min_differential = s.min_differential.unwrap_or(p.min_differential);
        p.latch_delay = s.latch_delay.unwrap_or(p.latch_delay);
        p.jitter_sigma = s.jitter_sigma.unwrap_or(p.jitter_sigma);
        p.validate()?;
        Ok(p)
    }

    pub fn data_dir(&self) -> PathBuf {
        match (&self.data.dir, self.data.dataset.as_str()) {
            (Some(d), _) => d.clone(),
            (None, "cifar10") => PathBuf::from("data/cifar-10-batches-bin"),
            (None, _) => tnnsim_core::data::mnist_dir("."),
        }
    }

    pub fn ber_rates(&self) -> Vec<f64> {
        match &self.faults.rates {
            Some(r) => r.clone(),
            None => tnnsim_core::pcsa::log_grid(self.faults.ber_min, self.faults.ber_max, self.faults.ber_points),
        }
    }

    /// Checks everything that does not need files on disk.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.device.validate()?;
        self.train.validate()?;
        self.free_params()?;
        if !(self.pcsa.vdd > 0.0 && self.pcsa.vdd.is_finite()) {
            bail!("pcsa.vdd must be positive, got {}", self.pcsa.vdd);
        }
        let a = &self.array;
        for (name, v) in [
            ("read_window_ns", a.read_window_ns),
            ("sweep_window_ns", a.sweep_window_ns),
            ("sweep_r_blb", a.sweep_r_blb),
            ("sweep_r_bl_min", a.sweep_r_bl_min),
            ("sweep_r_bl_max", a.sweep_r_bl_max),
            ("map_r_min", a.map_r_min),
            ("map_r_max", a.map_r_max),
            ("map_slow_ns", a.map_slow_ns),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bail!("array.{name} must be positive, got {v}");
            }
        }
        if a.sweep_points == 0 || a.sweep_trials == 0 || a.map_points == 0 || a.runs == 0 {
            bail!("array point, trial and run counts must be >= 1");
        }
        let f = &self.faults;
        if f.runs == 0 {
            bail!("faults.runs must be >= 1");
        }
        if f.rates.is_none() && !(f.ber_min > 0.0 && f.ber_max >= f.ber_min && f.ber_max <= 1.0 && f.ber_points > 0) {
            bail!("need 0 < ber_min <= ber_max <= 1 and ber_points >= 1");
        }
        if let Some(r) = &f.rates {
            if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
                bail!("faults.rates must lie in [0, 1]");
            }
        }
        if f.error_types.is_empty() || f.error_types.iter().any(|t| *t != 1 && *t != 2) {
            bail!("faults.error_types must list 1 and/or 2");
        }
        if !matches!(self.data.dataset.as_str(), "mnist" | "cifar10") {
            bail!("data.dataset must be mnist or cifar10, got {:?}", self.data.dataset);
        }
        Ok(())
    }
}
