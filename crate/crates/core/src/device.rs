//! RRAM cell programming with lognormal device-to-device variability.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeviceMode {
    Lrs,
    Hrs,
}

/// Median and lognormal shape of the programmed resistance in each state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProgrammingProfile {
    pub lrs_median: f64,
    pub lrs_sigma: f64,
    pub hrs_median: f64,
    pub hrs_sigma: f64,
}

impl Default for ProgrammingProfile {
    fn default() -> Self {
        Self {
            lrs_median: 20e3,
            lrs_sigma: 0.15,
            hrs_median: 350e3,
            hrs_sigma: 0.5,
        }
    }
}

impl ProgrammingProfile {
    /// Nominal medians with no variability.
    pub fn ideal() -> Self {
        Self {
            lrs_sigma: 0.0,
            hrs_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lrs_median, self.lrs_sigma, self.hrs_median, self.hrs_sigma]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("programming profile has non-finite values"));
        }
        if self.lrs_median <= 0.0 || self.hrs_median <= 0.0 {
            return Err(Error::config(format!(
                "resistance medians must be positive (lrs {}, hrs {})",
                self.lrs_median, self.hrs_median
            )));
        }
        if self.lrs_median >= self.hrs_median {
            return Err(Error::config(format!(
                "lrs median {} must be below hrs median {}",
                self.lrs_median, self.hrs_median
            )));
        }
        if self.lrs_sigma < 0.0 || self.hrs_sigma < 0.0 {
            return Err(Error::config("lognormal sigmas must be non-negative"));
        }
        Ok(())
    }

    pub fn median(&self, mode: DeviceMode) -> f64 {
        match mode {
            DeviceMode::Lrs => self.lrs_median,
            DeviceMode::Hrs => self.hrs_median,
        }
    }

    pub fn sigma(&self, mode: DeviceMode) -> f64 {
        match mode {
            DeviceMode::Lrs => self.lrs_sigma,
            DeviceMode::Hrs => self.hrs_sigma,
        }
    }
}

/// Programs one cell into `mode` and returns its resistance in ohms.
///
/// The resistance is `median * exp(sigma * z)` with `z` standard normal. A zero
/// sigma returns the median exactly and consumes no randomness.
pub fn program_cell<R: Rng + ?Sized>(
    mode: DeviceMode,
    profile: &ProgrammingProfile,
    rng: &mut R,
) -> Result<f64> {
    profile.validate()?;
    let median = profile.median(mode);
    let sigma = profile.sigma(mode);
    if sigma == 0.0 {
        return Ok(median);
    }
    let z: f64 = rng.sample(StandardNormal);
    Ok(median * (sigma * z).exp())
}
