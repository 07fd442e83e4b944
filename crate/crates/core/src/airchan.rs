//! Over-the-air aggregation on a block-fading multiple-access channel.
//!
//! Each active device pre-scales its transmit vector by `eta * w_k / h_k`
//! so that the channel gain cancels; the receiver sees
//! `y = eta * sum_k w_k s_k + n` and divides by `eta`. The common factor
//! `eta` is the largest value keeping every device within its energy
//! budget `P_tot` for the round.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numcore::{cnorm_sq, BasebandVector, RngStream};

/// Relative slack allowed on the per-device energy budget.
pub const POWER_SLACK: f64 = 1e-9;

/// Which quantity the truncation threshold is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdOn {
    /// `|h_k| >= h_th`
    #[default]
    Magnitude,
    /// `|h_k|^2 >= h_th`
    Power,
}

/// Channel state of one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRound {
    /// Gains of the active devices, aligned with `active_set`.
    pub gains: Vec<Complex64>,
    /// Positions (within the round's participants) that survived truncation.
    pub active_set: Vec<usize>,
    pub eta: f64,
    pub noise_var: f64,
    pub total_power: f64,
    /// Channel uses spent by the round, i.e. transmitted vector length.
    pub symbol_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmitReport {
    /// `||psi_k(s_k)||^2` per active device.
    pub per_device_energy: Vec<f64>,
    pub budget: f64,
}

impl TransmitReport {
    pub fn max_energy(&self) -> f64 {
        self.per_device_energy.iter().copied().fold(0.0, f64::max)
    }
}

/// `K` i.i.d. `CN(0, 1)` gains.
pub fn draw_channels(rng: &mut RngStream, k: usize) -> Vec<Complex64> {
    (0..k).map(|_| rng.complex_normal(1.0)).collect()
}

/// Indices of devices whose gain clears the threshold. An empty result
/// means the round has to be skipped.
pub fn truncate(gains: &[Complex64], h_th: f64, on: ThresholdOn) -> Result<Vec<usize>> {
    if h_th.is_nan() || h_th < 0.0 {
        return Err(Error::invalid("gain_threshold", "must be non-negative"));
    }
    Ok(gains
        .iter()
        .enumerate()
        .filter(|(_, h)| match on {
            ThresholdOn::Magnitude => h.norm() >= h_th,
            ThresholdOn::Power => h.norm_sqr() >= h_th,
        })
        .map(|(k, _)| k)
        .collect())
}

/// `eta = sqrt(P_tot) * min_k |h_k| / (w_k ||s_k||)` over devices with a
/// nonzero signal. Falls back to `sqrt(P_tot)` if nobody transmits.
pub fn compute_eta(total_power: f64, weights: &[f64], gains: &[Complex64], signal_norms: &[f64]) -> Result<f64> {
    if !(total_power > 0.0) {
        return Err(Error::invalid("total_power", "must be positive"));
    }
    check_len("compute_eta gains", weights.len(), gains.len())?;
    check_len("compute_eta norms", weights.len(), signal_norms.len())?;
    let ratio = weights
        .iter()
        .zip(gains)
        .zip(signal_norms)
        .filter(|((w, _), &norm)| norm > 0.0 && **w > 0.0)
        .map(|((w, h), norm)| h.norm() / (w * norm))
        .fold(f64::INFINITY, f64::min);
    if ratio.is_infinite() {
        return Ok(total_power.sqrt());
    }
    Ok(total_power.sqrt() * ratio)
}

/// Superposes the channel-inverted signals of the active devices and adds
/// `CN(0, noise_var)` noise per symbol.
///
/// Fails if any device would exceed `total_power` (beyond [`POWER_SLACK`]).
pub fn ota_round(
    signals: &[&[Complex64]],
    weights: &[f64],
    gains: &[Complex64],
    eta: f64,
    noise_var: f64,
    total_power: f64,
    rng: &mut RngStream,
) -> Result<(BasebandVector, TransmitReport)> {
    check_len("ota_round weights", signals.len(), weights.len())?;
    check_len("ota_round gains", signals.len(), gains.len())?;
    let len = signals.first().map_or(0, |s| s.len());
    let mut received = vec![Complex64::new(0.0, 0.0); len];
    let mut energy = Vec::with_capacity(signals.len());
    for (k, ((s, &w), &h)) in signals.iter().zip(weights).zip(gains).enumerate() {
        check_len("ota_round signal", len, s.len())?;
        let pre = eta * w / h;
        let e = pre.norm_sqr() * cnorm_sq(s);
        if e > total_power * (1.0 + POWER_SLACK) {
            return Err(Error::PowerBudgetExceeded {
                device: k,
                energy: e,
                budget: total_power,
            });
        }
        energy.push(e);
        // h * psi(s) = h * (eta w / h) s
        let through = h * pre;
        for (r, &x) in received.iter_mut().zip(s.iter()) {
            *r += through * x;
        }
    }
    if noise_var > 0.0 {
        for r in received.iter_mut() {
            *r += rng.complex_normal(noise_var);
        }
    }
    Ok((
        received,
        TransmitReport {
            per_device_energy: energy,
            budget: total_power,
        },
    ))
}

/// Receiver post-processing: `y / eta`.
pub fn ota_estimate(y: &[Complex64], eta: f64) -> Result<BasebandVector> {
    if !(eta > 0.0) {
        return Err(Error::invalid("eta", "must be positive"));
    }
    Ok(y.iter().map(|v| v / eta).collect())
}
