//! The four uplink designs and the per-round glue around them.
//!
//! | design | device side                  | symbols | server side        |
//! |--------|------------------------------|---------|--------------------|
//! | case 1 | full baseband update         | `N`     | `y / eta`          |
//! | case 2 | identical mask, keep `L`     | `L`     | expand with zeros  |
//! | case 3 | sparsify to `L`, compress    | `M`     | IHT                |
//! | case 4 | compress full update         | `M`     | IHT (sparsity `L`) |
//!
//! Everything the server does uses only the received vector, the shared
//! seed (masks, matrix) and the design parameters. The ground-truth
//! aggregate is computed next to it purely for metrics.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::airchan::{
    compute_eta, draw_channels, ota_estimate, ota_round, truncate, ChannelRound, ThresholdOn, TransmitReport,
};
use crate::error::{check_len, Error, Result};
use crate::fedcore::{apply_aggregate, evaluate, local_update, Dataset, DevicePartition, Mlp, ModelParams, SgdConfig};
use crate::iht::{iht_reconstruct, IhtConfig};
use crate::linmap::MeasurementMatrix;
use crate::numcore::{baseband_len, cnorm_sq, from_baseband, norm_sq, to_baseband, RealVector, RngStream};
use crate::sparsify::{apply_mask, expand, reduce, top_l_support, uniform_support, Support};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Case1Uncompressed,
    Case2SparseReduced,
    Case3SparseCompressed,
    Case4CompressedOnly,
}

impl DesignKind {
    pub fn uses_matrix(self) -> bool {
        matches!(self, DesignKind::Case3SparseCompressed | DesignKind::Case4CompressedOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            DesignKind::Case1Uncompressed => "case1_uncompressed",
            DesignKind::Case2SparseReduced => "case2_sparse_reduced",
            DesignKind::Case3SparseCompressed => "case3_sparse_compressed",
            DesignKind::Case4CompressedOnly => "case4_compressed_only",
        }
    }
}

/// How the `L` preserved entries are chosen before transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Each device keeps its own `L` largest entries (masks differ).
    TopL,
    /// One uniformly random mask per round, regenerated by every party
    /// from the shared seed.
    UniformIdentical,
    /// Top-`L` of the true aggregate shared by all devices. Not realizable
    /// in a deployment; used to isolate sparsification error.
    OracleTopL,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub kind: DesignKind,
    /// `L`; unused by case 1.
    pub sparsity: usize,
    /// `M`; used by cases 3 and 4.
    pub compressed_len: usize,
    pub mask_mode: MaskMode,
    pub iht: IhtConfig,
    /// Rescale case-2 uniform-mask estimates by `N / L`.
    pub debias_uniform: bool,
}

impl DesignSpec {
    pub fn new(kind: DesignKind, sparsity: usize, compressed_len: usize) -> Self {
        let mask_mode = match kind {
            DesignKind::Case2SparseReduced => MaskMode::UniformIdentical,
            _ => MaskMode::TopL,
        };
        Self {
            kind,
            sparsity,
            compressed_len,
            mask_mode,
            iht: IhtConfig::new(sparsity),
            debias_uniform: false,
        }
    }

    /// Checks the design against baseband length `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.kind == DesignKind::Case1Uncompressed {
            return Ok(());
        }
        if self.sparsity == 0 || self.sparsity > n {
            return Err(Error::invalid(
                "sparsity",
                format!("need 1 <= L <= N, got L={}, N={n}", self.sparsity),
            ));
        }
        if self.kind == DesignKind::Case2SparseReduced && self.mask_mode == MaskMode::TopL {
            return Err(Error::invalid(
                "mask_mode",
                "case 2 needs a mask shared by all devices (uniform_identical or oracle_top_l)",
            ));
        }
        if self.kind.uses_matrix() {
            if self.compressed_len == 0 || self.compressed_len >= n {
                return Err(Error::invalid(
                    "compressed_len",
                    format!("need 1 <= M < N, got M={}, N={n}", self.compressed_len),
                ));
            }
            self.iht.validate()?;
            if self.compressed_len <= self.sparsity {
                log::warn!(
                    "compressed length M={} does not exceed sparsity L={}; reconstruction is likely poor",
                    self.compressed_len,
                    self.sparsity
                );
            }
        }
        Ok(())
    }

    /// Channel uses per round for baseband length `n`.
    pub fn channel_uses(&self, n: usize) -> usize {
        match self.kind {
            DesignKind::Case1Uncompressed => n,
            DesignKind::Case2SparseReduced => self.sparsity,
            DesignKind::Case3SparseCompressed | DesignKind::Case4CompressedOnly => self.compressed_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    pub total_power: f64,
    pub noise_var: f64,
    pub gain_threshold: f64,
    pub threshold_on: ThresholdOn,
    /// Renormalize the weights of surviving devices to sum to their
    /// pre-truncation total. Off by default, which keeps truncation bias.
    pub renormalize_truncated: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            total_power: 1e3,
            noise_var: 1.0,
            gain_threshold: 0.01,
            threshold_on: ThresholdOn::Magnitude,
            renormalize_truncated: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IhtSummary {
    pub iterations: usize,
    pub converged: bool,
    pub final_residual: f64,
}

/// Outcome of one uplink aggregation.
#[derive(Debug, Clone)]
pub struct Transmission {
    /// Server's estimate of the weighted aggregate; `None` for a skipped round.
    pub estimate: Option<RealVector>,
    /// `sum_k w_k delta_k` over all participants.
    pub truth: RealVector,
    pub channel: Option<ChannelRound>,
    pub report: Option<TransmitReport>,
    pub iht: Option<IhtSummary>,
    pub agg_nmse: Option<f64>,
}

impl Transmission {
    pub fn skipped(&self) -> bool {
        self.estimate.is_none()
    }

    pub fn channel_uses(&self) -> usize {
        self.channel.as_ref().map_or(0, |c| c.symbol_count)
    }
}

/// Shared randomness of one round: every stream is derived from the
/// experiment seed and the round index.
#[derive(Debug, Clone, Copy)]
pub struct RoundSeed {
    pub seed: u64,
    pub round: usize,
}

impl RoundSeed {
    pub fn stream(&self, purpose: &str) -> RngStream {
        RngStream::new(self.seed, format!("{purpose}/{}", self.round))
    }

    pub fn device_stream(&self, purpose: &str, device: usize) -> RngStream {
        RngStream::new(self.seed, format!("{purpose}/{}/{device}", self.round))
    }
}

/// `||estimate - truth||^2 / ||truth||^2`.
pub fn agg_nmse(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    check_len("agg_nmse", truth.len(), estimate.len())?;
    let denom = norm_sq(truth);
    if denom == 0.0 {
        return Err(Error::invalid("agg_nmse", "ground truth has zero norm"));
    }
    let num: f64 = truth.iter().zip(estimate).map(|(t, e)| (e - t).powi(2)).sum();
    Ok(num / denom)
}

fn weighted_sum(vectors: &[RealVector], weights: &[f64]) -> RealVector {
    let mut out = vec![0.0; vectors.first().map_or(0, |v| v.len())];
    for (v, &w) in vectors.iter().zip(weights) {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
    }
    out
}

/// Runs one uplink aggregation of `updates` (weights `weights`) through
/// the chosen design.
pub fn transmit_aggregate(
    design: &DesignSpec,
    channel: &ChannelConfig,
    updates: &[RealVector],
    weights: &[f64],
    matrix: Option<&MeasurementMatrix>,
    rs: RoundSeed,
) -> Result<Transmission> {
    check_len("transmit_aggregate weights", updates.len(), weights.len())?;
    let d = updates.first().map(|u| u.len()).ok_or(Error::EmptyInput)?;
    for u in updates {
        check_len("transmit_aggregate update", d, u.len())?;
    }
    let n = baseband_len(d);
    design.validate(n)?;
    let truth = weighted_sum(updates, weights);
    let baseband: Vec<Vec<Complex64>> = updates.iter().map(|u| to_baseband(u)).collect::<Result<_>>()?;

    let all_gains = draw_channels(&mut rs.stream("channel"), updates.len());
    let active = truncate(&all_gains, channel.gain_threshold, channel.threshold_on)?;
    if active.is_empty() {
        return Ok(Transmission {
            estimate: None,
            truth,
            channel: None,
            report: None,
            iht: None,
            agg_nmse: None,
        });
    }
    let gains: Vec<Complex64> = active.iter().map(|&k| all_gains[k]).collect();
    let mut active_w: Vec<f64> = active.iter().map(|&k| weights[k]).collect();
    if channel.renormalize_truncated {
        let kept: f64 = active_w.iter().sum();
        let total: f64 = weights.iter().sum();
        if kept > 0.0 {
            active_w.iter_mut().for_each(|w| *w *= total / kept);
        }
    }

    let matrix = if design.kind.uses_matrix() {
        let a = matrix.ok_or_else(|| Error::invalid("matrix", "design needs a measurement matrix"))?;
        check_len("measurement matrix columns", n, a.cols())?;
        check_len("measurement matrix rows", design.compressed_len, a.rows())?;
        Some(a)
    } else {
        None
    };

    // Shared mask for designs that need one.
    let shared_mask: Option<Support> = match (design.kind, design.mask_mode) {
        (DesignKind::Case1Uncompressed | DesignKind::Case4CompressedOnly, _) => None,
        (_, MaskMode::UniformIdentical) => Some(uniform_support(&mut rs.stream("mask"), n, design.sparsity)?),
        (_, MaskMode::OracleTopL) => Some(top_l_support(&to_baseband(&truth)?, design.sparsity)?),
        (_, MaskMode::TopL) => None,
    };

    let transmitted: Vec<Vec<Complex64>> = active
        .iter()
        .map(|&k| {
            let s = &baseband[k];
            match design.kind {
                DesignKind::Case1Uncompressed => Ok(s.clone()),
                DesignKind::Case2SparseReduced => {
                    let mask = shared_mask.as_ref().expect("validated: case 2 has a shared mask");
                    Ok(reduce(&apply_mask(s, mask)?).values)
                }
                DesignKind::Case3SparseCompressed => {
                    let mask = match &shared_mask {
                        Some(m) => m.clone(),
                        None => top_l_support(s, design.sparsity)?,
                    };
                    let sp = apply_mask(s, &mask)?;
                    matrix.unwrap().compress_on_support(&sp.dense, mask.indices())
                }
                DesignKind::Case4CompressedOnly => matrix.unwrap().compress(s),
            }
        })
        .collect::<Result<_>>()?;

    let norms: Vec<f64> = transmitted.iter().map(|t| cnorm_sq(t).sqrt()).collect();
    let eta = compute_eta(channel.total_power, &active_w, &gains, &norms)?;
    let refs: Vec<&[Complex64]> = transmitted.iter().map(|t| t.as_slice()).collect();
    let (y, report) = ota_round(
        &refs,
        &active_w,
        &gains,
        eta,
        channel.noise_var,
        channel.total_power,
        &mut rs.stream("noise"),
    )?;
    let received = ota_estimate(&y, eta)?;
    let symbol_count = received.len();

    let mut iht = None;
    let aggregate: Vec<Complex64> = match design.kind {
        DesignKind::Case1Uncompressed => received,
        DesignKind::Case2SparseReduced => {
            let mask = shared_mask.expect("validated: case 2 has a shared mask");
            let mut full = expand(
                &crate::sparsify::ReducedVector {
                    values: received,
                    support: mask,
                },
                n,
            )?;
            if design.debias_uniform && design.mask_mode == MaskMode::UniformIdentical {
                let scale = n as f64 / design.sparsity as f64;
                full.iter_mut().for_each(|v| *v *= scale);
            }
            full
        }
        DesignKind::Case3SparseCompressed | DesignKind::Case4CompressedOnly => {
            let cfg = IhtConfig {
                sparsity: design.sparsity,
                ..design.iht
            };
            let res = iht_reconstruct(matrix.unwrap(), &received, &cfg)?;
            iht = Some(IhtSummary {
                iterations: res.iterations,
                converged: res.converged,
                final_residual: res.final_residual,
            });
            res.estimate.dense
        }
    };
    let estimate = from_baseband(&aggregate, d)?;
    let nmse = agg_nmse(&truth, &estimate).ok();
    Ok(Transmission {
        estimate: Some(estimate),
        truth,
        channel: Some(ChannelRound {
            gains,
            active_set: active,
            eta,
            noise_var: channel.noise_var,
            total_power: channel.total_power,
            symbol_count,
        }),
        report: Some(report),
        iht,
        agg_nmse: nmse,
    })
}

/// Everything a round needs besides the design and the current model.
#[derive(Debug, Clone)]
pub struct Federation {
    pub model: Mlp,
    pub train: Dataset,
    pub test: Dataset,
    pub partitions: Vec<DevicePartition>,
    pub users_per_round: usize,
    pub sgd: SgdConfig,
    pub channel: ChannelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub channel_uses: usize,
    pub cum_channel_uses: usize,
    pub test_accuracy: f64,
    pub agg_nmse: Option<f64>,
    pub eta: Option<f64>,
    pub iht_iterations: Option<usize>,
    pub converged: Option<bool>,
    pub skipped: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub params: ModelParams,
    pub metrics: RoundMetrics,
    pub selected: Vec<usize>,
    pub transmission: Transmission,
}

/// Weights of the selected devices renormalized to sum to one.
pub fn round_weights(partitions: &[DevicePartition], selected: &[usize]) -> Vec<f64> {
    let total: f64 = selected.iter().map(|&k| partitions[k].weight).sum();
    selected.iter().map(|&k| partitions[k].weight / total).collect()
}

/// One communication round: device selection, local SGD, uplink through
/// `design`, model update and evaluation. `round` is 1-based.
pub fn run_round(
    design: &DesignSpec,
    fed: &Federation,
    theta: &ModelParams,
    matrix: Option<&MeasurementMatrix>,
    seed: u64,
    round: usize,
) -> Result<RoundOutput> {
    let rs = RoundSeed { seed, round };
    let selected = crate::fedcore::select_devices(&mut rs.stream("select"), fed.partitions.len(), fed.users_per_round)?;
    let updates: Vec<RealVector> = selected
        .iter()
        .map(|&k| {
            local_update(
                &fed.model,
                theta,
                &fed.train,
                &fed.partitions[k],
                &fed.sgd,
                &mut rs.device_stream("local", k),
            )
        })
        .collect::<Result<_>>()?;
    let weights = round_weights(&fed.partitions, &selected);
    let tx = transmit_aggregate(design, &fed.channel, &updates, &weights, matrix, rs)?;
    let params = match &tx.estimate {
        Some(est) => apply_aggregate(theta, est)?,
        None => theta.clone(),
    };
    let accuracy = evaluate(&fed.model, &params, &fed.test)?;
    let metrics = RoundMetrics {
        round,
        channel_uses: tx.channel_uses(),
        cum_channel_uses: 0,
        test_accuracy: accuracy,
        agg_nmse: tx.agg_nmse,
        eta: tx.channel.as_ref().map(|c| c.eta),
        iht_iterations: tx.iht.map(|i| i.iterations),
        converged: tx.iht.map(|i| i.converged),
        skipped: tx.skipped(),
        seed,
    };
    Ok(RoundOutput {
        params,
        metrics,
        selected,
        transmission: tx,
    })
}

/// Binned counts with exact zeros tallied separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub zero_count: usize,
    /// Nonzero values outside `[edges[0], edges[last]]`.
    pub outside: usize,
    pub total: usize,
}

impl Histogram {
    pub fn zero_mass_fraction(&self) -> f64 {
        self.zero_count as f64 / self.total as f64
    }

    /// `(bin_center, density)` rows; densities are normalized by the total
    /// sample count, so the zero impulse carries the missing mass.
    pub fn density(&self) -> Vec<(f64, f64)> {
        self.edges
            .windows(2)
            .zip(&self.counts)
            .map(|(e, &c)| {
                let width = e[1] - e[0];
                ((e[0] + e[1]) / 2.0, c as f64 / (self.total as f64 * width))
            })
            .collect()
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut body = format!("# zero_mass {}\n", self.zero_mass_fraction());
        for (c, d) in self.density() {
            body.push_str(&format!("{c} {d}\n"));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Bins `values` on `[e_i, e_{i+1})` (last bin closed). Exact zeros go to
/// the zero-mass bucket instead of a bin.
pub fn update_histogram(values: &[f64], bin_edges: &[f64]) -> Result<Histogram> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("bin_edges", "need at least two strictly increasing edges"));
    }
    let bins = bin_edges.len() - 1;
    let mut counts = vec![0; bins];
    let (mut zero_count, mut outside) = (0, 0);
    let (lo, hi) = (bin_edges[0], bin_edges[bins]);
    for &v in values {
        if v == 0.0 {
            zero_count += 1;
        } else if v < lo || v > hi || v.is_nan() {
            outside += 1;
        } else {
            // first edge strictly greater than v, minus one
            let idx = bin_edges.partition_point(|&e| e <= v).saturating_sub(1).min(bins - 1);
            counts[idx] += 1;
        }
    }
    Ok(Histogram {
        edges: bin_edges.to_vec(),
        counts,
        zero_count,
        outside,
        total: values.len(),
    })
}

/// `bins + 1` evenly spaced edges over `[lo, hi]`.
pub fn linear_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}
