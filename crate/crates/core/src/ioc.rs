//! The detection engine: monitors covering the three indicator classes
//! (error rate, real-time detector characterization, received power). Each
//! monitor consumes session observables and emits self-verifying findings
//! with exact threshold semantics.
//!
//! Threshold conventions: power bounds are inclusive (`>=`), the
//! photocurrent bound is exclusive (a sample of exactly the bound is fine,
//! anything larger alarms), and the error-rate bounds are strict-greater.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{DetectionEvent, DetectorParams, MELTING_POWER, THERMAL_BLINDING_POWER};
use crate::protocol::{QberWindow, SessionRecord};
use crate::stats::{self, Z_99};
use crate::taxonomy::{IoCClass, RealTimeKind};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("photocurrent sample {index} is negative ({value})")]
    NegativeSample { index: usize, value: i64 },
    #[error("received power is negative ({value} W)")]
    NegativePower { value: f64 },
    #[error("invalid monitor configuration: {0}")]
    InvalidConfig(String),
}

/// Thresholds and knobs of the detection engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    /// Error-rate level above which a window is worth investigating.
    pub qber_advisory: f64,
    /// Error-rate level above which a window is treated as an attack.
    pub qber_alarm: f64,
    /// Expected window length in sifted bits (documents the session's
    /// windowing; the session engine is wired from this value).
    pub qber_window_bits: usize,
    /// Largest legitimate single photocurrent sample.
    pub photocurrent_max: i64,
    /// Received power at or above which the noise floor is breached, watts.
    pub power_noise_floor: f64,
    /// Received power at or above which thermal blinding is likely, watts.
    pub power_thermal: f64,
    /// Received power at or above which melting is likely, watts.
    pub power_melt: f64,
    /// Diagnostic bound on background photons per pulse.
    pub noise_photons_per_pulse_limit: f64,
    /// Standard errors the afterpulse estimate must exceed its baseline by.
    pub afterpulse_sigma: f64,
    /// Allowed gap between measured and specified deadtime, in ADC periods.
    pub deadtime_gap_adc_periods: u32,
    /// Significance level of the photon-statistics goodness-of-fit test.
    pub photon_stats_significance: f64,
    /// A window whose click count falls below this fraction of the
    /// calibration expectation is count-starved.
    pub starvation_fraction: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            qber_advisory: 0.08,
            qber_alarm: 0.12,
            qber_window_bits: 1000,
            photocurrent_max: 8100,
            power_noise_floor: 1e-15,
            power_thermal: THERMAL_BLINDING_POWER,
            power_melt: MELTING_POWER,
            noise_photons_per_pulse_limit: 3e-5,
            afterpulse_sigma: 3.0,
            deadtime_gap_adc_periods: 2,
            photon_stats_significance: 0.01,
            starvation_fraction: 0.55,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<(), MonitorError> {
        if !(self.qber_advisory > 0.0
            && self.qber_advisory <= self.qber_alarm
            && self.qber_alarm < 1.0)
        {
            return Err(MonitorError::InvalidConfig(
                "need 0 < qber_advisory <= qber_alarm < 1".into(),
            ));
        }
        if !(self.power_noise_floor < self.power_thermal && self.power_thermal < self.power_melt) {
            return Err(MonitorError::InvalidConfig(
                "need power_noise_floor < power_thermal < power_melt".into(),
            ));
        }
        if !(self.photon_stats_significance > 0.0 && self.photon_stats_significance < 1.0) {
            return Err(MonitorError::InvalidConfig(
                "photon_stats_significance must be in (0, 1)".into(),
            ));
        }
        if self.afterpulse_sigma <= 0.0 {
            return Err(MonitorError::InvalidConfig(
                "afterpulse_sigma must be > 0".into(),
            ));
        }
        if !(self.starvation_fraction > 0.0 && self.starvation_fraction < 1.0) {
            return Err(MonitorError::InvalidConfig(
                "starvation_fraction must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// A window must expect at least this many clicks before its count can be
/// judged starved.
pub const STARVATION_MIN_EXPECTED: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Severity {
    Advisory,
    Alarm,
    Damage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Unit {
    Ratio,
    Watts,
    Counts,
    Seconds,
    Probability,
}

/// A measured value with its unit tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub unit: Unit,
}

/// The comparison a finding is based on. Re-applying it to
/// (measured, threshold) must reproduce the verdict, which makes every
/// finding checkable from its own fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// measured > threshold
    StrictlyAbove,
    /// measured >= threshold
    AtLeast,
    /// measured < threshold
    StrictlyBelow,
    /// |measured - threshold| > tolerance
    AbsGapAbove { tolerance: f64 },
}

impl ThresholdRule {
    pub fn holds(&self, measured: f64, threshold: f64) -> bool {
        match *self {
            ThresholdRule::StrictlyAbove => measured > threshold,
            ThresholdRule::AtLeast => measured >= threshold,
            ThresholdRule::StrictlyBelow => measured < threshold,
            ThresholdRule::AbsGapAbove { tolerance } => (measured - threshold).abs() > tolerance,
        }
    }
}

/// One detection-engine verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoCFinding {
    pub class: IoCClass,
    pub severity: Severity,
    /// Slot range the evidence came from.
    pub window: (u64, u64),
    pub measured: Measured,
    /// The crossed bound.
    pub threshold: f64,
    pub rule: ThresholdRule,
    pub detail: String,
}

impl IoCFinding {
    /// Re-apply the emitting monitor's comparison rule.
    pub fn is_consistent(&self) -> bool {
        self.rule.holds(self.measured.value, self.threshold)
    }
}

/// Per-window error-rate thresholds: strictly above the alarm bound is an
/// alarm, strictly above the advisory bound an advisory. Output is sorted
/// by window start, so it is invariant to the input window order.
pub fn qber_monitor(windows: &[QberWindow], cfg: &MonitorConfig) -> Vec<IoCFinding> {
    let mut findings: Vec<IoCFinding> = windows
        .iter()
        .filter_map(|w| {
            let (severity, threshold) = if w.qber > cfg.qber_alarm {
                (Severity::Alarm, cfg.qber_alarm)
            } else if w.qber > cfg.qber_advisory {
                (Severity::Advisory, cfg.qber_advisory)
            } else {
                return None;
            };
            Some(IoCFinding {
                class: IoCClass::Qber,
                severity,
                window: w.slot_range,
                measured: Measured {
                    value: w.qber,
                    unit: Unit::Ratio,
                },
                threshold,
                rule: ThresholdRule::StrictlyAbove,
                detail: format!(
                    "window {}: error rate {:.4} ({} of {} disclosed bits)",
                    w.window_id, w.qber, w.error_bits, w.total_bits
                ),
            })
        })
        .collect();
    findings.sort_by_key(|f| f.window);
    findings
}

/// Afterpulse statistics of one event stream: the conditional click
/// probability inside the post-click hazard window minus the unconditional
/// click probability, normalized per opportunity gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AfterpulseEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    /// Post-click opportunity gates examined.
    pub opportunities: u64,
    /// Click origins the windows were opened from.
    pub origins: u64,
}

/// Estimate the excess afterpulse probability from click timetags.
///
/// For each detector separately, every click opens an opportunity window of
/// the live gates within `afterpulse_decay_gates` after it (gates inside
/// the deadtime cannot click and are skipped); the follow-up clicks
/// observed there, minus the count that detector's own unconditional rate
/// would produce, form the excess. Working per detector keeps the estimate
/// unbiased when the two detectors run at different rates.
///
/// Returns `None` when there are too few clicks to say anything (fewer
/// than 100 click origins or opportunity gates), or when the deadtime
/// swallows the whole hazard window.
pub fn afterpulse_estimate(
    clicks: &[DetectionEvent],
    num_slots: u64,
    params: &DetectorParams,
) -> Option<AfterpulseEstimate> {
    let decay = params.afterpulse_decay_gates as u64;
    let dead = params.deadtime_gates as u64;
    if dead >= decay || num_slots == 0 {
        return None;
    }
    let mut per_detector: [Vec<u64>; 2] = [Vec::new(), Vec::new()];
    for e in clicks {
        per_detector[e.detector_id as usize].push(e.slot);
    }
    let total_clicks: u64 = clicks.len() as u64;
    if total_clicks < 100 {
        return None;
    }

    let mut total_opportunities = 0u64;
    let mut excess = 0.0f64;
    let mut variance = 0.0f64;
    for slots in &per_detector {
        if slots.is_empty() {
            continue;
        }
        let p_uncond = slots.len() as f64 / num_slots as f64;
        let mut opportunities = 0u64;
        let mut observed = 0u64;
        for (i, &s) in slots.iter().enumerate() {
            // First gate this detector can click again, through the last
            // gate the hazard window covers.
            let lo = s + dead.max(1);
            let hi = (s + decay).min(num_slots - 1);
            if hi < lo {
                continue;
            }
            opportunities += hi - lo + 1;
            let mut j = i + 1;
            while j < slots.len() && slots[j] <= hi {
                if slots[j] >= lo {
                    observed += 1;
                }
                j += 1;
            }
        }
        if opportunities == 0 {
            continue;
        }
        let p_cond = observed as f64 / opportunities as f64;
        excess += observed as f64 - p_uncond * opportunities as f64;
        variance += opportunities as f64 * p_cond * (1.0 - p_cond)
            + (opportunities as f64).powi(2) * p_uncond * (1.0 - p_uncond) / num_slots as f64;
        total_opportunities += opportunities;
    }
    if total_opportunities < 100 {
        return None;
    }

    Some(AfterpulseEstimate {
        estimate: excess / total_opportunities as f64,
        standard_error: variance.sqrt() / total_opportunities as f64,
        opportunities: total_opportunities,
        origins: total_clicks,
    })
}

/// Afterpulse reference captured by an attack-free calibration run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AfterpulseBaseline {
    pub estimate: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum MonitorStatus {
    Conclusive,
    Inconclusive { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfterpulseOutcome {
    pub status: MonitorStatus,
    pub session: Option<AfterpulseEstimate>,
    pub findings: Vec<IoCFinding>,
}

/// Compare the session's afterpulse estimate against the calibration
/// baseline; a measurable increase beyond `afterpulse_sigma` combined
/// standard errors is an alarm. Too few click pairs is inconclusive, not
/// a finding.
pub fn afterpulse_monitor(
    clicks: &[DetectionEvent],
    num_slots: u64,
    params: &DetectorParams,
    baseline: &AfterpulseBaseline,
    cfg: &MonitorConfig,
) -> AfterpulseOutcome {
    let Some(session) = afterpulse_estimate(clicks, num_slots, params) else {
        return AfterpulseOutcome {
            status: MonitorStatus::Inconclusive {
                reason: "fewer than 100 click pairs".into(),
            },
            session: None,
            findings: Vec::new(),
        };
    };
    let combined_se = (session.standard_error.powi(2) + baseline.standard_error.powi(2)).sqrt();
    let threshold = baseline.estimate + cfg.afterpulse_sigma * combined_se;
    let mut findings = Vec::new();
    if session.estimate > threshold {
        findings.push(IoCFinding {
            class: IoCClass::RealTime(RealTimeKind::Afterpulse),
            severity: Severity::Alarm,
            window: (0, num_slots),
            measured: Measured {
                value: session.estimate,
                unit: Unit::Probability,
            },
            threshold,
            rule: ThresholdRule::StrictlyAbove,
            detail: format!(
                "afterpulse probability {:.5} exceeds calibration {:.5} by more than {} SE",
                session.estimate, baseline.estimate, cfg.afterpulse_sigma
            ),
        });
    }
    AfterpulseOutcome {
        status: MonitorStatus::Conclusive,
        session: Some(session),
        findings,
    }
}

/// Deadtime and count-rate monitor.
///
/// The measured deadtime is the minimum same-detector inter-click interval,
/// quantized to ADC-period multiples; a notable gap against the
/// manufacturer's specification is an alarm. Windows whose click count
/// collapses below the calibration expectation (or that cannot yield a
/// deadtime measurement at all) take the count-starvation path.
pub fn deadtime_monitor(
    clicks: &[DetectionEvent],
    num_slots: u64,
    pulse_rate: f64,
    params: &DetectorParams,
    baseline_click_rate: f64,
    window_slots: u64,
    cfg: &MonitorConfig,
) -> Vec<IoCFinding> {
    let mut findings = Vec::new();

    // Minimum same-detector inter-click interval across both detectors.
    let mut min_gap_slots: Option<u64> = None;
    let mut last_slot: [Option<u64>; 2] = [None, None];
    for e in clicks {
        let d = e.detector_id as usize;
        if let Some(prev) = last_slot[d] {
            let gap = e.slot - prev;
            min_gap_slots = Some(min_gap_slots.map_or(gap, |m| m.min(gap)));
        }
        last_slot[d] = Some(e.slot);
    }
    if let Some(gap) = min_gap_slots {
        let measured_s = gap as f64 / pulse_rate;
        let quantized = (measured_s / params.adc_period).round() * params.adc_period;
        let tolerance = cfg.deadtime_gap_adc_periods as f64 * params.adc_period;
        if (quantized - params.spec_deadtime).abs() > tolerance {
            findings.push(IoCFinding {
                class: IoCClass::RealTime(RealTimeKind::Deadtime),
                severity: Severity::Alarm,
                window: (0, num_slots),
                measured: Measured {
                    value: quantized,
                    unit: Unit::Seconds,
                },
                threshold: params.spec_deadtime,
                rule: ThresholdRule::AbsGapAbove { tolerance },
                detail: format!(
                    "measured deadtime {:.3e} s deviates from the specified {:.3e} s by more \
                     than {} ADC periods",
                    quantized, params.spec_deadtime, cfg.deadtime_gap_adc_periods
                ),
            });
        }
    }

    // Count starvation per monitoring window.
    if baseline_click_rate > 0.0 {
        let mut start = 0u64;
        while start < num_slots {
            let end = (start + window_slots).min(num_slots);
            let expected = baseline_click_rate * (end - start) as f64;
            if expected >= STARVATION_MIN_EXPECTED {
                let observed = clicks
                    .iter()
                    .filter(|e| e.slot >= start && e.slot < end)
                    .count() as f64;
                let threshold = cfg.starvation_fraction * expected;
                if observed < threshold {
                    findings.push(IoCFinding {
                        class: IoCClass::RealTime(RealTimeKind::Deadtime),
                        severity: Severity::Alarm,
                        window: (start, end),
                        measured: Measured {
                            value: observed,
                            unit: Unit::Counts,
                        },
                        threshold,
                        rule: ThresholdRule::StrictlyBelow,
                        detail: format!(
                            "count starvation: {observed} clicks where calibration expects \
                             {expected:.0}"
                        ),
                    });
                }
            }
            start = end;
        }
    }

    findings.sort_by_key(|f| f.window);
    findings
}

/// One alarm per maximal run of consecutive photocurrent samples strictly
/// above the bound, carrying the peak value. A sample exactly at the bound
/// is legitimate.
pub fn photocurrent_monitor(
    samples: &[i64],
    cfg: &MonitorConfig,
) -> Result<Vec<IoCFinding>, MonitorError> {
    for (index, &value) in samples.iter().enumerate() {
        if value < 0 {
            return Err(MonitorError::NegativeSample { index, value });
        }
    }
    let mut findings = Vec::new();
    let mut run_start: Option<usize> = None;
    let mut peak = 0i64;
    for (i, &value) in samples.iter().chain(std::iter::once(&0)).enumerate() {
        if value > cfg.photocurrent_max {
            if run_start.is_none() {
                run_start = Some(i);
                peak = value;
            } else {
                peak = peak.max(value);
            }
        } else if let Some(start) = run_start.take() {
            findings.push(IoCFinding {
                class: IoCClass::RealTime(RealTimeKind::Photocurrent),
                severity: Severity::Alarm,
                window: (start as u64, i as u64),
                measured: Measured {
                    value: peak as f64,
                    unit: Unit::Counts,
                },
                threshold: cfg.photocurrent_max as f64,
                rule: ThresholdRule::StrictlyAbove,
                detail: format!(
                    "photocurrent readout peaked at {peak} over {} consecutive samples",
                    i - start
                ),
            });
        }
    }
    Ok(findings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonStatsOutcome {
    pub status: MonitorStatus,
    /// Estimated mean photon number.
    pub mean: Option<f64>,
    /// Goodness-of-fit p-value against the declared mean.
    pub chi_square_p: Option<f64>,
    /// Estimated multi-photon fraction P(n >= 2).
    pub multi_photon_fraction: Option<f64>,
    pub findings: Vec<IoCFinding>,
}

fn inconclusive_photon_stats(reason: &str) -> PhotonStatsOutcome {
    PhotonStatsOutcome {
        status: MonitorStatus::Inconclusive {
            reason: reason.into(),
        },
        mean: None,
        chi_square_p: None,
        multi_photon_fraction: None,
        findings: Vec::new(),
    }
}

/// Source photon-statistics characterization from a pre-channel tap.
///
/// Checks (a) a chi-square goodness-of-fit of the photon-number histogram
/// against the declared Poisson mean and (b) whether the 99% confidence
/// interval of the measured mean excludes the declared mean. An excluded
/// mean is an alarm (the leakage budget is wrong); a failed shape test is
/// an advisory. The multi-photon fraction is always reported.
pub fn photon_stats_monitor(
    histogram: &[u64],
    declared_mu: f64,
    num_slots_hint: u64,
    cfg: &MonitorConfig,
) -> PhotonStatsOutcome {
    let n: u64 = histogram.iter().sum();
    if n < 10_000 {
        return inconclusive_photon_stats("fewer than 10^4 sampled pulses");
    }
    let window = (0u64, num_slots_hint.max(n));

    let total_photons: u64 = histogram
        .iter()
        .enumerate()
        .map(|(k, &c)| k as u64 * c)
        .sum();
    let mean = total_photons as f64 / n as f64;
    let se = (mean / n as f64).sqrt();
    let multi: u64 = histogram.iter().skip(2).sum();
    let multi_photon_fraction = multi as f64 / n as f64;

    let mut findings = Vec::new();
    let tolerance = Z_99 * se;
    if (mean - declared_mu).abs() > tolerance {
        findings.push(IoCFinding {
            class: IoCClass::RealTime(RealTimeKind::PhotonStatistics),
            severity: Severity::Alarm,
            window,
            measured: Measured {
                value: mean,
                unit: Unit::Ratio,
            },
            threshold: declared_mu,
            rule: ThresholdRule::AbsGapAbove { tolerance },
            detail: format!(
                "measured mean photon number {mean:.5} is outside the 99% interval around the \
                 declared {declared_mu}; the multi-photon leakage budget is wrong"
            ),
        });
    }

    let (_stat, p) = stats::poisson_chi_square(histogram, declared_mu, 5);
    if p < cfg.photon_stats_significance {
        findings.push(IoCFinding {
            class: IoCClass::RealTime(RealTimeKind::PhotonStatistics),
            severity: Severity::Advisory,
            window,
            measured: Measured {
                value: p,
                unit: Unit::Probability,
            },
            threshold: cfg.photon_stats_significance,
            rule: ThresholdRule::StrictlyBelow,
            detail: format!(
                "photon-number distribution rejects Poisson({declared_mu}) at p = {p:.4}"
            ),
        });
    }

    PhotonStatsOutcome {
        status: MonitorStatus::Conclusive,
        mean: Some(mean),
        chi_square_p: Some(p),
        multi_photon_fraction: Some(multi_photon_fraction),
        findings,
    }
}

/// Received-power classification, by inclusive lower bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerClass {
    Nominal,
    NoiseSaturated,
    ThermalBlinding,
    Melting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAssessment {
    pub class: PowerClass,
    pub finding: Option<IoCFinding>,
}

/// Classify a received-power measurement. Boundary values classify into
/// the higher class; the classification is monotone in the power.
pub fn power_monitor(p_recv: f64, cfg: &MonitorConfig) -> Result<PowerAssessment, MonitorError> {
    power_monitor_in_window(p_recv, (0, 0), cfg)
}

/// Same as [`power_monitor`], attributing the finding to a slot window.
pub fn power_monitor_in_window(
    p_recv: f64,
    window: (u64, u64),
    cfg: &MonitorConfig,
) -> Result<PowerAssessment, MonitorError> {
    if p_recv < 0.0 || !p_recv.is_finite() {
        return Err(MonitorError::NegativePower { value: p_recv });
    }
    let (class, severity, threshold, label) = if p_recv >= cfg.power_melt {
        (
            PowerClass::Melting,
            Severity::Damage,
            cfg.power_melt,
            "general melting is likely",
        )
    } else if p_recv >= cfg.power_thermal {
        (
            PowerClass::ThermalBlinding,
            Severity::Damage,
            cfg.power_thermal,
            "thermal blinding of the avalanche photodiodes is likely",
        )
    } else if p_recv >= cfg.power_noise_floor {
        (
            PowerClass::NoiseSaturated,
            Severity::Alarm,
            cfg.power_noise_floor,
            "noise level too high for quantum operation",
        )
    } else {
        return Ok(PowerAssessment {
            class: PowerClass::Nominal,
            finding: None,
        });
    };
    Ok(PowerAssessment {
        class,
        finding: Some(IoCFinding {
            class: IoCClass::ReceivedPower,
            severity,
            window,
            measured: Measured {
                value: p_recv,
                unit: Unit::Watts,
            },
            threshold,
            rule: ThresholdRule::AtLeast,
            detail: format!("received power {p_recv:.3e} W: {label}"),
        }),
    })
}

/// Everything a full monitor sweep produced beyond the findings themselves.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MonitorDiagnostics {
    pub afterpulse: Option<AfterpulseEstimate>,
    pub photon_stats_mean: Option<f64>,
    pub photon_stats_chi_square_p: Option<f64>,
    pub multi_photon_fraction: Option<f64>,
    /// Largest window-average background photon load implied by the power
    /// meter, photons per pulse.
    pub max_noise_photons_per_pulse: Option<f64>,
    pub notes: Vec<String>,
}

/// Calibration data captured from an attack-free run with the same physics
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBaseline {
    /// Content hash of the physics configuration the baseline belongs to.
    pub params_hash: String,
    /// Receiver clicks per slot in the calibration run.
    pub click_rate: f64,
    pub afterpulse: Option<AfterpulseBaseline>,
    pub calibration_seed: u64,
    pub num_slots: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSweep {
    /// All findings, ordered by (window start, class, severity).
    pub findings: Vec<IoCFinding>,
    pub diagnostics: MonitorDiagnostics,
}

impl MonitorSweep {
    pub fn has_findings(&self) -> bool {
        !self.findings.is_empty()
    }

    pub fn max_severity(&self) -> Option<Severity> {
        self.findings.iter().map(|f| f.severity).max()
    }
}

/// Run every monitor over a session record and concatenate their findings
/// deterministically. `detector` supplies the manufacturer characterization
/// the deadtime and afterpulse monitors compare against. Monitors whose
/// baseline is missing report as inconclusive in the diagnostics; the
/// others still run.
pub fn run_all_monitors(
    record: &SessionRecord,
    detector: &DetectorParams,
    declared_mu: f64,
    photon_energy: f64,
    baseline: Option<&CalibrationBaseline>,
    cfg: &MonitorConfig,
) -> Result<MonitorSweep, MonitorError> {
    cfg.validate()?;
    let mut findings = Vec::new();
    let mut diagnostics = MonitorDiagnostics::default();

    findings.extend(qber_monitor(&record.qber_windows, cfg));

    findings.extend(photocurrent_monitor(&record.photocurrent_samples, cfg)?);

    let mut max_noise_photons: Option<f64> = None;
    for w in &record.power_by_window {
        let assessment = power_monitor_in_window(w.watts, w.slot_range, cfg)?;
        if let Some(f) = assessment.finding {
            findings.push(f);
        }
        let photons_per_pulse = w.watts / (photon_energy * record.pulse_rate);
        max_noise_photons =
            Some(max_noise_photons.map_or(photons_per_pulse, |m: f64| m.max(photons_per_pulse)));
    }
    diagnostics.max_noise_photons_per_pulse = max_noise_photons;
    if let Some(load) = max_noise_photons {
        if load > cfg.noise_photons_per_pulse_limit {
            diagnostics.notes.push(format!(
                "background load {load:.2e} photons/pulse exceeds the {:.0e} diagnostic bound",
                cfg.noise_photons_per_pulse_limit
            ));
        }
    }

    let window_slots = record
        .power_by_window
        .first()
        .map(|w| w.slot_range.1 - w.slot_range.0)
        .unwrap_or(record.num_slots);

    match baseline {
        Some(base) => {
            if let Some(ap) = &base.afterpulse {
                let outcome = afterpulse_monitor(
                    &record.detection_events,
                    record.num_slots,
                    detector,
                    ap,
                    cfg,
                );
                if let MonitorStatus::Inconclusive { reason } = &outcome.status {
                    diagnostics
                        .notes
                        .push(format!("afterpulse monitor inconclusive: {reason}"));
                }
                diagnostics.afterpulse = outcome.session;
                findings.extend(outcome.findings);
            } else {
                diagnostics
                    .notes
                    .push("afterpulse monitor inconclusive: calibration had too few clicks".into());
            }
            findings.extend(deadtime_monitor(
                &record.detection_events,
                record.num_slots,
                record.pulse_rate,
                detector,
                base.click_rate,
                window_slots,
                cfg,
            ));
        }
        None => {
            diagnostics.notes.push(
                "afterpulse and count-rate monitors inconclusive: no calibration baseline".into(),
            );
            // The deadtime gap check itself needs no baseline.
            findings.extend(deadtime_monitor(
                &record.detection_events,
                record.num_slots,
                record.pulse_rate,
                detector,
                0.0,
                window_slots,
                cfg,
            ));
        }
    }

    let stats_outcome =
        photon_stats_monitor(&record.photon_histogram, declared_mu, record.num_slots, cfg);
    if let MonitorStatus::Inconclusive { reason } = &stats_outcome.status {
        diagnostics
            .notes
            .push(format!("photon-statistics monitor inconclusive: {reason}"));
    }
    diagnostics.photon_stats_mean = stats_outcome.mean;
    diagnostics.photon_stats_chi_square_p = stats_outcome.chi_square_p;
    diagnostics.multi_photon_fraction = stats_outcome.multi_photon_fraction;
    findings.extend(stats_outcome.findings);

    findings.sort_by(|a, b| {
        a.window
            .cmp(&b.window)
            .then_with(|| a.class.token().cmp(b.class.token()))
            .then_with(|| a.severity.cmp(&b.severity))
    });
    Ok(MonitorSweep {
        findings,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::DetectionCause;
    use approx::assert_relative_eq;

    fn cfg() -> MonitorConfig {
        MonitorConfig::default()
    }

    fn window(id: u32, qber: f64, total: u64) -> QberWindow {
        QberWindow {
            window_id: id,
            slot_range: (id as u64 * 1000, (id as u64 + 1) * 1000),
            error_bits: (qber * total as f64).round() as u64,
            total_bits: total,
            qber,
        }
    }

    fn click(slot: u64, det: u8) -> DetectionEvent {
        DetectionEvent {
            slot,
            detector_id: det,
            click: true,
            cause: DetectionCause::Signal,
            timetag: slot as f64 / 1e6,
            photocurrent: 0,
        }
    }

    fn detector() -> DetectorParams {
        DetectorParams {
            efficiency: 1.0,
            dark_count_prob: 0.0,
            afterpulse_prob: 0.01,
            afterpulse_decay_gates: 5,
            deadtime_gates: 2,
            adc_period: 1e-6,
            spec_deadtime: 2e-6,
            blinding_power: 1e-7,
            trigger_power: 1e-6,
            photocurrent_per_watt: 1e11,
            photocurrent_cap: 65_535,
            timing_mismatch: [1.0, 1.0],
        }
    }

    #[test]
    fn qber_thresholds_are_strict_greater() {
        let findings = qber_monitor(
            &[
                window(0, 0.25, 1000),
                window(1, 0.10, 1000),
                window(2, 0.0, 1000),
                window(3, 0.08, 1000),
                window(4, 0.12, 1000),
            ],
            &cfg(),
        );
        assert_eq!(findings.len(), 3);
        assert_eq!(findings[0].severity, Severity::Alarm); // 0.25
        assert_eq!(findings[1].severity, Severity::Advisory); // 0.10
        assert_eq!(findings[2].severity, Severity::Advisory); // 0.12 == alarm bound
        assert!(findings.iter().all(|f| f.is_consistent()));
    }

    #[test]
    fn qber_findings_invariant_to_window_order() {
        let ws = vec![
            window(0, 0.2, 1000),
            window(1, 0.15, 1000),
            window(2, 0.3, 1000),
        ];
        let mut reversed = ws.clone();
        reversed.reverse();
        assert_eq!(qber_monitor(&ws, &cfg()), qber_monitor(&reversed, &cfg()));
    }

    #[test]
    fn photocurrent_bound_is_exclusive() {
        let ok = photocurrent_monitor(&[0, 100, 8100, 8100], &cfg()).unwrap();
        assert!(ok.is_empty());

        let hit = photocurrent_monitor(&[0, 8101, 0], &cfg()).unwrap();
        assert_eq!(hit.len(), 1);
        assert_eq!(hit[0].measured.value, 8101.0);
        assert_eq!(hit[0].severity, Severity::Alarm);
        assert!(hit[0].is_consistent());
    }

    #[test]
    fn photocurrent_groups_maximal_runs() {
        let findings =
            photocurrent_monitor(&[9000, 9500, 0, 8100, 12_000, 12_000, 0, 8101], &cfg()).unwrap();
        assert_eq!(findings.len(), 3);
        assert_eq!(findings[0].window, (0, 2));
        assert_eq!(findings[0].measured.value, 9500.0);
        assert_eq!(findings[1].window, (4, 6));
        assert_eq!(findings[2].window, (7, 8));
    }

    #[test]
    fn photocurrent_rejects_negative_samples() {
        assert!(matches!(
            photocurrent_monitor(&[5, -1], &cfg()),
            Err(MonitorError::NegativeSample {
                index: 1,
                value: -1
            })
        ));
    }

    #[test]
    fn power_classification_at_exact_boundaries() {
        let cases = [
            (1e-16, PowerClass::Nominal),
            (1e-15, PowerClass::NoiseSaturated),
            (1e-4, PowerClass::NoiseSaturated),
            (1e-3, PowerClass::ThermalBlinding),
            (1e2, PowerClass::ThermalBlinding),
            (1e3, PowerClass::Melting),
            (1e4, PowerClass::Melting),
        ];
        for (p, expect) in cases {
            let assessment = power_monitor(p, &cfg()).unwrap();
            assert_eq!(assessment.class, expect, "p = {p}");
            match expect {
                PowerClass::Nominal => assert!(assessment.finding.is_none()),
                PowerClass::NoiseSaturated => {
                    assert_eq!(
                        assessment.finding.as_ref().unwrap().severity,
                        Severity::Alarm
                    )
                }
                _ => assert_eq!(
                    assessment.finding.as_ref().unwrap().severity,
                    Severity::Damage
                ),
            }
            if let Some(f) = assessment.finding {
                assert!(f.is_consistent());
            }
        }
    }

    #[test]
    fn power_classification_is_monotone() {
        let order = |c: PowerClass| match c {
            PowerClass::Nominal => 0,
            PowerClass::NoiseSaturated => 1,
            PowerClass::ThermalBlinding => 2,
            PowerClass::Melting => 3,
        };
        let mut prev = 0;
        for exp in -20..=5 {
            let p = 10f64.powi(exp);
            let rank = order(power_monitor(p, &cfg()).unwrap().class);
            assert!(rank >= prev, "classification regressed at {p} W");
            prev = rank;
        }
        assert!(power_monitor(-1.0, &cfg()).is_err());
    }

    #[test]
    fn photon_stats_honest_source_reports_multiphoton_fraction() {
        // Deterministic histogram matching Poisson(0.1) expectations.
        let n = 1_000_000f64;
        let histogram: Vec<u64> = (0..8)
            .map(|k| (n * stats::poisson_pmf(0.1, k)).round() as u64)
            .collect();
        let outcome = photon_stats_monitor(&histogram, 0.1, 1_000_000, &cfg());
        assert_eq!(outcome.status, MonitorStatus::Conclusive);
        assert!(outcome.findings.is_empty(), "{:?}", outcome.findings);
        assert_relative_eq!(
            outcome.multi_photon_fraction.unwrap(),
            0.004679,
            epsilon = 2e-5
        );
    }

    #[test]
    fn photon_stats_misdeclared_mean_alarms() {
        let n = 1_000_000f64;
        let histogram: Vec<u64> = (0..10)
            .map(|k| (n * stats::poisson_pmf(0.2, k)).round() as u64)
            .collect();
        let outcome = photon_stats_monitor(&histogram, 0.1, 1_000_000, &cfg());
        assert!(outcome
            .findings
            .iter()
            .any(|f| f.severity == Severity::Alarm
                && f.class == IoCClass::RealTime(RealTimeKind::PhotonStatistics)));
        assert!(outcome.findings.iter().all(|f| f.is_consistent()));
    }

    #[test]
    fn photon_stats_degenerate_zero_mean() {
        let outcome = photon_stats_monitor(&[50_000], 0.0, 50_000, &cfg());
        assert_eq!(outcome.status, MonitorStatus::Conclusive);
        assert!(outcome.findings.is_empty());
    }

    #[test]
    fn photon_stats_too_few_samples_is_inconclusive() {
        let outcome = photon_stats_monitor(&[5000, 400], 0.1, 5400, &cfg());
        assert!(matches!(outcome.status, MonitorStatus::Inconclusive { .. }));
        assert!(outcome.findings.is_empty());
    }

    #[test]
    fn afterpulse_zero_clicks_is_inconclusive() {
        let baseline = AfterpulseBaseline {
            estimate: 0.005,
            standard_error: 0.001,
        };
        let outcome = afterpulse_monitor(&[], 100_000, &detector(), &baseline, &cfg());
        assert!(matches!(outcome.status, MonitorStatus::Inconclusive { .. }));
        assert!(outcome.findings.is_empty());
    }

    #[test]
    fn afterpulse_correlated_pairs_alarm_against_flat_baseline() {
        // 300 click pairs (s, s+2): strongly correlated follow-up clicks.
        let mut clicks = Vec::new();
        for i in 0..300u64 {
            let s = i * 100;
            clicks.push(click(s, 0));
            clicks.push(click(s + 2, 0));
        }
        let baseline = AfterpulseBaseline {
            estimate: 0.0,
            standard_error: 0.0005,
        };
        let outcome = afterpulse_monitor(&clicks, 30_000, &detector(), &baseline, &cfg());
        assert_eq!(outcome.status, MonitorStatus::Conclusive);
        assert_eq!(outcome.findings.len(), 1);
        assert_eq!(
            outcome.findings[0].class,
            IoCClass::RealTime(RealTimeKind::Afterpulse)
        );
        assert!(outcome.findings[0].is_consistent());
    }

    #[test]
    fn deadtime_exact_spec_spacing_is_clean() {
        // Clicks every 2 slots = 2 us, exactly the specified deadtime.
        let clicks: Vec<DetectionEvent> = (0..500).map(|i| click(i * 2, 0)).collect();
        let findings = deadtime_monitor(&clicks, 1000, 1e6, &detector(), 0.5, 1000, &cfg());
        assert!(findings.is_empty(), "{findings:?}");
    }

    #[test]
    fn deadtime_gap_beyond_tolerance_alarms() {
        // Minimum interval of spec + 5 ADC periods = 7 us.
        let clicks: Vec<DetectionEvent> = (0..500).map(|i| click(i * 7, 0)).collect();
        let findings = deadtime_monitor(&clicks, 3500, 1e6, &detector(), 0.143, 3500, &cfg());
        let gap: Vec<_> = findings
            .iter()
            .filter(|f| matches!(f.rule, ThresholdRule::AbsGapAbove { .. }))
            .collect();
        assert_eq!(gap.len(), 1);
        assert_relative_eq!(gap[0].measured.value, 7e-6, epsilon = 1e-12);
        assert!(gap[0].is_consistent());
    }

    #[test]
    fn deadtime_zero_clicks_is_count_starvation() {
        let findings = deadtime_monitor(&[], 10_000, 1e6, &detector(), 0.05, 10_000, &cfg());
        assert_eq!(findings.len(), 1);
        assert!(findings[0].detail.contains("count starvation"));
        assert_eq!(findings[0].measured.value, 0.0);
        assert!(findings[0].is_consistent());
    }

    #[test]
    fn starvation_requires_meaningful_expectation() {
        // Expected clicks below the floor: silence is not evidence.
        let findings = deadtime_monitor(&[], 10_000, 1e6, &detector(), 0.005, 10_000, &cfg());
        assert!(findings.is_empty());
    }
}
