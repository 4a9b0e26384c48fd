//! Attacker strategies, implemented as slot-preserving pulse-stream
//! transformers inserted between the source and the lossy channel. Each
//! strategy keeps an audit log of what the attacker learned or injected so
//! tests and reports can compare detections against ground truth.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{phase_for, Basis, DetectorParams, Pulse, PulseTiming};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error("attack incompatible with detector parameters: {0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftDirection {
    Early,
    Late,
}

/// Attacker strategy and its knobs. Exactly zero or one attack runs per
/// session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttackConfig {
    /// Measure every pulse in a random basis and re-emit the outcome as a
    /// fresh single-photon pulse.
    InterceptResend { eve_basis_bias: f64 },
    /// Split one photon off every multi-photon pulse into an ideal quantum
    /// memory; forward the remainder untouched. Optionally block
    /// single-photon pulses.
    Pns { block_single_photons: bool },
    /// Shift the encoded phase through a delay line, measure, and resend;
    /// induces an error probability of sin^2(delta / 2) per sifted bit.
    PhaseRemap { remap_delta: f64 },
    /// Blind the receiver with continuous bright light, then deliver
    /// intercepted outcomes as bright faked-state pulses that force clicks
    /// only when the receiver's basis matches.
    BlindingFakedState {
        cw_power: f64,
        faked_pulse_power: f64,
    },
    /// Inject a multi-photon pulse shortly after each gate that carried a
    /// genuine pulse, loading the afterpulse hazard without touching the
    /// quantum signal.
    AfterGate {
        injection_offset_gates: u32,
        multiphoton_n: u32,
    },
    /// Shift pulse arrival into the detectors' timing-efficiency mismatch,
    /// biasing which detector can click. No measurement is made.
    TimeShift { shift_direction: ShiftDirection },
    /// Superimpose a continuous jamming laser onto the channel, raising
    /// received power and background clicks.
    JammingDos { laser_power: f64, duty: f64 },
}

impl AttackConfig {
    /// Knowledge-base technique id this attack realizes.
    pub fn technique_id(&self) -> &'static str {
        match self {
            AttackConfig::InterceptResend { .. } => "intercept-resend",
            AttackConfig::Pns { .. } => "photon-number-splitting",
            AttackConfig::PhaseRemap { .. } => "phase-remapping",
            AttackConfig::BlindingFakedState { .. } => "detector-blinding",
            AttackConfig::AfterGate { .. } => "detector-after-gate",
            AttackConfig::TimeShift { .. } => "time-shift",
            AttackConfig::JammingDos { .. } => "optical-jamming",
        }
    }

    /// Check internal invariants and compatibility with the receiver the
    /// scenario will run against. Rejecting here keeps silently wrong
    /// physics out of the simulation.
    pub fn validate(&self, detector: &DetectorParams) -> Result<(), AttackError> {
        match *self {
            AttackConfig::InterceptResend { eve_basis_bias } => {
                if !(eve_basis_bias > 0.0 && eve_basis_bias < 1.0) {
                    return Err(AttackError::InvalidConfig(
                        "eve_basis_bias must be in (0, 1)".into(),
                    ));
                }
            }
            AttackConfig::Pns { .. } => {}
            AttackConfig::PhaseRemap { remap_delta } => {
                if !remap_delta.is_finite() || remap_delta < 0.0 {
                    return Err(AttackError::InvalidConfig(
                        "remap_delta must be a finite non-negative angle".into(),
                    ));
                }
            }
            AttackConfig::BlindingFakedState {
                cw_power,
                faked_pulse_power,
            } => {
                if faked_pulse_power < cw_power {
                    return Err(AttackError::InvalidConfig(
                        "faked_pulse_power must be at least cw_power".into(),
                    ));
                }
                if cw_power < detector.blinding_power {
                    return Err(AttackError::Incompatible(format!(
                        "cw_power {cw_power} W is below the detector blinding threshold {} W",
                        detector.blinding_power
                    )));
                }
                if cw_power >= detector.trigger_power {
                    return Err(AttackError::Incompatible(format!(
                        "cw_power {cw_power} W would trigger linear-mode clicks on its own \
                         (trigger threshold {} W)",
                        detector.trigger_power
                    )));
                }
                if faked_pulse_power < detector.trigger_power {
                    return Err(AttackError::Incompatible(format!(
                        "faked_pulse_power {faked_pulse_power} W cannot cross the trigger \
                         threshold {} W",
                        detector.trigger_power
                    )));
                }
            }
            AttackConfig::AfterGate {
                injection_offset_gates,
                multiphoton_n,
            } => {
                if injection_offset_gates == 0 {
                    return Err(AttackError::InvalidConfig(
                        "injection_offset_gates must be >= 1".into(),
                    ));
                }
                if multiphoton_n < 2 {
                    return Err(AttackError::InvalidConfig(
                        "multiphoton_n must be >= 2".into(),
                    ));
                }
            }
            AttackConfig::TimeShift { .. } => {}
            AttackConfig::JammingDos { laser_power, duty } => {
                if !laser_power.is_finite() || laser_power <= 0.0 {
                    return Err(AttackError::InvalidConfig("laser_power must be > 0".into()));
                }
                if !(duty > 0.0 && duty <= 1.0) {
                    return Err(AttackError::InvalidConfig("duty must be in (0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    /// Continuous optical power this attack superimposes on every slot, at
    /// the channel entrance.
    pub fn continuous_power(&self) -> f64 {
        match *self {
            AttackConfig::BlindingFakedState { cw_power, .. } => cw_power,
            AttackConfig::JammingDos { laser_power, duty } => laser_power * duty,
            _ => 0.0,
        }
    }
}

/// Error probability per sifted bit induced by a phase remap of `delta`
/// radians. Ships calibrated so that the documented operating point
/// [`phase_remap_calibration_delta`] lands at 0.197.
pub fn phase_remap_error_probability(delta: f64) -> f64 {
    (delta / 2.0).sin().powi(2)
}

/// The delay-line setting at which the remap attack induces a 19.7% error
/// rate: 2 * asin(sqrt(0.197)).
pub fn phase_remap_calibration_delta() -> f64 {
    2.0 * 0.197f64.sqrt().asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EveAction {
    MeasureResend,
    PhaseRemapResend,
    SplitStored,
    BlockedSingle,
    FakedState,
    AfterGateInject,
}

/// One audited attacker action. At most one entry exists per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EveLogEntry {
    pub slot: u64,
    pub action: EveAction,
    pub learned_bit: Option<bool>,
    pub learned_basis: Option<Basis>,
    pub injected_power: Option<f64>,
}

/// Ground-truth audit trail of one attack run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EveLog {
    pub entries: Vec<EveLogEntry>,
    /// Continuous power superimposed on every slot, watts.
    pub continuous_injected_power: f64,
}

impl EveLog {
    pub fn entry_for_slot(&self, slot: u64) -> Option<&EveLogEntry> {
        self.entries
            .binary_search_by_key(&slot, |e| e.slot)
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Fraction of the sifted key the attacker holds: sifted positions
    /// whose logged bit equals the sender's bit. `indices` and
    /// `sender_bits` are the parallel arrays of a sifted key.
    pub fn known_fraction(&self, indices: &[u64], sender_bits: &[bool]) -> f64 {
        if indices.is_empty() {
            return 0.0;
        }
        let known = indices
            .iter()
            .zip(sender_bits)
            .filter(|(slot, &bit)| {
                self.entry_for_slot(**slot)
                    .is_some_and(|e| e.learned_bit == Some(bit))
            })
            .count();
        known as f64 / indices.len() as f64
    }
}

/// Stateful per-run transformer. Advance it slot by slot with
/// [`AttackRunner::transform`]; every input slot yields exactly one output
/// slot (blocked pulses become vacuum).
#[derive(Debug)]
pub struct AttackRunner {
    cfg: AttackConfig,
    log: EveLog,
    /// Scheduled after-gate injections, in slot order.
    pending_injections: VecDeque<u64>,
}

impl AttackRunner {
    pub fn new(cfg: AttackConfig, detector: &DetectorParams) -> Result<Self, AttackError> {
        cfg.validate(detector)?;
        let continuous = cfg.continuous_power();
        Ok(AttackRunner {
            cfg,
            log: EveLog {
                entries: Vec::new(),
                continuous_injected_power: continuous,
            },
            pending_injections: VecDeque::new(),
        })
    }

    pub fn config(&self) -> &AttackConfig {
        &self.cfg
    }

    pub fn into_log(self) -> EveLog {
        self.log
    }

    /// Transform the pulse for one slot.
    pub fn transform(&mut self, pulse: Pulse, rng: &mut impl Rng) -> Pulse {
        match self.cfg {
            AttackConfig::InterceptResend { eve_basis_bias } => {
                self.intercept_resend(pulse, eve_basis_bias, rng)
            }
            AttackConfig::Pns {
                block_single_photons,
            } => self.split_photons(pulse, block_single_photons),
            AttackConfig::PhaseRemap { remap_delta } => self.phase_remap(pulse, remap_delta, rng),
            AttackConfig::BlindingFakedState {
                cw_power,
                faked_pulse_power,
            } => self.faked_state(pulse, cw_power, faked_pulse_power, rng),
            AttackConfig::AfterGate {
                injection_offset_gates,
                multiphoton_n,
            } => self.after_gate(pulse, injection_offset_gates, multiphoton_n),
            AttackConfig::TimeShift { shift_direction } => {
                let mut out = pulse;
                out.timing = match shift_direction {
                    ShiftDirection::Early => PulseTiming::Early,
                    ShiftDirection::Late => PulseTiming::Late,
                };
                out
            }
            AttackConfig::JammingDos { laser_power, duty } => {
                let mut out = pulse;
                let cw = laser_power * duty;
                out.power += cw;
                out.cw_power += cw;
                out
            }
        }
    }

    /// Measure the pulse as one logical qubit in `eve_basis`. Multi-photon
    /// structure is ignored by intercepting attacks; it only matters to
    /// splitting attacks.
    fn measure_as_qubit(pulse: &Pulse, eve_basis: Basis, rng: &mut impl Rng) -> bool {
        if pulse.basis == eve_basis {
            pulse.bit
        } else {
            rng.random_bool(0.5)
        }
    }

    fn single_photon_power(pulse: &Pulse) -> f64 {
        if pulse.photon_number > 0 {
            pulse.power / pulse.photon_number as f64
        } else {
            0.0
        }
    }

    fn intercept_resend(&mut self, pulse: Pulse, bias: f64, rng: &mut impl Rng) -> Pulse {
        if pulse.photon_number == 0 {
            return pulse;
        }
        let eve_basis = if rng.random_bool(bias) {
            Basis::Rectilinear
        } else {
            Basis::Diagonal
        };
        let outcome = Self::measure_as_qubit(&pulse, eve_basis, rng);
        self.log.entries.push(EveLogEntry {
            slot: pulse.slot,
            action: EveAction::MeasureResend,
            learned_bit: Some(outcome),
            learned_basis: Some(eve_basis),
            injected_power: None,
        });
        Pulse {
            slot: pulse.slot,
            photon_number: 1,
            bit: outcome,
            basis: eve_basis,
            phase_offset: phase_for(outcome, eve_basis),
            power: Self::single_photon_power(&pulse),
            cw_power: 0.0,
            timing: PulseTiming::OnTime,
        }
    }

    fn split_photons(&mut self, pulse: Pulse, block_singles: bool) -> Pulse {
        match pulse.photon_number {
            0 => pulse,
            1 => {
                if block_singles {
                    self.log.entries.push(EveLogEntry {
                        slot: pulse.slot,
                        action: EveAction::BlockedSingle,
                        learned_bit: None,
                        learned_basis: None,
                        injected_power: None,
                    });
                    Pulse::vacuum(pulse.slot)
                } else {
                    pulse
                }
            }
            n => {
                // One photon goes into ideal quantum memory and resolves to
                // the encoded bit once the basis is revealed; the remainder
                // is forwarded untouched.
                self.log.entries.push(EveLogEntry {
                    slot: pulse.slot,
                    action: EveAction::SplitStored,
                    learned_bit: Some(pulse.bit),
                    learned_basis: Some(pulse.basis),
                    injected_power: None,
                });
                let mut out = pulse;
                out.photon_number = n - 1;
                out.power = out.power * (n - 1) as f64 / n as f64;
                out
            }
        }
    }

    fn phase_remap(&mut self, pulse: Pulse, delta: f64, rng: &mut impl Rng) -> Pulse {
        if pulse.photon_number == 0 {
            return pulse;
        }
        let err = phase_remap_error_probability(delta);
        let flip = err > 0.0 && rng.random_bool(err.min(1.0));
        let bit = pulse.bit ^ flip;
        self.log.entries.push(EveLogEntry {
            slot: pulse.slot,
            action: EveAction::PhaseRemapResend,
            learned_bit: Some(bit),
            learned_basis: Some(pulse.basis),
            injected_power: None,
        });
        Pulse {
            slot: pulse.slot,
            photon_number: 1,
            bit,
            basis: pulse.basis,
            phase_offset: (phase_for(bit, pulse.basis) + delta) % std::f64::consts::TAU,
            power: Self::single_photon_power(&pulse),
            cw_power: 0.0,
            timing: PulseTiming::OnTime,
        }
    }

    fn faked_state(&mut self, pulse: Pulse, cw: f64, faked: f64, rng: &mut impl Rng) -> Pulse {
        if pulse.photon_number == 0 {
            // Nothing intercepted: only the blinding floor goes out.
            let mut out = Pulse::vacuum(pulse.slot);
            out.power = cw;
            out.cw_power = cw;
            return out;
        }
        let eve_basis = if rng.random_bool(0.5) {
            Basis::Rectilinear
        } else {
            Basis::Diagonal
        };
        let outcome = Self::measure_as_qubit(&pulse, eve_basis, rng);
        self.log.entries.push(EveLogEntry {
            slot: pulse.slot,
            action: EveAction::FakedState,
            learned_bit: Some(outcome),
            learned_basis: Some(eve_basis),
            injected_power: Some(faked),
        });
        Pulse {
            slot: pulse.slot,
            photon_number: 0,
            bit: outcome,
            basis: eve_basis,
            phase_offset: phase_for(outcome, eve_basis),
            power: cw + faked,
            cw_power: cw,
            timing: PulseTiming::OnTime,
        }
    }

    fn after_gate(&mut self, pulse: Pulse, offset: u32, photons: u32) -> Pulse {
        let slot = pulse.slot;
        let due = self.pending_injections.front() == Some(&slot);
        if due {
            self.pending_injections.pop_front();
        }
        if pulse.photon_number >= 1 {
            self.pending_injections.push_back(slot + offset as u64);
            // Genuine pulses are forwarded untouched; an injection that
            // would collide with one is skipped.
            return pulse;
        }
        if due {
            self.log.entries.push(EveLogEntry {
                slot,
                action: EveAction::AfterGateInject,
                learned_bit: None,
                learned_basis: None,
                injected_power: None,
            });
            let mut burst = Pulse::vacuum(slot);
            burst.photon_number = photons;
            burst.timing = PulseTiming::AfterGate;
            // Arrives after the gate closes: the gated electronics see no
            // in-gate power from it.
            burst.power = 0.0;
            return burst;
        }
        pulse
    }
}

/// Transform a whole pulse stream, returning the transformed stream and the
/// audit log. Output slot count always equals input slot count.
pub fn apply_attack(
    cfg: &AttackConfig,
    pulses: Vec<Pulse>,
    rng: &mut impl Rng,
    detector: &DetectorParams,
) -> Result<(Vec<Pulse>, EveLog), AttackError> {
    let mut runner = AttackRunner::new(cfg.clone(), detector)?;
    let out: Vec<Pulse> = pulses
        .into_iter()
        .map(|p| runner.transform(p, rng))
        .collect();
    Ok((out, runner.into_log()))
}
