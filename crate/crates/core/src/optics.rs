//! Physical models for the optical layer: weak-coherent-pulse source, lossy
//! channel, and a two-detector gated single-photon receiver with dark
//! counts, afterpulsing, deadtime, bright-light blinding, and photocurrent
//! readout.
//!
//! Time is discretized into gate slots at the source pulse rate; all
//! timetags derive from the slot index. This keeps deadtime and afterpulse
//! bookkeeping exact and every run reproducible.

use std::ops::Range;

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpticsError {
    #[error("invalid {field}: {reason}")]
    InvalidParam { field: &'static str, reason: String },
    #[error("received-power window is empty")]
    EmptyWindow,
}

fn invalid(field: &'static str, reason: impl Into<String>) -> OpticsError {
    OpticsError::InvalidParam {
        field,
        reason: reason.into(),
    }
}

/// Preparation/measurement basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    Rectilinear,
    Diagonal,
}

/// Arrival timing of a pulse relative to the detector gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PulseTiming {
    /// Centered in the gate.
    #[default]
    OnTime,
    /// Shifted toward the early edge of the gate.
    Early,
    /// Shifted toward the late edge of the gate.
    Late,
    /// Arrives after the gate has closed: cannot click, but absorbed
    /// photons still load the afterpulse hazard.
    AfterGate,
}

/// Canonical phase encoding for a bit/basis pair, in radians.
pub fn phase_for(bit: bool, basis: Basis) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    match (basis, bit) {
        (Basis::Rectilinear, false) => 0.0,
        (Basis::Rectilinear, true) => PI,
        (Basis::Diagonal, false) => FRAC_PI_2,
        (Basis::Diagonal, true) => 3.0 * FRAC_PI_2,
    }
}

/// Weak-coherent-pulse source. The photon number of each phase-randomized
/// pulse is Poisson-distributed with mean `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    /// Mean photon number per pulse (dimensionless).
    pub mu: f64,
    /// Pulses per second; also the gate rate.
    pub pulse_rate: f64,
    /// Energy per photon in joules.
    pub photon_energy: f64,
}

impl SourceParams {
    pub fn new(mu: f64, pulse_rate: f64, photon_energy: f64) -> Result<Self, OpticsError> {
        let params = Self {
            mu,
            pulse_rate,
            photon_energy,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        if !self.mu.is_finite() || self.mu < 0.0 {
            return Err(invalid("mu", format!("must be >= 0, got {}", self.mu)));
        }
        if !self.pulse_rate.is_finite() || self.pulse_rate <= 0.0 {
            return Err(invalid("pulse_rate", "must be > 0"));
        }
        if !self.photon_energy.is_finite() || self.photon_energy <= 0.0 {
            return Err(invalid("photon_energy", "must be > 0"));
        }
        Ok(())
    }

    /// Draw a photon number for one pulse: Poisson(mu), degenerate at 0
    /// for mu = 0. Deterministic given the rng state.
    pub fn sample_photon_number(&self, rng: &mut impl Rng) -> u32 {
        if self.mu == 0.0 {
            return 0;
        }
        let poisson = rand_distr::Poisson::new(self.mu).expect("mu > 0 checked at construction");
        poisson.sample(rng) as u32
    }

    /// Average optical power of an `n`-photon pulse over its slot.
    pub fn pulse_power(&self, photon_number: u32) -> f64 {
        photon_number as f64 * self.photon_energy * self.pulse_rate
    }

    /// Emit the pulse for one slot.
    pub fn emit(&self, slot: u64, bit: bool, basis: Basis, rng: &mut impl Rng) -> Pulse {
        let n = self.sample_photon_number(rng);
        Pulse {
            slot,
            photon_number: n,
            bit,
            basis,
            phase_offset: phase_for(bit, basis),
            power: self.pulse_power(n),
            cw_power: 0.0,
            timing: PulseTiming::OnTime,
        }
    }
}

/// One time slot of light on the link.
///
/// `power` is the total in-gate optical power incident during the slot;
/// for source pulses it equals `photon_number * photon_energy * pulse_rate`.
/// Bright attacker light may set `power` independently of `photon_number`.
/// `cw_power` is the continuous (non-pulsed) component of `power`, which is
/// what a guard-band power meter in front of the gated detectors sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub slot: u64,
    pub photon_number: u32,
    pub bit: bool,
    pub basis: Basis,
    /// Radians in [0, 2*pi).
    pub phase_offset: f64,
    /// Total in-slot optical power, watts.
    pub power: f64,
    /// Continuous component of `power`, watts.
    #[serde(default)]
    pub cw_power: f64,
    #[serde(default)]
    pub timing: PulseTiming,
}

impl Pulse {
    /// An empty slot.
    pub fn vacuum(slot: u64) -> Self {
        Pulse {
            slot,
            photon_number: 0,
            bit: false,
            basis: Basis::Rectilinear,
            phase_offset: 0.0,
            power: 0.0,
            cw_power: 0.0,
            timing: PulseTiming::OnTime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Medium {
    Fiber,
    FreeSpace,
}

/// Lossy quantum channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Attenuation in dB (>= 0).
    pub loss_db: f64,
    pub medium: Medium,
    /// Per-gate probability of a background-induced click on each detector.
    #[serde(default)]
    pub background_click_prob: f64,
    /// Probability that a basis-matched photon is routed to the wrong
    /// detector (receiver misalignment); the intrinsic error source.
    #[serde(default)]
    pub misalignment_prob: f64,
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), OpticsError> {
        if !self.loss_db.is_finite() || self.loss_db < 0.0 {
            return Err(invalid("loss_db", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.background_click_prob) {
            return Err(invalid("background_click_prob", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.misalignment_prob) {
            return Err(invalid("misalignment_prob", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Fraction of photons surviving the channel: 10^(-loss_db / 10).
    pub fn transmittance(&self) -> f64 {
        10f64.powf(-self.loss_db / 10.0)
    }

    /// Binomial thinning: each photon independently survives with the
    /// channel transmittance; classical power scales by the same factor.
    /// Bit, basis, phase, and timing are untouched.
    pub fn apply_loss(&self, mut pulse: Pulse, rng: &mut impl Rng) -> Pulse {
        let t = self.transmittance();
        if t < 1.0 {
            let mut survivors = 0;
            for _ in 0..pulse.photon_number {
                if rng.random_bool(t) {
                    survivors += 1;
                }
            }
            pulse.photon_number = survivors;
            pulse.power *= t;
            pulse.cw_power *= t;
        }
        pulse
    }
}

/// Gated avalanche-photodiode pair (bit-0 and bit-1 detectors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Photon detection efficiency in [0, 1].
    pub efficiency: f64,
    /// Per-gate dark-count probability per detector.
    pub dark_count_prob: f64,
    /// Afterpulse hazard added by one avalanche, applied to the next gate.
    pub afterpulse_prob: f64,
    /// Mean lifetime of the afterpulse hazard, in gates (>= 1). The hazard
    /// decays geometrically by a factor of 1 - 1/afterpulse_decay_gates
    /// per gate.
    pub afterpulse_decay_gates: u32,
    /// Gates a detector stays dead after an avalanche.
    pub deadtime_gates: u32,
    /// Analog-to-digital sampling period of the timing electronics, seconds.
    pub adc_period: f64,
    /// Deadtime from the manufacturer's specification, seconds.
    pub spec_deadtime: f64,
    /// Continuous power at or above which the detectors leave Geiger mode.
    pub blinding_power: f64,
    /// Pulsed power at or above which a blinded (linear-mode) detector
    /// produces a click. Must exceed `blinding_power`.
    pub trigger_power: f64,
    /// Photocurrent readout counts per watt of in-gate power.
    pub photocurrent_per_watt: f64,
    /// Saturation cap of a single photocurrent sample.
    pub photocurrent_cap: u32,
    /// Efficiency multipliers `[bit-0, bit-1]` applied when a pulse arrives
    /// early; reversed for late arrival. `[1, 1]` means no timing mismatch.
    #[serde(default = "default_timing_mismatch")]
    pub timing_mismatch: [f64; 2],
}

fn default_timing_mismatch() -> [f64; 2] {
    [1.0, 1.0]
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), OpticsError> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(invalid("efficiency", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.dark_count_prob) {
            return Err(invalid("dark_count_prob", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.afterpulse_prob) {
            return Err(invalid("afterpulse_prob", "must be in [0, 1]"));
        }
        if self.afterpulse_decay_gates == 0 {
            return Err(invalid("afterpulse_decay_gates", "must be >= 1"));
        }
        if !self.adc_period.is_finite() || self.adc_period <= 0.0 {
            return Err(invalid("adc_period", "must be > 0"));
        }
        if !self.spec_deadtime.is_finite() || self.spec_deadtime < 0.0 {
            return Err(invalid("spec_deadtime", "must be >= 0"));
        }
        if !self.blinding_power.is_finite() || self.blinding_power <= 0.0 {
            return Err(invalid("blinding_power", "must be > 0"));
        }
        if self.trigger_power <= self.blinding_power {
            return Err(invalid("trigger_power", "must exceed blinding_power"));
        }
        if !self.photocurrent_per_watt.is_finite() || self.photocurrent_per_watt < 0.0 {
            return Err(invalid("photocurrent_per_watt", "must be >= 0"));
        }
        for m in self.timing_mismatch {
            if !(0.0..=1.0).contains(&m) {
                return Err(invalid("timing_mismatch", "multipliers must be in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Per-detector efficiency multiplier for a given arrival timing.
    pub fn timing_multiplier(&self, timing: PulseTiming, detector: usize) -> f64 {
        match timing {
            PulseTiming::OnTime | PulseTiming::AfterGate => 1.0,
            PulseTiming::Early => self.timing_mismatch[detector],
            PulseTiming::Late => self.timing_mismatch[1 - detector],
        }
    }

    /// Photocurrent readout for one slot: linear in incident power up to
    /// the saturation cap, quantized down to integer counts.
    pub fn quantize_photocurrent(&self, power: f64) -> u32 {
        let raw = (power * self.photocurrent_per_watt).floor();
        if raw >= self.photocurrent_cap as f64 {
            self.photocurrent_cap
        } else if raw <= 0.0 {
            0
        } else {
            raw as u32
        }
    }
}

/// Window-average received power at or above which sustained illumination
/// thermally blinds the avalanche photodiodes, watts.
pub const THERMAL_BLINDING_POWER: f64 = 1e-3;

/// Window-average received power at or above which general melting of the
/// receiver starts, watts.
pub const MELTING_POWER: f64 = 1e3;

/// Irreversible damage level of the receiver. Degrades monotonically
/// within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DamageLevel {
    Intact,
    ThermallyBlinded,
    Melted,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UnitState {
    /// First slot at which this detector may click again.
    pub dead_until: u64,
    /// Afterpulse hazard applying to the next gate.
    pub afterpulse_hazard: f64,
}

/// Mutable receiver state advanced slot by slot. Single-owner; one run is
/// sequential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    /// Latched when continuous bright light has driven the APDs into
    /// linear mode; cleared only by an explicit scenario reset.
    pub blinded: bool,
    pub damage: DamageLevel,
    pub units: [UnitState; 2],
}

impl Default for DetectorState {
    fn default() -> Self {
        Self::new()
    }
}

impl DetectorState {
    pub fn new() -> Self {
        DetectorState {
            blinded: false,
            damage: DamageLevel::Intact,
            units: [UnitState::default(); 2],
        }
    }

    /// Raise the damage level; damage never heals.
    pub fn degrade(&mut self, level: DamageLevel) {
        if level > self.damage {
            self.damage = level;
        }
    }
}

/// What fired a detector in one gate. `None` accompanies click = false.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionCause {
    Signal,
    DarkCount,
    Afterpulse,
    /// Linear-mode click forced by a bright faked-state pulse.
    Forced,
    Background,
    None,
}

/// Outcome of one detector in one gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub slot: u64,
    pub detector_id: u8,
    pub click: bool,
    pub cause: DetectionCause,
    /// Seconds: slot / pulse_rate.
    pub timetag: f64,
    /// Receiver-level photocurrent sample for this slot.
    pub photocurrent: u32,
}

/// Per-gate environment the receiver sees beyond the pulse itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateEnv {
    /// Per-detector background click probability for this gate.
    pub background_click_prob: f64,
    /// Wrong-detector routing probability for basis-matched photons.
    pub misalignment_prob: f64,
    /// Gate rate, for timetags.
    pub pulse_rate: f64,
}

/// Advance the receiver by one gate and report both detectors' outcomes.
///
/// Behavior in priority order: a melted or thermally blinded receiver never
/// clicks; continuous power at or above `blinding_power` latches the blinded
/// state, under which no single-photon, dark, afterpulse, or background
/// clicks occur and only a bright pulse at or above `trigger_power` forces a
/// click (on the detector selected by the pulse encoding, when the bases
/// match); a detector inside its deadtime cannot click; otherwise the
/// independent causes fire in the order signal, dark count, afterpulse,
/// background, and the first one to fire is recorded. Any avalanche click
/// starts the deadtime and loads the afterpulse hazard.
pub fn detect_gate(
    pulse: &Pulse,
    bob_basis: Basis,
    params: &DetectorParams,
    state: &mut DetectorState,
    env: &GateEnv,
    rng: &mut impl Rng,
) -> [DetectionEvent; 2] {
    let slot = pulse.slot;
    let timetag = slot as f64 / env.pulse_rate;
    let photocurrent = params.quantize_photocurrent(pulse.power);
    let blank = |detector_id: u8| DetectionEvent {
        slot,
        detector_id,
        click: false,
        cause: DetectionCause::None,
        timetag,
        photocurrent,
    };
    let mut events = [blank(0), blank(1)];

    // Hazard applying to this gate, captured before the per-gate decay.
    let gate_hazard = [
        state.units[0].afterpulse_hazard,
        state.units[1].afterpulse_hazard,
    ];
    let decay = 1.0 - 1.0 / params.afterpulse_decay_gates as f64;
    for unit in &mut state.units {
        unit.afterpulse_hazard *= decay;
    }

    // Light arriving after the gate closes cannot click but its absorbed
    // photons stay trapped, loading the hazard split across both diodes.
    let signal_photons = if pulse.timing == PulseTiming::AfterGate {
        let deposit = params.afterpulse_prob * pulse.photon_number as f64 / 2.0;
        for unit in &mut state.units {
            unit.afterpulse_hazard = (unit.afterpulse_hazard + deposit).min(1.0);
        }
        0
    } else {
        pulse.photon_number
    };

    if state.damage != DamageLevel::Intact {
        return events;
    }

    if pulse.power >= params.blinding_power {
        state.blinded = true;
    }

    if state.blinded {
        // Linear mode. The discriminator is AC-coupled: only the pulsed
        // component of the incident power can cross the click threshold.
        let pulsed_power = pulse.power - pulse.cw_power;
        if pulsed_power >= params.trigger_power && bob_basis == pulse.basis {
            let det = pulse.bit as usize;
            events[det].click = true;
            events[det].cause = DetectionCause::Forced;
        }
        return events;
    }

    // Photon routing. Basis match sends photons to the encoded-bit detector
    // (misalignment may flip them); basis mismatch routes 50/50.
    let mut signal_hit = [false; 2];
    for _ in 0..signal_photons {
        let det = if bob_basis == pulse.basis {
            let mut d = pulse.bit as usize;
            if env.misalignment_prob > 0.0 && rng.random_bool(env.misalignment_prob) {
                d ^= 1;
            }
            d
        } else {
            usize::from(rng.random_bool(0.5))
        };
        let eff = (params.efficiency * params.timing_multiplier(pulse.timing, det)).min(1.0);
        if eff > 0.0 && rng.random_bool(eff) {
            signal_hit[det] = true;
        }
    }

    for det in 0..2 {
        if slot < state.units[det].dead_until {
            continue;
        }
        let cause = if signal_hit[det] {
            DetectionCause::Signal
        } else if params.dark_count_prob > 0.0 && rng.random_bool(params.dark_count_prob) {
            DetectionCause::DarkCount
        } else if gate_hazard[det] > 0.0 && rng.random_bool(gate_hazard[det].min(1.0)) {
            DetectionCause::Afterpulse
        } else if env.background_click_prob > 0.0 && rng.random_bool(env.background_click_prob) {
            DetectionCause::Background
        } else {
            continue;
        };
        events[det].click = true;
        events[det].cause = cause;
        state.units[det].dead_until = slot + params.deadtime_gates as u64;
        state.units[det].afterpulse_hazard =
            (state.units[det].afterpulse_hazard + params.afterpulse_prob).min(1.0);
    }
    events
}

/// Time-averaged optical power incident over a slot window: the sum of
/// per-pulse energies divided by the window duration. Slots absent from
/// `pulses` are vacuum.
pub fn compute_received_power(
    pulses: &[Pulse],
    window: Range<u64>,
    source: &SourceParams,
) -> Result<f64, OpticsError> {
    if window.is_empty() {
        return Err(OpticsError::EmptyWindow);
    }
    let slot_duration = 1.0 / source.pulse_rate;
    let energy: f64 = pulses
        .iter()
        .filter(|p| window.contains(&p.slot))
        .map(|p| p.power * slot_duration)
        .sum();
    let duration = (window.end - window.start) as f64 * slot_duration;
    Ok(energy / duration)
}
