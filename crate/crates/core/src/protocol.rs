//! BB84 session engine: sender-side random encoding, receiver measurement
//! through the optics layer, sifting, and windowed error-rate estimation.
//! A session is fully deterministic given its configuration and seed.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{AttackConfig, AttackError, AttackRunner, EveLog};
use crate::optics::{
    detect_gate, Basis, ChannelParams, DamageLevel, DetectionEvent, DetectorParams, DetectorState,
    GateEnv, OpticsError, SourceParams, MELTING_POWER, THERMAL_BLINDING_POWER,
};
use crate::rng::{substream, StreamId};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("invalid protocol configuration: {0}")]
    InvalidConfig(String),
    #[error("insufficient data: {0}")]
    InsufficientData(&'static str),
    #[error("records cover different slot ranges: {0}")]
    MismatchedRanges(String),
}

/// Session-level knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bb84Config {
    pub num_pulses: u64,
    /// Probability of choosing the rectilinear basis, for both sides.
    #[serde(default = "default_basis_bias")]
    pub basis_bias: f64,
    /// Fraction of sifted bits disclosed for error estimation. Disclosed
    /// bits are excluded from the output key.
    #[serde(default = "default_sample_fraction")]
    pub qber_sample_fraction: f64,
    /// Error-rate window length in sifted bits.
    #[serde(default = "default_qber_window_bits")]
    pub qber_window_bits: usize,
    /// Length in slots of the power/count monitoring windows.
    #[serde(default = "default_monitor_window_slots")]
    pub monitor_window_slots: u64,
}

fn default_basis_bias() -> f64 {
    0.5
}
fn default_sample_fraction() -> f64 {
    0.5
}
fn default_qber_window_bits() -> usize {
    1000
}
fn default_monitor_window_slots() -> u64 {
    10_000
}

impl Bb84Config {
    pub fn new(num_pulses: u64) -> Result<Self, ProtocolError> {
        let cfg = Bb84Config {
            num_pulses,
            basis_bias: default_basis_bias(),
            qber_sample_fraction: default_sample_fraction(),
            qber_window_bits: default_qber_window_bits(),
            monitor_window_slots: default_monitor_window_slots(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.num_pulses < 1 {
            return Err(ProtocolError::InvalidConfig(
                "num_pulses must be >= 1".into(),
            ));
        }
        if !(self.basis_bias > 0.0 && self.basis_bias < 1.0) {
            return Err(ProtocolError::InvalidConfig(
                "basis_bias must be in (0, 1)".into(),
            ));
        }
        if !(self.qber_sample_fraction > 0.0 && self.qber_sample_fraction <= 1.0) {
            return Err(ProtocolError::InvalidConfig(
                "qber_sample_fraction must be in (0, 1]".into(),
            ));
        }
        if self.qber_window_bits == 0 {
            return Err(ProtocolError::InvalidConfig(
                "qber_window_bits must be >= 1".into(),
            ));
        }
        if self.monitor_window_slots == 0 {
            return Err(ProtocolError::InvalidConfig(
                "monitor_window_slots must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// The sender's per-slot choices for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct AliceRecord {
    pub bits: Vec<bool>,
    pub bases: Vec<Basis>,
}

/// Slots where the bases matched and the receiver registered exactly one
/// conclusive click. `indices` is strictly increasing; the three arrays are
/// parallel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SiftedKey {
    pub indices: Vec<u64>,
    pub alice_bits: Vec<bool>,
    pub bob_bits: Vec<bool>,
    /// Basis-matched slots discarded because both detectors clicked.
    pub double_click_count: u64,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// One disclosed comparison bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisclosedBit {
    pub index: u64,
    pub alice_bit: bool,
    pub bob_bit: bool,
}

/// Error rate of one window of disclosed bits: qber = error_bits / total_bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QberWindow {
    pub window_id: u32,
    pub slot_range: (u64, u64),
    pub error_bits: u64,
    pub total_bits: u64,
    pub qber: f64,
}

/// Mean received power over one monitoring window, as seen by the
/// guard-band meter in front of the gated detectors (continuous light
/// only; the gated quantum signal does not register on it).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerWindow {
    pub window_id: u32,
    pub slot_range: (u64, u64),
    pub watts: f64,
}

/// Complete structured output of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub num_slots: u64,
    pub pulse_rate: f64,
    pub sifted_key: SiftedKey,
    pub disclosed: Vec<DisclosedBit>,
    pub qber_windows: Vec<QberWindow>,
    /// Click events only, sorted by (slot, detector).
    pub detection_events: Vec<DetectionEvent>,
    /// Per-slot photocurrent readouts.
    pub photocurrent_samples: Vec<i64>,
    pub power_by_window: Vec<PowerWindow>,
    pub eve_log: Option<EveLog>,
    /// Photon-number histogram tapped at the source, before the channel.
    pub photon_histogram: Vec<u64>,
    pub final_damage: DamageLevel,
}

impl SessionRecord {
    /// Pooled error rate over all disclosed bits, per the exact ratio.
    pub fn pooled_qber(&self) -> Option<f64> {
        let total: u64 = self.qber_windows.iter().map(|w| w.total_bits).sum();
        if total == 0 {
            return None;
        }
        let errors: u64 = self.qber_windows.iter().map(|w| w.error_bits).sum();
        Some(errors as f64 / total as f64)
    }
}

/// Keep exactly the slots where the bases matched and exactly one detector
/// clicked. Basis-matched slots where both detectors clicked are discarded
/// and counted separately.
pub fn sift(
    alice: &AliceRecord,
    bob_bases: &[Basis],
    clicks: &[DetectionEvent],
) -> Result<SiftedKey, ProtocolError> {
    if alice.bits.len() != alice.bases.len() || alice.bases.len() != bob_bases.len() {
        return Err(ProtocolError::MismatchedRanges(format!(
            "alice bits {}, alice bases {}, bob bases {}",
            alice.bits.len(),
            alice.bases.len(),
            bob_bases.len()
        )));
    }
    let num_slots = bob_bases.len() as u64;
    let mut key = SiftedKey::default();
    let mut i = 0;
    while i < clicks.len() {
        let slot = clicks[i].slot;
        if slot >= num_slots {
            return Err(ProtocolError::MismatchedRanges(format!(
                "click at slot {slot} beyond session of {num_slots} slots"
            )));
        }
        let mut clicked = [false; 2];
        while i < clicks.len() && clicks[i].slot == slot {
            debug_assert!(clicks[i].click);
            clicked[clicks[i].detector_id as usize] = true;
            i += 1;
        }
        if alice.bases[slot as usize] != bob_bases[slot as usize] {
            continue;
        }
        match (clicked[0], clicked[1]) {
            (true, true) => key.double_click_count += 1,
            (true, false) | (false, true) => {
                key.indices.push(slot);
                key.alice_bits.push(alice.bits[slot as usize]);
                key.bob_bits.push(clicked[1]);
            }
            (false, false) => {}
        }
    }
    Ok(key)
}

/// Disclosed sample and its windowed error rates.
#[derive(Debug, Clone, PartialEq)]
pub struct QberEstimate {
    pub windows: Vec<QberWindow>,
    pub disclosed: Vec<DisclosedBit>,
}

/// Compensated accumulator for window power sums. Keeps the mean of a
/// constant per-slot power exact, so the inclusive damage thresholds hold
/// at their boundary values.
#[derive(Debug, Default, Clone, Copy)]
struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    fn add(&mut self, value: f64) {
        let y = value - self.compensation;
        let t = self.sum + y;
        self.compensation = (t - self.sum) - y;
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum
    }

    fn reset(&mut self) {
        *self = KahanSum::default();
    }
}

/// Disclose a seeded uniform sample (without replacement) of the sifted key
/// and compute exact windowed error rates over it. Windows hold
/// `window_size` disclosed bits; a short final window is merged into its
/// predecessor when it is below half the window size.
pub fn estimate_qber(
    key: &SiftedKey,
    sample_fraction: f64,
    window_size: usize,
    rng: &mut impl Rng,
) -> Result<QberEstimate, ProtocolError> {
    if key.is_empty() {
        return Err(ProtocolError::InsufficientData(
            "cannot estimate an error rate from an empty sifted key",
        ));
    }
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(ProtocolError::InvalidConfig(
            "sample_fraction must be in (0, 1]".into(),
        ));
    }
    if window_size == 0 {
        return Err(ProtocolError::InvalidConfig(
            "window_size must be >= 1".into(),
        ));
    }
    let n = key.len();
    let k = ((n as f64 * sample_fraction).round() as usize).clamp(1, n);

    // Partial Fisher-Yates: the first k positions become the sample.
    let mut positions: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        positions.swap(i, j);
    }
    let mut sample = positions[..k].to_vec();
    sample.sort_unstable();

    let disclosed: Vec<DisclosedBit> = sample
        .iter()
        .map(|&p| DisclosedBit {
            index: key.indices[p],
            alice_bit: key.alice_bits[p],
            bob_bit: key.bob_bits[p],
        })
        .collect();

    // Window boundaries over the disclosed bits, in index order.
    let mut bounds: Vec<(usize, usize)> = (0..disclosed.len())
        .step_by(window_size)
        .map(|start| (start, (start + window_size).min(disclosed.len())))
        .collect();
    if bounds.len() > 1 {
        let (last_start, last_end) = *bounds.last().unwrap();
        if (last_end - last_start) * 2 < window_size {
            bounds.pop();
            bounds.last_mut().unwrap().1 = last_end;
        }
    }

    let windows = bounds
        .iter()
        .enumerate()
        .map(|(id, &(start, end))| {
            let bits = &disclosed[start..end];
            let errors = bits.iter().filter(|b| b.alice_bit != b.bob_bit).count() as u64;
            let total = bits.len() as u64;
            QberWindow {
                window_id: id as u32,
                slot_range: (bits[0].index, bits[bits.len() - 1].index + 1),
                error_bits: errors,
                total_bits: total,
                qber: errors as f64 / total as f64,
            }
        })
        .collect();

    Ok(QberEstimate { windows, disclosed })
}

/// Run one complete session: per slot the sender draws a bit and basis, the
/// source emits a pulse, the attack (if any) transforms it mid-channel,
/// channel loss applies, and the receiver measures. Deterministic given the
/// seed.
pub fn run_session(
    cfg: &Bb84Config,
    source: &SourceParams,
    channel: &ChannelParams,
    detector: &DetectorParams,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<SessionRecord, ProtocolError> {
    cfg.validate()?;
    source.validate()?;
    channel.validate()?;
    detector.validate()?;

    let mut runner = attack
        .map(|cfg| AttackRunner::new(cfg.clone(), detector))
        .transpose()?;

    let mut bit_rng = substream(seed, StreamId::AliceBits);
    let mut alice_basis_rng = substream(seed, StreamId::AliceBases);
    let mut photon_rng = substream(seed, StreamId::SourcePhotons);
    let mut attack_rng = substream(seed, StreamId::Attack);
    let mut channel_rng = substream(seed, StreamId::Channel);
    let mut bob_basis_rng = substream(seed, StreamId::BobBases);
    let mut detector_rng = substream(seed, StreamId::Detector);
    let mut disclosure_rng = substream(seed, StreamId::Disclosure);

    // A continuous jamming laser also lifts the per-gate background click
    // probability: the click chance of the background photon flux that
    // reaches each detector, saturating at one.
    let mut background = channel.background_click_prob;
    if let Some(AttackConfig::JammingDos { laser_power, duty }) = attack {
        let received = laser_power * duty * channel.transmittance();
        let photons_per_slot = received / (source.photon_energy * source.pulse_rate);
        let extra = 1.0 - (-photons_per_slot * detector.efficiency / 2.0).exp();
        background = (background + extra).min(1.0);
    }
    let env = GateEnv {
        background_click_prob: background,
        misalignment_prob: channel.misalignment_prob,
        pulse_rate: source.pulse_rate,
    };

    let n = cfg.num_pulses;
    let mut alice = AliceRecord {
        bits: Vec::with_capacity(n as usize),
        bases: Vec::with_capacity(n as usize),
    };
    let mut bob_bases = Vec::with_capacity(n as usize);
    let mut clicks: Vec<DetectionEvent> = Vec::new();
    let mut photocurrent_samples = Vec::with_capacity(n as usize);
    let mut photon_histogram: Vec<u64> = Vec::new();
    let mut power_by_window = Vec::new();
    let mut state = DetectorState::new();

    let mut window_cw_sum = KahanSum::default();
    let mut window_start = 0u64;

    for slot in 0..n {
        let bit = bit_rng.random_bool(0.5);
        let basis = if alice_basis_rng.random_bool(cfg.basis_bias) {
            Basis::Rectilinear
        } else {
            Basis::Diagonal
        };
        alice.bits.push(bit);
        alice.bases.push(basis);

        let mut pulse = source.emit(slot, bit, basis, &mut photon_rng);
        let k = pulse.photon_number as usize;
        if k >= photon_histogram.len() {
            photon_histogram.resize(k + 1, 0);
        }
        photon_histogram[k] += 1;

        if let Some(runner) = runner.as_mut() {
            pulse = runner.transform(pulse, &mut attack_rng);
        }
        let pulse = channel.apply_loss(pulse, &mut channel_rng);

        let bob_basis = if bob_basis_rng.random_bool(cfg.basis_bias) {
            Basis::Rectilinear
        } else {
            Basis::Diagonal
        };
        bob_bases.push(bob_basis);

        let events = detect_gate(
            &pulse,
            bob_basis,
            detector,
            &mut state,
            &env,
            &mut detector_rng,
        );
        photocurrent_samples.push(events[0].photocurrent as i64);
        window_cw_sum.add(pulse.cw_power);
        for event in events {
            if event.click {
                clicks.push(event);
            }
        }

        // Close a monitoring window: record its mean continuous power and
        // apply any thermal consequences before the next window starts.
        if (slot + 1) % cfg.monitor_window_slots == 0 || slot + 1 == n {
            let len = slot + 1 - window_start;
            let watts = window_cw_sum.total() / len as f64;
            power_by_window.push(PowerWindow {
                window_id: power_by_window.len() as u32,
                slot_range: (window_start, slot + 1),
                watts,
            });
            if watts >= MELTING_POWER {
                state.degrade(DamageLevel::Melted);
            } else if watts >= THERMAL_BLINDING_POWER {
                state.degrade(DamageLevel::ThermallyBlinded);
            }
            window_cw_sum.reset();
            window_start = slot + 1;
        }
    }

    let sifted_key = sift(&alice, &bob_bases, &clicks)?;
    let (qber_windows, disclosed) = if sifted_key.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let estimate = estimate_qber(
            &sifted_key,
            cfg.qber_sample_fraction,
            cfg.qber_window_bits,
            &mut disclosure_rng,
        )?;
        (estimate.windows, estimate.disclosed)
    };

    Ok(SessionRecord {
        num_slots: n,
        pulse_rate: source.pulse_rate,
        sifted_key,
        disclosed,
        qber_windows,
        detection_events: clicks,
        photocurrent_samples,
        power_by_window,
        eve_log: runner.map(|r| r.into_log()),
        photon_histogram,
        final_damage: state.damage,
    })
}
