//! Scenario orchestration: load a scenario file, resolve its calibration
//! baseline, run the session, sweep the monitors, rank technique
//! candidates, and write the forensic report.

mod report;
mod scenario;

pub use report::{
    ForensicReport, RankedTechnique, SessionSummary, REPORT_SCHEMA_VERSION, VERDICT_TOP_K,
};
pub use scenario::Scenario;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ioc::{
    afterpulse_estimate, run_all_monitors, AfterpulseBaseline, CalibrationBaseline, MonitorError,
};
use crate::protocol::{run_session, ProtocolError, SessionRecord};
use crate::taxonomy::{KnowledgeBase, TaxonomyError};

/// Environment variable overriding the default output directory.
pub const OUT_DIR_ENV: &str = "QLINK_OUT_DIR";

const BASELINE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("scenario validation failed: {0}")]
    Validation(String),
    #[error(
        "no calibration baseline {path} for physics hash {hash}; run `calibrate` first or set \
         calibration_run = true"
    )]
    MissingBaseline { hash: String, path: String },
    #[error("baseline {path} was recorded for physics hash {found}, expected {expected}")]
    BaselineMismatch {
        path: String,
        found: String,
        expected: String,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

impl HarnessError {
    /// Exit-code class: 3 parse, 4 validation, 5 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Parse { .. } => 3,
            HarnessError::Taxonomy(TaxonomyError::Parse(_)) => 3,
            HarnessError::Validation(_) => 4,
            HarnessError::Taxonomy(TaxonomyError::Validation(_)) => 4,
            HarnessError::Protocol(ProtocolError::InvalidConfig(_)) => 4,
            _ => 5,
        }
    }
}

/// Where and how to run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Reports and baselines land here.
    pub out_dir: PathBuf,
    /// Also write the full structured session log.
    pub write_session_log: bool,
    /// Knowledge base to rank against; the bundled canonical base when absent.
    pub kb: Option<KnowledgeBase>,
}

impl Default for RunOptions {
    fn default() -> Self {
        let out_dir = std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("qlink-out"));
        RunOptions {
            out_dir,
            write_session_log: false,
            kb: None,
        }
    }
}

impl RunOptions {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: dir.into(),
            write_session_log: false,
            kb: None,
        }
    }

    fn baseline_dir(&self) -> PathBuf {
        self.out_dir.join("baselines")
    }
}

/// On-disk form of a calibration baseline.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct BaselineFile {
    schema_version: u32,
    #[serde(flatten)]
    baseline: CalibrationBaseline,
}

fn baseline_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("baseline-{hash}.json"))
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Run the attack-free calibration session for a scenario and derive its
/// baseline statistics.
pub fn compute_baseline(scenario: &Scenario) -> Result<CalibrationBaseline, HarnessError> {
    scenario.validate()?;
    let seed = scenario.calibration_seed();
    let record = run_session(
        &scenario.protocol,
        &scenario.source,
        &scenario.channel,
        &scenario.detector,
        None,
        seed,
    )?;
    let click_rate = record.detection_events.len() as f64 / record.num_slots as f64;
    let afterpulse = afterpulse_estimate(
        &record.detection_events,
        record.num_slots,
        &scenario.detector,
    )
    .map(|e| AfterpulseBaseline {
        estimate: e.estimate,
        standard_error: e.standard_error,
    });
    Ok(CalibrationBaseline {
        params_hash: scenario.physics_hash(),
        click_rate,
        afterpulse,
        calibration_seed: seed,
        num_slots: record.num_slots,
    })
}

/// Calibrate a scenario and persist the baseline file. Returns the baseline
/// and the path it was written to.
pub fn calibrate_scenario(
    scenario: &Scenario,
    opts: &RunOptions,
) -> Result<(CalibrationBaseline, PathBuf), HarnessError> {
    let baseline = compute_baseline(scenario)?;
    let path = baseline_path(&opts.baseline_dir(), &baseline.params_hash);
    let file = BaselineFile {
        schema_version: BASELINE_SCHEMA_VERSION,
        baseline: baseline.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("baseline serializes");
    text.push('\n');
    write_file(&path, &text)?;
    Ok((baseline, path))
}

fn load_baseline(path: &Path, expected_hash: &str) -> Result<CalibrationBaseline, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: BaselineFile = serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if file.baseline.params_hash != expected_hash {
        return Err(HarnessError::BaselineMismatch {
            path: path.display().to_string(),
            found: file.baseline.params_hash,
            expected: expected_hash.to_string(),
        });
    }
    Ok(file.baseline)
}

/// Resolve a scenario's baseline: load it if present, compute and persist
/// it when the scenario authorizes calibration, error otherwise.
pub fn resolve_baseline(
    scenario: &Scenario,
    opts: &RunOptions,
) -> Result<CalibrationBaseline, HarnessError> {
    let hash = scenario.physics_hash();
    let path = baseline_path(&opts.baseline_dir(), &hash);
    if path.exists() {
        return load_baseline(&path, &hash);
    }
    if scenario.calibration_run {
        let (baseline, _) = calibrate_scenario(scenario, opts)?;
        return Ok(baseline);
    }
    Err(HarnessError::MissingBaseline {
        hash,
        path: path.display().to_string(),
    })
}

/// Outcome of [`run_scenario`]: the report plus the paths written.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: ForensicReport,
    pub report_json_path: PathBuf,
    pub report_text_path: PathBuf,
    pub session_log_path: Option<PathBuf>,
}

/// Run a scenario end to end: session, monitors, technique ranking, report
/// files. Identical inputs produce byte-identical structured reports.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<RunOutcome, HarnessError> {
    scenario.validate()?;
    let baseline = resolve_baseline(scenario, opts)?;
    let (report, record) = evaluate_scenario(scenario, Some(&baseline), opts)?;

    let json_path = opts.out_dir.join(format!("{}.report.json", scenario.name));
    let text_path = opts.out_dir.join(format!("{}.report.txt", scenario.name));
    write_file(&json_path, &report.to_json())?;
    write_file(&text_path, &report.render_text())?;
    let session_log_path = if opts.write_session_log {
        let path = opts.out_dir.join(format!("{}.session.json", scenario.name));
        let mut text = serde_json::to_string(&record).expect("session record serializes");
        text.push('\n');
        write_file(&path, &text)?;
        Some(path)
    } else {
        None
    };
    Ok(RunOutcome {
        report,
        report_json_path: json_path,
        report_text_path: text_path,
        session_log_path,
    })
}

/// Run the session and monitor sweep without touching the filesystem.
/// Used by the report pipeline and by tests that inspect the raw record.
pub fn evaluate_scenario(
    scenario: &Scenario,
    baseline: Option<&CalibrationBaseline>,
    opts: &RunOptions,
) -> Result<(ForensicReport, SessionRecord), HarnessError> {
    let record = run_session(
        &scenario.protocol,
        &scenario.source,
        &scenario.channel,
        &scenario.detector,
        scenario.attack.as_ref(),
        scenario.seed,
    )?;
    let sweep = run_all_monitors(
        &record,
        &scenario.detector,
        scenario.effective_declared_mu(),
        scenario.source.photon_energy,
        baseline,
        &scenario.monitors,
    )?;
    let canonical;
    let kb = match &opts.kb {
        Some(kb) => kb,
        None => {
            canonical = KnowledgeBase::canonical();
            &canonical
        }
    };
    let report = ForensicReport::build(
        scenario.clone(),
        &record,
        sweep.findings,
        sweep.diagnostics,
        kb,
    );
    Ok((report, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackConfig;
    use crate::ioc::Severity;
    use crate::optics::{ChannelParams, DetectorParams, Medium, SourceParams};
    use crate::protocol::Bb84Config;

    fn scenario() -> Scenario {
        Scenario {
            name: "harness-test".into(),
            seed: 5,
            source: SourceParams::new(0.1, 1e6, 2.55e-19).unwrap(),
            channel: ChannelParams {
                loss_db: 0.0,
                medium: Medium::Fiber,
                background_click_prob: 0.0,
                misalignment_prob: 0.0,
            },
            detector: DetectorParams {
                efficiency: 1.0,
                dark_count_prob: 1e-5,
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
            },
            protocol: Bb84Config {
                num_pulses: 50_000,
                basis_bias: 0.5,
                qber_sample_fraction: 1.0,
                qber_window_bits: 1000,
                monitor_window_slots: 10_000,
            },
            attack: None,
            monitors: Default::default(),
            declared_mu: None,
            calibration_run: true,
        }
    }

    #[test]
    fn missing_baseline_is_an_error_without_calibration_authority() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = scenario();
        s.calibration_run = false;
        let err = run_scenario(&s, &RunOptions::in_dir(dir.path())).unwrap_err();
        assert!(matches!(err, HarnessError::MissingBaseline { .. }));
        assert_eq!(err.exit_code(), 5);
    }

    #[test]
    fn clean_scenario_yields_empty_findings_and_candidates() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_scenario(&scenario(), &RunOptions::in_dir(dir.path())).unwrap();
        let alarms: Vec<_> = outcome
            .report
            .findings
            .iter()
            .filter(|f| f.severity >= Severity::Alarm)
            .collect();
        assert!(alarms.is_empty(), "unexpected alarms: {alarms:?}");
        assert!(outcome.report_json_path.exists());
        assert!(outcome.report_text_path.exists());
    }

    #[test]
    fn reports_are_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions::in_dir(dir.path());
        let mut s = scenario();
        s.attack = Some(AttackConfig::InterceptResend {
            eve_basis_bias: 0.5,
        });
        let a = run_scenario(&s, &opts).unwrap();
        let first = std::fs::read(&a.report_json_path).unwrap();
        let b = run_scenario(&s, &opts).unwrap();
        let second = std::fs::read(&b.report_json_path).unwrap();
        assert_eq!(first, second);
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn intercept_resend_report_ranks_truth_first() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = scenario();
        s.attack = Some(AttackConfig::InterceptResend {
            eve_basis_bias: 0.5,
        });
        let outcome = run_scenario(&s, &RunOptions::in_dir(dir.path())).unwrap();
        assert_eq!(
            outcome.report.ground_truth.as_deref(),
            Some("intercept-resend")
        );
        assert_eq!(outcome.report.verdict_match, Some(true));
        assert!(outcome
            .report
            .findings
            .iter()
            .any(|f| f.class == crate::taxonomy::IoCClass::Qber && f.severity == Severity::Alarm));
        // The intercept-resend signature is the error rate, never power.
        assert!(outcome
            .report
            .findings
            .iter()
            .all(|f| f.class != crate::taxonomy::IoCClass::ReceivedPower));
    }

    #[test]
    fn baseline_reuse_is_hash_checked() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions::in_dir(dir.path());
        let s = scenario();
        let (baseline, path) = calibrate_scenario(&s, &opts).unwrap();
        assert!(path.exists());
        assert_eq!(baseline.params_hash, s.physics_hash());
        // Same physics resolves to the stored baseline.
        let resolved = resolve_baseline(&s, &opts).unwrap();
        assert_eq!(resolved, baseline);
    }
}
