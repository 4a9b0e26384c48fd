//! Forensic report: the structured end product of one scenario run. The
//! human-readable rendering is derived from the structured form, never the
//! other way around, and carries no wall-clock time.

use serde::{Deserialize, Serialize};

use crate::ioc::{IoCFinding, MonitorDiagnostics};
use crate::optics::DamageLevel;
use crate::protocol::{PowerWindow, SessionRecord};
use crate::taxonomy::{rank_candidates, KnowledgeBase};

use super::Scenario;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// How many leading candidates count for the ground-truth verdict.
pub const VERDICT_TOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTechnique {
    pub id: String,
    pub name: String,
    pub score: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub num_slots: u64,
    pub click_count: u64,
    pub sifted_len: u64,
    pub double_click_count: u64,
    pub disclosed_len: u64,
    /// Sifted bits remaining after the disclosed sample is discarded.
    pub secret_key_len: u64,
    pub pooled_qber: Option<f64>,
    pub final_damage: DamageLevel,
    pub power_by_window: Vec<PowerWindow>,
    /// Fraction of the sifted key the attacker demonstrably holds
    /// (simulation ground truth; absent without an attack).
    pub eve_known_sifted_fraction: Option<f64>,
}

impl SessionSummary {
    pub fn from_record(record: &SessionRecord) -> Self {
        let sifted_len = record.sifted_key.len() as u64;
        let disclosed_len = record.disclosed.len() as u64;
        SessionSummary {
            num_slots: record.num_slots,
            click_count: record.detection_events.len() as u64,
            sifted_len,
            double_click_count: record.sifted_key.double_click_count,
            disclosed_len,
            secret_key_len: sifted_len - disclosed_len,
            pooled_qber: record.pooled_qber(),
            final_damage: record.final_damage,
            power_by_window: record.power_by_window.clone(),
            eve_known_sifted_fraction: record.eve_log.as_ref().map(|log| {
                log.known_fraction(&record.sifted_key.indices, &record.sifted_key.alice_bits)
            }),
        }
    }
}

/// End-to-end output of one scenario: what happened, what the monitors
/// found, and which techniques the findings point at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForensicReport {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub summary: SessionSummary,
    pub findings: Vec<IoCFinding>,
    pub diagnostics: MonitorDiagnostics,
    /// Ranked technique candidates from the knowledge base.
    pub candidates: Vec<RankedTechnique>,
    /// The configured attack's technique id. Present only in simulation
    /// reports, never derivable from live evidence.
    pub ground_truth: Option<String>,
    pub top_k: usize,
    /// Whether the ground truth appears among the top_k candidates.
    pub verdict_match: Option<bool>,
}

impl ForensicReport {
    pub fn build(
        scenario: Scenario,
        record: &SessionRecord,
        findings: Vec<IoCFinding>,
        diagnostics: MonitorDiagnostics,
        kb: &KnowledgeBase,
    ) -> Self {
        let candidates: Vec<RankedTechnique> = rank_candidates(kb, &findings)
            .into_iter()
            .map(|c| RankedTechnique {
                id: c.technique.id.clone(),
                name: c.technique.name.clone(),
                score: c.score,
            })
            .collect();
        let ground_truth = scenario
            .attack
            .as_ref()
            .map(|a| a.technique_id().to_string());
        let verdict_match = ground_truth.as_ref().map(|truth| {
            candidates
                .iter()
                .take(VERDICT_TOP_K)
                .any(|c| &c.id == truth)
        });
        ForensicReport {
            schema_version: REPORT_SCHEMA_VERSION,
            summary: SessionSummary::from_record(record),
            scenario,
            findings,
            diagnostics,
            candidates,
            ground_truth,
            top_k: VERDICT_TOP_K,
            verdict_match,
        }
    }

    /// Canonical structured form. Byte-identical for identical runs.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// Plain-text rendering of the structured report.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let s = &self.summary;
        out.push_str(&format!(
            "=== forensic report: {} ===\n",
            self.scenario.name
        ));
        out.push_str(&format!(
            "seed {}  slots {}  attack {}\n",
            self.scenario.seed,
            s.num_slots,
            self.ground_truth.as_deref().unwrap_or("none"),
        ));
        out.push_str(&format!(
            "clicks {}  sifted {}  double-clicks {}  disclosed {}  key {}\n",
            s.click_count, s.sifted_len, s.double_click_count, s.disclosed_len, s.secret_key_len
        ));
        match s.pooled_qber {
            Some(q) => out.push_str(&format!("pooled error rate {:.4}\n", q)),
            None => out.push_str("pooled error rate n/a (no disclosed bits)\n"),
        }
        out.push_str(&format!("receiver damage: {:?}\n", s.final_damage));
        if let Some(f) = s.eve_known_sifted_fraction {
            out.push_str(&format!(
                "attacker holds {:.1}% of the sifted key\n",
                f * 100.0
            ));
        }
        out.push_str(&format!("\nfindings ({}):\n", self.findings.len()));
        if self.findings.is_empty() {
            out.push_str("  none\n");
        }
        for f in &self.findings {
            out.push_str(&format!(
                "  [{:?}] {} slots {}..{}: {}\n",
                f.severity,
                f.class.token(),
                f.window.0,
                f.window.1,
                f.detail
            ));
        }
        out.push_str(&format!(
            "\ntechnique candidates (top {} of {}):\n",
            self.top_k.min(self.candidates.len()),
            self.candidates.len()
        ));
        if self.candidates.is_empty() {
            out.push_str("  none\n");
        }
        for (i, c) in self.candidates.iter().enumerate().take(self.top_k) {
            out.push_str(&format!(
                "  {}. {} (score {}) - {}\n",
                i + 1,
                c.id,
                c.score,
                c.name
            ));
        }
        if let (Some(truth), Some(matched)) = (&self.ground_truth, self.verdict_match) {
            out.push_str(&format!(
                "\nground truth {} is {} the top {}\n",
                truth,
                if matched { "within" } else { "NOT within" },
                self.top_k
            ));
        }
        out
    }

    /// Walk the finding-to-technique reasoning: which techniques each
    /// finding class implicates, and how every candidate's score breaks
    /// down. This is the investigation chain an analyst would follow.
    pub fn explain(&self, kb: &KnowledgeBase) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "reasoning chains for scenario `{}`\n\n",
            self.scenario.name
        ));
        if self.findings.is_empty() {
            out.push_str("no findings: nothing implicates any technique.\n");
            return out;
        }
        let mut classes: Vec<_> = self.findings.iter().map(|f| f.class).collect();
        classes.sort();
        classes.dedup();
        for class in &classes {
            let linked: Vec<&str> = kb
                .query(crate::taxonomy::QueryFilter {
                    objective: None,
                    ioc_class: Some(*class),
                })
                .iter()
                .map(|t| t.id.as_str())
                .collect();
            out.push_str(&format!(
                "indicator class `{}` implicates: {}\n",
                class.token(),
                if linked.is_empty() {
                    "(no technique)".to_string()
                } else {
                    linked.join(", ")
                }
            ));
        }
        out.push('\n');
        for c in &self.candidates {
            let technique = kb.technique(&c.id);
            let contributing: Vec<&str> = technique
                .map(|t| {
                    classes
                        .iter()
                        .filter(|cl| t.ioc_classes.contains(cl))
                        .map(|cl| cl.token())
                        .collect()
                })
                .unwrap_or_default();
            out.push_str(&format!(
                "candidate {} scores {} from: {}\n",
                c.id,
                c.score,
                contributing.join(", ")
            ));
            if let Some(t) = technique {
                if !t.tools.is_empty() {
                    out.push_str(&format!("  tools: {}\n", t.tools.join(", ")));
                }
                if !t.mitigations.is_empty() {
                    out.push_str(&format!("  mitigations: {}\n", t.mitigations.join(", ")));
                }
            }
        }
        out
    }
}
