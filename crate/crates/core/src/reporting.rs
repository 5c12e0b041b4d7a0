//! JSON, HTML and plain-text renderings of an app verdict.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus_analytics::Percentage;
use crate::ingestion::SourceTree;
use crate::pattern_engine::PatternKey;
use crate::rule_catalog::{Catalog, Polarity, SafeguardRef};
use crate::scanner::{MatchRecord, ScanResult};
use crate::verdicts::{AppVerdict, RuleStatus, Status, SubRuleStatus};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DETERMINISTIC_TIMESTAMP: &str = "1970-01-01T00:00:00Z";
const CONTEXT_LINES: usize = 2;

/// Line lookup for rendering context around matches.
pub trait SourceAccess: Sync {
    /// 1-based line of `file`, if available.
    fn line(&self, file: &str, line_number: usize) -> Option<&str>;
}

impl SourceAccess for SourceTree {
    fn line(&self, file: &str, line_number: usize) -> Option<&str> {
        self.file(file)?.line(line_number)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportMetadata {
    pub tool_version: String,
    pub timestamp: String,
    pub scanned_root: String,
    pub deterministic: bool,
    pub catalog_checksum: String,
    pub files_scanned: usize,
    pub lines_scanned: usize,
}

impl ReportMetadata {
    pub fn for_scan(
        scan: &ScanResult,
        scanned_root: impl Into<String>,
        deterministic: bool,
    ) -> Self {
        let timestamp = if deterministic {
            DETERMINISTIC_TIMESTAMP.to_string()
        } else {
            chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
        };
        ReportMetadata {
            tool_version: TOOL_VERSION.to_string(),
            timestamp,
            scanned_root: scanned_root.into(),
            deterministic,
            catalog_checksum: scan.catalog_checksum.clone(),
            files_scanned: scan.files_scanned,
            lines_scanned: scan.lines_scanned,
        }
    }
}

pub struct ReportBundle<'a> {
    pub verdict: AppVerdict,
    pub records: Vec<MatchRecord>,
    pub source_access: Option<&'a dyn SourceAccess>,
    pub metadata: ReportMetadata,
}

impl ReportBundle<'_> {
    fn records_for<'r>(
        &'r self,
        rule_id: &'r str,
        sub_rule_id: &'r str,
    ) -> impl Iterator<Item = &'r MatchRecord> {
        self.records
            .iter()
            .filter(move |r| r.rule_id == rule_id && r.sub_rule_id == sub_rule_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonReport {
    pub tool_version: String,
    pub catalog_checksum: String,
    pub app_id: String,
    pub scanned_root: String,
    pub timestamp: String,
    pub files_scanned: usize,
    pub lines_scanned: usize,
    pub rules: Vec<JsonRule>,
    pub advisory_findings: Vec<JsonAdvisoryFinding>,
    pub summary: JsonSummary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonRule {
    pub rule_id: String,
    pub cfr_reference: String,
    pub status: Status,
    pub recommendation: Option<String>,
    pub subrules: Vec<JsonSubRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonSubRule {
    pub sub_rule_id: String,
    pub status: Status,
    pub matches: Vec<JsonMatch>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonMatch {
    pub file: String,
    pub line: usize,
    pub column: usize,
    pub pattern: String,
    pub snippet: String,
    pub occurrences: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonAdvisoryFinding {
    pub rule_id: String,
    pub sub_rule_id: String,
    pub file: String,
    pub line: usize,
    pub column: usize,
    pub pattern: String,
    pub snippet: String,
    pub occurrences: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonSummary {
    pub satisfied_count: usize,
    pub checkable_count: usize,
}

impl From<&MatchRecord> for JsonMatch {
    fn from(r: &MatchRecord) -> Self {
        JsonMatch {
            file: r.file.clone(),
            line: r.line_number,
            column: r.column,
            pattern: r.pattern_text.clone(),
            snippet: r.snippet.clone(),
            occurrences: r.occurrences,
        }
    }
}

pub fn to_json_report(b: &ReportBundle<'_>) -> JsonReport {
    let rules = b
        .verdict
        .rules
        .iter()
        .map(|rule| JsonRule {
            rule_id: rule.rule_id.clone(),
            cfr_reference: rule.safeguard.cfr_reference.clone(),
            status: rule.status,
            recommendation: rule.recommendation.clone(),
            subrules: rule
                .sub_statuses
                .iter()
                .map(|sub| JsonSubRule {
                    sub_rule_id: sub.sub_rule_id.clone(),
                    status: sub.status,
                    matches: b
                        .records_for(&rule.rule_id, &sub.sub_rule_id)
                        .map(JsonMatch::from)
                        .collect(),
                })
                .collect(),
        })
        .collect();
    let advisory_findings = b
        .verdict
        .advisory_findings
        .iter()
        .map(|r| JsonAdvisoryFinding {
            rule_id: r.rule_id.clone(),
            sub_rule_id: r.sub_rule_id.clone(),
            file: r.file.clone(),
            line: r.line_number,
            column: r.column,
            pattern: r.pattern_text.clone(),
            snippet: r.snippet.clone(),
            occurrences: r.occurrences,
        })
        .collect();
    JsonReport {
        tool_version: b.metadata.tool_version.clone(),
        catalog_checksum: b.metadata.catalog_checksum.clone(),
        app_id: b.verdict.app_id.clone(),
        scanned_root: b.metadata.scanned_root.clone(),
        timestamp: if b.metadata.deterministic {
            DETERMINISTIC_TIMESTAMP.to_string()
        } else {
            b.metadata.timestamp.clone()
        },
        files_scanned: b.metadata.files_scanned,
        lines_scanned: b.metadata.lines_scanned,
        rules,
        advisory_findings,
        summary: JsonSummary {
            satisfied_count: b.verdict.satisfied_count,
            checkable_count: b.verdict.checkable_count,
        },
    }
}

/// Pretty-printed JSON, keys in schema order, trailing newline.
pub fn render_json(b: &ReportBundle<'_>) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&to_json_report(b)).expect("report serializes");
    out.push(b'\n');
    out
}

pub fn parse_json_report(bytes: &[u8]) -> Result<JsonReport, serde_json::Error> {
    serde_json::from_slice(bytes)
}

/// Rebuilds verdict, records and metadata from a JSON report. Safeguard names,
/// descriptions and sub-rule polarity come from `catalog` when it knows the
/// rule; otherwise the rule id stands in for the name.
pub fn bundle_from_json<'a>(report: &JsonReport, catalog: Option<&Catalog>) -> ReportBundle<'a> {
    let mut records = Vec::new();
    let mut rules = Vec::with_capacity(report.rules.len());
    let advisory_pairs: Vec<(&str, &str)> = report
        .advisory_findings
        .iter()
        .map(|f| (f.rule_id.as_str(), f.sub_rule_id.as_str()))
        .collect();

    for (ri, jr) in report.rules.iter().enumerate() {
        let known = catalog.and_then(|c| c.rule(&jr.rule_id));
        let safeguard = match known {
            Some(rule) => SafeguardRef {
                cfr_reference: jr.cfr_reference.clone(),
                ..rule.safeguard.clone()
            },
            None => SafeguardRef {
                cfr_reference: jr.cfr_reference.clone(),
                safeguard_name: jr.rule_id.clone(),
                description: String::new(),
            },
        };
        let mut sub_statuses = Vec::with_capacity(jr.subrules.len());
        for (si, js) in jr.subrules.iter().enumerate() {
            let known_sub =
                known.and_then(|r| r.sub_rules.iter().find(|s| s.sub_rule_id == js.sub_rule_id));
            let polarity = match known_sub {
                Some(s) => s.polarity,
                None if advisory_pairs
                    .contains(&(jr.rule_id.as_str(), js.sub_rule_id.as_str())) =>
                {
                    Polarity::Advisory
                }
                None => Polarity::Evidence,
            };
            let mut matched_patterns = std::collections::BTreeSet::new();
            for m in &js.matches {
                let pi = known_sub
                    .and_then(|s| s.patterns.iter().position(|p| *p == m.pattern))
                    .unwrap_or(0);
                matched_patterns.insert(pi);
                records.push(MatchRecord {
                    file: m.file.clone(),
                    line_number: m.line,
                    column: m.column,
                    rule_id: jr.rule_id.clone(),
                    sub_rule_id: js.sub_rule_id.clone(),
                    pattern_text: m.pattern.clone(),
                    snippet: m.snippet.clone(),
                    occurrences: m.occurrences,
                    key: PatternKey::new(ri, si, pi),
                });
            }
            sub_statuses.push(SubRuleStatus {
                sub_rule_id: js.sub_rule_id.clone(),
                polarity,
                status: js.status,
                matched_patterns,
                match_count: js.matches.len(),
            });
        }
        rules.push(RuleStatus {
            rule_id: jr.rule_id.clone(),
            safeguard,
            status: jr.status,
            sub_statuses,
            recommendation: jr.recommendation.clone(),
        });
    }

    let advisory_findings = report
        .advisory_findings
        .iter()
        .map(|f| {
            records
                .iter()
                .find(|r| {
                    r.rule_id == f.rule_id
                        && r.sub_rule_id == f.sub_rule_id
                        && r.file == f.file
                        && r.line_number == f.line
                        && r.pattern_text == f.pattern
                })
                .cloned()
                .unwrap_or_else(|| MatchRecord {
                    file: f.file.clone(),
                    line_number: f.line,
                    column: f.column,
                    rule_id: f.rule_id.clone(),
                    sub_rule_id: f.sub_rule_id.clone(),
                    pattern_text: f.pattern.clone(),
                    snippet: f.snippet.clone(),
                    occurrences: f.occurrences,
                    key: PatternKey::new(usize::MAX, 0, 0),
                })
        })
        .collect();

    ReportBundle {
        verdict: AppVerdict {
            app_id: report.app_id.clone(),
            satisfied_count: report.summary.satisfied_count,
            checkable_count: report.summary.checkable_count,
            rules,
            advisory_findings,
        },
        records,
        source_access: None,
        metadata: ReportMetadata {
            tool_version: report.tool_version.clone(),
            timestamp: report.timestamp.clone(),
            scanned_root: report.scanned_root.clone(),
            deterministic: report.timestamp == DETERMINISTIC_TIMESTAMP,
            catalog_checksum: report.catalog_checksum.clone(),
            files_scanned: report.files_scanned,
            lines_scanned: report.lines_scanned,
        },
    }
}

/// One `[PASS|FAIL|N/A] <cfr_reference> <rule_id>` line per rule, then the
/// summary line.
pub fn render_text(b: &ReportBundle<'_>) -> String {
    let mut out = String::new();
    for rule in &b.verdict.rules {
        let tag = match rule.status {
            Status::Satisfied => "PASS",
            Status::Unsatisfied => "FAIL",
            Status::NotCheckable => "N/A",
        };
        let _ = writeln!(
            out,
            "[{tag}] {} {}",
            rule.safeguard.cfr_reference, rule.rule_id
        );
    }
    let _ = writeln!(
        out,
        "satisfied {}/{} checkable",
        b.verdict.satisfied_count, b.verdict.checkable_count
    );
    out
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

const STYLE: &str = "body{font-family:system-ui,sans-serif;margin:2rem;color:#222}\
h1{margin-bottom:.2rem}.meta{color:#666;font-size:.9rem}\
section.rule{border:1px solid #ccc;border-radius:6px;margin:1rem 0;padding:.6rem 1rem}\
section.satisfied{border-left:6px solid #2e7d32}section.unsatisfied{border-left:6px solid #c62828}\
section.not_checkable{border-left:6px solid #9e9e9e}\
.glyph{font-size:1.3rem;margin-right:.4rem}.satisfied .glyph{color:#2e7d32}.unsatisfied .glyph{color:#c62828}\
.recommendation{background:#fff8e1;padding:.4rem .6rem;border-radius:4px}\
.advisory{color:#e65100;font-size:.85rem}\
pre.context{background:#f6f8fa;padding:.5rem;overflow-x:auto}\
mark.hit{background:#ffeb3b;display:inline-block;width:100%}\
.ln{color:#999;display:inline-block;width:4em;user-select:none}";

/// Self-contained HTML report: one section per rule, each match with
/// surrounding lines and the matched line highlighted.
pub fn render_html(b: &ReportBundle<'_>) -> Vec<u8> {
    let v = &b.verdict;
    let mut h = String::new();
    let title = format!("HIPAA technical safeguards report: {}", escape(&v.app_id));
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{title}</title>\n<style>{STYLE}</style>\n</head>\n<body>\n<h1>{title}</h1>\n"
    );
    let timestamp = if b.metadata.deterministic {
        DETERMINISTIC_TIMESTAMP
    } else {
        b.metadata.timestamp.as_str()
    };
    let _ = writeln!(
        h,
        "<p class=\"meta\">root <code>{}</code> &middot; {} files &middot; {} lines &middot; catalog <code>{}</code> &middot; {} &middot; v{}</p>",
        escape(&b.metadata.scanned_root),
        b.metadata.files_scanned,
        b.metadata.lines_scanned,
        escape(&b.metadata.catalog_checksum),
        escape(timestamp),
        escape(&b.metadata.tool_version),
    );
    let pct = Percentage::new(v.satisfied_count as u64, v.checkable_count as u64);
    let _ = writeln!(
        h,
        "<p class=\"summary\">satisfied {}/{} checkable safeguards ({}%)</p>",
        v.satisfied_count,
        v.checkable_count,
        pct.to_one_decimal()
    );

    let mut match_index = 0usize;
    for rule in &v.rules {
        let (glyph, label) = match rule.status {
            Status::Satisfied => ("&#10004;", "satisfied"),
            Status::Unsatisfied => ("&#10008;", "not satisfied"),
            Status::NotCheckable => ("&#8212;", "not checkable"),
        };
        let name = if rule.safeguard.safeguard_name.is_empty() {
            &rule.rule_id
        } else {
            &rule.safeguard.safeguard_name
        };
        let _ = writeln!(
            h,
            "<section class=\"rule {}\" id=\"rule-{}\">\n<h2><span class=\"glyph\" title=\"{label}\">{glyph}</span>{} <small>{} &middot; <code>{}</code></small></h2>",
            rule.status.as_str(),
            escape(&rule.rule_id),
            escape(name),
            escape(&rule.safeguard.cfr_reference),
            escape(&rule.rule_id),
        );
        if !rule.safeguard.description.is_empty() {
            let _ = writeln!(h, "<p>{}</p>", escape(&rule.safeguard.description));
        }
        if rule.status == Status::NotCheckable {
            let _ = writeln!(
                h,
                "<p class=\"meta\">No detection patterns exist for this safeguard.</p>"
            );
        }
        if let Some(text) = rule.recommendation.as_deref().filter(|t| !t.is_empty()) {
            let _ = writeln!(
                h,
                "<p class=\"recommendation\"><strong>Recommendation:</strong> {}</p>",
                escape(text)
            );
        }
        if !rule.sub_statuses.is_empty() {
            h.push_str("<ul class=\"subrules\">\n");
            for sub in &rule.sub_statuses {
                let mark = if sub.status == Status::Satisfied {
                    "&#10004;"
                } else {
                    "&#10008;"
                };
                let advisory = if sub.polarity == Polarity::Advisory {
                    " <span class=\"advisory\">(advisory: weak mechanism, does not count toward compliance)</span>"
                } else {
                    ""
                };
                let _ = writeln!(
                    h,
                    "<li>{mark} {} &middot; {} match(es){advisory}",
                    escape(&sub.sub_rule_id),
                    sub.match_count
                );
                for rec in b.records_for(&rule.rule_id, &sub.sub_rule_id) {
                    match_index += 1;
                    render_match(&mut h, b, rec, match_index);
                }
                h.push_str("</li>\n");
            }
            h.push_str("</ul>\n");
        }
        h.push_str("</section>\n");
    }
    h.push_str("</body>\n</html>\n");
    h.into_bytes()
}

fn render_match(h: &mut String, b: &ReportBundle<'_>, rec: &MatchRecord, k: usize) {
    let _ = writeln!(
        h,
        "<div class=\"match\" id=\"match-{k}\"><a href=\"#match-{k}\">#{k}</a> <code>{}:{}:{}</code> pattern <code>{}</code>{}",
        escape(&rec.file),
        rec.line_number,
        rec.column,
        escape(&rec.pattern_text),
        if rec.occurrences > 1 {
            format!(" &times;{}", rec.occurrences)
        } else {
            String::new()
        }
    );
    h.push_str("<pre class=\"context\">");
    let source = b
        .source_access
        .filter(|s| s.line(&rec.file, rec.line_number).is_some());
    match source {
        Some(src) => {
            let first = rec.line_number.saturating_sub(CONTEXT_LINES).max(1);
            for n in first..=rec.line_number + CONTEXT_LINES {
                let Some(text) = src.line(&rec.file, n) else {
                    break;
                };
                if n == rec.line_number {
                    let _ = writeln!(
                        h,
                        "<mark class=\"hit\"><span class=\"ln\">{n}</span>{}</mark>",
                        escape(text)
                    );
                } else {
                    let _ = writeln!(h, "<span class=\"ln\">{n}</span>{}", escape(text));
                }
            }
        }
        None => {
            let _ = writeln!(
                h,
                "<mark class=\"hit\"><span class=\"ln\">{}</span>{}</mark>",
                rec.line_number,
                escape(&rec.snippet)
            );
        }
    }
    h.push_str("</pre>");
    if source.is_none() {
        h.push_str("<p class=\"meta\">context unavailable</p>");
    }
    h.push_str("</div>\n");
}
