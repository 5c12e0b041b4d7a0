//! Folds match records into sub-rule, rule and app-level statuses.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rule_catalog::{Catalog, MatchMode, Polarity, SafeguardRef};
use crate::scanner::{sort_records, MatchRecord, ScanResult};

pub const EXIT_COMPLIANT: i32 = 0;
pub const EXIT_NON_COMPLIANT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INGESTION: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Satisfied,
    Unsatisfied,
    NotCheckable,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Satisfied => "satisfied",
            Status::Unsatisfied => "unsatisfied",
            Status::NotCheckable => "not_checkable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubRuleStatus {
    pub sub_rule_id: String,
    pub polarity: Polarity,
    /// Only `Satisfied` or `Unsatisfied`.
    pub status: Status,
    /// Indices of patterns that matched somewhere in the app.
    pub matched_patterns: BTreeSet<usize>,
    pub match_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleStatus {
    pub rule_id: String,
    pub safeguard: SafeguardRef,
    pub status: Status,
    pub sub_statuses: Vec<SubRuleStatus>,
    pub recommendation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppVerdict {
    pub app_id: String,
    pub rules: Vec<RuleStatus>,
    pub satisfied_count: usize,
    pub checkable_count: usize,
    /// Matches under advisory sub-rules, sorted like scan records.
    pub advisory_findings: Vec<MatchRecord>,
}

impl AppVerdict {
    pub fn rule(&self, rule_id: &str) -> Option<&RuleStatus> {
        self.rules.iter().find(|r| r.rule_id == rule_id)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VerdictError {
    #[error("scan was produced with catalog {scan}, evaluating against {catalog}")]
    ChecksumMismatch { scan: String, catalog: String },
}

pub fn evaluate(r: &ScanResult, c: &Catalog, app_id: &str) -> Result<AppVerdict, VerdictError> {
    if r.catalog_checksum != c.checksum() {
        return Err(VerdictError::ChecksumMismatch {
            scan: r.catalog_checksum.clone(),
            catalog: c.checksum().to_string(),
        });
    }

    // matched[rule][sub] = (pattern indices, record count)
    let mut matched: Vec<Vec<(BTreeSet<usize>, usize)>> = c
        .rules()
        .iter()
        .map(|rule| vec![(BTreeSet::new(), 0); rule.sub_rules.len()])
        .collect();
    let mut advisory_findings = Vec::new();
    for rec in &r.records {
        let Some(rule) = c.rules().get(rec.key.rule) else {
            continue;
        };
        let Some(sub) = rule.sub_rules.get(rec.key.sub_rule) else {
            continue;
        };
        let slot = &mut matched[rec.key.rule][rec.key.sub_rule];
        slot.0.insert(rec.key.pattern);
        slot.1 += 1;
        if sub.polarity == Polarity::Advisory {
            advisory_findings.push(rec.clone());
        }
    }
    sort_records(&mut advisory_findings);

    let mut rules = Vec::with_capacity(c.rules().len());
    for (rule, subs) in c.rules().iter().zip(matched) {
        let sub_statuses: Vec<SubRuleStatus> = rule
            .sub_rules
            .iter()
            .zip(subs)
            .map(|(sub, (matched_patterns, match_count))| {
                let satisfied = match sub.mode {
                    MatchMode::Any => !matched_patterns.is_empty(),
                    MatchMode::All => {
                        (0..sub.patterns.len()).all(|i| matched_patterns.contains(&i))
                    }
                };
                SubRuleStatus {
                    sub_rule_id: sub.sub_rule_id.clone(),
                    polarity: sub.polarity,
                    status: if satisfied {
                        Status::Satisfied
                    } else {
                        Status::Unsatisfied
                    },
                    matched_patterns,
                    match_count,
                }
            })
            .collect();

        let status = if !rule.checkable() {
            Status::NotCheckable
        } else if sub_statuses
            .iter()
            .any(|s| s.polarity == Polarity::Evidence && s.status == Status::Satisfied)
        {
            Status::Satisfied
        } else {
            Status::Unsatisfied
        };
        let recommendation = match status {
            Status::Unsatisfied => c.recommendation(&rule.rule_id).map(str::to_string),
            _ => None,
        };
        rules.push(RuleStatus {
            rule_id: rule.rule_id.clone(),
            safeguard: rule.safeguard.clone(),
            status,
            sub_statuses,
            recommendation,
        });
    }

    Ok(AppVerdict {
        app_id: app_id.to_string(),
        satisfied_count: rules
            .iter()
            .filter(|r| r.status == Status::Satisfied)
            .count(),
        checkable_count: rules
            .iter()
            .filter(|r| r.status != Status::NotCheckable)
            .count(),
        rules,
        advisory_findings,
    })
}

/// 0 when every checkable rule is satisfied, 1 otherwise.
pub fn exit_code(v: &AppVerdict) -> i32 {
    if v.rules.iter().any(|r| r.status == Status::Unsatisfied) {
        EXIT_NON_COMPLIANT
    } else {
        EXIT_COMPLIANT
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::SourceFile;
    use crate::ingestion::SourceTree;
    use crate::rule_catalog::{builtin_catalog, Profile};
    use crate::scanner::scan_tree;

    fn scan_lines(c: &Catalog, lines: &[&str]) -> ScanResult {
        let t = SourceTree {
            root: ".".into(),
            files: vec![SourceFile {
                relative_path: "A.java".into(),
                lines: lines.iter().map(|s| s.to_string()).collect(),
                decode_lossy: false,
            }],
            warnings: vec![],
        };
        scan_tree(&t, c).unwrap()
    }

    #[test]
    fn unique_id_only() {
        let c = builtin_catalog();
        let v = evaluate(&scan_lines(&c, &["id INTEGER PRIMARY KEY"]), &c, "app").unwrap();
        assert_eq!(v.rule("Unique_Id").unwrap().status, Status::Satisfied);
        assert_eq!(v.rule("Unique_Id").unwrap().recommendation, None);
        assert_eq!(
            v.rule("Emergency_EPHI_Access").unwrap().status,
            Status::NotCheckable
        );
        let unsatisfied = v
            .rules
            .iter()
            .filter(|r| r.status == Status::Unsatisfied)
            .count();
        assert_eq!(unsatisfied, 10);
        assert_eq!((v.satisfied_count, v.checkable_count), (1, 11));
        assert_eq!(exit_code(&v), EXIT_NON_COMPLIANT);
    }

    #[test]
    fn empty_scan() {
        let c = builtin_catalog();
        let v = evaluate(&scan_lines(&c, &[]), &c, "app").unwrap();
        assert_eq!((v.satisfied_count, v.checkable_count), (0, 11));
        assert_eq!(
            v.rules
                .iter()
                .filter(|r| r.status == Status::Unsatisfied)
                .count(),
            11
        );
        assert_eq!(
            v.rules
                .iter()
                .filter(|r| r.status == Status::NotCheckable)
                .count(),
            1
        );
        assert_eq!(exit_code(&v), EXIT_NON_COMPLIANT);
        let audit = v.rule("EPHI_Audit_Control").unwrap();
        assert!(audit
            .recommendation
            .as_deref()
            .is_some_and(|t| !t.is_empty()));
    }

    #[test]
    fn strict_profile_des_is_advisory_only() {
        let c = Profile::Strict.apply(&builtin_catalog());
        let v = evaluate(
            &scan_lines(&c, &["Cipher c = Cipher.getInstance(\"DES/CBC\");"]),
            &c,
            "app",
        )
        .unwrap();
        let enc = v.rule("EPHI_encryption_decryption").unwrap();
        assert_eq!(enc.status, Status::Unsatisfied);
        let des = enc
            .sub_statuses
            .iter()
            .find(|s| s.sub_rule_id == "DES")
            .unwrap();
        assert_eq!(des.status, Status::Satisfied);
        assert_eq!(v.advisory_findings.len(), 1);

        // the paper profile counts the same line as evidence
        let c = builtin_catalog();
        let v = evaluate(
            &scan_lines(&c, &["Cipher c = Cipher.getInstance(\"DES/CBC\");"]),
            &c,
            "app",
        )
        .unwrap();
        assert_eq!(
            v.rule("EPHI_encryption_decryption").unwrap().status,
            Status::Satisfied
        );
        assert!(v.advisory_findings.is_empty());
    }

    #[test]
    fn all_mode_needs_every_pattern() {
        let c = crate::rule_catalog::load_catalog(
            "[rule] R ref=164.312(b)\n[subrule] \"S\" mode=all\npattern: io.realm.Realm\npattern: .encryptionKey(\n",
        )
        .unwrap();
        let v = evaluate(&scan_lines(&c, &["import io.realm.Realm;"]), &c, "a").unwrap();
        assert_eq!(v.rules[0].status, Status::Unsatisfied);
        let v = evaluate(
            &scan_lines(&c, &["import io.realm.Realm;", "b.encryptionKey(k)"]),
            &c,
            "a",
        )
        .unwrap();
        assert_eq!(v.rules[0].status, Status::Satisfied);
        assert_eq!(exit_code(&v), EXIT_COMPLIANT);
    }

    #[test]
    fn checksum_mismatch() {
        let c = builtin_catalog();
        let mut r = scan_lines(&c, &[]);
        r.catalog_checksum = "deadbeef".into();
        assert!(matches!(
            evaluate(&r, &c, "a"),
            Err(VerdictError::ChecksumMismatch { .. })
        ));
    }
}
