//! Safeguard / rule / sub-rule / pattern catalog.
//!
//! The catalog ships embedded (`rules/hipaa_technical_safeguards.rules`) and
//! can also be loaded from any file in the same line-oriented format:
//!
//! ```text
//! [rule] <rule_id> ref=<cfr_reference>
//! name: <safeguard name>
//! description: <safeguard text>
//! recommend: <remediation text>
//! [subrule] "<sub_rule_id>" mode=<any|all> polarity=<evidence|advisory>
//! pattern: <raw pattern text>
//! ```
//!
//! `name:` and `description:` are optional; a rule without sub-rules is
//! carried as metadata only and is not checkable.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pattern_engine::{compile_pattern, PatternError, PatternKey};

/// Source text of the embedded catalog.
pub const EMBEDDED_RULES: &str = include_str!("../rules/hipaa_technical_safeguards.rules");

/// Sub-rules whose matches only flag a weak mechanism under [`Profile::Strict`].
const STRICT_ADVISORY_SUB_RULES: &[&str] =
    &["DES", "RC", "Message Digest", "SHA", "ECB", "BLOWFISH"];
const STRICT_RULE: &str = "EPHI_encryption_decryption";
const STRICT_EXTRA_PATTERN: (&str, &str) = ("EN-DE", "import java.util.Base64");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafeguardRef {
    pub cfr_reference: String,
    pub safeguard_name: String,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Any single pattern satisfies the sub-rule.
    Any,
    /// Every pattern must match somewhere in the app.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// A match counts toward compliance.
    Evidence,
    /// A match is reported but never satisfies the rule.
    Advisory,
}

impl MatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::Any => "any",
            MatchMode::All => "all",
        }
    }
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Evidence => "evidence",
            Polarity::Advisory => "advisory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubRule {
    pub sub_rule_id: String,
    pub mode: MatchMode,
    pub polarity: Polarity,
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafeguardRule {
    pub rule_id: String,
    pub safeguard: SafeguardRef,
    pub sub_rules: Vec<SubRule>,
}

impl SafeguardRule {
    /// A rule is checkable iff it carries at least one sub-rule.
    pub fn checkable(&self) -> bool {
        !self.sub_rules.is_empty()
    }
}

/// Rule set selection layered on top of a loaded catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    /// Catalog as written.
    #[default]
    Paper,
    /// Weak-mechanism sub-rules become advisory and `import java.util.Base64`
    /// is added next to the verbatim `import java.util Base64`.
    Strict,
}

impl Profile {
    pub fn apply(self, catalog: &Catalog) -> Catalog {
        match self {
            Profile::Paper => catalog.clone(),
            Profile::Strict => {
                let mut rules = catalog.rules.clone();
                for rule in rules.iter_mut().filter(|r| r.rule_id == STRICT_RULE) {
                    for sub in &mut rule.sub_rules {
                        if STRICT_ADVISORY_SUB_RULES.contains(&sub.sub_rule_id.as_str()) {
                            sub.polarity = Polarity::Advisory;
                        }
                        let (sub_id, extra) = STRICT_EXTRA_PATTERN;
                        if sub.sub_rule_id == sub_id && !sub.patterns.iter().any(|p| p == extra) {
                            sub.patterns.push(extra.to_string());
                        }
                    }
                }
                Catalog::assemble(rules, catalog.recommendations.clone())
            }
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Profile::Paper),
            "strict" => Ok(Profile::Strict),
            other => Err(format!("unknown profile `{other}` (expected paper|strict)")),
        }
    }
}

/// Immutable rule catalog. Construct via [`builtin_catalog`], [`load_catalog`]
/// or [`Catalog::new`]; the checksum always reflects the content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    rules: Vec<SafeguardRule>,
    recommendations: BTreeMap<String, String>,
    checksum: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: sub-rule `{sub_rule_id}` of rule `{rule_id}` has no patterns")]
    EmptySubRule {
        line: usize,
        rule_id: String,
        sub_rule_id: String,
    },
    #[error("recommendation refers to unknown rule `{0}`")]
    UnknownRecommendation(String),
    #[error("{0} cannot be written to a rules file")]
    Unrepresentable(String),
}

impl Catalog {
    /// Builds a catalog from parts, checking id uniqueness, non-empty sub-rules
    /// and recommendation keys. Line numbers in errors are 0 here.
    pub fn new(
        rules: Vec<SafeguardRule>,
        recommendations: BTreeMap<String, String>,
    ) -> Result<Catalog, CatalogError> {
        let unrepresentable =
            |what: &str, value: &str| CatalogError::Unrepresentable(format!("{what} `{value}`"));
        let has_newline = |s: &str| s.contains(['\n', '\r']);
        let mut rule_ids = HashSet::new();
        for rule in &rules {
            if rule.rule_id.is_empty() || rule.rule_id.contains(char::is_whitespace) {
                return Err(unrepresentable("rule id", &rule.rule_id));
            }
            let sg = &rule.safeguard;
            for (what, value) in [
                ("reference", sg.cfr_reference.as_str()),
                ("name", sg.safeguard_name.as_str()),
                ("description", sg.description.as_str()),
            ] {
                if has_newline(value)
                    || (what == "reference" && value.contains(char::is_whitespace))
                {
                    return Err(unrepresentable(what, value));
                }
            }
            for sub in &rule.sub_rules {
                if sub.sub_rule_id.is_empty()
                    || sub.sub_rule_id.contains('"')
                    || has_newline(&sub.sub_rule_id)
                {
                    return Err(unrepresentable("sub-rule id", &sub.sub_rule_id));
                }
                if let Some(p) = sub.patterns.iter().find(|p| has_newline(p)) {
                    return Err(unrepresentable("pattern", p));
                }
            }
            if !rule_ids.insert(rule.rule_id.as_str()) {
                return Err(CatalogError::DuplicateId {
                    line: 0,
                    id: rule.rule_id.clone(),
                });
            }
            let mut sub_ids = HashSet::new();
            for sub in &rule.sub_rules {
                if !sub_ids.insert(sub.sub_rule_id.as_str()) {
                    return Err(CatalogError::DuplicateId {
                        line: 0,
                        id: sub.sub_rule_id.clone(),
                    });
                }
                if sub.patterns.is_empty() {
                    return Err(CatalogError::EmptySubRule {
                        line: 0,
                        rule_id: rule.rule_id.clone(),
                        sub_rule_id: sub.sub_rule_id.clone(),
                    });
                }
            }
        }
        if let Some(key) = recommendations
            .keys()
            .find(|k| !rule_ids.contains(k.as_str()))
        {
            return Err(CatalogError::UnknownRecommendation(key.clone()));
        }
        if let Some(text) = recommendations.values().find(|t| has_newline(t)) {
            return Err(unrepresentable("recommendation", text));
        }
        Ok(Catalog::assemble(rules, recommendations))
    }

    fn assemble(rules: Vec<SafeguardRule>, recommendations: BTreeMap<String, String>) -> Catalog {
        let mut catalog = Catalog {
            rules,
            recommendations,
            checksum: String::new(),
        };
        let digest = Sha256::digest(catalog.to_rules_text().as_bytes());
        catalog.checksum = digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
        catalog
    }

    pub fn rules(&self) -> &[SafeguardRule] {
        &self.rules
    }

    pub fn rule(&self, rule_id: &str) -> Option<&SafeguardRule> {
        self.rules.iter().find(|r| r.rule_id == rule_id)
    }

    pub fn recommendations(&self) -> &BTreeMap<String, String> {
        &self.recommendations
    }

    pub fn recommendation(&self, rule_id: &str) -> Option<&str> {
        self.recommendations.get(rule_id).map(String::as_str)
    }

    /// Hex SHA-256 of the canonical rules-file rendering.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn checkable_count(&self) -> usize {
        self.rules.iter().filter(|r| r.checkable()).count()
    }

    pub fn sub_rule_count(&self) -> usize {
        self.rules.iter().map(|r| r.sub_rules.len()).sum()
    }

    pub fn pattern_count(&self) -> usize {
        self.rules
            .iter()
            .flat_map(|r| &r.sub_rules)
            .map(|s| s.patterns.len())
            .sum()
    }

    /// Iterates every pattern with its catalog coordinates, in catalog order.
    pub fn patterns(&self) -> impl Iterator<Item = (PatternKey, &SafeguardRule, &SubRule, &str)> {
        self.rules.iter().enumerate().flat_map(|(ri, rule)| {
            rule.sub_rules
                .iter()
                .enumerate()
                .flat_map(move |(si, sub)| {
                    sub.patterns
                        .iter()
                        .enumerate()
                        .map(move |(pi, p)| (PatternKey::new(ri, si, pi), rule, sub, p.as_str()))
                })
        })
    }

    /// Canonical serialization in the rules-file format.
    pub fn to_rules_text(&self) -> String {
        let mut out = String::new();
        for (i, rule) in self.rules.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(
                out,
                "[rule] {} ref={}",
                rule.rule_id, rule.safeguard.cfr_reference
            );
            if !rule.safeguard.safeguard_name.is_empty() {
                let _ = writeln!(out, "name: {}", rule.safeguard.safeguard_name);
            }
            if !rule.safeguard.description.is_empty() {
                let _ = writeln!(out, "description: {}", rule.safeguard.description);
            }
            if let Some(text) = self.recommendations.get(&rule.rule_id) {
                let _ = writeln!(out, "recommend: {text}");
            }
            for sub in &rule.sub_rules {
                let _ = writeln!(
                    out,
                    "[subrule] \"{}\" mode={} polarity={}",
                    sub.sub_rule_id,
                    sub.mode.as_str(),
                    sub.polarity.as_str()
                );
                for p in &sub.patterns {
                    let _ = writeln!(out, "pattern: {p}");
                }
            }
        }
        out
    }
}

/// The embedded transcription of the technical-safeguard tables.
pub fn builtin_catalog() -> Catalog {
    load_catalog(EMBEDDED_RULES).expect("embedded rules file is well-formed")
}

struct PendingSubRule {
    line: usize,
    sub: SubRule,
}

struct PendingRule {
    rule: SafeguardRule,
    sub: Option<PendingSubRule>,
    sub_ids: HashSet<String>,
}

impl PendingRule {
    fn close_sub(&mut self) -> Result<(), CatalogError> {
        if let Some(PendingSubRule { line, sub }) = self.sub.take() {
            if sub.patterns.is_empty() {
                return Err(CatalogError::EmptySubRule {
                    line,
                    rule_id: self.rule.rule_id.clone(),
                    sub_rule_id: sub.sub_rule_id,
                });
            }
            self.rule.sub_rules.push(sub);
        }
        Ok(())
    }
}

/// Parses a rules file. Rule and sub-rule order follow the file.
pub fn load_catalog(source_text: &str) -> Result<Catalog, CatalogError> {
    let mut rules: Vec<SafeguardRule> = Vec::new();
    let mut rule_ids: HashSet<String> = HashSet::new();
    let mut recommendations = BTreeMap::new();
    let mut current: Option<PendingRule> = None;

    let parse_err = |line: usize, message: String| CatalogError::Parse { line, message };

    for (idx, raw_line) in source_text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        let trimmed = line.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }

        if let Some(rest) = trimmed.strip_prefix("[rule]") {
            if let Some(mut done) = current.take() {
                done.close_sub()?;
                rules.push(done.rule);
            }
            let mut tokens = rest.split_whitespace();
            let rule_id = tokens
                .next()
                .ok_or_else(|| parse_err(line_no, "[rule] needs a rule id".into()))?;
            let mut reference = None;
            for tok in tokens {
                match tok.split_once('=') {
                    Some(("ref", v)) => reference = Some(v.to_string()),
                    _ => return Err(parse_err(line_no, format!("unexpected `{tok}` in [rule]"))),
                }
            }
            let reference = reference
                .ok_or_else(|| parse_err(line_no, "[rule] needs ref=<cfr_reference>".into()))?;
            if !rule_ids.insert(rule_id.to_string()) {
                return Err(CatalogError::DuplicateId {
                    line: line_no,
                    id: rule_id.to_string(),
                });
            }
            current = Some(PendingRule {
                rule: SafeguardRule {
                    rule_id: rule_id.to_string(),
                    safeguard: SafeguardRef {
                        cfr_reference: reference,
                        safeguard_name: String::new(),
                        description: String::new(),
                    },
                    sub_rules: Vec::new(),
                },
                sub: None,
                sub_ids: HashSet::new(),
            });
            continue;
        }

        let Some(rule) = current.as_mut() else {
            return Err(parse_err(line_no, "directive before any [rule]".into()));
        };

        if let Some(rest) = trimmed.strip_prefix("[subrule]") {
            rule.close_sub()?;
            let (sub_rule_id, options) = parse_quoted(rest.trim_start())
                .ok_or_else(|| parse_err(line_no, "[subrule] needs a quoted id".into()))?;
            if sub_rule_id.is_empty() {
                return Err(parse_err(line_no, "empty sub-rule id".into()));
            }
            let mut mode = MatchMode::Any;
            let mut polarity = Polarity::Evidence;
            for tok in options.split_whitespace() {
                match tok.split_once('=') {
                    Some(("mode", "any")) => mode = MatchMode::Any,
                    Some(("mode", "all")) => mode = MatchMode::All,
                    Some(("polarity", "evidence")) => polarity = Polarity::Evidence,
                    Some(("polarity", "advisory")) => polarity = Polarity::Advisory,
                    _ => {
                        return Err(parse_err(
                            line_no,
                            format!("unexpected `{tok}` in [subrule]"),
                        ))
                    }
                }
            }
            if !rule.sub_ids.insert(sub_rule_id.to_string()) {
                return Err(CatalogError::DuplicateId {
                    line: line_no,
                    id: sub_rule_id.to_string(),
                });
            }
            rule.sub = Some(PendingSubRule {
                line: line_no,
                sub: SubRule {
                    sub_rule_id: sub_rule_id.to_string(),
                    mode,
                    polarity,
                    patterns: Vec::new(),
                },
            });
        } else if let Some(rest) = trimmed.strip_prefix("pattern:") {
            let text = directive_value(rest);
            match rule.sub.as_mut() {
                Some(pending) => pending.sub.patterns.push(text.to_string()),
                None => return Err(parse_err(line_no, "pattern: outside a [subrule]".into())),
            }
        } else if let Some(rest) = trimmed.strip_prefix("recommend:") {
            recommendations.insert(rule.rule.rule_id.clone(), directive_value(rest).to_string());
        } else if let Some(rest) = trimmed.strip_prefix("name:") {
            rule.rule.safeguard.safeguard_name = directive_value(rest).to_string();
        } else if let Some(rest) = trimmed.strip_prefix("description:") {
            rule.rule.safeguard.description = directive_value(rest).to_string();
        } else {
            return Err(parse_err(
                line_no,
                format!("unrecognized directive `{trimmed}`"),
            ));
        }
    }

    if let Some(mut done) = current.take() {
        done.close_sub()?;
        rules.push(done.rule);
    }
    Ok(Catalog::assemble(rules, recommendations))
}

/// Text after `key:`, minus one separating space, otherwise verbatim.
fn directive_value(rest: &str) -> &str {
    rest.strip_prefix(' ').unwrap_or(rest)
}

/// Splits `"id" rest` into (`id`, `rest`).
fn parse_quoted(s: &str) -> Option<(&str, &str)> {
    let inner = s.strip_prefix('"')?;
    let end = inner.find('"')?;
    Some((&inner[..end], &inner[end + 1..]))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Issue {
    BadReference {
        rule_id: String,
        reference: String,
    },
    EmptyPattern {
        rule_id: String,
        sub_rule_id: String,
        index: usize,
    },
    BadPattern {
        rule_id: String,
        sub_rule_id: String,
        index: usize,
        error: PatternError,
    },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::BadReference { rule_id, reference } => {
                write!(f, "{rule_id}: malformed CFR reference `{reference}`")
            }
            Issue::EmptyPattern {
                rule_id,
                sub_rule_id,
                index,
            } => write!(f, "{rule_id}/{sub_rule_id} pattern #{index}: empty pattern"),
            Issue::BadPattern {
                rule_id,
                sub_rule_id,
                index,
                error,
            } => write!(f, "{rule_id}/{sub_rule_id} pattern #{index}: {error}"),
        }
    }
}

/// Lists problems with a catalog; an empty list means it is usable.
pub fn validate_catalog(c: &Catalog) -> Vec<Issue> {
    let mut issues = Vec::new();
    for rule in c.rules() {
        if !is_cfr_reference(&rule.safeguard.cfr_reference) {
            issues.push(Issue::BadReference {
                rule_id: rule.rule_id.clone(),
                reference: rule.safeguard.cfr_reference.clone(),
            });
        }
    }
    for (key, rule, sub, raw) in c.patterns() {
        let issue = match compile_pattern(raw, key) {
            Ok(_) => continue,
            Err(PatternError::EmptyPattern) => Issue::EmptyPattern {
                rule_id: rule.rule_id.clone(),
                sub_rule_id: sub.sub_rule_id.clone(),
                index: key.pattern,
            },
            Err(error) => Issue::BadPattern {
                rule_id: rule.rule_id.clone(),
                sub_rule_id: sub.sub_rule_id.clone(),
                index: key.pattern,
                error,
            },
        };
        issues.push(issue);
    }
    issues
}

/// `164.312(<letter>)` followed by any number of `(<alphanumeric>)` groups.
pub fn is_cfr_reference(s: &str) -> bool {
    let Some(rest) = s.strip_prefix("164.312") else {
        return false;
    };
    let mut groups = Vec::new();
    let mut rest = rest;
    while !rest.is_empty() {
        let Some(inner) = rest.strip_prefix('(') else {
            return false;
        };
        let Some(end) = inner.find(')') else {
            return false;
        };
        let group = &inner[..end];
        if group.is_empty() || !group.chars().all(|c| c.is_ascii_alphanumeric()) {
            return false;
        }
        groups.push(group);
        rest = &inner[end + 1..];
    }
    matches!(groups.first(), Some(g) if g.len() == 1 && g.chars().all(|c| c.is_ascii_lowercase()))
}
