//! Batch scanning of an app manifest and corpus-level prevalence metrics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::ingestion::{
    extract_apk, open_source_tree, DecompilerSpec, ExtensionFilter, SourceTree,
};
use crate::pattern_engine::{build_matcher, MatcherError, MultiMatcher};
use crate::reporting::{render_html, render_json, ReportBundle, ReportMetadata};
use crate::rule_catalog::Catalog;
use crate::scanner::{scan_tree_with_matcher, MatchRecord, ScanOptions};
use crate::verdicts::{evaluate, AppVerdict, Status};

pub const MANIFEST_HEADER: [&str; 4] = ["app_id", "category", "kind", "path"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Medical,
    HealthFitness,
    Other,
}

impl Category {
    pub fn parse(s: &str) -> Category {
        match s.trim() {
            "medical" => Category::Medical,
            "health_fitness" => Category::HealthFitness,
            _ => Category::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Medical => "medical",
            Category::HealthFitness => "health_fitness",
            Category::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppKind {
    Source,
    Apk,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppEntry {
    pub app_id: String,
    pub category: Category,
    pub kind: AppKind,
    pub path: PathBuf,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ManifestError {
    #[error("manifest header must be `app_id,category,kind,path`, found `{0}`")]
    BadHeader(String),
    #[error("manifest row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error("manifest row {row}: duplicate app_id `{app_id}`")]
    DuplicateAppId { row: usize, app_id: String },
}

/// Parses the manifest CSV. `row` in errors is the 1-based file line, header
/// being line 1.
pub fn load_manifest(csv_text: &str) -> Result<Vec<AppEntry>, ManifestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let mut rows = reader.records();

    let header = match rows.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(ManifestError::BadHeader(e.to_string())),
        None => return Err(ManifestError::BadHeader(String::new())),
    };
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(ManifestError::BadHeader(
            header.iter().collect::<Vec<_>>().join(","),
        ));
    }

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, row) in rows.enumerate() {
        let row_no = i + 2;
        let bad = |message: String| ManifestError::BadRow {
            row: row_no,
            message,
        };
        let record = row.map_err(|e| bad(e.to_string()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", record.len())));
        }
        let app_id = &record[0];
        if app_id.is_empty() || app_id == "." || app_id == ".." || app_id.contains(['/', '\\']) {
            return Err(bad(format!(
                "app_id `{app_id}` is not a valid directory name"
            )));
        }
        let kind = match &record[2] {
            "source" => AppKind::Source,
            "apk" => AppKind::Apk,
            other => return Err(bad(format!("kind must be source or apk, found `{other}`"))),
        };
        if record[3].is_empty() {
            return Err(bad("empty path".into()));
        }
        if !seen.insert(app_id.to_string()) {
            return Err(ManifestError::DuplicateAppId {
                row: row_no,
                app_id: app_id.to_string(),
            });
        }
        entries.push(AppEntry {
            app_id: app_id.to_string(),
            category: Category::parse(&record[1]),
            kind,
            path: PathBuf::from(&record[3]),
        });
    }
    Ok(entries)
}

/// Resolves relative entry paths against `base` (usually the manifest's directory).
pub fn resolve_paths(entries: &mut [AppEntry], base: &Path) {
    for e in entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppFailure {
    pub app_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    /// Successfully scanned apps, in manifest order.
    pub verdicts: Vec<AppVerdict>,
    /// Every record of every scanned app, in manifest order.
    pub records: Vec<MatchRecord>,
    pub failures: Vec<AppFailure>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchOptions {
    pub workers: Option<usize>,
    pub deterministic: bool,
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("work directory {path} is not writable: {source}")]
    WorkdirUnwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Matcher(#[from] MatcherError),
}

pub fn run_batch(
    entries: &[AppEntry],
    c: &Catalog,
    workdir: &Path,
    spec: Option<&DecompilerSpec>,
    opts: BatchOptions,
) -> Result<BatchOutcome, BatchError> {
    let unwritable = |source| BatchError::WorkdirUnwritable {
        path: workdir.to_path_buf(),
        source,
    };
    fs::create_dir_all(workdir).map_err(unwritable)?;
    tempfile::tempfile_in(workdir).map_err(unwritable)?;
    if entries.is_empty() {
        return Ok(BatchOutcome::default());
    }

    let matcher = build_matcher(c)?;
    let workers = opts
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    let results: Vec<Result<(AppVerdict, Vec<MatchRecord>), String>> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| scan_app(e, c, &matcher, workdir, spec, opts.deterministic))
            .collect()
    });

    let mut outcome = BatchOutcome::default();
    for (entry, result) in entries.iter().zip(results) {
        match result {
            Ok((verdict, records)) => {
                outcome.verdicts.push(verdict);
                outcome.records.extend(records);
            }
            Err(error) => outcome.failures.push(AppFailure {
                app_id: entry.app_id.clone(),
                error,
            }),
        }
    }
    Ok(outcome)
}

fn scan_app(
    entry: &AppEntry,
    c: &Catalog,
    matcher: &MultiMatcher,
    workdir: &Path,
    spec: Option<&DecompilerSpec>,
    deterministic: bool,
) -> Result<(AppVerdict, Vec<MatchRecord>), String> {
    let app_dir = workdir.join(&entry.app_id);
    fs::create_dir_all(&app_dir).map_err(|e| format!("{}: {e}", app_dir.display()))?;
    let tree: SourceTree = match entry.kind {
        AppKind::Source => open_source_tree(&entry.path, &ExtensionFilter::default()),
        AppKind::Apk => {
            let spec = spec.ok_or("no decompiler configured for APK input")?;
            extract_apk(&entry.path, &app_dir.join("extract"), spec)
        }
    }
    .map_err(|e| e.to_string())?;

    let scan = scan_tree_with_matcher(
        &tree,
        matcher,
        c.checksum(),
        ScanOptions { workers: Some(1) },
    );
    let verdict = evaluate(&scan, c, &entry.app_id).map_err(|e| e.to_string())?;
    let bundle = ReportBundle {
        metadata: ReportMetadata::for_scan(&scan, entry.path.to_string_lossy(), deterministic),
        records: scan.records,
        verdict,
        source_access: Some(&tree),
    };
    for (name, bytes) in [
        ("report.json", render_json(&bundle)),
        ("report.html", render_html(&bundle)),
    ] {
        let path = app_dir.join(name);
        fs::write(&path, bytes).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok((bundle.verdict, bundle.records))
}

/// Exact ratio rendered as a percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Percentage {
    pub numerator: u64,
    pub denominator: u64,
}

impl Percentage {
    pub fn new(numerator: u64, denominator: u64) -> Self {
        Percentage {
            numerator,
            denominator,
        }
    }

    /// 0.0 when the denominator is zero.
    pub fn value(self) -> f64 {
        if self.denominator == 0 {
            0.0
        } else {
            100.0 * self.numerator as f64 / self.denominator as f64
        }
    }

    /// One decimal place, rounding halves up, computed in integers.
    pub fn to_one_decimal(self) -> String {
        if self.denominator == 0 {
            return "0.0".to_string();
        }
        let n = self.numerator as u128;
        let d = self.denominator as u128;
        // tenths of a percent = 1000 n / d, rounded half up
        let tenths = (2000 * n + d) / (2 * d);
        format!("{}.{}", tenths / 10, tenths % 10)
    }
}

impl fmt::Display for Percentage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_one_decimal())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleStats {
    pub rule_id: String,
    /// `None` for rules that are not checkable.
    pub prevalence: Option<Percentage>,
    pub match_share: Percentage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStats {
    /// Catalog order.
    pub rules: Vec<RuleStats>,
    /// Per category with at least one scanned app: (rule_id, prevalence) in catalog order.
    pub per_category_prevalence: BTreeMap<Category, Vec<(String, Option<Percentage>)>>,
    pub app_count: usize,
    pub failed_apps: Vec<AppFailure>,
}

impl CorpusStats {
    pub fn prevalence(&self, rule_id: &str) -> Option<Percentage> {
        self.rules.iter().find(|r| r.rule_id == rule_id)?.prevalence
    }

    pub fn match_share(&self, rule_id: &str) -> Option<Percentage> {
        Some(
            self.rules
                .iter()
                .find(|r| r.rule_id == rule_id)?
                .match_share,
        )
    }

    pub fn category_prevalence(&self, category: Category, rule_id: &str) -> Option<Percentage> {
        self.per_category_prevalence
            .get(&category)?
            .iter()
            .find(|(id, _)| id == rule_id)?
            .1
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("no apps were scanned successfully")]
    EmptyCorpus,
}

pub fn compute_stats(
    verdicts: &[AppVerdict],
    all_records: &[MatchRecord],
    entries: &[AppEntry],
) -> Result<CorpusStats, StatsError> {
    compute_stats_with_failures(verdicts, all_records, entries, &[])
}

pub fn compute_stats_with_failures(
    verdicts: &[AppVerdict],
    all_records: &[MatchRecord],
    entries: &[AppEntry],
    failures: &[AppFailure],
) -> Result<CorpusStats, StatsError> {
    let first = verdicts.first().ok_or(StatsError::EmptyCorpus)?;
    let category_of: BTreeMap<&str, Category> = entries
        .iter()
        .map(|e| (e.app_id.as_str(), e.category))
        .collect();
    let total_records = all_records.len() as u64;

    let prevalence_over =
        |apps: &[&AppVerdict], rule_idx: usize, checkable: bool| -> Option<Percentage> {
            checkable.then(|| {
                let satisfied = apps
                    .iter()
                    .filter(|v| {
                        v.rules
                            .get(rule_idx)
                            .is_some_and(|r| r.status == Status::Satisfied)
                    })
                    .count();
                Percentage::new(satisfied as u64, apps.len() as u64)
            })
        };

    let all_apps: Vec<&AppVerdict> = verdicts.iter().collect();
    let mut rules = Vec::with_capacity(first.rules.len());
    for (idx, rule) in first.rules.iter().enumerate() {
        let checkable = rule.status != Status::NotCheckable;
        let count = all_records
            .iter()
            .filter(|r| r.rule_id == rule.rule_id)
            .count() as u64;
        rules.push(RuleStats {
            rule_id: rule.rule_id.clone(),
            prevalence: prevalence_over(&all_apps, idx, checkable),
            match_share: Percentage::new(count, total_records),
        });
    }

    let mut by_category: BTreeMap<Category, Vec<&AppVerdict>> = BTreeMap::new();
    for v in verdicts {
        let cat = category_of
            .get(v.app_id.as_str())
            .copied()
            .unwrap_or(Category::Other);
        by_category.entry(cat).or_default().push(v);
    }
    let per_category_prevalence = by_category
        .into_iter()
        .map(|(cat, apps)| {
            let row = first
                .rules
                .iter()
                .enumerate()
                .map(|(idx, rule)| {
                    let checkable = rule.status != Status::NotCheckable;
                    (rule.rule_id.clone(), prevalence_over(&apps, idx, checkable))
                })
                .collect();
            (cat, row)
        })
        .collect();

    Ok(CorpusStats {
        rules,
        per_category_prevalence,
        app_count: verdicts.len(),
        failed_apps: failures.to_vec(),
    })
}

/// `metric,category,rule_id,value` rows sorted by metric name, category, then
/// catalog order.
pub fn stats_to_csv(s: &CorpusStats) -> Vec<u8> {
    let fmt_opt = |p: Option<Percentage>| p.map(|p| p.to_one_decimal()).unwrap_or_default();
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut write = |row: [&str; 4]| writer.write_record(row).expect("in-memory csv write");
    write(["metric", "category", "rule_id", "value"]);
    // category names sort lexicographically, not in enum order
    let mut categories: Vec<_> = s.per_category_prevalence.iter().collect();
    categories.sort_by_key(|(cat, _)| cat.as_str());
    for (cat, row) in categories {
        for (rule_id, p) in row {
            write(["category_prevalence", cat.as_str(), rule_id, &fmt_opt(*p)]);
        }
    }
    for r in &s.rules {
        write([
            "match_share",
            "",
            &r.rule_id,
            &r.match_share.to_one_decimal(),
        ]);
    }
    for r in &s.rules {
        write(["prevalence", "", &r.rule_id, &fmt_opt(r.prevalence)]);
    }
    writer.into_inner().expect("in-memory csv flush")
}
