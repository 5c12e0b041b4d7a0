//! Applies a [`MultiMatcher`] to every line of a [`SourceTree`].

use rayon::prelude::*;

use crate::ingestion::{SourceFile, SourceTree};
use crate::pattern_engine::{build_matcher, MatcherError, MultiMatcher, PatternKey};
use crate::rule_catalog::Catalog;

pub const SNIPPET_MAX_CHARS: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchRecord {
    pub file: String,
    pub line_number: usize,
    pub column: usize,
    pub rule_id: String,
    pub sub_rule_id: String,
    pub pattern_text: String,
    /// The matched line, cut to [`SNIPPET_MAX_CHARS`] characters.
    pub snippet: String,
    pub occurrences: usize,
    pub key: PatternKey,
}

impl MatchRecord {
    fn sort_key(&self) -> (&[u8], usize, PatternKey) {
        (self.file.as_bytes(), self.line_number, self.key)
    }
}

pub fn sort_records(records: &mut [MatchRecord]) {
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanResult {
    /// Sorted by (file, line, catalog order).
    pub records: Vec<MatchRecord>,
    pub files_scanned: usize,
    pub lines_scanned: usize,
    pub warnings: Vec<String>,
    pub catalog_checksum: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScanOptions {
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
}

pub fn scan_file(f: &SourceFile, m: &MultiMatcher) -> Vec<MatchRecord> {
    let mut records = Vec::new();
    for (idx, line) in f.lines.iter().enumerate() {
        for hit in m.scan_line_counted(line) {
            let (rule_id, sub_rule_id, pattern_text) =
                m.describe(hit.key).expect("hit key comes from the matcher");
            records.push(MatchRecord {
                file: f.relative_path.clone(),
                line_number: idx + 1,
                column: hit.span.start_column,
                rule_id: rule_id.to_string(),
                sub_rule_id: sub_rule_id.to_string(),
                pattern_text: pattern_text.to_string(),
                snippet: truncate_chars(line, SNIPPET_MAX_CHARS),
                occurrences: hit.occurrences,
                key: hit.key,
            });
        }
    }
    records
}

fn truncate_chars(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((byte, _)) => s[..byte].to_string(),
        None => s.to_string(),
    }
}

pub fn scan_tree(t: &SourceTree, c: &Catalog) -> Result<ScanResult, MatcherError> {
    scan_tree_with(t, c, ScanOptions::default())
}

pub fn scan_tree_with(
    t: &SourceTree,
    c: &Catalog,
    opts: ScanOptions,
) -> Result<ScanResult, MatcherError> {
    let matcher = build_matcher(c)?;
    Ok(scan_tree_with_matcher(t, &matcher, c.checksum(), opts))
}

pub fn scan_tree_with_matcher(
    t: &SourceTree,
    m: &MultiMatcher,
    catalog_checksum: &str,
    opts: ScanOptions,
) -> ScanResult {
    let workers = opts
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);

    let mut records: Vec<MatchRecord> = if workers == 1 || t.files.len() < 2 {
        t.files.iter().flat_map(|f| scan_file(f, m)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool");
        pool.install(|| {
            t.files
                .par_iter()
                .map(|f| scan_file(f, m))
                .collect::<Vec<_>>()
                .into_iter()
                .flatten()
                .collect()
        })
    };
    sort_records(&mut records);

    ScanResult {
        records,
        files_scanned: t.files.len(),
        lines_scanned: t.line_count(),
        warnings: t.warnings.clone(),
        catalog_checksum: catalog_checksum.to_string(),
    }
}
