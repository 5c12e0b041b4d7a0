//! Static checks of Android mHealth app sources against the HIPAA technical
//! safeguards (45 CFR 164.312).
//!
//! Pipeline: [`ingestion`] produces a source tree (directly or from an APK via
//! an external decompiler), [`scanner`] runs the [`pattern_engine`] over it with
//! the [`rule_catalog`], [`verdicts`] folds matches into per-rule statuses and
//! [`reporting`] renders them. [`corpus_analytics`] does the same over many apps
//! and aggregates prevalence figures.

pub mod cli;
pub mod corpus_analytics;
pub mod ingestion;
pub mod pattern_engine;
pub mod reporting;
pub mod rule_catalog;
pub mod scanner;
pub mod verdicts;

pub use corpus_analytics::{
    compute_stats, load_manifest, run_batch, stats_to_csv, AppEntry, CorpusStats,
};
pub use ingestion::{
    extract_apk, open_source_tree, DecompilerSpec, ExtensionFilter, SourceFile, SourceTree,
};
pub use pattern_engine::{
    build_matcher, compile_pattern, match_line, CompiledPattern, MatchSpan, MultiMatcher,
};
pub use reporting::{render_html, render_json, render_text, ReportBundle, ReportMetadata};
pub use rule_catalog::{builtin_catalog, load_catalog, validate_catalog, Catalog, Profile};
pub use scanner::{scan_file, scan_tree, MatchRecord, ScanResult};
pub use verdicts::{evaluate, exit_code, AppVerdict, Status};
