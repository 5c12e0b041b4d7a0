//! `hipaachecker` command line.
//!
//! Exit statuses: 0 compliant / success, 1 non-compliant, 2 usage or
//! configuration error, 3 ingestion or decompiler failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::corpus_analytics::{
    compute_stats_with_failures, load_manifest, resolve_paths, run_batch, stats_to_csv, AppKind,
    BatchOptions,
};
use crate::ingestion::{
    extract_apk, open_source_tree, DecompilerSpec, ExtensionFilter, IngestError, SourceTree,
    DEFAULT_DECOMPILER_TIMEOUT_SECS,
};
use crate::reporting::{
    bundle_from_json, parse_json_report, render_html, render_json, render_text, ReportBundle,
    ReportMetadata,
};
use crate::rule_catalog::{builtin_catalog, load_catalog, validate_catalog, Catalog, Profile};
use crate::scanner::{scan_tree_with, ScanOptions};
use crate::verdicts::{evaluate, exit_code, EXIT_INGESTION, EXIT_USAGE};

pub const DECOMPILER_ENV: &str = "HIPAACHECKER_DECOMPILER";

#[derive(Debug, Parser)]
#[command(
    name = "hipaachecker",
    version,
    about = "Check Android app sources against HIPAA technical safeguards"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a source directory or an APK.
    Scan(ScanArgs),
    /// Scan every app of a manifest and write corpus statistics.
    Batch(BatchArgs),
    /// Inspect the rule catalog.
    Rules {
        #[command(subcommand)]
        action: RulesAction,
    },
    /// Re-render an existing JSON report.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Paper,
    Strict,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Strict => Profile::Strict,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Html,
    Text,
}

impl Format {
    fn file_name(self) -> &'static str {
        match self {
            Format::Json => "report.json",
            Format::Html => "report.html",
            Format::Text => "report.txt",
        }
    }
}

#[derive(Debug, Args)]
pub struct CatalogArgs {
    /// Rules file replacing the built-in catalog.
    #[arg(long, value_name = "FILE")]
    pub rules: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "paper")]
    pub profile: ProfileArg,
}

#[derive(Debug, Args)]
pub struct DecompilerArgs {
    /// Decompiler command template with `{apk}` and `{out}` placeholders.
    #[arg(long, value_name = "CMD", env = DECOMPILER_ENV)]
    pub decompiler: Option<String>,
    /// Decompiler timeout in seconds.
    #[arg(long, value_name = "SECS", default_value_t = DEFAULT_DECOMPILER_TIMEOUT_SECS,
          value_parser = clap::value_parser!(u64).range(1..))]
    pub timeout: u64,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Source directory, or a path ending in `.apk`.
    pub path: PathBuf,
    #[command(flatten)]
    pub catalog: CatalogArgs,
    /// Report formats (repeatable). Defaults to text.
    #[arg(long, value_enum)]
    pub format: Vec<Format>,
    /// Write reports into this directory instead of stdout.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub decompiler: DecompilerArgs,
    /// Fixed timestamp for byte-identical reports.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: Option<u32>,
    /// Identifier shown in reports (defaults to the input's file name).
    #[arg(long)]
    pub app_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Statistics CSV path (default `<out>/stats.csv`).
    #[arg(long, value_name = "FILE")]
    pub stats: Option<PathBuf>,
    #[command(flatten)]
    pub catalog: CatalogArgs,
    #[command(flatten)]
    pub decompiler: DecompilerArgs,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum RulesAction {
    /// List rules, sub-rules and pattern counts.
    List {
        #[command(flatten)]
        catalog: CatalogArgs,
        #[arg(long, value_enum, default_value = "text")]
        format: ListFormat,
    },
    /// Print the catalog in rules-file format.
    Export {
        #[command(flatten)]
        catalog: CatalogArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ListFormat {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// JSON report produced by `scan`.
    #[arg(long, value_name = "FILE")]
    pub json: PathBuf,
    /// Output formats (repeatable). Defaults to html.
    #[arg(long, value_enum)]
    pub format: Vec<Format>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub catalog: CatalogArgs,
}

/// Failure carrying its exit status.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn ingestion(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INGESTION,
            message: message.into(),
        }
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::BadTemplate(_) => Failure::usage(e.to_string()),
            _ => Failure::ingestion(e.to_string()),
        }
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Scan(args) => cmd_scan(args),
        Command::Batch(args) => cmd_batch(args),
        Command::Rules { action } => cmd_rules(action),
        Command::Render(args) => cmd_render(args),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn load_rules(args: &CatalogArgs) -> Result<Catalog, Failure> {
    let base = match &args.rules {
        None => builtin_catalog(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            load_catalog(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
    };
    let catalog = Profile::from(args.profile).apply(&base);
    let issues = validate_catalog(&catalog);
    if !issues.is_empty() {
        let listed: Vec<String> = issues.iter().map(|i| format!("  {i}")).collect();
        return Err(Failure::usage(format!(
            "invalid rules:\n{}",
            listed.join("\n")
        )));
    }
    Ok(catalog)
}

fn decompiler_spec(args: &DecompilerArgs) -> Result<Option<DecompilerSpec>, Failure> {
    args.decompiler
        .as_deref()
        .map(|t| DecompilerSpec::new(t, args.timeout))
        .transpose()
        .map_err(Failure::from)
}

fn is_apk(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("apk"))
}

fn write_output(out: Option<&Path>, name: &str, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(dir) => {
            let path = dir.join(name);
            fs::write(&path, bytes)
                .map_err(|e| Failure::ingestion(format!("{}: {e}", path.display())))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(bytes)
                .and_then(|_| stdout.flush())
                .map_err(|e| Failure::ingestion(format!("stdout: {e}")))
        }
    }
}

fn cmd_scan(args: ScanArgs) -> Result<i32, Failure> {
    let catalog = load_rules(&args.catalog)?;
    let formats = if args.format.is_empty() {
        vec![Format::Text]
    } else {
        args.format.clone()
    };
    if let Some(out) = &args.out {
        fs::create_dir_all(out)
            .map_err(|e| Failure::ingestion(format!("{}: {e}", out.display())))?;
    }

    // holds a temporary extraction directory alive until the reports are written
    let mut _scratch = None;
    let tree: SourceTree = if is_apk(&args.path) {
        let spec = decompiler_spec(&args.decompiler)?.ok_or_else(|| {
            Failure::usage(format!(
                "scanning an APK needs --decompiler or {DECOMPILER_ENV}"
            ))
        })?;
        let workdir = match &args.out {
            Some(out) => out.join("extract"),
            None => {
                let dir = tempfile::tempdir().map_err(|e| Failure::ingestion(e.to_string()))?;
                let path = dir.path().to_path_buf();
                _scratch = Some(dir);
                path
            }
        };
        fs::create_dir_all(&workdir)
            .map_err(|e| Failure::ingestion(format!("{}: {e}", workdir.display())))?;
        extract_apk(&args.path, &workdir, &spec)?
    } else {
        open_source_tree(&args.path, &ExtensionFilter::default())?
    };
    for w in &tree.warnings {
        eprintln!("warning: {w}");
    }

    let opts = ScanOptions {
        workers: args.workers.map(|n| n as usize),
    };
    let scan = scan_tree_with(&tree, &catalog, opts).map_err(|e| Failure::usage(e.to_string()))?;
    let app_id = args.app_id.clone().unwrap_or_else(|| {
        args.path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| args.path.to_string_lossy().into_owned())
    });
    let verdict = evaluate(&scan, &catalog, &app_id).map_err(|e| Failure::usage(e.to_string()))?;
    let bundle = ReportBundle {
        metadata: ReportMetadata::for_scan(&scan, args.path.to_string_lossy(), args.deterministic),
        records: scan.records,
        verdict,
        source_access: Some(&tree),
    };
    emit(&bundle, &formats, args.out.as_deref())?;
    Ok(exit_code(&bundle.verdict))
}

fn emit(bundle: &ReportBundle<'_>, formats: &[Format], out: Option<&Path>) -> Result<(), Failure> {
    for &format in formats {
        let bytes = match format {
            Format::Json => render_json(bundle),
            Format::Html => render_html(bundle),
            Format::Text => render_text(bundle).into_bytes(),
        };
        write_output(out, format.file_name(), &bytes)?;
        if format == Format::Text && out.is_some() {
            write_output(None, "", &bytes)?;
        }
    }
    Ok(())
}

fn cmd_batch(args: BatchArgs) -> Result<i32, Failure> {
    let catalog = load_rules(&args.catalog)?;
    let text = fs::read_to_string(&args.manifest)
        .map_err(|e| Failure::usage(format!("{}: {e}", args.manifest.display())))?;
    let mut entries = load_manifest(&text)
        .map_err(|e| Failure::usage(format!("{}: {e}", args.manifest.display())))?;
    if let Some(base) = args.manifest.parent() {
        resolve_paths(&mut entries, base);
    }
    let spec = decompiler_spec(&args.decompiler)?;
    if spec.is_none() && entries.iter().any(|e| e.kind == AppKind::Apk) {
        return Err(Failure::usage(format!(
            "manifest lists APKs; pass --decompiler or set {DECOMPILER_ENV}"
        )));
    }
    let opts = BatchOptions {
        workers: args.workers.map(|n| n as usize),
        deterministic: args.deterministic,
    };
    let outcome = run_batch(&entries, &catalog, &args.out, spec.as_ref(), opts)
        .map_err(|e| Failure::ingestion(e.to_string()))?;
    for f in &outcome.failures {
        eprintln!("warning: {}: {}", f.app_id, f.error);
    }
    let stats = compute_stats_with_failures(
        &outcome.verdicts,
        &outcome.records,
        &entries,
        &outcome.failures,
    )
    .map_err(|e| Failure::ingestion(e.to_string()))?;
    let stats_path = args
        .stats
        .clone()
        .unwrap_or_else(|| args.out.join("stats.csv"));
    fs::write(&stats_path, stats_to_csv(&stats))
        .map_err(|e| Failure::ingestion(format!("{}: {e}", stats_path.display())))?;
    println!(
        "scanned {} app(s), {} failed; statistics written to {}",
        stats.app_count,
        outcome.failures.len(),
        stats_path.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct RulesListing<'a> {
    checksum: &'a str,
    safeguards: usize,
    checkable_rules: usize,
    sub_rules: usize,
    patterns: usize,
    rules: Vec<RuleListing<'a>>,
}

#[derive(Serialize)]
struct RuleListing<'a> {
    rule_id: &'a str,
    cfr_reference: &'a str,
    safeguard_name: &'a str,
    checkable: bool,
    recommendation: Option<&'a str>,
    sub_rules: &'a [crate::rule_catalog::SubRule],
}

fn cmd_rules(action: RulesAction) -> Result<i32, Failure> {
    match action {
        RulesAction::Export { catalog } => {
            let c = load_rules(&catalog)?;
            write_output(None, "", c.to_rules_text().as_bytes())?;
        }
        RulesAction::List { catalog, format } => {
            let c = load_rules(&catalog)?;
            let bytes = match format {
                ListFormat::Json => {
                    let listing = RulesListing {
                        checksum: c.checksum(),
                        safeguards: c.rules().len(),
                        checkable_rules: c.checkable_count(),
                        sub_rules: c.sub_rule_count(),
                        patterns: c.pattern_count(),
                        rules: c
                            .rules()
                            .iter()
                            .map(|r| RuleListing {
                                rule_id: &r.rule_id,
                                cfr_reference: &r.safeguard.cfr_reference,
                                safeguard_name: &r.safeguard.safeguard_name,
                                checkable: r.checkable(),
                                recommendation: c.recommendation(&r.rule_id),
                                sub_rules: &r.sub_rules,
                            })
                            .collect(),
                    };
                    let mut v = serde_json::to_vec_pretty(&listing).expect("listing serializes");
                    v.push(b'\n');
                    v
                }
                ListFormat::Text => rules_text(&c).into_bytes(),
            };
            write_output(None, "", &bytes)?;
        }
    }
    Ok(0)
}

fn rules_text(c: &Catalog) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    for rule in c.rules() {
        let _ = writeln!(
            out,
            "{:<20} {:<28} {}",
            rule.safeguard.cfr_reference,
            rule.rule_id,
            if rule.checkable() {
                format!("{} sub-rule(s)", rule.sub_rules.len())
            } else {
                "not checkable".to_string()
            }
        );
        for sub in &rule.sub_rules {
            let _ = writeln!(
                out,
                "    {:<36} {:<3} {:<8} {} pattern(s)",
                sub.sub_rule_id,
                sub.mode.as_str(),
                sub.polarity.as_str(),
                sub.patterns.len()
            );
        }
    }
    let _ = writeln!(
        out,
        "{} safeguards, {} checkable rules, {} sub-rules, {} patterns",
        c.rules().len(),
        c.checkable_count(),
        c.sub_rule_count(),
        c.pattern_count()
    );
    let _ = writeln!(out, "checksum {}", c.checksum());
    out
}

fn cmd_render(args: RenderArgs) -> Result<i32, Failure> {
    let catalog = load_rules(&args.catalog)?;
    let bytes = fs::read(&args.json)
        .map_err(|e| Failure::usage(format!("{}: {e}", args.json.display())))?;
    let report = parse_json_report(&bytes)
        .map_err(|e| Failure::usage(format!("{}: {e}", args.json.display())))?;
    let bundle = bundle_from_json(&report, Some(&catalog));
    let formats = if args.format.is_empty() {
        vec![Format::Html]
    } else {
        args.format.clone()
    };
    if let Some(out) = &args.out {
        fs::create_dir_all(out)
            .map_err(|e| Failure::ingestion(format!("{}: {e}", out.display())))?;
    }
    emit(&bundle, &formats, args.out.as_deref())?;
    Ok(0)
}
