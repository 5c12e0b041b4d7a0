//! Turns a source directory or an APK into a [`SourceTree`].
//!
//! APKs go through two steps: the ZIP container is unpacked into
//! `<workdir>/unpacked`, then an external decompiler writes Java sources into
//! `<workdir>/decompiled`.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;
use walkdir::WalkDir;
use zip::ZipArchive;

pub const DEFAULT_EXTENSIONS: &[&str] = &["java", "kt", "xml", "gradle", "kts", "properties"];
pub const MAX_FILE_BYTES: u64 = 20 * 1024 * 1024;
pub const DEFAULT_DECOMPILER_TIMEOUT_SECS: u64 = 300;
const BINARY_SNIFF_BYTES: usize = 4096;
const ZIP_MAGIC: &[u8] = b"PK\x03\x04";
const EMPTY_ZIP_MAGIC: &[u8] = b"PK\x05\x06";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{0} is not a directory")]
    NotADirectory(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} is not an APK: {reason}")]
    NotAnApk { path: PathBuf, reason: String },
    #[error("invalid decompiler template: {0}")]
    BadTemplate(String),
    #[error("could not start decompiler `{program}`: {source}")]
    DecompilerSpawn {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("decompiler failed ({status}): {stderr}")]
    DecompilerFailed { status: String, stderr: String },
    #[error("decompiler timed out after {0} s")]
    DecompilerTimeout(u64),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Set of file extensions (without leading dot, compared case-insensitively).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtensionFilter(BTreeSet<String>);

impl ExtensionFilter {
    pub fn new<I, S>(exts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        ExtensionFilter(
            exts.into_iter()
                .map(|e| e.as_ref().trim_start_matches('.').to_ascii_lowercase())
                .collect(),
        )
    }

    pub fn accepts(&self, path: &Path) -> bool {
        path.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| self.0.contains(&e.to_ascii_lowercase()))
    }
}

impl Default for ExtensionFilter {
    fn default() -> Self {
        ExtensionFilter::new(DEFAULT_EXTENSIONS)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFile {
    /// `/`-separated path relative to the tree root.
    pub relative_path: String,
    pub lines: Vec<String>,
    /// True if invalid UTF-8 was replaced with U+FFFD.
    pub decode_lossy: bool,
}

impl SourceFile {
    pub fn from_bytes(relative_path: impl Into<String>, bytes: &[u8]) -> SourceFile {
        let (text, decode_lossy) = match String::from_utf8_lossy(bytes) {
            std::borrow::Cow::Borrowed(s) => (s.to_string(), false),
            std::borrow::Cow::Owned(s) => (s, true),
        };
        SourceFile {
            relative_path: relative_path.into(),
            lines: split_lines(&text),
            decode_lossy,
        }
    }

    /// 1-based line lookup.
    pub fn line(&self, line_number: usize) -> Option<&str> {
        line_number
            .checked_sub(1)
            .and_then(|i| self.lines.get(i))
            .map(String::as_str)
    }
}

/// Splits on LF, CRLF and lone CR. A final terminator does not open an
/// extra empty line.
pub fn split_lines(text: &str) -> Vec<String> {
    let mut lines = Vec::new();
    let bytes = text.as_bytes();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\n' => {
                lines.push(text[start..i].to_string());
                i += 1;
                start = i;
            }
            b'\r' => {
                lines.push(text[start..i].to_string());
                i += if bytes.get(i + 1) == Some(&b'\n') {
                    2
                } else {
                    1
                };
                start = i;
            }
            _ => i += 1,
        }
    }
    if start < bytes.len() {
        lines.push(text[start..].to_string());
    }
    lines
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceTree {
    pub root: PathBuf,
    /// Sorted by `relative_path`, byte-wise.
    pub files: Vec<SourceFile>,
    pub warnings: Vec<String>,
}

impl SourceTree {
    pub fn file(&self, relative_path: &str) -> Option<&SourceFile> {
        self.files
            .binary_search_by(|f| f.relative_path.as_str().cmp(relative_path))
            .ok()
            .map(|i| &self.files[i])
    }

    pub fn line_count(&self) -> usize {
        self.files.iter().map(|f| f.lines.len()).sum()
    }

    fn sort(&mut self) {
        self.files
            .sort_by(|a, b| a.relative_path.as_bytes().cmp(b.relative_path.as_bytes()));
    }
}

pub fn open_source_tree(
    root: &Path,
    extensions: &ExtensionFilter,
) -> Result<SourceTree, IngestError> {
    if !root.is_dir() {
        return Err(IngestError::NotADirectory(root.to_path_buf()));
    }
    let mut tree = SourceTree {
        root: root.to_path_buf(),
        files: Vec::new(),
        warnings: Vec::new(),
    };
    collect_files(&mut tree, root, "", extensions)?;
    tree.sort();
    Ok(tree)
}

fn collect_files(
    tree: &mut SourceTree,
    dir: &Path,
    prefix: &str,
    extensions: &ExtensionFilter,
) -> Result<(), IngestError> {
    let canonical_root = dir.canonicalize().map_err(io_err(dir))?;
    let walker = WalkDir::new(dir)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || !(e.file_type().is_dir() && is_hidden(e.file_name())));

    for entry in walker {
        let entry = match entry {
            Ok(e) => e,
            Err(err) => {
                tree.warnings.push(format!("walk error: {err}"));
                continue;
            }
        };
        let path = entry.path();
        let rel = match path.strip_prefix(dir) {
            Ok(r) => r,
            Err(_) => continue,
        };
        let rel_str = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let relative_path = format!("{prefix}{rel_str}");

        let file_type = entry.file_type();
        if file_type.is_symlink() {
            match path.canonicalize() {
                Ok(target) if target.starts_with(&canonical_root) => {
                    if target.is_dir() {
                        tree.warnings
                            .push(format!("{relative_path}: symlinked directory not followed"));
                        continue;
                    }
                }
                Ok(_) => {
                    tree.warnings.push(format!(
                        "{relative_path}: symlink points outside the tree, skipped"
                    ));
                    continue;
                }
                Err(err) => {
                    tree.warnings
                        .push(format!("{relative_path}: broken symlink ({err})"));
                    continue;
                }
            }
        } else if !file_type.is_file() {
            continue;
        }
        if !extensions.accepts(path) {
            continue;
        }
        if let Some(file) = read_source_file(path, relative_path, &mut tree.warnings) {
            tree.files.push(file);
        }
    }
    Ok(())
}

fn is_hidden(name: &std::ffi::OsStr) -> bool {
    name.to_str().is_some_and(|n| n.starts_with('.'))
}

fn read_source_file(
    path: &Path,
    relative_path: String,
    warnings: &mut Vec<String>,
) -> Option<SourceFile> {
    let size = match fs::metadata(path) {
        Ok(m) => m.len(),
        Err(err) => {
            warnings.push(format!("{relative_path}: {err}"));
            return None;
        }
    };
    if size > MAX_FILE_BYTES {
        warnings.push(format!("{relative_path}: larger than 20 MB, skipped"));
        return None;
    }
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(err) => {
            warnings.push(format!("{relative_path}: {err}"));
            return None;
        }
    };
    let sniff = &bytes[..bytes.len().min(BINARY_SNIFF_BYTES)];
    if sniff.contains(&0) {
        warnings.push(format!("{relative_path}: binary content, skipped"));
        return None;
    }
    Some(SourceFile::from_bytes(relative_path, &bytes))
}

/// External decompiler invocation, e.g. `jadx -d {out} {apk}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecompilerSpec {
    command_template: String,
    timeout_seconds: u64,
}

impl DecompilerSpec {
    pub fn new(
        command_template: impl Into<String>,
        timeout_seconds: u64,
    ) -> Result<Self, IngestError> {
        let command_template = command_template.into();
        for placeholder in ["{apk}", "{out}"] {
            let n = command_template.matches(placeholder).count();
            if n != 1 {
                return Err(IngestError::BadTemplate(format!(
                    "`{placeholder}` must appear exactly once (found {n})"
                )));
            }
        }
        if timeout_seconds == 0 {
            return Err(IngestError::BadTemplate("timeout must be positive".into()));
        }
        Ok(DecompilerSpec {
            command_template,
            timeout_seconds,
        })
    }

    pub fn command_template(&self) -> &str {
        &self.command_template
    }

    pub fn timeout_seconds(&self) -> u64 {
        self.timeout_seconds
    }

    /// Whitespace-tokenized argv with placeholders substituted per token, so
    /// paths containing spaces stay one argument.
    pub fn argv(&self, apk: &Path, out: &Path) -> Vec<String> {
        let apk = apk.to_string_lossy();
        let out = out.to_string_lossy();
        self.command_template
            .split_whitespace()
            .map(|tok| tok.replace("{apk}", &apk).replace("{out}", &out))
            .collect()
    }
}

pub fn extract_apk(
    apk: &Path,
    workdir: &Path,
    spec: &DecompilerSpec,
) -> Result<SourceTree, IngestError> {
    let mut warnings = Vec::new();
    let unpacked = workdir.join("unpacked");
    let decompiled = workdir.join("decompiled");

    unpack_apk(apk, &unpacked, &mut warnings)?;

    if decompiled.exists() {
        fs::remove_dir_all(&decompiled).map_err(io_err(&decompiled))?;
    }
    fs::create_dir_all(&decompiled).map_err(io_err(&decompiled))?;
    run_decompiler(spec, apk, &decompiled, &workdir.join("decompiler.log"))?;

    let mut tree = SourceTree {
        root: workdir.to_path_buf(),
        files: Vec::new(),
        warnings,
    };
    collect_files(
        &mut tree,
        &decompiled,
        "decompiled/",
        &ExtensionFilter::default(),
    )?;
    // decompilers normally decode resources themselves; fall back to text
    // XML found in the raw archive when they did not
    if !tree.files.iter().any(|f| f.relative_path.ends_with(".xml")) {
        collect_files(
            &mut tree,
            &unpacked,
            "unpacked/",
            &ExtensionFilter::new(["xml"]),
        )?;
    }
    tree.sort();
    Ok(tree)
}

fn unpack_apk(apk: &Path, dest: &Path, warnings: &mut Vec<String>) -> Result<(), IngestError> {
    let mut magic = [0u8; 4];
    let mut file = File::open(apk).map_err(io_err(apk))?;
    let n = file.read(&mut magic).map_err(io_err(apk))?;
    if n < 4 || (magic != ZIP_MAGIC && magic != EMPTY_ZIP_MAGIC) {
        return Err(IngestError::NotAnApk {
            path: apk.to_path_buf(),
            reason: "missing ZIP signature".into(),
        });
    }
    let file = File::open(apk).map_err(io_err(apk))?;
    let mut archive = ZipArchive::new(file).map_err(|e| IngestError::NotAnApk {
        path: apk.to_path_buf(),
        reason: e.to_string(),
    })?;
    if archive.index_for_name("classes.dex").is_none() {
        warnings.push(format!("{}: no classes.dex entry", apk.display()));
    }

    if dest.exists() {
        fs::remove_dir_all(dest).map_err(io_err(dest))?;
    }
    fs::create_dir_all(dest).map_err(io_err(dest))?;
    for i in 0..archive.len() {
        let mut entry = archive.by_index(i).map_err(|e| IngestError::NotAnApk {
            path: apk.to_path_buf(),
            reason: e.to_string(),
        })?;
        let Some(name) = entry.enclosed_name() else {
            warnings.push(format!("unsafe archive entry `{}` skipped", entry.name()));
            continue;
        };
        let out = dest.join(name);
        if entry.is_dir() {
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            continue;
        }
        if let Some(parent) = out.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut writer = File::create(&out).map_err(io_err(&out))?;
        io::copy(&mut entry, &mut writer).map_err(io_err(&out))?;
    }
    Ok(())
}

fn run_decompiler(
    spec: &DecompilerSpec,
    apk: &Path,
    out: &Path,
    log: &Path,
) -> Result<(), IngestError> {
    let argv = spec.argv(apk, out);
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| IngestError::BadTemplate("empty command".into()))?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| IngestError::DecompilerSpawn {
            program: program.clone(),
            source,
        })?;

    let stdout = drain(child.stdout.take());
    let stderr = drain(child.stderr.take());
    let deadline = Instant::now() + Duration::from_secs(spec.timeout_seconds);
    let status: Option<ExitStatus> = loop {
        match child.try_wait().map_err(io_err(apk))? {
            Some(status) => break Some(status),
            None if Instant::now() >= deadline => {
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
            None => thread::sleep(Duration::from_millis(10)),
        }
    };
    let stdout = stdout.join().unwrap_or_default();
    let stderr = stderr.join().unwrap_or_default();

    let mut log_file = File::create(log).map_err(io_err(log))?;
    writeln!(log_file, "$ {}", argv.join(" ")).map_err(io_err(log))?;
    writeln!(
        log_file,
        "--- stdout ---\n{stdout}\n--- stderr ---\n{stderr}"
    )
    .map_err(io_err(log))?;

    match status {
        None => Err(IngestError::DecompilerTimeout(spec.timeout_seconds)),
        Some(s) if s.success() => Ok(()),
        Some(s) => Err(IngestError::DecompilerFailed {
            status: s.to_string(),
            stderr: stderr.trim_end().to_string(),
        }),
    }
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}
