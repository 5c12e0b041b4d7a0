//! Helpers shared by the integration tests: an independent backtracking
//! matcher used as oracle, synthetic corpus generation, and APK/decompiler
//! stubs.
#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hipaachecker::rule_catalog::Catalog;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Lit(char),
    AnyChars,
    AnyWs,
}

fn tokenize(raw: &str) -> Vec<Tok> {
    let chars: Vec<char> = raw.trim_end().chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '.' && chars.get(i + 1) == Some(&'*') {
            toks.push(Tok::AnyChars);
            i += 2;
        } else if chars[i] == '\\'
            && chars.get(i + 1) == Some(&'s')
            && chars.get(i + 2) == Some(&'*')
        {
            toks.push(Tok::AnyWs);
            i += 3;
        } else {
            toks.push(Tok::Lit(chars[i]));
            i += 1;
        }
    }
    toks
}

/// Character-by-character backtracking matcher. Columns are 1-based,
/// inclusive, counted in chars.
pub struct Oracle {
    toks: Vec<Tok>,
}

impl Oracle {
    pub fn new(raw: &str) -> Self {
        Oracle {
            toks: tokenize(raw),
        }
    }

    /// Smallest end (exclusive char index) of a match of toks[ti..] starting at li.
    fn min_end(
        &self,
        ti: usize,
        line: &[char],
        li: usize,
        memo: &mut HashMap<(usize, usize), Option<usize>>,
    ) -> Option<usize> {
        if ti == self.toks.len() {
            return Some(li);
        }
        if let Some(r) = memo.get(&(ti, li)) {
            return *r;
        }
        let r = match self.toks[ti] {
            Tok::Lit(c) => {
                if li < line.len() && line[li] == c {
                    self.min_end(ti + 1, line, li + 1, memo)
                } else {
                    None
                }
            }
            Tok::AnyChars => {
                let mut best: Option<usize> = None;
                for k in li..=line.len() {
                    if let Some(e) = self.min_end(ti + 1, line, k, memo) {
                        best = Some(best.map_or(e, |b: usize| b.min(e)));
                    }
                }
                best
            }
            Tok::AnyWs => {
                let mut best: Option<usize> = None;
                let mut k = li;
                loop {
                    if let Some(e) = self.min_end(ti + 1, line, k, memo) {
                        best = Some(best.map_or(e, |b: usize| b.min(e)));
                    }
                    if k < line.len() && (line[k] == ' ' || line[k] == '\t') {
                        k += 1;
                    } else {
                        break;
                    }
                }
                best
            }
        };
        memo.insert((ti, li), r);
        r
    }

    /// Leftmost match starting at char index >= from: (start, end_exclusive).
    fn find_from(&self, line: &[char], from: usize) -> Option<(usize, usize)> {
        let mut memo = HashMap::new();
        (from..line.len()).find_map(|s| self.min_end(0, line, s, &mut memo).map(|e| (s, e)))
    }

    /// (start_column, end_column) of the leftmost match.
    pub fn span(&self, line: &str) -> Option<(usize, usize)> {
        let chars: Vec<char> = line.chars().collect();
        self.find_from(&chars, 0).map(|(s, e)| (s + 1, e))
    }

    /// Non-overlapping left-to-right match count.
    pub fn count(&self, line: &str) -> usize {
        let chars: Vec<char> = line.chars().collect();
        let mut n = 0;
        let mut from = 0;
        while let Some((_, e)) = self.find_from(&chars, from) {
            n += 1;
            from = e;
        }
        n
    }

    /// All start columns (1-based) at which some match begins.
    pub fn all_starts(&self, line: &str) -> Vec<usize> {
        let chars: Vec<char> = line.chars().collect();
        let mut memo = HashMap::new();
        (0..chars.len())
            .filter(|&s| self.min_end(0, &chars, s, &mut memo).is_some())
            .map(|s| s + 1)
            .collect()
    }
}

/// (file, line, column, rule_id, sub_rule_id, pattern, occurrences)
pub type OracleRecord = (String, usize, usize, String, String, String, usize);

/// Oracle records for the given files, sorted like scanner output.
pub fn oracle_records(catalog: &Catalog, files: &[(String, Vec<String>)]) -> Vec<OracleRecord> {
    let oracles: Vec<_> = catalog
        .patterns()
        .map(|(_, rule, sub, raw)| {
            (
                rule.rule_id.clone(),
                sub.sub_rule_id.clone(),
                raw.to_string(),
                Oracle::new(raw),
            )
        })
        .collect();
    let mut out = Vec::new();
    let mut sorted: Vec<&(String, Vec<String>)> = files.iter().collect();
    sorted.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    for (file, lines) in sorted {
        for (i, line) in lines.iter().enumerate() {
            for (rule_id, sub_id, raw, oracle) in &oracles {
                if let Some((col, _)) = oracle.span(line) {
                    out.push((
                        file.clone(),
                        i + 1,
                        col,
                        rule_id.clone(),
                        sub_id.clone(),
                        raw.clone(),
                        oracle.count(line),
                    ));
                }
            }
        }
    }
    out
}

pub fn record_tuples(records: &[hipaachecker::MatchRecord]) -> Vec<OracleRecord> {
    records
        .iter()
        .map(|r| {
            (
                r.file.clone(),
                r.line_number,
                r.column,
                r.rule_id.clone(),
                r.sub_rule_id.clone(),
                r.pattern_text.clone(),
                r.occurrences,
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const NOISE_LINES: &[&str] = &[
    "package com.example.health;",
    "",
    "    int steps = counter.get();",
    "    // TODO refresh",
    "public class VitalsActivity extends AppCompatActivity {",
    "    private final String TAG = \"Vitals\";",
    "    }",
    "        Log.d(TAG, \"heart rate \" + bpm);",
    "\treturn result;",
    "    String key = \"Blowfish\"; // case differs from BLOWFISH",
    "    Cipher.getInstance (\"AES\");",
    "    primary key lowercase",
    "    SecretKeySpec spec;",
];

/// Text that matches `raw` exactly: wildcards are filled with random fillers.
pub fn instantiate(raw: &str, rng: &mut impl Rng) -> String {
    let any_fill = ["", "\"", "\"AES/CBC/", "x", " ", "\"Foo", "'", "cfg + \""];
    let ws_fill = ["", " ", "\t", "  ", " \t "];
    let mut out = String::new();
    let text = raw.trim_end();
    let mut rest = text;
    while !rest.is_empty() {
        if let Some(r) = rest.strip_prefix(".*") {
            out.push_str(any_fill.choose(rng).unwrap());
            rest = r;
        } else if let Some(r) = rest.strip_prefix("\\s*") {
            out.push_str(ws_fill.choose(rng).unwrap());
            rest = r;
        } else {
            let c = rest.chars().next().unwrap();
            out.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    out
}

/// Generates `n_files` files. Returns (relative path, lines) pairs and the
/// number of planted pattern instances.
pub fn synthetic_files(
    catalog: &Catalog,
    seed: u64,
    n_files: usize,
    plants_per_file: usize,
) -> (Vec<(String, Vec<String>)>, usize) {
    let mut rng = rng(seed);
    let raws: Vec<String> = catalog
        .patterns()
        .map(|(_, _, _, raw)| raw.to_string())
        .collect();
    let wildcard_raws: Vec<&String> = raws
        .iter()
        .filter(|r| r.contains(".*") || r.contains("\\s*"))
        .collect();
    let mut files = Vec::new();
    let mut planted = 0;
    for i in 0..n_files {
        let dir = [
            "app/src/main/java/com/ex",
            "app/src/main/res/values",
            "lib",
            "app",
        ][i % 4];
        let ext = ["java", "kt", "xml", "gradle"][i % 4];
        let path = format!("{dir}/F{i:03}.{ext}");
        let mut lines = Vec::new();
        for _ in 0..rng.gen_range(3..8) {
            lines.push(NOISE_LINES.choose(&mut rng).unwrap().to_string());
        }
        for p in 0..plants_per_file {
            // every third plant exercises a wildcard pattern
            let raw = if p % 3 == 0 {
                wildcard_raws.choose(&mut rng).unwrap().as_str()
            } else {
                raws.choose(&mut rng).unwrap().as_str()
            };
            let inst = instantiate(raw, &mut rng);
            let prefix = ["", "    ", "\t", "x = ", "// "].choose(&mut rng).unwrap();
            let suffix = ["", ";", " // note", ")", " + \"X\""]
                .choose(&mut rng)
                .unwrap();
            lines.push(format!("{prefix}{inst}{suffix}"));
            planted += 1;
            for _ in 0..rng.gen_range(0..3) {
                lines.push(NOISE_LINES.choose(&mut rng).unwrap().to_string());
            }
        }
        files.push((path, lines));
    }
    (files, planted)
}

pub fn write_files(root: &Path, files: &[(String, Vec<String>)]) {
    for (rel, lines) in files {
        let path = root.join(rel);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        let mut text = lines.join("\n");
        text.push('\n');
        fs::write(path, text).unwrap();
    }
}

/// One Java line per checkable rule, enough to satisfy every rule.
pub const ALL_RULES_JAVA: &[&str] = &[
    "package com.example.clinic;",
    "import android.accounts.AccountManager;",
    "public class Clinic {",
    "    void a() throws AuthorizationException, IllegalAccessException {}",
    "    static final String SQL = \"CREATE TABLE p (id INTEGER PRIMARY KEY)\";",
    "    @Override public void onUserInteraction() { timer.reset(); }",
    "    Cipher c = Cipher.getInstance(\"AES/CBC/PKCS5Padding\");",
    "    AppOpsManager.OnOpNotedCallback audit = null;",
    "    FirebaseAuth auth = FirebaseAuth.getInstance();",
    "    conn.addRequestProperty(\"Authorization\", token);",
    "    TrustManagerFactory tmf = TrustManagerFactory.getInstance(\"X509\");",
    "    String b = android.util.Base64.encodeToString(data, 0);",
    "}",
];

// ---------------------------------------------------------------------------
// APK + decompiler stubs
// ---------------------------------------------------------------------------

pub fn write_apk(path: &Path, with_dex: bool) {
    let file = fs::File::create(path).unwrap();
    let mut zip = zip::ZipWriter::new(file);
    let opts = zip::write::SimpleFileOptions::default();
    zip.start_file("AndroidManifest.xml", opts).unwrap();
    zip.write_all(b"\x03\x00\x08\x00binary-xml\x00\x00")
        .unwrap();
    if with_dex {
        zip.start_file("classes.dex", opts).unwrap();
        zip.write_all(b"dex\n035\x00").unwrap();
    }
    zip.start_file("res/raw/readme.txt", opts).unwrap();
    zip.write_all(b"not scanned").unwrap();
    zip.finish().unwrap();
}

/// Shell script that copies `sources` into `<out>/sources`. Returns the
/// decompiler template.
pub fn copying_decompiler(dir: &Path, sources: &Path) -> String {
    let script = dir.join("stub-decompiler.sh");
    fs::write(
        &script,
        format!(
            "#!/bin/sh\nset -e\nmkdir -p \"$2/sources\"\ncp -R '{}/.' \"$2/sources/\"\necho decompiled \"$1\"\n",
            sources.display()
        ),
    )
    .unwrap();
    format!("sh {} {{apk}} {{out}}", script.display())
}

pub fn failing_decompiler(dir: &Path) -> String {
    let script = dir.join("failing-decompiler.sh");
    fs::write(
        &script,
        "#!/bin/sh\necho 'ERROR: dex format not supported' >&2\nexit 1\n",
    )
    .unwrap();
    format!("sh {} {{apk}} {{out}}", script.display())
}

pub fn sleeping_decompiler(dir: &Path) -> String {
    let script = dir.join("sleeping-decompiler.sh");
    fs::write(&script, "#!/bin/sh\nexec sleep 5\n").unwrap();
    format!("sh {} {{apk}} {{out}}", script.display())
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_hipaachecker"))
}

// ---------------------------------------------------------------------------
// Ten-app corpus with hand-computed statistics
// ---------------------------------------------------------------------------

const AUD: &str = "AppOpsManager.OnOpNotedCallback cb;";
const PK: &str = "\"CREATE TABLE t (id INTEGER PRIMARY KEY)\"";
const PKIX: &str = "PKIXRevocationChecker rc;";
const REALM: &str = "import io.realm.Realm;";
const TM: &str = "import javax.net.ssl.TrustManager;";

/// (app_id, category, lines). Each planted line yields exactly one record.
pub const TEN_APPS: &[(&str, &str, &[&str])] = &[
    ("m1", "medical", &[AUD, PK, PK]),
    ("m2", "medical", &[AUD, PKIX]),
    ("m3", "medical", &[PK]),
    ("m4", "medical", &[REALM, REALM, REALM]),
    ("h1", "health_fitness", &[AUD]),
    ("h2", "health_fitness", &[TM]),
    ("h3", "health_fitness", &[]),
    ("h4", "health_fitness", &[PK, TM]),
    ("o1", "games", &[AUD, REALM]),
    ("o2", "other", &[PKIX, PKIX, PKIX]),
];

/// Hand-computed from the table above (18 records in total).
/// (rule_id, prevalence, match_share, medical, health_fitness, other)
pub const TEN_APP_EXPECTED: &[(&str, &str, &str, &str, &str, &str)] = &[
    ("Authorization", "0.0", "0.0", "0.0", "0.0", "0.0"),
    ("Unique_Id", "30.0", "22.2", "50.0", "25.0", "0.0"),
    ("Emergency_EPHI_Access", "", "0.0", "", "", ""),
    (
        "Automatic_Session_Timeout",
        "0.0",
        "0.0",
        "0.0",
        "0.0",
        "0.0",
    ),
    (
        "EPHI_encryption_decryption",
        "0.0",
        "0.0",
        "0.0",
        "0.0",
        "0.0",
    ),
    ("EPHI_Audit_Control", "40.0", "22.2", "50.0", "25.0", "50.0"),
    ("EPHI_data_integrity", "0.0", "0.0", "0.0", "0.0", "0.0"),
    (
        "EPHI_integrity_verification",
        "0.0",
        "0.0",
        "0.0",
        "0.0",
        "0.0",
    ),
    ("EPHI_authentication", "0.0", "0.0", "0.0", "0.0", "0.0"),
    (
        "EPHI_Transmission_Security",
        "20.0",
        "22.2",
        "25.0",
        "0.0",
        "50.0",
    ),
    (
        "EPHI_Transmission_integrity",
        "20.0",
        "11.1",
        "0.0",
        "50.0",
        "0.0",
    ),
    (
        "Appropriate_EPHI_Encryption",
        "20.0",
        "22.2",
        "25.0",
        "0.0",
        "50.0",
    ),
];

pub const TEN_APP_RECORDS: usize = 18;

/// Writes the ten apps under `root/apps/<id>/` and returns the manifest path
/// (relative app paths).
pub fn write_ten_app_corpus(root: &Path) -> PathBuf {
    let mut manifest = String::from("app_id,category,kind,path\n");
    for (id, cat, lines) in TEN_APPS {
        let mut body = vec![
            "package com.example;".to_string(),
            "class App {".to_string(),
        ];
        body.extend(lines.iter().map(|l| format!("    {l}")));
        body.push("}".to_string());
        write_files(
            &root.join("apps").join(id),
            &[("src/App.java".to_string(), body)],
        );
        manifest.push_str(&format!("{id},{cat},source,apps/{id}\n"));
    }
    let path = root.join("manifest.csv");
    fs::write(&path, manifest).unwrap();
    path
}

/// The CSV that the ten-app corpus must produce, assembled from
/// [`TEN_APP_EXPECTED`].
pub fn ten_app_expected_csv() -> String {
    let mut out = String::from("metric,category,rule_id,value\n");
    for (col, cat) in [(4, "health_fitness"), (3, "medical"), (5, "other")] {
        for row in TEN_APP_EXPECTED {
            let v = [row.0, row.1, row.2, row.3, row.4, row.5][col];
            out.push_str(&format!("category_prevalence,{cat},{},{v}\n", row.0));
        }
    }
    for row in TEN_APP_EXPECTED {
        out.push_str(&format!("match_share,,{},{}\n", row.0, row.2));
    }
    for row in TEN_APP_EXPECTED {
        out.push_str(&format!("prevalence,,{},{}\n", row.0, row.1));
    }
    out
}
