//! Single-line pattern matcher for catalog detection patterns.
//!
//! A raw pattern is literal text with two wildcard tokens: `.*` (any run of
//! characters on the same line) and `\s*` (any run of spaces or tabs).
//! Everything else, including `.`, `(`, `"` and `$`, is matched literally and
//! case-sensitively.

use std::ops::Range;

use aho_corasick::AhoCorasick;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rule_catalog::Catalog;

const ANY_CHARS_TOKEN: &str = ".*";
const ANY_WHITESPACE_TOKEN: &str = "\\s*";

/// Catalog coordinates of one pattern: (rule, sub-rule, pattern) indices.
/// Ordering is catalog order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatternKey {
    pub rule: usize,
    pub sub_rule: usize,
    pub pattern: usize,
}

impl PatternKey {
    pub fn new(rule: usize, sub_rule: usize, pattern: usize) -> Self {
        PatternKey {
            rule,
            sub_rule,
            pattern,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gap {
    AnyChars,
    AnyWhitespace,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatternError {
    #[error("pattern is empty")]
    EmptyPattern,
    #[error("two wildcard tokens with no literal text between them")]
    AdjacentWildcards,
    #[error("pattern starts or ends with a wildcard token")]
    LeadingOrTrailingWildcard,
}

/// 1-based, inclusive character columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct MatchSpan {
    pub start_column: usize,
    pub end_column: usize,
}

impl MatchSpan {
    fn from_bytes(line: &str, range: Range<usize>) -> MatchSpan {
        let start_column = line[..range.start].chars().count() + 1;
        let width = line[range].chars().count();
        MatchSpan {
            start_column,
            end_column: start_column + width - 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledPattern {
    segments: Vec<String>,
    gaps: Vec<Gap>,
    source_text: String,
    key: PatternKey,
}

pub fn compile_pattern(raw: &str, key: PatternKey) -> Result<CompiledPattern, PatternError> {
    let text = raw.trim_end();
    if text.is_empty() {
        return Err(PatternError::EmptyPattern);
    }

    let mut segments = Vec::new();
    let mut gaps = Vec::new();
    let mut literal = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        let gap = if rest.starts_with(ANY_CHARS_TOKEN) {
            Some((Gap::AnyChars, ANY_CHARS_TOKEN.len()))
        } else if rest.starts_with(ANY_WHITESPACE_TOKEN) {
            Some((Gap::AnyWhitespace, ANY_WHITESPACE_TOKEN.len()))
        } else {
            None
        };
        match gap {
            Some((gap, len)) => {
                if literal.is_empty() {
                    return Err(if segments.is_empty() {
                        PatternError::LeadingOrTrailingWildcard
                    } else {
                        PatternError::AdjacentWildcards
                    });
                }
                segments.push(std::mem::take(&mut literal));
                gaps.push(gap);
                rest = &rest[len..];
            }
            None => {
                literal.push(c);
                rest = &rest[c.len_utf8()..];
            }
        }
    }
    if literal.is_empty() {
        return Err(PatternError::LeadingOrTrailingWildcard);
    }
    segments.push(literal);

    Ok(CompiledPattern {
        segments,
        gaps,
        source_text: raw.to_string(),
        key,
    })
}

impl CompiledPattern {
    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn gaps(&self) -> &[Gap] {
        &self.gaps
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    pub fn key(&self) -> PatternKey {
        self.key
    }

    /// Leftmost match starting at or after byte offset `from`. Among matches
    /// with that start, the one ending earliest.
    pub fn find_at(&self, line: &str, from: usize) -> Option<Range<usize>> {
        let first = &self.segments[0];
        let mut search = from;
        while search <= line.len() {
            let start = search + line[search..].find(first.as_str())?;
            if let Some(end) = self.match_rest(line, start + first.len()) {
                return Some(start..end);
            }
            search = start + line[start..].chars().next().map_or(1, char::len_utf8);
        }
        None
    }

    /// Given the end of the first segment, returns the smallest end offset
    /// reachable through the remaining gaps and segments.
    fn match_rest(&self, line: &str, pos: usize) -> Option<usize> {
        // Every end offset the matched prefix can have, ascending and unique.
        let mut frontier = vec![pos];
        let bytes = line.as_bytes();
        for (gap, seg) in self.gaps.iter().zip(&self.segments[1..]) {
            let mut next = Vec::new();
            match gap {
                Gap::AnyChars => {
                    // the smallest offset dominates: any later placement is
                    // also reachable from it
                    let from = frontier[0];
                    let mut at = from;
                    while let Some(off) = line[at..].find(seg.as_str()) {
                        let s = at + off;
                        next.push(s + seg.len());
                        at = s + line[s..].chars().next().map_or(1, char::len_utf8);
                        if at > line.len() {
                            break;
                        }
                    }
                }
                Gap::AnyWhitespace => {
                    for &r in &frontier {
                        let mut q = r;
                        loop {
                            if line[q..].starts_with(seg.as_str()) {
                                next.push(q + seg.len());
                            }
                            if q < bytes.len() && (bytes[q] == b' ' || bytes[q] == b'\t') {
                                q += 1;
                            } else {
                                break;
                            }
                        }
                    }
                    next.sort_unstable();
                    next.dedup();
                }
            }
            if next.is_empty() {
                return None;
            }
            frontier = next;
        }
        frontier.first().copied()
    }

    pub fn match_line(&self, line: &str) -> Option<MatchSpan> {
        self.find_at(line, 0)
            .map(|r| MatchSpan::from_bytes(line, r))
    }

    /// Leftmost span plus the number of non-overlapping matches on the line.
    pub fn match_line_counted(&self, line: &str) -> Option<(MatchSpan, usize)> {
        let first = self.find_at(line, 0)?;
        let span = MatchSpan::from_bytes(line, first.clone());
        let mut count = 1;
        let mut from = first.end;
        while let Some(r) = self.find_at(line, from) {
            count += 1;
            from = r.end;
        }
        Some((span, count))
    }
}

pub fn match_line(p: &CompiledPattern, line: &str) -> Option<MatchSpan> {
    p.match_line(line)
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{rule_id}/{sub_rule_id} pattern #{index} `{pattern}`: {source}")]
pub struct MatcherError {
    pub rule_id: String,
    pub sub_rule_id: String,
    pub index: usize,
    pub pattern: String,
    pub source: PatternError,
}

#[derive(Debug, Clone)]
struct Entry {
    pattern: CompiledPattern,
    rule_id: String,
    sub_rule_id: String,
    /// Indices into the prefilter's literal table.
    literals: Vec<usize>,
}

/// One pattern hit on a line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineHit {
    pub key: PatternKey,
    pub span: MatchSpan,
    pub occurrences: usize,
}

/// All patterns of a catalog, with a multi-literal prefilter: a pattern is
/// only verified on a line that contains every one of its literal segments.
#[derive(Debug, Clone)]
pub struct MultiMatcher {
    entries: Vec<Entry>,
    prefilter: Option<AhoCorasick>,
    literal_count: usize,
}

pub fn build_matcher(c: &Catalog) -> Result<MultiMatcher, MatcherError> {
    let mut literals: Vec<String> = Vec::new();
    let mut entries = Vec::new();
    for (key, rule, sub, raw) in c.patterns() {
        let pattern = compile_pattern(raw, key).map_err(|source| MatcherError {
            rule_id: rule.rule_id.clone(),
            sub_rule_id: sub.sub_rule_id.clone(),
            index: key.pattern,
            pattern: raw.to_string(),
            source,
        })?;
        let mut ids: Vec<usize> = pattern
            .segments()
            .iter()
            .map(|seg| match literals.iter().position(|l| l == seg) {
                Some(i) => i,
                None => {
                    literals.push(seg.clone());
                    literals.len() - 1
                }
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        entries.push(Entry {
            pattern,
            rule_id: rule.rule_id.clone(),
            sub_rule_id: sub.sub_rule_id.clone(),
            literals: ids,
        });
    }
    let prefilter = if literals.is_empty() {
        None
    } else {
        Some(AhoCorasick::new(&literals).expect("literal set builds"))
    };
    Ok(MultiMatcher {
        entries,
        prefilter,
        literal_count: literals.len(),
    })
}

impl MultiMatcher {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn patterns(&self) -> impl Iterator<Item = &CompiledPattern> {
        self.entries.iter().map(|e| &e.pattern)
    }

    /// Rule id, sub-rule id and raw text for a pattern key.
    pub fn describe(&self, key: PatternKey) -> Option<(&str, &str, &str)> {
        self.entries
            .binary_search_by(|e| e.pattern.key.cmp(&key))
            .ok()
            .map(|i| {
                let e = &self.entries[i];
                (
                    e.rule_id.as_str(),
                    e.sub_rule_id.as_str(),
                    e.pattern.source_text(),
                )
            })
    }

    /// Every pattern matching `line`, in catalog order, with leftmost span and
    /// non-overlapping occurrence count.
    pub fn scan_line_counted(&self, line: &str) -> Vec<LineHit> {
        let Some(prefilter) = &self.prefilter else {
            return Vec::new();
        };
        if line.is_empty() {
            return Vec::new();
        }
        let mut present = vec![false; self.literal_count];
        let mut any = false;
        for m in prefilter.find_overlapping_iter(line) {
            present[m.pattern().as_usize()] = true;
            any = true;
        }
        if !any {
            return Vec::new();
        }
        self.entries
            .iter()
            .filter(|e| e.literals.iter().all(|&i| present[i]))
            .filter_map(|e| {
                e.pattern
                    .match_line_counted(line)
                    .map(|(span, occurrences)| LineHit {
                        key: e.pattern.key,
                        span,
                        occurrences,
                    })
            })
            .collect()
    }

    pub fn scan_line(&self, line: &str) -> Vec<(PatternKey, MatchSpan)> {
        self.scan_line_counted(line)
            .into_iter()
            .map(|h| (h.key, h.span))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rule_catalog::{builtin_catalog, load_catalog};

    fn key() -> PatternKey {
        PatternKey::new(0, 0, 0)
    }

    fn compile(raw: &str) -> CompiledPattern {
        compile_pattern(raw, key()).unwrap()
    }

    #[test]
    fn compile_examples() {
        let p = compile(".getInstance(.*MD5");
        assert_eq!(p.segments(), [".getInstance(", "MD5"]);
        assert_eq!(p.gaps(), [Gap::AnyChars]);

        let p = compile("PRIMARY KEY");
        assert_eq!(p.segments(), ["PRIMARY KEY"]);
        assert!(p.gaps().is_empty());

        let p = compile("Cipher.getInstance(\\s*\"\\s*AES/ECB");
        assert_eq!(p.segments(), ["Cipher.getInstance(", "\"", "AES/ECB"]);
        assert_eq!(p.gaps(), [Gap::AnyWhitespace, Gap::AnyWhitespace]);
    }

    #[test]
    fn compile_errors() {
        assert_eq!(compile_pattern("", key()), Err(PatternError::EmptyPattern));
        assert_eq!(
            compile_pattern("   ", key()),
            Err(PatternError::EmptyPattern)
        );
        assert_eq!(
            compile_pattern(".*abc", key()),
            Err(PatternError::LeadingOrTrailingWildcard)
        );
        assert_eq!(
            compile_pattern("abc\\s*", key()),
            Err(PatternError::LeadingOrTrailingWildcard)
        );
        assert_eq!(
            compile_pattern("a.*\\s*b", key()),
            Err(PatternError::AdjacentWildcards)
        );
        assert_eq!(
            compile_pattern("a.*.*b", key()),
            Err(PatternError::AdjacentWildcards)
        );
    }

    #[test]
    fn trailing_whitespace_is_trimmed_and_lone_tokens_are_literal() {
        let p = compile("Cipher.getInstance(AES_MODE ");
        assert_eq!(p.segments(), ["Cipher.getInstance(AES_MODE"]);
        let p = compile("net.sqlcipher.");
        assert_eq!(p.segments(), ["net.sqlcipher."]);
        let p = compile("a\\sb*");
        assert_eq!(p.segments(), ["a\\sb*"]);
    }

    #[test]
    fn match_examples() {
        let p = compile(".getInstance(.*RC4");
        let line = "Cipher.getInstance(\"RC4\");";
        let span = p.match_line(line).unwrap();
        assert_eq!(
            span,
            MatchSpan {
                start_column: 7,
                end_column: 23
            }
        );
        assert_eq!(&line[6..23], ".getInstance(\"RC4");

        assert_eq!(
            compile(".getInstance(.*BLOWFISH").match_line("Cipher.getInstance(\"Blowfish\")"),
            None
        );
        assert_eq!(compile("PRIMARY KEY").match_line(""), None);
    }

    #[test]
    fn whitespace_gap_needs_backtracking() {
        let p = compile("A.*B\\s*C");
        // first B is followed by `x`, the second by spaces then C
        let span = p.match_line("A B x B  C").unwrap();
        assert_eq!(
            span,
            MatchSpan {
                start_column: 1,
                end_column: 10
            }
        );
        assert_eq!(p.match_line("A B x B x C"), None);
        let ecb = compile("Cipher.getInstance(\\s*\"\\s*AES/ECB");
        assert!(ecb
            .match_line("Cipher.getInstance( \t\" AES/ECB/PKCS5Padding\")")
            .is_some());
        assert!(ecb.match_line("Cipher.getInstance(\"AES/ECB\")").is_some());
        assert!(ecb
            .match_line("Cipher.getInstance(mode + \"AES/ECB\")")
            .is_none());
    }

    #[test]
    fn columns_count_characters() {
        let p = compile("KEY");
        assert_eq!(
            p.match_line("é KEY"),
            Some(MatchSpan {
                start_column: 3,
                end_column: 5
            })
        );
    }

    #[test]
    fn occurrence_count() {
        let p = compile("PRIMARY KEY");
        let (span, n) = p
            .match_line_counted("id PRIMARY KEY, x PRIMARY KEY")
            .unwrap();
        assert_eq!(span.start_column, 4);
        assert_eq!(n, 2);
        let p = compile("aa");
        assert_eq!(p.match_line_counted("aaaa").unwrap().1, 2);
    }

    #[test]
    fn scan_line_examples() {
        let c = builtin_catalog();
        let m = build_matcher(&c).unwrap();
        assert_eq!(m.len(), 70);

        let hits = m.scan_line("import java.security.MessageDigest;");
        let described: Vec<_> = hits.iter().map(|(k, _)| m.describe(*k).unwrap()).collect();
        assert_eq!(
            described,
            vec![
                (
                    "EPHI_encryption_decryption",
                    "Message Digest",
                    "MessageDigest"
                ),
                (
                    "EPHI_encryption_decryption",
                    "Message Digest",
                    "import java.security.MessageDigest;"
                ),
            ]
        );

        assert!(m.scan_line("int x = 1;").is_empty());

        let hits = m.scan_line("new SecretKeySpec(keyBytes, \"AES\"");
        assert_eq!(hits.len(), 1);
        assert_eq!(m.describe(hits[0].0).unwrap().1, "AES");
    }

    #[test]
    fn single_pattern_matcher_agrees() {
        let c =
            load_catalog("[rule] R ref=164.312(b)\n[subrule] \"S\"\npattern: get(.*x\n").unwrap();
        let m = build_matcher(&c).unwrap();
        let p = compile("get(.*x");
        for line in ["get(x", "get( y x", "xget(", "", "get(get(x"] {
            let expected: Vec<_> = p.match_line(line).into_iter().map(|s| (key(), s)).collect();
            assert_eq!(m.scan_line(line), expected, "{line}");
        }
    }

    #[test]
    fn bad_pattern_reports_coordinates() {
        let c =
            load_catalog("[rule] R ref=164.312(b)\n[subrule] \"S\"\npattern: ok\npattern: x.*\n")
                .unwrap();
        let err = build_matcher(&c).unwrap_err();
        assert_eq!(err.index, 1);
        assert_eq!(err.sub_rule_id, "S");
        assert_eq!(err.source, PatternError::LeadingOrTrailingWildcard);
    }
}
