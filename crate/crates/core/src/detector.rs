//! Detector for a streaming bug where a chat response repeats growing
//! prefixes of itself, one per line:
//!
//! ```text
//! Now I
//! Now I need to updat
//! Now I need to update this.
//! ```
//!
//! A straight port of the reference heuristic. Lengths and indices are in
//! Unicode scalar values, so results match a `str`-based implementation on
//! non-ASCII text.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::exec::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub min_chain: usize,
    pub min_seed_len: usize,
    pub max_seed_len: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            min_chain: 3,
            min_seed_len: 2,
            max_seed_len: 50,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_seed_len == 0 || self.min_seed_len > self.max_seed_len || self.min_chain < 2 {
            return Err("need 0 < min_seed_len ≤ max_seed_len and min_chain ≥ 2".into());
        }
        Ok(())
    }
}

/// Texts shorter than this are never flagged.
const MIN_TEXT_LEN: usize = 10;

pub fn find_prefix_chain(text: &str) -> Option<(usize, String)> {
    find_prefix_chain_with(text, &DetectorConfig::default())
}

/// The seed is the first line; the text is cut before every later line that
/// starts with the seed; the leading chunks must each be a strict prefix of
/// the next.
pub fn find_prefix_chain_with(text: &str, cfg: &DetectorConfig) -> Option<(usize, String)> {
    if text.chars().count() < MIN_TEXT_LEN {
        return None;
    }
    let first_nl = text.find('\n')?;
    let seed = &text[..first_nl];
    let seed_len = seed.chars().count();
    if seed_len < cfg.min_seed_len || seed_len > cfg.max_seed_len {
        return None;
    }
    let needle = format!("\n{seed}");
    let mut starts = vec![0];
    let mut pos = 0;
    while let Some(i) = text[pos..].find(&needle) {
        let idx = pos + i;
        starts.push(idx + 1);
        pos = idx + 1;
    }
    if starts.len() < cfg.min_chain {
        return None;
    }
    let ends = starts[1..].iter().map(|s| s - 1).chain(std::iter::once(text.len()));
    let chunks: Vec<&str> = starts.iter().zip(ends).map(|(&s, e)| &text[s..e]).collect();
    let mut chain = 1;
    for w in chunks.windows(2) {
        let (cur, nxt) = (w[0], w[1]);
        if cur.len() < nxt.len() && nxt.starts_with(cur) {
            chain += 1;
        } else {
            break;
        }
    }
    (chain >= cfg.min_chain).then(|| (chain, seed.to_string()))
}

/// Contents of each `<think>` block, leading newlines removed. An unclosed
/// block runs to the end of the text.
pub fn iter_think_blocks(text: &str) -> impl Iterator<Item = &str> {
    const OPEN: &str = "<think>";
    const CLOSE: &str = "</think>";
    let mut pos = Some(0);
    std::iter::from_fn(move || {
        let p = pos?;
        let open = p + text[p..].find(OPEN)?;
        let body = open + OPEN.len();
        match text[open..].find(CLOSE) {
            Some(c) => {
                let close = open + c;
                pos = Some(close + CLOSE.len());
                Some(text[body..close].trim_start_matches('\n'))
            }
            None => {
                pos = None;
                Some(text[body..].trim_start_matches('\n'))
            }
        }
    })
}

pub fn has_prefix_streaming_bug(chat_response: &str) -> bool {
    has_prefix_streaming_bug_with(chat_response, &DetectorConfig::default())
}

pub fn has_prefix_streaming_bug_with(chat_response: &str, cfg: &DetectorConfig) -> bool {
    iter_think_blocks(chat_response).any(|b| find_prefix_chain_with(b, cfg).is_some())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanReport {
    /// `.json` files found.
    pub total: usize,
    /// Files with a top-level string `response`.
    pub parsed: usize,
    pub matching: usize,
    pub matching_files: Vec<String>,
    pub errors: Vec<String>,
}

enum FileResult {
    Hit(bool),
    Skip(String),
}

/// Scans every `.json` file under `dir` (recursively, in path order).
pub fn scan_dir(dir: &Path, cfg: &DetectorConfig, exec: Exec) -> std::io::Result<ScanReport> {
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e == "json") {
            files.push(entry.into_path());
        }
    }
    let results = exec::map_slice(exec, &files, |path| {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return FileResult::Skip(e.to_string()),
        };
        match serde_json::from_str::<serde_json::Value>(&text) {
            Ok(v) => match v.get("response").and_then(|r| r.as_str()) {
                Some(r) => FileResult::Hit(has_prefix_streaming_bug_with(r, cfg)),
                None => FileResult::Skip("no string \"response\" field".into()),
            },
            Err(e) => FileResult::Skip(e.to_string()),
        }
    });
    let mut report = ScanReport {
        total: files.len(),
        ..Default::default()
    };
    for (path, r) in files.iter().zip(results) {
        let name = path.strip_prefix(dir).unwrap_or(path).display().to_string();
        match r {
            FileResult::Hit(hit) => {
                report.parsed += 1;
                if hit {
                    report.matching += 1;
                    report.matching_files.push(name);
                }
            }
            FileResult::Skip(e) => report.errors.push(format!("{name}: {e}")),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SNIPPET: &str =
        "Now I\nNow I need to updat\nNow I need to update this.\nNow I need to update this. I ha\nNow I need to update this. I have the";

    /// Independent reference: character vectors, naive matching at every
    /// index, trying every admissible seed length.
    fn oracle(text: &str, cfg: &DetectorConfig) -> Option<(usize, String)> {
        let t: Vec<char> = text.chars().collect();
        if t.len() < MIN_TEXT_LEN {
            return None;
        }
        for l in cfg.min_seed_len..=cfg.max_seed_len.min(t.len()) {
            let nl = t.iter().position(|&c| c == '\n');
            if nl != Some(l) {
                continue;
            }
            let seed = &t[..l];
            let mut starts = vec![0];
            for i in 0..t.len() {
                if t[i] == '\n' && t[i + 1..].starts_with(seed) && i > 0 {
                    starts.push(i + 1);
                }
            }
            if starts.len() < cfg.min_chain {
                return None;
            }
            let mut bounds = starts.clone();
            bounds.push(t.len() + 1);
            let chunks: Vec<&[char]> = (0..starts.len()).map(|k| &t[bounds[k]..bounds[k + 1] - 1]).collect();
            let chain = 1 + chunks
                .windows(2)
                .take_while(|w| w[0].len() < w[1].len() && &w[1][..w[0].len()] == w[0])
                .count();
            return (chain >= cfg.min_chain).then(|| (chain, seed.iter().collect()));
        }
        None
    }

    fn oracle_bug(text: &str) -> bool {
        let mut out = false;
        let mut rest = text;
        while let Some(o) = rest.find("<think>") {
            let (body, next) = match rest[o..].find("</think>") {
                Some(c) => (&rest[o + 7..o + c], Some(o + c + 8)),
                None => (&rest[o + 7..], None),
            };
            out |= oracle(body.trim_start_matches('\n'), &DetectorConfig::default()).is_some();
            match next {
                Some(n) => rest = &rest[n..],
                None => break,
            }
        }
        out
    }

    #[test]
    fn snippet_examples() {
        assert_eq!(find_prefix_chain(SNIPPET), Some((5, "Now I".to_string())));
        assert!(has_prefix_streaming_bug(&format!(
            "intro <think>\n{SNIPPET}</think> done"
        )));
        assert!(!has_prefix_streaming_bug(SNIPPET));
        assert_eq!(find_prefix_chain("Now I\nNow"), None);
        assert_eq!(find_prefix_chain("a\na b\na b c\na b c d"), None);
        assert_eq!(find_prefix_chain("ab\nab c\nab c d"), Some((3, "ab".into())));
        // a repeated line is not a strict extension
        assert_eq!(find_prefix_chain("ab\nab c\nab c\nab c d"), None);
        let long_seed = "x".repeat(51);
        assert_eq!(
            find_prefix_chain(&format!("{long_seed}\n{long_seed}1\n{long_seed}12")),
            None
        );
    }

    #[test]
    fn think_block_examples() {
        assert_eq!(iter_think_blocks("no tags").count(), 0);
        assert_eq!(
            iter_think_blocks("<think>a</think><think>b</think>").collect::<Vec<_>>(),
            ["a", "b"]
        );
        assert_eq!(iter_think_blocks("<think>abc").collect::<Vec<_>>(), ["abc"]);
        assert_eq!(
            iter_think_blocks("<think>\n\nx\n</think>tail<think>").collect::<Vec<_>>(),
            ["x\n", ""]
        );
    }

    #[test]
    fn stutter_variant_is_not_flagged() {
        let t = "Now I\nNow I need\nNow I need to check\nNow I need to check\nNow I need to check";
        // two growth steps make a chain of three; one step does not
        assert_eq!(find_prefix_chain(t), Some((3, "Now I".into())));
        let stutter = "Now I\nNow I need\nNow I need\nNow I need\nNow I need";
        assert_eq!(find_prefix_chain(stutter), None);
        assert_eq!(oracle(stutter, &DetectorConfig::default()), None);
    }

    #[test]
    fn counts_are_in_characters() {
        // 9 characters but more than 10 bytes
        assert_eq!(find_prefix_chain("éé\néé\néé"), None);
        // seed of 2 characters, 4 bytes
        assert_eq!(find_prefix_chain("日本\n日本語\n日本語だ"), Some((3, "日本".into())));
    }

    fn transcript() -> impl Strategy<Value = String> {
        let line = prop_oneof![
            "[ab]{0,4}",
            "[ab é]{0,6}",
            Just("Now I".to_string()),
            Just("<think>".to_string()),
            Just("</think>".to_string()),
        ];
        let chain = ("[ab]{1,3}", prop::collection::vec("[ab ]{1,3}", 1..6)).prop_map(|(seed, parts)| {
            let mut lines = vec![seed.clone()];
            let mut cur = seed;
            for p in parts {
                cur.push_str(&p);
                lines.push(cur.clone());
            }
            lines.join("\n")
        });
        let stutter = ("[ab]{2,3}", "[ab]{1,2}", 1usize..5).prop_map(|(seed, ext, n)| {
            let grown = format!("{seed}{ext}");
            let mut lines = vec![seed, grown.clone()];
            lines.extend(std::iter::repeat_n(grown, n));
            lines.join("\n")
        });
        let block = prop::collection::vec(prop_oneof![line, chain, stutter], 0..6).prop_map(|v| v.join("\n"));
        prop::collection::vec((block, any::<bool>(), any::<bool>()), 0..4).prop_map(|parts| {
            parts
                .into_iter()
                .map(|(b, open, close)| {
                    format!(
                        "{}{}{}",
                        if open { "<think>\n" } else { "" },
                        b,
                        if close { "</think>" } else { "" }
                    )
                })
                .collect::<Vec<_>>()
                .join("x")
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn agrees_with_oracle(t in transcript()) {
            let cfg = DetectorConfig::default();
            prop_assert_eq!(find_prefix_chain(&t), oracle(&t, &cfg));
            for b in iter_think_blocks(&t) {
                prop_assert_eq!(find_prefix_chain(b), oracle(b, &cfg));
            }
            prop_assert_eq!(has_prefix_streaming_bug(&t), oracle_bug(&t));
        }

        #[test]
        fn appending_never_clears_a_detection(t in transcript(), suffix in "[ab\n ]{0,12}") {
            if let Some((chain, seed)) = find_prefix_chain(&t) {
                let (c2, s2) = find_prefix_chain(&format!("{t}{suffix}")).unwrap();
                prop_assert!(c2 >= chain);
                prop_assert_eq!(s2, seed);
            }
        }
    }

    #[test]
    fn scan_counts_matching_files() {
        let dir = tempfile::tempdir().unwrap();
        let write =
            |name: &str, body: serde_json::Value| std::fs::write(dir.path().join(name), body.to_string()).unwrap();
        write(
            "a.json",
            serde_json::json!({ "response": format!("<think>{SNIPPET}</think>") }),
        );
        write("b.json", serde_json::json!({ "response": "<think>fine</think>" }));
        write("c.json", serde_json::json!({ "other": 1 }));
        std::fs::write(dir.path().join("d.json"), "{").unwrap();
        std::fs::write(dir.path().join("e.txt"), "ignored").unwrap();
        for exec in [Exec::Sequential, Exec::Parallel] {
            let r = scan_dir(dir.path(), &DetectorConfig::default(), exec).unwrap();
            assert_eq!((r.total, r.parsed, r.matching), (4, 2, 1));
            assert_eq!(r.matching_files, vec!["a.json"]);
            assert_eq!(r.errors.len(), 2);
        }
    }
}
