use std::fs;
use std::path::Path;

use log::warn;

use crate::corpus::{StoryExample, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct IngestResult {
    pub examples: Vec<StoryExample>,
    pub skipped: usize,
}

fn split_line<'a>(line: &'a str, path: &Path, lineno: usize) -> Result<(&'a str, &'a str)> {
    let mut parts = line.splitn(3, '\t');
    let prompt = parts.next().unwrap_or_default();
    let target = parts.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        msg: "expected prompt<TAB>target".into(),
    })?;
    if parts.next().is_some() {
        return Err(Error::Parse { path: path.to_path_buf(), line: lineno, msg: "more than one tab".into() });
    }
    Ok((prompt, target))
}

/// Reads a UTF-8 file with one `prompt<TAB>target` pair per line. Unknown
/// words become UNK; examples that overflow the `m`/`n - m` slot budgets are
/// skipped and counted. Blank lines are ignored.
pub fn ingest_text_corpus(
    path: &Path,
    vocab: &Vocabulary,
    m: usize,
    n: usize,
    append_eos: bool,
) -> Result<IngestResult> {
    if m == 0 || m >= n {
        return Err(Error::Config(format!("slot split m={m} n={n}")));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut skipped = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (p, t) = split_line(line, path, i + 1)?;
        let ex = StoryExample::from_text(vocab, p, t, append_eos);
        if ex.fits(m, n) {
            examples.push(ex);
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        warn!("{}: skipped {skipped} over-budget examples", path.display());
    }
    Ok(IngestResult { examples, skipped })
}

/// Writes examples in the ingestion format using their raw text.
pub fn write_corpus_file(path: &Path, examples: &[StoryExample]) -> Result<()> {
    let mut out = String::new();
    for e in examples {
        if e.raw_text.0.contains(['\t', '\n']) || e.raw_text.1.contains(['\t', '\n']) {
            return Err(Error::Invalid("raw text contains a tab or newline".into()));
        }
        out.push_str(&e.raw_text.0);
        out.push('\t');
        out.push_str(&e.raw_text.1);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a corpus file written by [`write_corpus_file`]; every line must fit.
pub fn read_corpus_file(
    path: &Path,
    vocab: &Vocabulary,
    m: usize,
    n: usize,
    append_eos: bool,
) -> Result<Vec<StoryExample>> {
    let r = ingest_text_corpus(path, vocab, m, n, append_eos)?;
    if r.skipped > 0 {
        return Err(Error::Invalid(format!("{}: {} examples exceed slot budgets", path.display(), r.skipped)));
    }
    Ok(r.examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::UNK;
    use std::io::Write;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["a", "b", "c", "d"])
    }

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn single_line() {
        let f = file("a b\tc d\n");
        let r = ingest_text_corpus(f.path(), &vocab(), 4, 8, false).unwrap();
        assert_eq!(r.examples.len(), 1);
        let v = vocab();
        assert_eq!(r.examples[0].prompt, vec![v.id("a"), v.id("b")]);
        assert_eq!(r.examples[0].target, vec![v.id("c"), v.id("d")]);
    }

    #[test]
    fn unknown_word_is_unk() {
        let f = file("a zebra\tc\n");
        let r = ingest_text_corpus(f.path(), &vocab(), 4, 8, false).unwrap();
        assert_eq!(r.examples[0].prompt[1], UNK);
    }

    #[test]
    fn missing_tab_reports_line() {
        let f = file("a\tb\nno tab here\n");
        let err = ingest_text_corpus(f.path(), &vocab(), 4, 8, false).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(ingest_text_corpus(Path::new("/nonexistent/x.tsv"), &vocab(), 4, 8, false).is_err());
    }

    #[test]
    fn over_budget_lines_are_counted() {
        let mut s = String::new();
        for i in 0..100 {
            if i % 14 == 3 && i < 98 {
                s.push_str("a a a a a\tb\n");
            } else {
                s.push_str("a b\tc d\n");
            }
        }
        assert_eq!(s.lines().filter(|l| l.starts_with("a a a a a")).count(), 7);
        let f = file(&s);
        let r = ingest_text_corpus(f.path(), &vocab(), 4, 8, false).unwrap();
        assert_eq!(r.examples.len(), 93);
        assert_eq!(r.skipped, 7);
    }

    #[test]
    fn write_then_read_roundtrip() {
        let v = vocab();
        let ex = vec![StoryExample::from_text(&v, "a b", "c", true), StoryExample::from_text(&v, "d", "a a", true)];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_corpus_file(f.path(), &ex).unwrap();
        assert_eq!(read_corpus_file(f.path(), &v, 4, 8, true).unwrap(), ex);
    }
}
