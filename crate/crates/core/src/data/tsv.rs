use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::{Corpus, Pair};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct TsvOptions {
    /// Pairs with either side longer than this are dropped.
    pub max_len: usize,
    /// Malformed lines are fatal when set, skipped with a warning otherwise.
    pub strict: bool,
}

impl Default for TsvOptions {
    fn default() -> Self {
        Self {
            max_len: 64,
            strict: true,
        }
    }
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub too_long: usize,
    pub malformed: usize,
    pub warnings: Vec<String>,
}

/// Reads `source<TAB>target` lines; blank lines are ignored.
pub fn load_tsv(path: &Path, opts: TsvOptions) -> Result<(Corpus, LoadReport)> {
    let text = fs::read_to_string(path)?;
    let mut corpus = Vec::new();
    let mut report = LoadReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = line.split_once('\t').and_then(|(s, t)| {
            let src: Vec<String> = s.split_whitespace().map(String::from).collect();
            let tgt: Vec<String> = t.split_whitespace().map(String::from).collect();
            (!src.is_empty() && !tgt.is_empty() && !t.contains('\t')).then_some(Pair { src, tgt })
        });
        let Some(pair) = parsed else {
            if opts.strict {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected `source<TAB>target` with non-empty sides".into(),
                });
            }
            report.malformed += 1;
            report
                .warnings
                .push(format!("{}:{}: malformed line skipped", path.display(), i + 1));
            continue;
        };
        if pair.src.len() > opts.max_len || pair.tgt.len() > opts.max_len {
            report.too_long += 1;
            continue;
        }
        corpus.push(pair);
    }
    if report.too_long > 0 {
        report.warnings.push(format!(
            "{}: dropped {} pairs longer than {} tokens",
            path.display(),
            report.too_long,
            opts.max_len
        ));
    }
    if corpus.is_empty() {
        report.warnings.push(format!("{}: corpus is empty", path.display()));
    }
    Ok((corpus, report))
}

pub fn write_tsv(path: &Path, corpus: &[Pair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for p in corpus {
        writeln!(f, "{}\t{}", p.src.join(" "), p.tgt.join(" "))?;
    }
    f.flush()?;
    Ok(())
}
