//! File formats: score CSV, tensor JSON, and GNAP state JSON.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::GnapState;
use crate::metrics::ScoreSet;
use crate::tensor::FeatureMap;

/// Parses `label,score` CSV: a header line then one record per line with
/// `label` in {0, 1}. Errors carry the 1-based line number. A file that
/// lacks either label is rejected at its last line, since no metric is
/// defined on it.
pub fn read_scores(reader: impl Read) -> Result<ScoreSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut scores = ScoreSet::new();
    let mut saw_header = false;
    let mut last_line = 1;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        last_line = line;
        let fail = |message: String| Error::Parse { line, message };
        if !saw_header {
            if record.len() != 2 || &record[0] != "label" || &record[1] != "score" {
                return Err(fail("expected header `label,score`".into()));
            }
            saw_header = true;
            continue;
        }
        if record.len() != 2 {
            return Err(fail(format!("expected 2 fields, got {}", record.len())));
        }
        let genuine = match &record[0] {
            "1" => true,
            "0" => false,
            other => return Err(fail(format!("label must be 0 or 1, got `{other}`"))),
        };
        let score: f64 = record[1]
            .parse()
            .map_err(|_| fail(format!("score `{}` is not a number", &record[1])))?;
        if !score.is_finite() {
            return Err(fail(format!("score `{}` is not finite", &record[1])));
        }
        scores.push(genuine, score);
    }
    if !saw_header {
        return Err(Error::Parse {
            line: 1,
            message: "empty file, expected header `label,score`".into(),
        });
    }
    let (genuine, impostor) = scores.counts();
    if genuine == 0 || impostor == 0 {
        return Err(Error::Parse {
            line: last_line,
            message: format!("need both labels, got {genuine} genuine and {impostor} impostor records"),
        });
    }
    Ok(scores)
}

pub fn read_scores_file(path: &Path) -> Result<ScoreSet> {
    read_scores(fs::File::open(path)?)
}

/// Scores use Rust's shortest round-trip float formatting.
pub fn write_scores(scores: &ScoreSet) -> String {
    let mut out = String::from("label,score\n");
    for r in &scores.records {
        out.push_str(&format!("{},{:?}\n", u8::from(r.genuine), r.score));
    }
    out
}

pub fn read_tensor_file(path: &Path) -> Result<FeatureMap> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_tensor_file(path: &Path, x: &FeatureMap) -> Result<()> {
    Ok(fs::write(path, serde_json::to_string(x)?)?)
}

pub fn read_state_file(path: &Path) -> Result<GnapState> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_state_file(path: &Path, state: &GnapState) -> Result<()> {
    Ok(fs::write(path, serde_json::to_string_pretty(state)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_scores() {
        let s = read_scores("label,score\n1,0.9\n0,-1.5e-3\n".as_bytes()).unwrap();
        assert_eq!(s.counts(), (1, 1));
        assert_eq!(s.records[1].score, -1.5e-3);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = |text: &str| match read_scores(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(err("label,score\n1,0.5\n2,0.1\n"), 3);
        assert_eq!(err("label,score\n1,abc\n"), 2);
        assert_eq!(err("label,score\n1,0.5,7\n"), 2);
        assert_eq!(err("score,label\n"), 1);
        assert_eq!(err(""), 1);
        assert_eq!(err("label,score\n1,NaN\n"), 2);
        assert_eq!(err("label,score\n"), 1);
        assert_eq!(err("label,score\n1,0.5\n1,0.2\n"), 3);
    }

    #[test]
    fn write_then_read() {
        let s = ScoreSet::from_pairs(&[0.1, 1.0 / 3.0], &[-2.5]);
        assert_eq!(read_scores(write_scores(&s).as_bytes()).unwrap(), s);
    }
}
