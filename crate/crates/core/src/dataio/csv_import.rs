//! CSV interchange: one record per line with four columns
//! `id, labels, visual, audio`, where the last three are `;`-joined lists.
//! Lines starting with `#` are comments.

use std::collections::HashSet;
use std::path::Path;

use std::fmt::Write as _;

use super::{write_atomic, Corpus, FeatureRecord};
use crate::error::{Error, FormatError, Result};

pub fn import_csv(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Corpus> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut dims: Option<(usize, usize)> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = n as u64 + 1;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let row = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(raw.as_bytes())
            .records()
            .next()
            .transpose()
            .map_err(|e| FormatError::Csv {
                line,
                reason: e.to_string(),
            })?
            .unwrap_or_default();
        let fail = |reason: String| Error::from(FormatError::Csv { line, reason });
        if row.len() != 4 {
            return Err(fail(format!("expected 4 columns, found {}", row.len())));
        }
        let id = &row[0];
        if id.is_empty() {
            return Err(fail("empty id".into()));
        }
        if row[1].is_empty() {
            return Err(fail("empty label field".into()));
        }
        let labels = split(&row[1])
            .map(|s| s.parse::<u32>().map_err(|e| fail(format!("label {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let floats = |field: &str, name: &str| -> Result<Vec<f32>> {
            if field.is_empty() {
                return Err(fail(format!("empty {name} field")));
            }
            split(field)
                .map(|s| match s.parse::<f32>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    Ok(_) => Err(fail(format!("{name} value {s:?} is not finite"))),
                    Err(e) => Err(fail(format!("{name} value {s:?}: {e}"))),
                })
                .collect()
        };
        let visual = floats(&row[2], "visual")?;
        let audio = floats(&row[3], "audio")?;
        match dims {
            None => dims = Some((visual.len(), audio.len())),
            Some((v, a)) if v != visual.len() || a != audio.len() => {
                return Err(fail(format!(
                    "feature lengths {}/{} differ from first record's {v}/{a}",
                    visual.len(),
                    audio.len()
                )))
            }
            Some(_) => {}
        }
        if !seen.insert(id.to_string()) {
            return Err(fail(format!("duplicate id {id:?}")));
        }
        records.push(FeatureRecord::new(id, labels, visual, audio));
    }
    Corpus::infer(records)
}

/// Inverse of [`parse_csv`]. `f32` values print in shortest round-trip form.
pub fn corpus_to_csv(corpus: &Corpus) -> String {
    fn join<T: ToString>(v: &[T]) -> String {
        v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
    }
    let mut out = String::from("# id,labels,visual,audio\n");
    for r in corpus.records() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.id,
            join(&r.labels),
            join(&r.visual),
            join(&r.audio)
        );
    }
    out
}

pub fn export_csv(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    write_atomic(path.as_ref(), corpus_to_csv(corpus).as_bytes())
}

fn split(field: &str) -> impl Iterator<Item = &str> {
    field.split(';').map(str::trim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed_file() {
        let text = "# id,labels,visual,audio\n\
                    a,1;3,0.5;1;2,7\n\
                    b,0,1e-3;-2.5E2;0,0.25\n\
                    c,2,0;0;0,-1\n";
        let c = parse_csv(text).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.records()[0].labels, [1, 3]);
        assert_eq!(c.num_classes(), 4);
        assert_eq!((c.visual_dim(), c.audio_dim()), (3, 1));
    }

    #[test]
    fn export_round_trips() {
        let text = "a,1;3,0.1;-2.5e-7;3,7\nb,0,1e30;0;-0,0.25\n";
        let c = parse_csv(text).unwrap();
        assert_eq!(parse_csv(&corpus_to_csv(&c)).unwrap(), c);
    }

    #[test]
    fn scientific_notation_matches_decimal() {
        let c = parse_csv("x,0,1.5e-3;-2.5E2;6.02e+1,3.0E0\n").unwrap();
        let r = &c.records()[0];
        let decimal: Vec<f32> = ["0.0015", "-250", "60.2"].iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(r.visual, decimal);
        assert_eq!(r.audio, [3.0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_csv("a,1,0.5,1\nb,,0.5,1\n").unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Csv { line: 2, .. })), "{err}");

        let err = parse_csv("a,1,0.5,1\n\n# c\nb,1,zz,1\n").unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Csv { line: 4, .. })), "{err}");

        assert!(parse_csv("a,1,0.5\n").is_err());
        assert!(parse_csv("a,1,0.5;1,1\nb,1,0.5,1\n").is_err());
        assert!(parse_csv("a,1,0.5,1\na,2,0.5,1\n").is_err());
        assert!(parse_csv("a,1,inf,1\n").is_err());
    }
}
