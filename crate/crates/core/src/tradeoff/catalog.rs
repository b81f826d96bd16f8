//! TOML loaders for alternative catalogs and weight matrices.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{Alternative, Criterion, Slot, TradeoffError, WeightMatrix};

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Syntax(String),
    #[error(transparent)]
    Invalid(#[from] TradeoffError),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    alternative: Vec<AltRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AltRecord {
    code: String,
    slot: String,
    cost: f64,
    accuracy: f64,
    weight: f64,
    speed: f64,
    #[serde(default = "yes")]
    available: bool,
}

fn yes() -> bool {
    true
}

pub fn parse_catalog(text: &str) -> Result<Vec<Alternative>, CatalogError> {
    let file: CatalogFile = toml::from_str(text).map_err(|e| CatalogError::Syntax(e.to_string()))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(file.alternative.len());
    for r in file.alternative {
        let mut chars = r.slot.chars();
        let slot = match (chars.next().and_then(Slot::from_letter), chars.next()) {
            (Some(s), None) => s,
            _ => {
                return Err(TradeoffError::InvalidAlternative {
                    code: r.code,
                    reason: format!("unknown slot `{}`", r.slot),
                }
                .into())
            }
        };
        if !seen.insert(r.code.clone()) {
            return Err(TradeoffError::InvalidAlternative {
                code: r.code,
                reason: "duplicate code".into(),
            }
            .into());
        }
        out.push(Alternative::new(
            &r.code,
            slot,
            [r.cost, r.accuracy, r.weight, r.speed],
            r.available,
        )?);
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Cell {
    Num(f64),
    Text(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    c: Vec<Cell>,
    a: Vec<Cell>,
    w: Vec<Cell>,
    s: Vec<Cell>,
}

/// Rows `c`, `a`, `w`, `s` of six percents. A cell written as the letter
/// `"O"` reads as 0.
pub fn parse_weights(text: &str) -> Result<WeightMatrix, CatalogError> {
    let file: WeightsFile = toml::from_str(text).map_err(|e| CatalogError::Syntax(e.to_string()))?;
    let mut rows = [[0.0; 6]; 4];
    for (c, cells) in Criterion::ALL.into_iter().zip([&file.c, &file.a, &file.w, &file.s]) {
        if cells.len() != 6 {
            return Err(TradeoffError::InvalidWeights(format!(
                "row {} has {} entries, expected 6",
                c.key(),
                cells.len()
            ))
            .into());
        }
        for (i, cell) in cells.iter().enumerate() {
            rows[c.index()][i] = match cell {
                Cell::Num(v) => *v,
                Cell::Text(t) if t == "O" => 0.0,
                Cell::Text(t) => {
                    return Err(TradeoffError::InvalidWeights(format!(
                        "row {} entry {} is `{t}`",
                        c.key(),
                        i + 1
                    ))
                    .into())
                }
            };
        }
    }
    Ok(WeightMatrix::new(rows)?)
}

fn read(path: &Path) -> Result<String, CatalogError> {
    std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_catalog(path: &Path) -> Result<Vec<Alternative>, CatalogError> {
    parse_catalog(&read(path)?).map_err(|e| match e {
        CatalogError::Syntax(m) => CatalogError::Syntax(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn load_weights(path: &Path) -> Result<WeightMatrix, CatalogError> {
    parse_weights(&read(path)?).map_err(|e| match e {
        CatalogError::Syntax(m) => CatalogError::Syntax(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_weights_match_table() {
        let w = parse_weights(include_str!("../../data/weights.toml")).unwrap();
        assert_eq!(w, WeightMatrix::reference());
    }

    #[test]
    fn rejects_bad_rows() {
        let short = "c=[10,90]\na=[100,0,0,0,0,0]\nw=[100,0,0,0,0,0]\ns=[100,0,0,0,0,0]";
        assert!(parse_weights(short).is_err());
        let sum = "c=[10,30,0,10,40,11]\na=[100,0,0,0,0,0]\nw=[100,0,0,0,0,0]\ns=[100,0,0,0,0,0]";
        assert!(matches!(
            parse_weights(sum),
            Err(CatalogError::Invalid(TradeoffError::InvalidWeights(_)))
        ));
        let text = "c=[10,30,0,10,40,\"X\"]\na=[100,0,0,0,0,0]\nw=[100,0,0,0,0,0]\ns=[100,0,0,0,0,0]";
        assert!(parse_weights(text).is_err());
    }

    #[test]
    fn catalog_errors() {
        let dup = r#"
[[alternative]]
code = "A1"
slot = "A"
cost = 1
accuracy = 1
weight = 1
speed = 1
[[alternative]]
code = "A1"
slot = "A"
cost = 1
accuracy = 1
weight = 1
speed = 1
"#;
        assert!(parse_catalog(dup).is_err());
        let missing = "[[alternative]]\ncode = \"A1\"\nslot = \"A\"\ncost = 1\naccuracy = 1\nweight = 1\n";
        let err = parse_catalog(missing).unwrap_err().to_string();
        assert!(err.contains("speed"), "{err}");
        let syntax = "[[alternative]]\ncode = \"A1\"\nslot = \n";
        let err = parse_catalog(syntax).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn fixture_catalog_shape() {
        let cat = parse_catalog(include_str!("../../data/catalog.toml")).unwrap();
        let counts: Vec<usize> = Slot::ALL
            .iter()
            .map(|s| cat.iter().filter(|a| a.slot == *s).count())
            .collect();
        assert_eq!(counts, [3, 4, 4, 3, 4, 2]);
    }
}
