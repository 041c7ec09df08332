//! Examples, datasets, parameter vectors and the dataset CSV format.
//!
//! The CSV layout is a header row `f0,...,f{d-1},y` followed by one example
//! per row, with every value written as IEEE-754 decimal text.

use std::io::{Read, Write};
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One labelled example `z = (x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Example {
    pub fn new(features: Vec<f64>, label: f64) -> Result<Self> {
        if !features.iter().all(|v| v.is_finite()) || !label.is_finite() {
            return Err(invalid("example contains a non-finite value"));
        }
        Ok(Self { features, label })
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// An ordered, non-empty collection of examples with a common dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dataset {
    examples: Vec<Example>,
    dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| invalid("dataset must contain at least one example"))?;
        let dim = first.dim();
        if let Some((k, bad)) = examples.iter().enumerate().find(|(_, e)| e.dim() != dim) {
            return Err(Error::DimensionMismatch {
                what: if k == 0 { "example" } else { "dataset row" },
                expected: dim,
                got: bad.dim(),
            });
        }
        if examples
            .iter()
            .any(|e| !e.label.is_finite() || e.features.iter().any(|v| !v.is_finite()))
        {
            return Err(invalid("dataset contains a non-finite value"));
        }
        Ok(Self { examples, dim })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> Option<&Example> {
        self.examples.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    /// Copy of this dataset with example `i` replaced by `z` (the set `S^(i)`).
    pub fn with_replaced(&self, i: usize, z: Example) -> Result<Self> {
        if i >= self.len() {
            return Err(invalid(format!(
                "replacement index {i} out of range for m = {}",
                self.len()
            )));
        }
        if z.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "replacement example",
                expected: self.dim,
                got: z.dim(),
            });
        }
        let mut examples = self.examples.clone();
        examples[i] = z;
        Ok(Self {
            examples,
            dim: self.dim,
        })
    }

    /// Concatenation of two datasets of equal dimension.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Self::new(examples)
    }

    pub fn max_feature_norm(&self) -> f64 {
        self.examples
            .iter()
            .map(|e| crate::linalg::norm(&e.features))
            .fold(0.0, f64::max)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        Self::from_csv_reader(text.as_bytes())
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse(format!("dataset header: {e}")))?
            .clone();
        let ncols = headers.len();
        if ncols < 2 {
            return Err(Error::Parse(
                "dataset header needs at least one feature column and `y`".into(),
            ));
        }
        for (k, name) in headers.iter().enumerate() {
            let expected = if k + 1 == ncols {
                "y".to_string()
            } else {
                format!("f{k}")
            };
            if name != expected {
                return Err(Error::Parse(format!(
                    "dataset header column {k} is `{name}`, expected `{expected}`"
                )));
            }
        }
        let mut examples = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Parse(format!("dataset row {}: {e}", row + 1)))?;
            if record.len() != ncols {
                return Err(Error::Parse(format!(
                    "dataset row {} has {} fields, expected {ncols}",
                    row + 1,
                    record.len()
                )));
            }
            let mut values = Vec::with_capacity(ncols);
            for field in record.iter() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Parse(format!("dataset row {}: `{field}` is not a number", row + 1))
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!(
                        "dataset row {}: non-finite value `{field}`",
                        row + 1
                    )));
                }
                values.push(v);
            }
            let label = values.pop().expect("ncols >= 2");
            examples.push(Example {
                features: values,
                label,
            });
        }
        Self::new(examples)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("f{k}")).collect();
        header.push("y".into());
        wtr.write_record(&header)
            .map_err(|e| Error::Parse(e.to_string()))?;
        for e in &self.examples {
            let mut row: Vec<String> = e.features.iter().map(|v| v.to_string()).collect();
            row.push(e.label.to_string());
            wtr.write_record(&row)
                .map_err(|e| Error::Parse(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

impl std::ops::Index<usize> for Dataset {
    type Output = Example;

    fn index(&self, i: usize) -> &Example {
        &self.examples[i]
    }
}

/// A point `w` in parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(p: usize) -> Self {
        Self(vec![0.0; p])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// On-disk parameter file: `{"label": "...", "params": [..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamFile {
    #[serde(default)]
    pub label: Option<String>,
    pub params: Vec<f64>,
}

impl ParamFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ParamFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("parameter file: {e}")))?;
        if file.params.is_empty() {
            return Err(Error::Parse("parameter file has no parameters".into()));
        }
        if !file.params.iter().all(|v| v.is_finite()) {
            return Err(Error::Parse("parameter file contains a non-finite value".into()));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("parameter file serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new(vec![
            Example::new(vec![1.0, 2.0], 0.0).unwrap(),
            Example::new(vec![-0.5, 0.25], 1.0).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(Dataset::new(vec![]).is_err());
    }

    #[test]
    fn ragged_dataset_rejected() {
        let err = Dataset::new(vec![
            Example::new(vec![1.0], 0.0).unwrap(),
            Example::new(vec![1.0, 2.0], 0.0).unwrap(),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = Dataset::new(vec![
            Example::new(vec![0.1, 1e-300, -3.25], 1.0).unwrap(),
            Example::new(vec![std::f64::consts::PI, 2.0 / 3.0, 0.0], 0.0).unwrap(),
        ])
        .unwrap();
        let text = d.to_csv_string();
        assert!(text.starts_with("f0,f1,f2,y\n"));
        assert_eq!(Dataset::from_csv_str(&text).unwrap(), d);
    }

    #[test]
    fn csv_rejects_bad_header_and_values() {
        assert!(Dataset::from_csv_str("a,b\n1,2\n").is_err());
        assert!(Dataset::from_csv_str("f0,y\n1,nan\n").is_err());
        assert!(Dataset::from_csv_str("f0,y\n1\n").is_err());
        assert!(Dataset::from_csv_str("f0,y\n1,x\n").is_err());
        assert!(Dataset::from_csv_str("f0,y\n").is_err());
        assert!(Dataset::from_csv_str("").is_err());
    }

    #[test]
    fn replacement_changes_one_row() {
        let d = tiny();
        let z = Example::new(vec![9.0, 9.0], 1.0).unwrap();
        let di = d.with_replaced(1, z.clone()).unwrap();
        assert_eq!(di[0], d[0]);
        assert_eq!(di[1], z);
        assert!(d.with_replaced(2, z).is_err());
    }

    #[test]
    fn param_file_parses() {
        let f = ParamFile::parse(r#"{"label":"teacher","params":[1.0,-2.5]}"#).unwrap();
        assert_eq!(f.params, vec![1.0, -2.5]);
        assert!(ParamFile::parse(r#"{"params":[]}"#).is_err());
        assert!(ParamFile::parse(r#"{"params":[1], "x": 2}"#).is_err());
        assert_eq!(ParamFile::parse(&f.to_json()).unwrap(), f);
    }
}
