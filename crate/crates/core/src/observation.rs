//! Observations, the two data schemas, and the dataset CSV format.
//!
//! Every observation carries one continuous baseline covariate `x` and a
//! small number of binary coordinates. The binary part is packed into a
//! "combo" index so the finite support of a model is `atoms x combos`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KdpeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// `(x, a, y)`: point-treatment observational study.
    Dgp1,
    /// `(x, a0, l1, a1, y)`: two-stage longitudinal study.
    Dgp2,
}

impl Schema {
    /// Number of binary-coordinate combinations per atom.
    pub const fn combos(self) -> usize {
        match self {
            Schema::Dgp1 => 4,
            Schema::Dgp2 => 16,
        }
    }

    /// Number of binary coordinates.
    pub const fn binary_dims(self) -> usize {
        match self {
            Schema::Dgp1 => 2,
            Schema::Dgp2 => 4,
        }
    }

    /// Total coordinate count including `x`.
    pub const fn dims(self) -> usize {
        self.binary_dims() + 1
    }

    pub const fn name(self) -> &'static str {
        match self {
            Schema::Dgp1 => "dgp1",
            Schema::Dgp2 => "dgp2",
        }
    }

    pub fn csv_header(self) -> &'static [&'static str] {
        match self {
            Schema::Dgp1 => &["x", "a", "y"],
            Schema::Dgp2 => &["x", "a0", "l1", "a1", "y"],
        }
    }

    /// Bit `d` (0 = first binary coordinate) of a combo index.
    #[inline]
    pub fn bit(self, combo: usize, d: usize) -> u8 {
        ((combo >> (self.binary_dims() - 1 - d)) & 1) as u8
    }

    pub fn check(self, other: Schema) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(KdpeError::SchemaMismatch {
                expected: self.name(),
                found: other.name(),
            })
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Schema {
    type Err = KdpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dgp1" => Ok(Schema::Dgp1),
            "dgp2" => Ok(Schema::Dgp2),
            _ => Err(KdpeError::InvalidInput(format!(
                "unknown schema '{s}', expected 'dgp1' or 'dgp2'"
            ))),
        }
    }
}

/// One sample point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Observation {
    Dgp1 { x: f64, a: u8, y: u8 },
    Dgp2 { x: f64, a0: u8, l1: u8, a1: u8, y: u8 },
}

impl Observation {
    pub fn dgp1(x: f64, a: u8, y: u8) -> Self {
        Observation::Dgp1 { x, a, y }
    }

    pub fn dgp2(x: f64, a0: u8, l1: u8, a1: u8, y: u8) -> Self {
        Observation::Dgp2 { x, a0, l1, a1, y }
    }

    /// Rebuild an observation from an atom value and a combo index.
    pub fn from_combo(schema: Schema, x: f64, combo: usize) -> Self {
        let b = |d| schema.bit(combo, d);
        match schema {
            Schema::Dgp1 => Observation::dgp1(x, b(0), b(1)),
            Schema::Dgp2 => Observation::dgp2(x, b(0), b(1), b(2), b(3)),
        }
    }

    pub fn schema(&self) -> Schema {
        match self {
            Observation::Dgp1 { .. } => Schema::Dgp1,
            Observation::Dgp2 { .. } => Schema::Dgp2,
        }
    }

    pub fn x(&self) -> f64 {
        match *self {
            Observation::Dgp1 { x, .. } | Observation::Dgp2 { x, .. } => x,
        }
    }

    /// Outcome `y`.
    pub fn y(&self) -> u8 {
        match *self {
            Observation::Dgp1 { y, .. } | Observation::Dgp2 { y, .. } => y,
        }
    }

    /// Packed binary coordinates, most significant bit first in schema order.
    pub fn combo(&self) -> usize {
        self.binary().iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
    }

    pub fn binary(&self) -> Vec<u8> {
        match *self {
            Observation::Dgp1 { a, y, .. } => vec![a, y],
            Observation::Dgp2 { a0, l1, a1, y, .. } => vec![a0, l1, a1, y],
        }
    }

    /// All coordinates as reals, `x` first.
    pub fn coords(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.schema().dims());
        out.push(self.x());
        out.extend(self.binary().into_iter().map(f64::from));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !self.x().is_finite() {
            return Err(KdpeError::InvalidInput(format!(
                "non-finite covariate {}",
                self.x()
            )));
        }
        if let Some(b) = self.binary().into_iter().find(|&b| b > 1) {
            return Err(KdpeError::InvalidInput(format!(
                "binary coordinate out of range: {b}"
            )));
        }
        Ok(())
    }
}

/// Checks that a dataset is nonempty, single-schema and well formed.
pub fn dataset_schema(data: &[Observation]) -> Result<Schema> {
    let first = data
        .first()
        .ok_or_else(|| KdpeError::InvalidInput("empty dataset".into()))?;
    let schema = first.schema();
    for o in data {
        schema.check(o.schema())?;
        o.validate()?;
    }
    Ok(schema)
}

/// Float formatting used by every CSV writer: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_dataset_csv<W: Write>(w: W, data: &[Observation]) -> Result<()> {
    let schema = dataset_schema(data)?;
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(schema.csv_header())?;
    for o in data {
        let mut rec = vec![fmt_f64(o.x())];
        rec.extend(o.binary().into_iter().map(|b| b.to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: Read>(r: R) -> Result<Vec<Observation>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let schema = [Schema::Dgp1, Schema::Dgp2]
        .into_iter()
        .find(|s| s.csv_header().iter().copied().eq(header.iter().map(String::as_str)))
        .ok_or_else(|| KdpeError::InvalidInput(format!("unrecognized header {header:?}")))?;

    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let x: f64 = parse_field(&rec, 0)?;
        let bits: Vec<u8> = (1..schema.dims())
            .map(|i| parse_field::<u8>(&rec, i))
            .collect::<Result<_>>()?;
        let o = match schema {
            Schema::Dgp1 => Observation::dgp1(x, bits[0], bits[1]),
            Schema::Dgp2 => Observation::dgp2(x, bits[0], bits[1], bits[2], bits[3]),
        };
        o.validate()?;
        out.push(o);
    }
    Ok(out)
}

fn parse_field<T: FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| KdpeError::InvalidInput(format!("missing column {i}")))?;
    raw.trim()
        .parse()
        .map_err(|_| KdpeError::InvalidInput(format!("cannot parse '{raw}' in column {i}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combo_roundtrip() {
        for schema in [Schema::Dgp1, Schema::Dgp2] {
            for c in 0..schema.combos() {
                let o = Observation::from_combo(schema, 0.25, c);
                assert_eq!(o.combo(), c);
            }
        }
        assert_eq!(Observation::dgp1(0.0, 1, 0).combo(), 2);
        assert_eq!(Observation::dgp2(0.0, 1, 0, 0, 1).combo(), 9);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let data = vec![
            Observation::dgp2(0.1 + 0.2, 1, 0, 1, 1),
            Observation::dgp2(7.999999999999999, 0, 1, 0, 0),
        ];
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &data).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,a0,l1,a1,y\n"));
        let back = read_dataset_csv(buf.as_slice()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn rejects_non_binary() {
        let bad = "x,a,y\n0.5,2,0\n";
        assert!(read_dataset_csv(bad.as_bytes()).is_err());
        assert!(dataset_schema(&[Observation::dgp1(0.1, 0, 3)]).is_err());
    }

    #[test]
    fn mixed_schema_rejected() {
        let data = [Observation::dgp1(0.1, 0, 1), Observation::dgp2(0.1, 0, 1, 0, 0)];
        assert!(matches!(
            dataset_schema(&data),
            Err(KdpeError::SchemaMismatch { .. })
        ));
    }
}
