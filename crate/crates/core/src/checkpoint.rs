//! Versioned text checkpoints: a header, key/value metadata, a shape manifest
//! and one float per line. Floats use Rust's shortest round-trip formatting,
//! so save/load is bit-exact.
//!
//! ```text
//! dacdm-checkpoint v1
//! kind denoiser
//! meta horizon 100
//! mlp trunk 18x64x64x2
//! table class_embed 2x64
//! params 5634
//! 0.0123...
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Layer, Mlp};

const MAGIC: &str = "dacdm-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
enum Entry {
    Mlp(Vec<usize>),
    Table(usize, usize),
}

impl Entry {
    fn len(&self) -> usize {
        match self {
            Entry::Mlp(w) => w.windows(2).map(|p| p[0] * p[1] + p[1]).sum(),
            Entry::Table(r, c) => r * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    kind: String,
    meta: BTreeMap<String, String>,
    entries: Vec<(String, Entry, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            meta: BTreeMap::new(),
            entries: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!(
                "checkpoint holds a `{}`, expected `{kind}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn get_meta<T: FromStr>(&self, key: &str) -> Result<T> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::invalid(format!("checkpoint metadata `{key}` missing or malformed")))
    }

    pub fn push_mlp(&mut self, name: &str, mlp: &Mlp) {
        self.entries
            .push((name.to_string(), Entry::Mlp(mlp.widths()), mlp.flat_params()));
    }

    pub fn push_table(&mut self, name: &str, rows: &[Vec<f64>]) {
        let cols = rows.first().map_or(0, Vec::len);
        self.entries.push((
            name.to_string(),
            Entry::Table(rows.len(), cols),
            rows.iter().flatten().copied().collect(),
        ));
    }

    fn entry(&self, name: &str) -> Result<&(String, Entry, Vec<f64>)> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no entry `{name}`")))
    }

    pub fn mlp(&self, name: &str) -> Result<Mlp> {
        match self.entry(name)? {
            (_, Entry::Mlp(widths), values) => {
                let mut m = Mlp::new(widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect())?;
                m.set_flat_params(values)?;
                Ok(m)
            }
            _ => Err(Error::invalid(format!("entry `{name}` is not an mlp"))),
        }
    }

    pub fn table(&self, name: &str) -> Result<Vec<Vec<f64>>> {
        match self.entry(name)? {
            (_, Entry::Table(_, cols), values) => Ok(values.chunks(*cols.max(&1)).map(<[f64]>::to_vec).collect()),
            _ => Err(Error::invalid(format!("entry `{name}` is not a table"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "{MAGIC}").unwrap();
        writeln!(w, "kind {}", self.kind).unwrap();
        for (k, v) in &self.meta {
            writeln!(w, "meta {k} {v}").unwrap();
        }
        for (name, entry, _) in &self.entries {
            match entry {
                Entry::Mlp(widths) => {
                    let shape: Vec<String> = widths.iter().map(usize::to_string).collect();
                    writeln!(w, "mlp {name} {}", shape.join("x")).unwrap();
                }
                Entry::Table(r, c) => writeln!(w, "table {name} {r}x{c}").unwrap(),
            }
        }
        let total: usize = self.entries.iter().map(|(_, _, v)| v.len()).sum();
        writeln!(w, "params {total}").unwrap();
        for (_, _, values) in &self.entries {
            for v in values {
                writeln!(w, "{v}").unwrap();
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Checkpoint> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(Error::parse(1, format!("expected `{MAGIC}`"))),
        }
        let mut ck = Checkpoint::new("");
        let mut shapes: Vec<(String, Entry)> = Vec::new();
        let mut total = None;
        for (no, line) in lines.by_ref() {
            let parts: Vec<&str> = line.splitn(3, ' ').collect();
            match parts.as_slice() {
                ["kind", k] => ck.kind = k.to_string(),
                ["meta", k, v] => {
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                ["mlp", name, shape] => {
                    let widths = shape
                        .split('x')
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::parse(no, "bad mlp shape"))?;
                    if widths.len() < 2 {
                        return Err(Error::parse(no, "mlp needs at least two widths"));
                    }
                    shapes.push((name.to_string(), Entry::Mlp(widths)));
                }
                ["table", name, shape] => {
                    let (r, c) = shape
                        .split_once('x')
                        .and_then(|(r, c)| Some((r.parse().ok()?, c.parse().ok()?)))
                        .ok_or_else(|| Error::parse(no, "bad table shape"))?;
                    shapes.push((name.to_string(), Entry::Table(r, c)));
                }
                ["params", n] => {
                    total = Some(n.parse::<usize>().map_err(|_| Error::parse(no, "bad params count"))?);
                    break;
                }
                _ => return Err(Error::parse(no, format!("unexpected line `{line}`"))),
            }
        }
        let total = total.ok_or_else(|| Error::parse(0, "missing `params` line"))?;
        let expected: usize = shapes.iter().map(|(_, e)| e.len()).sum();
        if expected != total {
            return Err(Error::parse(
                0,
                format!("manifest needs {expected} values, header says {total}"),
            ));
        }
        let mut values = Vec::with_capacity(total);
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            values.push(
                line.parse::<f64>()
                    .map_err(|_| Error::parse(no, format!("bad float `{line}`")))?,
            );
        }
        if values.len() != total {
            return Err(Error::parse(
                0,
                format!("expected {total} values, found {}", values.len()),
            ));
        }
        let mut offset = 0;
        for (name, entry) in shapes {
            let n = entry.len();
            ck.entries.push((name, entry, values[offset..offset + n].to_vec()));
            offset += n;
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn mlp_and_table_round_trip_bit_exact() {
        let m = Mlp::init(&[3, 5, 2], 0.7, &mut rng::stream(4)).unwrap();
        let mut ck = Checkpoint::new("test");
        ck.meta("note", 1.5);
        ck.push_mlp("net", &m);
        ck.push_table("emb", &[vec![0.1, 1.0 / 3.0], vec![-2.5, 1e-300]]);
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.mlp("net").unwrap(), m);
        assert_eq!(back.get_meta::<f64>("note").unwrap(), 1.5);
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let mut ck = Checkpoint::new("t");
        ck.push_table("a", &[vec![1.0, 2.0]]);
        let text = ck.to_text();
        let cut = text.trim_end().rsplit_once('\n').unwrap().0;
        assert!(Checkpoint::parse(cut).is_err());
        assert!(Checkpoint::parse("garbage").is_err());
    }
}
