//! Labeled points, domain datasets, synthetic domain-shift generators and the
//! dataset CSV format.
//!
//! File format: a header line `dim=<d>,K=<k>` followed by rows
//! `x1,...,xd,y,domain` with `domain` one of `S`, `T`, `G`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::oracle::{GaussianCell, GaussianSpec};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
    Generated,
}

impl Domain {
    pub fn tag(self) -> char {
        match self {
            Domain::Source => 'S',
            Domain::Target => 'T',
            Domain::Generated => 'G',
        }
    }

    pub fn from_tag(s: &str) -> Option<Domain> {
        match s {
            "S" => Some(Domain::Source),
            "T" => Some(Domain::Target),
            "G" => Some(Domain::Generated),
            _ => None,
        }
    }

    /// Binary label used by domain classifiers: source 0, everything else 1.
    pub fn binary(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target | Domain::Generated => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub y: usize,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub dim: usize,
    pub n_classes: usize,
    pub points: Vec<LabeledPoint>,
}

impl DomainDataset {
    pub fn empty(dim: usize, n_classes: usize) -> Self {
        DomainDataset {
            dim,
            n_classes,
            points: Vec::new(),
        }
    }

    pub fn new(dim: usize, n_classes: usize, points: Vec<LabeledPoint>) -> Result<Self> {
        let ds = DomainDataset { dim, n_classes, points };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_classes == 0 {
            return Err(Error::invalid("dataset needs dim >= 1 and K >= 1"));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.x.len() != self.dim {
                return Err(Error::shape(format!(
                    "point {i} has dim {}, dataset dim is {}",
                    p.x.len(),
                    self.dim
                )));
            }
            if p.y >= self.n_classes {
                return Err(Error::invalid(format!(
                    "point {i} has label {} >= K = {}",
                    p.y, self.n_classes
                )));
            }
            if p.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("features of point {i}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.points.iter().filter(|p| p.domain == domain).count()
    }

    pub fn filter_domain(&self, domain: Domain) -> DomainDataset {
        DomainDataset {
            dim: self.dim,
            n_classes: self.n_classes,
            points: self.points.iter().filter(|p| p.domain == domain).cloned().collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for p in &self.points {
            c[p.y] += 1;
        }
        c
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.points.iter_mut().for_each(|p| p.domain = domain);
        self
    }

    pub fn features(&self) -> impl Iterator<Item = &[f64]> {
        self.points.iter().map(|p| p.x.as_slice())
    }

    pub fn check_compatible(&self, other: &DomainDataset) -> Result<()> {
        if self.dim != other.dim || self.n_classes != other.n_classes {
            return Err(Error::shape(format!(
                "datasets disagree: dim {} vs {}, K {} vs {}",
                self.dim, other.dim, self.n_classes, other.n_classes
            )));
        }
        Ok(())
    }

    /// Concatenation preserving point order and domain tags.
    pub fn concat(&self, other: &DomainDataset) -> Result<DomainDataset> {
        self.check_compatible(other)?;
        let mut points = self.points.clone();
        points.extend(other.points.iter().cloned());
        Ok(DomainDataset {
            dim: self.dim,
            n_classes: self.n_classes,
            points,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("dim={},K={}\n", self.dim, self.n_classes);
        for p in &self.points {
            for v in &p.x {
                write!(s, "{v},").expect("writing to a String cannot fail");
            }
            writeln!(s, "{},{}", p.y, p.domain.tag()).expect("writing to a String cannot fail");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<DomainDataset> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing header `dim=<d>,K=<k>`"))?;
        let (dim, k) = parse_header(header)?;
        let mut points = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 2 {
                return Err(Error::parse(
                    lineno,
                    format!("expected {} fields, found {}", dim + 2, fields.len()),
                ));
            }
            let x = fields[..dim]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::parse(lineno, format!("bad feature `{f}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let y: usize = fields[dim]
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad label `{}`", fields[dim])))?;
            if y >= k {
                return Err(Error::parse(lineno, format!("label {y} >= K = {k}")));
            }
            let domain = Domain::from_tag(fields[dim + 1])
                .ok_or_else(|| Error::parse(lineno, format!("unknown domain tag `{}`", fields[dim + 1])))?;
            points.push(LabeledPoint { x, y, domain });
        }
        Ok(DomainDataset {
            dim,
            n_classes: k,
            points,
        })
    }
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let mut dim = None;
    let mut k = None;
    for part in header.trim().split(',') {
        match part.split_once('=') {
            Some(("dim", v)) => dim = v.trim().parse::<usize>().ok(),
            Some(("K", v)) => k = v.trim().parse::<usize>().ok(),
            _ => return Err(Error::parse(1, format!("bad header field `{part}`"))),
        }
    }
    match (dim, k) {
        (Some(d), Some(k)) if d > 0 && k > 0 => Ok((d, k)),
        _ => Err(Error::parse(1, "header must be `dim=<d>,K=<k>` with d, k >= 1")),
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DomainDataset> {
    DomainDataset::from_csv(&std::fs::read_to_string(path)?)
}

pub fn write_dataset(dataset: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset.to_csv())?;
    Ok(())
}

/// Parameters of the rotated/translated two-moons benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoMoonsConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub noise_std: f64,
}

impl Default for TwoMoonsConfig {
    fn default() -> Self {
        TwoMoonsConfig {
            n_source: 300,
            n_target: 100,
            rotation_deg: 30.0,
            translation: vec![0.0, 0.0],
            noise_std: 0.1,
        }
    }
}

fn moon_point<R: Rng + ?Sized>(class: usize, noise: f64, r: &mut R) -> [f64; 2] {
    let theta = r.gen::<f64>() * std::f64::consts::PI;
    let (x, y) = if class == 0 {
        (theta.cos(), theta.sin())
    } else {
        (1.0 - theta.cos(), 0.5 - theta.sin())
    };
    // centre the pair of moons on the origin
    [x - 0.5 + noise * rng::normal(r), y - 0.25 + noise * rng::normal(r)]
}

fn moons<R: Rng + ?Sized>(n: usize, noise: f64, domain: Domain, r: &mut R) -> Vec<LabeledPoint> {
    let mut pts: Vec<LabeledPoint> = (0..n)
        .map(|i| {
            let y = i % 2;
            LabeledPoint {
                x: moon_point(y, noise, r).to_vec(),
                y,
                domain,
            }
        })
        .collect();
    pts.shuffle(r);
    pts
}

/// Source: two noisy interleaved moons. Target: the same distribution rotated
/// about the origin by `rotation_deg` and then translated.
pub fn gen_two_moons_shift(cfg: &TwoMoonsConfig, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if cfg.n_source == 0 || cfg.n_target == 0 {
        return Err(Error::config("two-moons domains need at least one point each"));
    }
    if !(cfg.noise_std >= 0.0) || !cfg.rotation_deg.is_finite() {
        return Err(Error::config("noise_std must be >= 0 and rotation finite"));
    }
    if cfg.translation.len() != 2 || cfg.translation.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("two-moons translation must be a finite 2-vector"));
    }
    let mut rs = rng::child(seed, "moons/source", 0);
    let mut rt = rng::child(seed, "moons/target", 0);
    let source = moons(cfg.n_source, cfg.noise_std, Domain::Source, &mut rs);
    let (sin, cos) = cfg.rotation_deg.to_radians().sin_cos();
    let target = moons(cfg.n_target, cfg.noise_std, Domain::Target, &mut rt)
        .into_iter()
        .map(|mut p| {
            let (x, y) = (p.x[0], p.x[1]);
            p.x = vec![
                cos * x - sin * y + cfg.translation[0],
                sin * x + cos * y + cfg.translation[1],
            ];
            p
        })
        .collect();
    Ok((DomainDataset::new(2, 2, source)?, DomainDataset::new(2, 2, target)?))
}

/// Isotropic Gaussian domains: cell `(domain, k)` is `N(mu_domain + offset_k, std² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDomainsConfig {
    pub mu_source: Vec<f64>,
    pub mu_target: Vec<f64>,
    pub std: f64,
    /// One offset per class; its length fixes `K`.
    pub class_offsets: Vec<Vec<f64>>,
    /// Points per class in each domain.
    pub n_per_class: Vec<usize>,
}

impl GaussianDomainsConfig {
    pub fn spec(&self) -> Result<GaussianSpec> {
        let d = self.mu_source.len();
        if d == 0 || self.mu_target.len() != d {
            return Err(Error::config("domain means must share a positive dimension"));
        }
        if self.class_offsets.is_empty() || self.class_offsets.iter().any(|o| o.len() != d) {
            return Err(Error::config("need one offset of the feature dimension per class"));
        }
        if self.n_per_class.len() != self.class_offsets.len() {
            return Err(Error::config("n_per_class must have one entry per class"));
        }
        if let Some(k) = self.n_per_class.iter().position(|n| *n == 0) {
            return Err(Error::config(format!("class {k} has no points")));
        }
        if !(self.std > 0.0) {
            return Err(Error::config("std must be positive"));
        }
        let total: usize = self.n_per_class.iter().sum();
        let mut cells = Vec::new();
        for (domain, mu) in [(Domain::Source, &self.mu_source), (Domain::Target, &self.mu_target)] {
            for (k, off) in self.class_offsets.iter().enumerate() {
                cells.push(GaussianCell {
                    domain,
                    class: k,
                    mean: mu.iter().zip(off).map(|(a, b)| a + b).collect(),
                    var: self.std * self.std,
                    weight: self.n_per_class[k] as f64 / total as f64,
                });
            }
        }
        GaussianSpec::new(cells)
    }
}

pub fn gen_gaussian_domains(
    cfg: &GaussianDomainsConfig,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset, GaussianSpec)> {
    let spec = cfg.spec()?;
    let d = cfg.mu_source.len();
    let k = cfg.class_offsets.len();
    let mut out = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        let mut r = rng::child(seed, "gaussian", domain.binary() as u64);
        let mut pts = Vec::new();
        for cell in spec.cells().iter().filter(|c| c.domain == domain) {
            let sd = cell.var.sqrt();
            for _ in 0..cfg.n_per_class[cell.class] {
                let x = cell.mean.iter().map(|m| m + sd * rng::normal(&mut r)).collect();
                pts.push(LabeledPoint {
                    x,
                    y: cell.class,
                    domain,
                });
            }
        }
        pts.shuffle(&mut r);
        out.push(DomainDataset::new(d, k, pts)?);
    }
    let target = out.pop().expect("two domains generated");
    let source = out.pop().expect("two domains generated");
    Ok((source, target, spec))
}
