//! Domain discrepancy: proxy A-distance, H∆H estimates over finite
//! linear-threshold grids, and the terms of the augmented-source bound.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::DomainDataset;
use crate::diffusion::Labeler;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{argmax, cross_entropy, Mlp, MlpGrads};
use crate::uda::evaluate;

#[derive(Debug, Clone, PartialEq)]
pub struct ADistanceConfig {
    /// Hidden widths of the probe; empty means a linear probe.
    pub hidden: Vec<usize>,
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ADistanceConfig {
    fn default() -> Self {
        ADistanceConfig {
            hidden: vec![16],
            iters: 300,
            lr: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ADistance {
    pub value: f64,
    /// Held-out error of the probe.
    pub error: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// `d_A = 2 (1 − 2 ε̂)` with `ε̂` the held-out error of a probe separating
/// `a` (label 0) from `b` (label 1), clamped to `[0, 2]`.
///
/// The larger domain is subsampled to the size of the smaller one so that a
/// constant guess scores exactly one half; each domain is then split in half
/// for training and testing.
pub fn a_distance(a: &DomainDataset, b: &DomainDataset, cfg: &ADistanceConfig) -> Result<ADistance> {
    if a.dim != b.dim {
        return Err(Error::shape("A-distance domains differ in dimension"));
    }
    let n = a.len().min(b.len());
    if n < 2 {
        return Err(Error::invalid("A-distance needs at least two points per domain"));
    }
    let mut r = rng::child(cfg.seed, "a-distance", 0);
    let mut pick = |ds: &DomainDataset| {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut r);
        idx.truncate(n);
        idx.into_iter().map(|i| ds.points[i].x.clone()).collect::<Vec<_>>()
    };
    let (xa, xb) = (pick(a), pick(b));
    let half = n / 2;
    let train: Vec<(&[f64], usize)> = xa[..half]
        .iter()
        .map(|x| (x.as_slice(), 0))
        .chain(xb[..half].iter().map(|x| (x.as_slice(), 1)))
        .collect();
    let test: Vec<(&[f64], usize)> = xa[half..]
        .iter()
        .map(|x| (x.as_slice(), 0))
        .chain(xb[half..].iter().map(|x| (x.as_slice(), 1)))
        .collect();

    let mut widths = vec![a.dim];
    widths.extend(&cfg.hidden);
    widths.push(2);
    let mut probe = Mlp::init(&widths, 1.0, &mut r)?;
    let w = 1.0 / train.len() as f64;
    for _ in 0..cfg.iters {
        let mut g = MlpGrads::zeros_like(&probe);
        for (x, y) in &train {
            let (z, cache) = probe.forward(x)?;
            let (_, dz) = cross_entropy(&z, *y);
            let dz: Vec<f64> = dz.iter().map(|v| v * w).collect();
            probe.backward_accumulate(&cache, &dz, &mut g)?;
        }
        probe.sgd_step(&g, cfg.lr);
    }
    let wrong = test
        .iter()
        .map(|(x, y)| Ok(usize::from(argmax(&probe.eval(x)?) != *y)))
        .sum::<Result<usize>>()?;
    let error = wrong as f64 / test.len() as f64;
    Ok(ADistance {
        value: (2.0 * (1.0 - 2.0 * error)).clamp(0.0, 2.0),
        error,
        n_train: train.len(),
        n_test: test.len(),
    })
}

/// Rows of an A-distance table: one row per domain pair, one column per task.
pub fn a_distance_csv(tasks: &[String], rows: &[(String, Vec<f64>)]) -> String {
    let mut s = String::from("pair");
    for t in tasks {
        write!(s, ",{t}").unwrap();
    }
    s.push('\n');
    for (pair, values) in rows {
        s.push_str(pair);
        for v in values {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Finite set of linear threshold classifiers `h(x) = [wᵀx + b > 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisGrid {
    dim: usize,
    hyps: Vec<(Vec<f64>, f64)>,
}

/// Default cap on the number of hypotheses (pairs grow quadratically).
pub const MAX_GRID: usize = 4096;

impl HypothesisGrid {
    pub fn new(dim: usize, hyps: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        if hyps.is_empty() || dim == 0 {
            return Err(Error::invalid("hypothesis grid must be non-empty"));
        }
        if hyps.iter().any(|(w, _)| w.len() != dim) {
            return Err(Error::shape("hypothesis weight has the wrong dimension"));
        }
        Ok(HypothesisGrid { dim, hyps })
    }

    /// `n_dirs` directions (angles in `[0, π)` when `dim = 2`, otherwise the
    /// coordinate axes followed by seeded random unit vectors) times `n_biases`
    /// thresholds spread evenly over the projected range of `data`.
    pub fn fit(data: &[&DomainDataset], n_dirs: usize, n_biases: usize, seed: u64) -> Result<Self> {
        let dim = data
            .first()
            .map(|d| d.dim)
            .ok_or_else(|| Error::invalid("no data to fit a grid"))?;
        if n_dirs == 0 || n_biases == 0 {
            return Err(Error::invalid("grid needs at least one direction and one threshold"));
        }
        let dirs: Vec<Vec<f64>> = if dim == 2 {
            (0..n_dirs)
                .map(|i| {
                    let a = std::f64::consts::PI * i as f64 / n_dirs as f64;
                    vec![a.cos(), a.sin()]
                })
                .collect()
        } else {
            let mut r = rng::child(seed, "grid", 0);
            (0..n_dirs)
                .map(|i| {
                    if i < dim {
                        let mut e = vec![0.0; dim];
                        e[i] = 1.0;
                        e
                    } else {
                        let v = rng::normal_vec(&mut r, dim);
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                        v.into_iter().map(|x| x / n).collect()
                    }
                })
                .collect()
        };
        let mut hyps = Vec::with_capacity(n_dirs * n_biases);
        for w in dirs {
            let proj = data
                .iter()
                .flat_map(|d| d.points.iter())
                .map(|p| p.x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>());
            let (lo, hi) = proj.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            if !lo.is_finite() {
                return Err(Error::invalid("no points to fit a grid"));
            }
            for j in 0..n_biases {
                let c = lo + (hi - lo) * (j as f64 + 0.5) / n_biases as f64;
                hyps.push((w.clone(), -c));
            }
        }
        HypothesisGrid::new(dim, hyps)
    }

    pub fn len(&self) -> usize {
        self.hyps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyps.is_empty()
    }

    /// VC dimension of linear thresholds in `dim` dimensions.
    pub fn vc_dim(&self) -> usize {
        self.dim + 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn bits(&self, ds: &DomainDataset) -> Vec<Vec<u64>> {
        let words = ds.len().div_ceil(64);
        self.hyps
            .par_iter()
            .map(|(w, b)| {
                let mut v = vec![0u64; words];
                for (i, p) in ds.points.iter().enumerate() {
                    let s: f64 = p.x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
                    if s > 0.0 {
                        v[i / 64] |= 1 << (i % 64);
                    }
                }
                v
            })
            .collect()
    }
}

fn disagreement(a: &[u64], b: &[u64], n: usize) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x ^ y).count_ones() as usize)
        .sum::<usize>() as f64
        / n as f64
}

/// `2 · max_{h, h′} |dis_A(h, h′) − dis_B(h, h′)|` over all grid pairs, where
/// `dis_D` is the fraction of points of `D` on which the two hypotheses differ.
pub fn hdh_distance(a: &DomainDataset, b: &DomainDataset, grid: &HypothesisGrid) -> Result<f64> {
    hdh_distance_capped(a, b, grid, MAX_GRID)
}

pub fn hdh_distance_capped(a: &DomainDataset, b: &DomainDataset, grid: &HypothesisGrid, cap: usize) -> Result<f64> {
    if grid.len() > cap {
        return Err(Error::config(format!(
            "grid of {} hypotheses exceeds the budget of {cap}",
            grid.len()
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("H∆H distance needs non-empty domains"));
    }
    if a.dim != grid.dim || b.dim != grid.dim {
        return Err(Error::shape("grid and data dimensions differ"));
    }
    let (ba, bb) = (grid.bits(a), grid.bits(b));
    let h = grid.len();
    let best = (0..h)
        .into_par_iter()
        .map(|i| {
            (i + 1..h)
                .map(|j| (disagreement(&ba[i], &ba[j], a.len()) - disagreement(&bb[i], &bb[j], b.len())).abs())
                .fold(0.0f64, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    Ok(2.0 * best)
}

/// All terms of the augmented-source bound evaluated for a grid hypothesis class.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub eta: f64,
    pub emp_risk_source: f64,
    pub emp_risk_generated: f64,
    pub dist_s_t: f64,
    pub dist_g_t: f64,
    pub complexity: f64,
    pub eps_term: f64,
    pub rhs: f64,
    pub lhs: f64,
    pub vc_dim: usize,
    pub delta: f64,
    pub n_aug: usize,
    pub holds: bool,
}

pub struct BoundInputs<'a> {
    /// Model trained on the source domain only.
    pub source_model: &'a dyn Labeler,
    /// Model trained on the augmented source domain.
    pub adapted_model: &'a dyn Labeler,
    pub source: &'a DomainDataset,
    pub generated: &'a DomainDataset,
    pub target: &'a DomainDataset,
    /// Whether `target` labels are ground truth.
    pub target_labels_known: bool,
}

/// `C = 4 √((2V ln(2N) + ln(2/δ)) / N)`.
pub fn complexity_term(vc_dim: usize, n: usize, delta: f64) -> f64 {
    let (v, n) = (vc_dim as f64, n as f64);
    4.0 * ((2.0 * v * (2.0 * n).ln() + (2.0 / delta).ln()) / n).sqrt()
}

/// `ε = √(ln(2V/δ) / (2N))`.
pub fn eps_term(vc_dim: usize, n: usize, delta: f64) -> f64 {
    ((2.0 * vc_dim as f64 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// `rhs = η(Ê_s + ½d_st + C) + ε + (1−η)(Ê_g + ½d_gt + C)`, `lhs` = target
/// error of the adapted model.
pub fn bound_report(inp: &BoundInputs<'_>, grid: &HypothesisGrid, delta: f64) -> Result<BoundReport> {
    if !inp.target_labels_known {
        return Err(Error::invalid("bound check needs ground-truth target labels"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config("delta must lie in (0, 1)"));
    }
    if inp.source.is_empty() || inp.target.is_empty() {
        return Err(Error::invalid("bound needs source and target points"));
    }
    let n_s = inp.source.len();
    let n_g = inp.generated.len();
    let n_aug = n_s + n_g;
    let eta = n_s as f64 / n_aug as f64;
    let err = |m: &dyn Labeler, d: &DomainDataset| -> Result<f64> { Ok(1.0 - evaluate(m, d)?.accuracy) };
    let emp_risk_source = err(inp.source_model, inp.source)?;
    let dist_s_t = hdh_distance(inp.source, inp.target, grid)?;
    let (emp_risk_generated, dist_g_t) = if n_g == 0 {
        (0.0, 0.0)
    } else {
        (
            err(inp.source_model, inp.generated)?,
            hdh_distance(inp.generated, inp.target, grid)?,
        )
    };
    let v = grid.vc_dim();
    let complexity = complexity_term(v, n_aug, delta);
    let eps = eps_term(v, n_aug, delta);
    let rhs = eta * (emp_risk_source + 0.5 * dist_s_t + complexity)
        + eps
        + (1.0 - eta) * (emp_risk_generated + 0.5 * dist_g_t + complexity);
    let lhs = err(inp.adapted_model, inp.target)?;
    Ok(BoundReport {
        eta,
        emp_risk_source,
        emp_risk_generated,
        dist_s_t,
        dist_g_t,
        complexity,
        eps_term: eps,
        rhs,
        lhs,
        vc_dim: v,
        delta,
        n_aug,
        holds: lhs <= rhs,
    })
}

impl BoundReport {
    /// Flat `bound.<key>=<value>` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let rows: [(&str, String); 13] = [
            ("eta", self.eta.to_string()),
            ("emp_risk_source", self.emp_risk_source.to_string()),
            ("emp_risk_generated", self.emp_risk_generated.to_string()),
            ("dist_s_t", self.dist_s_t.to_string()),
            ("dist_g_t", self.dist_g_t.to_string()),
            ("complexity", self.complexity.to_string()),
            ("eps_term", self.eps_term.to_string()),
            ("rhs", self.rhs.to_string()),
            ("lhs", self.lhs.to_string()),
            ("vc_dim", self.vc_dim.to_string()),
            ("delta", self.delta.to_string()),
            ("n_aug", self.n_aug.to_string()),
            ("holds", self.holds.to_string()),
        ];
        for (k, v) in rows {
            writeln!(s, "bound.{k}={v}").unwrap();
        }
        s.push_str("bound.hypothesis_class=linear_threshold_grid (grid lower bound on the H-divergence)\n");
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| l.strip_prefix("bound.")?.strip_prefix(key)?.strip_prefix('='))
                .ok_or_else(|| Error::invalid(format!("bound report lacks `{key}`")))
        };
        let f = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::invalid(format!("bad value for `{key}`")))
        };
        let u = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::invalid(format!("bad value for `{key}`")))
        };
        Ok(BoundReport {
            eta: f("eta")?,
            emp_risk_source: f("emp_risk_source")?,
            emp_risk_generated: f("emp_risk_generated")?,
            dist_s_t: f("dist_s_t")?,
            dist_g_t: f("dist_g_t")?,
            complexity: f("complexity")?,
            eps_term: f("eps_term")?,
            rhs: f("rhs")?,
            lhs: f("lhs")?,
            vc_dim: u("vc_dim")?,
            delta: f("delta")?,
            n_aug: u("n_aug")?,
            holds: get("holds")? == "true",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, LabeledPoint};

    fn line(xs: &[f64], domain: Domain) -> DomainDataset {
        DomainDataset::new(
            1,
            2,
            xs.iter()
                .map(|&x| LabeledPoint {
                    x: vec![x],
                    y: usize::from(x > 0.0),
                    domain,
                })
                .collect(),
        )
        .unwrap()
    }

    fn thresholds(ts: &[f64]) -> HypothesisGrid {
        HypothesisGrid::new(1, ts.iter().map(|t| (vec![1.0], -t)).collect()).unwrap()
    }

    #[test]
    fn identical_samples_have_zero_hdh() {
        let a = line(&[-1.0, 0.2, 0.5, 2.0], Domain::Source);
        let g = thresholds(&[-0.5, 0.0, 1.0]);
        assert_eq!(hdh_distance(&a, &a, &g).unwrap(), 0.0);
        assert_eq!(
            hdh_distance(&a, &line(&[5.0], Domain::Target), &thresholds(&[0.0])).unwrap(),
            0.0
        );
    }

    #[test]
    fn two_point_domains_by_enumeration() {
        let a = line(&[-1.0, 0.5], Domain::Source);
        let b = line(&[0.2, 2.0], Domain::Target);
        let ts = [0.0, 0.3, 1.0];
        // h_k(x) = [x > t_k]; enumerate all 9 ordered pairs directly
        let h = |t: f64, x: f64| x > t;
        let dis =
            |xs: &[f64], s: f64, t: f64| xs.iter().filter(|&&x| h(s, x) != h(t, x)).count() as f64 / xs.len() as f64;
        let mut best = 0.0f64;
        for &s in &ts {
            for &t in &ts {
                best = best.max((dis(&[-1.0, 0.5], s, t) - dis(&[0.2, 2.0], s, t)).abs());
            }
        }
        assert_eq!(hdh_distance(&a, &b, &thresholds(&ts)).unwrap(), 2.0 * best);
        assert_eq!(2.0 * best, 1.0);
    }

    #[test]
    fn grid_budget_enforced() {
        let a = line(&[0.0, 1.0], Domain::Source);
        let g = thresholds(&[0.1, 0.2, 0.3]);
        assert!(hdh_distance_capped(&a, &a, &g, 2).is_err());
        assert_eq!(g.vc_dim(), 2);
    }

    #[test]
    fn bound_terms_shrink_with_n_and_delta() {
        assert!(complexity_term(3, 10_000, 0.05) < complexity_term(3, 100, 0.05));
        assert!(complexity_term(3, 1_000_000_000, 0.49) < 0.01);
        assert!(eps_term(3, 1_000_000_000, 0.49) < 1e-4);
        assert!(eps_term(3, 100, 0.4) < eps_term(3, 100, 0.05));
    }

    struct Sign;
    impl Labeler for Sign {
        fn label(&self, x: &[f64]) -> Result<usize> {
            Ok(usize::from(x[0] > 0.0))
        }
    }

    #[test]
    fn empty_generated_gives_classical_bound() {
        let s = line(&[-2.0, -1.0, 1.0, 2.0], Domain::Source);
        let t = line(&[-1.5, -0.5, 0.5, 3.0], Domain::Target);
        let g = thresholds(&[-1.0, 0.0, 1.0]);
        let empty = DomainDataset::empty(1, 2);
        let inp = BoundInputs {
            source_model: &Sign,
            adapted_model: &Sign,
            source: &s,
            generated: &empty,
            target: &t,
            target_labels_known: true,
        };
        let r = bound_report(&inp, &g, 0.05).unwrap();
        assert_eq!(r.eta, 1.0);
        let classical = r.emp_risk_source + 0.5 * r.dist_s_t + complexity_term(2, 4, 0.05) + eps_term(2, 4, 0.05);
        assert!((r.rhs - classical).abs() < 1e-12);
        assert!(r.holds);
        let back = BoundReport::from_kv(&r.to_kv()).unwrap();
        assert_eq!(back, r);
        let unknown = BoundInputs {
            target_labels_known: false,
            ..inp
        };
        assert!(bound_report(&unknown, &g, 0.05).is_err());
    }

    #[test]
    fn a_distance_extremes() {
        let far_a: Vec<f64> = (0..60).map(|i| -5.0 - i as f64 * 0.01).collect();
        let far_b: Vec<f64> = (0..60).map(|i| 5.0 + i as f64 * 0.01).collect();
        let d = a_distance(
            &line(&far_a, Domain::Source),
            &line(&far_b, Domain::Target),
            &ADistanceConfig::default(),
        )
        .unwrap();
        assert!(d.value >= 1.8);
        assert!(a_distance(
            &line(&[1.0], Domain::Source),
            &line(&far_b, Domain::Target),
            &ADistanceConfig::default()
        )
        .is_err());
    }

    #[test]
    fn csv_layout() {
        let csv = a_distance_csv(&["moons".into()], &[("s-t".into(), vec![1.5])]);
        assert_eq!(csv, "pair,moons\ns-t,1.5\n");
    }
}
