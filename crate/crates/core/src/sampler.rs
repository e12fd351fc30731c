//! Ancestral DDPM sampling and the multistep second-order ODE solver.

use rand::Rng;
use rayon::prelude::*;

use crate::data::{Domain, DomainDataset, LabeledPoint};
use crate::diffusion::{Condition, NoisePredictor};
use crate::error::{Error, Result};
use crate::guidance::{guided_noise, Guide};
use crate::rng;
use crate::schedule::NoiseSchedule;

/// `x_θ = (x_t − √(1−ᾱ_t) ε̃) / √ᾱ_t`.
pub fn x_prediction(sched: &NoiseSchedule, x: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
    let (a, s) = (sched.signal(t), sched.noise(t));
    x.iter().zip(eps).map(|(xi, e)| (xi - s * e) / a).collect()
}

/// Solver timesteps `t_0 = T > t_1 > … > t_M ≥ 1` and the half-log-SNR
/// increments `b[i] = λ(t_i) − λ(t_{i−1})` (`b[0]` is unused and zero).
#[derive(Debug, Clone, PartialEq)]
pub struct SolverPlan {
    pub timesteps: Vec<usize>,
    pub b: Vec<f64>,
}

impl SolverPlan {
    pub fn steps(&self) -> usize {
        self.timesteps.len() - 1
    }
}

/// Timesteps uniform in λ between λ(T) and λ(1), rounded to the nearest grid
/// step and forced strictly decreasing. `M + 1` distinct steps must fit in
/// `1..=T`, so `M ≤ T − 1`; `M = T − 1` visits every grid step.
pub fn make_plan(sched: &NoiseSchedule, m: usize) -> Result<SolverPlan> {
    let big_t = sched.steps();
    if m == 0 || m >= big_t {
        return Err(Error::config(format!(
            "solver steps M = {m} must lie in 1..={} (M + 1 distinct timesteps in 1..={big_t})",
            big_t.saturating_sub(1)
        )));
    }
    let (l_hi, l_lo) = (sched.lambda(big_t), sched.lambda(1));
    let mut ts = vec![big_t];
    for i in 1..m {
        let target = l_hi + (l_lo - l_hi) * i as f64 / m as f64;
        // λ is decreasing in t: pick the grid step nearest in λ.
        let nearest = (1..=big_t)
            .min_by(|&a, &b| {
                let da = (sched.lambda(a) - target).abs();
                let db = (sched.lambda(b) - target).abs();
                da.total_cmp(&db)
            })
            .unwrap_or(1);
        let prev = *ts.last().unwrap_or(&big_t);
        // keep room for the remaining m − i steps down to 1
        let hi = prev - 1;
        let lo = 1 + (m - i);
        ts.push(nearest.clamp(lo, hi));
    }
    ts.push(1);
    let mut b = vec![0.0];
    b.extend(ts.windows(2).map(|w| sched.lambda(w[1]) - sched.lambda(w[0])));
    Ok(SolverPlan { timesteps: ts, b })
}

/// Which update the multistep solver applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverFormula {
    /// The first step and the multistep update transcribed term for term,
    /// including the per-step `√α_{t_i}` factor of the multistep update.
    Literal,
    /// Second-order multistep data-prediction update with `√ᾱ_{t_i}` factors.
    Validated,
    /// First-order data-prediction update at every step (reference).
    FirstOrder,
}

impl SolverFormula {
    pub fn name(self) -> &'static str {
        match self {
            SolverFormula::Literal => "literal",
            SolverFormula::Validated => "validated",
            SolverFormula::FirstOrder => "first_order",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(SolverFormula::Literal),
            "validated" => Ok(SolverFormula::Validated),
            "first_order" => Ok(SolverFormula::FirstOrder),
            _ => Err(Error::config(format!("unknown solver formula `{s}`"))),
        }
    }
}

/// Axis-aligned box that data predictions `x_θ` are clamped to.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DataBox {
    /// Bounding box of `points` widened by `margin` times its extent per axis.
    pub fn around<'p>(points: impl IntoIterator<Item = &'p [f64]>, margin: f64) -> Result<Self> {
        let mut it = points.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::invalid("data box of an empty point set"))?;
        let (mut lo, mut hi) = (first.to_vec(), first.to_vec());
        for p in it {
            if p.len() != lo.len() {
                return Err(Error::shape("points of different dimension"));
            }
            for ((l, h), v) in lo.iter_mut().zip(hi.iter_mut()).zip(p) {
                *l = l.min(*v);
                *h = h.max(*v);
            }
        }
        for (l, h) in lo.iter_mut().zip(hi.iter_mut()) {
            let pad = margin * (*h - *l);
            *l -= pad;
            *h += pad;
        }
        Ok(DataBox { lo, hi })
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for ((v, l), h) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*l, *h);
        }
    }
}

/// Everything a sampler reads: frozen model, optional guide and the schedule.
#[derive(Clone, Copy)]
pub struct Sampler<'a> {
    pub model: &'a dyn NoisePredictor,
    pub guide: Option<&'a Guide<'a>>,
    pub sched: &'a NoiseSchedule,
    /// Clamp for `x_θ`; the noise prediction is made consistent with the
    /// clamped `x_θ` before every update.
    pub clip: Option<&'a DataBox>,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a dyn NoisePredictor, guide: Option<&'a Guide<'a>>, sched: &'a NoiseSchedule) -> Self {
        Sampler {
            model,
            guide,
            sched,
            clip: None,
        }
    }

    pub fn with_clip(self, clip: Option<&'a DataBox>) -> Self {
        Sampler { clip, ..self }
    }

    /// Guided noise and the matching data prediction at `(x, t)`.
    fn predict(&self, x: &[f64], t: usize, cond: Condition, y: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let eps = guided_noise(self.model, self.guide, self.sched, x, t, cond, y)?;
        let mut xth = x_prediction(self.sched, x, t, &eps);
        match self.clip {
            None => Ok((eps, xth)),
            Some(b) => {
                b.clamp(&mut xth);
                let (a, s) = (self.sched.signal(t), self.sched.noise(t));
                let eps = x.iter().zip(&xth).map(|(xi, m)| (xi - a * m) / s).collect();
                Ok((eps, xth))
            }
        }
    }

    /// Reverse chain `t = T, …, 1` started from `x_T`.
    pub fn ancestral_from<R: Rng + ?Sized>(
        &self,
        x_t: Vec<f64>,
        cond: Condition,
        y: usize,
        r: &mut R,
    ) -> Result<Vec<f64>> {
        let s = self.sched;
        let mut x = x_t;
        for t in (1..=s.steps()).rev() {
            let (eps, _) = self.predict(&x, t, cond, y)?;
            let at = s.alpha(t);
            let c = (1.0 - at) / s.noise(t);
            let sig = s.sigma(t);
            let z = if sig > 0.0 {
                rng::normal_vec(r, x.len())
            } else {
                vec![0.0; x.len()]
            };
            for ((xi, e), zi) in x.iter_mut().zip(&eps).zip(&z) {
                *xi = (*xi - c * e) / at.sqrt() + sig * zi;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("ancestral step t = {t}")));
            }
        }
        Ok(x)
    }

    pub fn ancestral(&self, cond: Condition, y: usize, seed: u64) -> Result<Vec<f64>> {
        let mut r = rng::stream(seed);
        let x_t = rng::normal_vec(&mut r, self.model.data_dim());
        self.ancestral_from(x_t, cond, y, &mut r)
    }

    /// Deterministic solver trajectory from a given `x_T`.
    pub fn solve_from(
        &self,
        x_t: Vec<f64>,
        plan: &SolverPlan,
        formula: SolverFormula,
        cond: Condition,
        y: usize,
    ) -> Result<Vec<f64>> {
        let s = self.sched;
        let ts = &plan.timesteps;
        let mut x = x_t;
        // x_θ at the two most recent states, newest first
        let mut cache: Vec<Vec<f64>> = Vec::with_capacity(2);
        for i in 1..ts.len() {
            let (tp, tc) = (ts[i - 1], ts[i]);
            let h = plan.b[i];
            let ratio = s.noise(tc) / s.noise(tp);
            let (eps, xth) = self.predict(&x, tp, cond, y)?;
            let next: Vec<f64> = match formula {
                SolverFormula::Literal if i == 1 => {
                    let k = s.noise(tc) / s.signal(tc);
                    let c = s.signal(tc) * (1.0 - (-h).exp());
                    x.iter()
                        .zip(&eps)
                        .map(|(xi, e)| ratio * xi + c * (xi - k * e))
                        .collect()
                }
                SolverFormula::Literal => {
                    let q = h / (2.0 * plan.b[i - 1]);
                    let c = s.alpha(tc).sqrt() * ((-h).exp() - 1.0);
                    x.iter()
                        .zip(&xth)
                        .zip(&cache[0])
                        .map(|((xi, m0), m1)| c * (q * m1 - (1.0 + q) * m0) + ratio * xi)
                        .collect()
                }
                SolverFormula::Validated if i > 1 => {
                    let q = h / (2.0 * plan.b[i - 1]);
                    let c = s.signal(tc) * ((-h).exp() - 1.0);
                    x.iter()
                        .zip(&xth)
                        .zip(&cache[0])
                        .map(|((xi, m0), m1)| ratio * xi - c * ((1.0 + q) * m0 - q * m1))
                        .collect()
                }
                SolverFormula::Validated | SolverFormula::FirstOrder => {
                    let c = s.signal(tc) * ((-h).exp() - 1.0);
                    x.iter().zip(&xth).map(|(xi, m0)| ratio * xi - c * m0).collect()
                }
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("solver step {i} (t = {tc})")));
            }
            cache.insert(0, xth);
            cache.truncate(1);
            x = next;
        }
        Ok(x)
    }

    /// `x_T ~ N(0, I)` from `seed`, then [`Sampler::solve_from`].
    pub fn solve(
        &self,
        plan: &SolverPlan,
        formula: SolverFormula,
        cond: Condition,
        y: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let mut r = rng::stream(seed);
        let x_t = rng::normal_vec(&mut r, self.model.data_dim());
        self.solve_from(x_t, plan, formula, cond, y)
    }
}

/// How generated samples are assigned classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassRule {
    /// Equal counts per class (remainder to the lowest class indices).
    PerClass,
    /// Independent uniform draws.
    Uniform,
}

impl ClassRule {
    pub fn name(self) -> &'static str {
        match self {
            ClassRule::PerClass => "per_class",
            ClassRule::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_class" => Ok(ClassRule::PerClass),
            "uniform" => Ok(ClassRule::Uniform),
            _ => Err(Error::config(format!("unknown class rule `{s}`"))),
        }
    }
}

/// What the denoiser is told for a sample of class `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelInput {
    /// `None` feeds the sampled class; `Some(c)` a fixed class (for models
    /// trained without class conditioning).
    pub fixed_class: Option<usize>,
    pub domain: Option<usize>,
}

impl ModelInput {
    pub fn condition(&self, y: usize) -> Condition {
        Condition {
            class: self.fixed_class.unwrap_or(y),
            domain: self.domain,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateConfig {
    pub n: usize,
    pub n_classes: usize,
    pub rule: ClassRule,
    pub formula: SolverFormula,
    pub input: ModelInput,
    pub seed: u64,
}

/// `N_g` solver samples tagged as generated; sample `i` owns the RNG stream
/// derived from `(seed, i)`, so the output does not depend on thread count.
pub fn generate_dataset(sampler: &Sampler<'_>, plan: &SolverPlan, cfg: &GenerateConfig) -> Result<DomainDataset> {
    if cfg.n == 0 {
        return Err(Error::config("number of generated samples must be at least 1"));
    }
    if cfg.n_classes == 0 {
        return Err(Error::config("need at least one class"));
    }
    let classes: Vec<usize> = match cfg.rule {
        ClassRule::PerClass => {
            let k = cfg.n_classes;
            let (base, extra) = (cfg.n / k, cfg.n % k);
            (0..k)
                .flat_map(|c| std::iter::repeat_n(c, base + usize::from(c < extra)))
                .collect()
        }
        ClassRule::Uniform => {
            let mut r = rng::child(cfg.seed, "class-draw", 0);
            (0..cfg.n).map(|_| r.gen_range(0..cfg.n_classes)).collect()
        }
    };
    let points: Vec<LabeledPoint> = classes
        .par_iter()
        .enumerate()
        .map(|(i, &y)| {
            let seed = rng::derive_seed(cfg.seed, "generate", i as u64);
            let x = sampler.solve(plan, cfg.formula, cfg.input.condition(y), y, seed)?;
            Ok(LabeledPoint {
                x,
                y,
                domain: Domain::Generated,
            })
        })
        .collect::<Result<_>>()?;
    DomainDataset::new(sampler.model.data_dim(), cfg.n_classes, points)
}
