//! Closed-form references for isotropic Gaussian data.
//!
//! With `x_0 ~ N(μ, v I)` the noisy marginal at step `t` is
//! `N(√ᾱ_t μ, (ᾱ_t v + 1 − ᾱ_t) I)`, which gives the optimal noise predictor,
//! Bayes domain posteriors and the probability-flow ODE solution exactly.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Domain;
use crate::diffusion::{Condition, NoisePredictor};
use crate::error::{Error, Result};
use crate::guidance::GuidanceSource;
use crate::schedule::NoiseSchedule;

/// One isotropic Gaussian component for a `(domain, class)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCell {
    pub domain: Domain,
    pub class: usize,
    pub mean: Vec<f64>,
    pub var: f64,
    /// Mixture weight within its domain.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    cells: Vec<GaussianCell>,
    /// Prior of the target domain; the source domain has `1 − target_prior`.
    target_prior: f64,
}

impl GaussianSpec {
    pub fn new(cells: Vec<GaussianCell>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::invalid("Gaussian spec needs at least one cell"));
        }
        let d = cells[0].mean.len();
        for c in &cells {
            if c.mean.len() != d || d == 0 {
                return Err(Error::shape("all cells must share one positive dimension"));
            }
            if !(c.var > 0.0) || !(c.weight > 0.0) {
                return Err(Error::invalid("cell variances and weights must be positive"));
            }
        }
        for dom in [Domain::Source, Domain::Target, Domain::Generated] {
            let w: f64 = cells.iter().filter(|c| c.domain == dom).map(|c| c.weight).sum();
            if w > 0.0 && (w - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "weights of domain {} sum to {w}, expected 1",
                    dom.tag()
                )));
            }
        }
        Ok(GaussianSpec {
            cells,
            target_prior: 0.5,
        })
    }

    /// A single-cell spec.
    pub fn single(mean: Vec<f64>, var: f64) -> Result<Self> {
        GaussianSpec::new(vec![GaussianCell {
            domain: Domain::Source,
            class: 0,
            mean,
            var,
            weight: 1.0,
        }])
    }

    pub fn with_target_prior(mut self, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid("target prior must lie in (0, 1)"));
        }
        self.target_prior = p;
        Ok(self)
    }

    pub fn cells(&self) -> &[GaussianCell] {
        &self.cells
    }

    pub fn dim(&self) -> usize {
        self.cells[0].mean.len()
    }

    pub fn target_prior(&self) -> f64 {
        self.target_prior
    }

    fn domain_prior(&self, d: Domain) -> f64 {
        let present = |dom| self.cells.iter().any(|c| c.domain == dom);
        match (present(Domain::Source), present(Domain::Target)) {
            (true, true) => match d {
                Domain::Target => self.target_prior,
                _ => 1.0 - self.target_prior,
            },
            _ => 1.0,
        }
    }

    /// Cells matching the optional domain and class filters.
    pub fn select(&self, domain: Option<Domain>, class: Option<usize>) -> Vec<&GaussianCell> {
        self.cells
            .iter()
            .filter(|c| domain.is_none_or(|d| c.domain == d) && class.is_none_or(|k| c.class == k))
            .collect()
    }

    /// The unique cell matching the filters; errors on a mixture or no match.
    pub fn component(&self, domain: Option<Domain>, class: Option<usize>) -> Result<&GaussianCell> {
        match self.select(domain, class).as_slice() {
            [one] => Ok(one),
            [] => Err(Error::invalid("no Gaussian cell matches the selection")),
            many => Err(Error::invalid(format!(
                "selection is a mixture of {} cells; a single Gaussian is required",
                many.len()
            ))),
        }
    }

    /// The spec of the noisy marginals at step `t`.
    pub fn noised(&self, sched: &NoiseSchedule, t: usize) -> Result<GaussianSpec> {
        sched.check_t(t)?;
        let (a, ab) = (sched.signal(t), sched.alpha_bar(t));
        Ok(GaussianSpec {
            cells: self
                .cells
                .iter()
                .map(|c| GaussianCell {
                    mean: c.mean.iter().map(|m| a * m).collect(),
                    var: ab * c.var + 1.0 - ab,
                    ..c.clone()
                })
                .collect(),
            target_prior: self.target_prior,
        })
    }

    /// Log-density and its gradient for the mixture of the selected cells,
    /// each weighted by domain prior times in-domain weight.
    pub fn log_density_grad(&self, x: &[f64], domain: Option<Domain>, class: Option<usize>) -> Result<(f64, Vec<f64>)> {
        let cells = self.select(domain, class);
        if cells.is_empty() {
            return Err(Error::invalid("no Gaussian cell matches the selection"));
        }
        let d = x.len() as f64;
        let terms: Vec<(f64, &GaussianCell)> = cells
            .iter()
            .map(|c| {
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                let lw = (self.domain_prior(c.domain) * c.weight).ln();
                let lp = lw - 0.5 * d * (2.0 * std::f64::consts::PI * c.var).ln() - sq / (2.0 * c.var);
                (lp, *c)
            })
            .collect();
        let m = terms.iter().map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = terms.iter().map(|(l, _)| (l - m).exp()).sum();
        let mut grad = vec![0.0; x.len()];
        for (l, c) in &terms {
            let r = (l - m).exp() / z;
            for ((g, xi), mi) in grad.iter_mut().zip(x).zip(&c.mean) {
                *g -= r * (xi - mi) / c.var;
            }
        }
        Ok((m + z.ln(), grad))
    }

    /// Log-density of the noisy marginal `q_t` restricted to the selection.
    pub fn noisy_log_density_grad(
        &self,
        sched: &NoiseSchedule,
        x: &[f64],
        t: usize,
        domain: Option<Domain>,
        class: Option<usize>,
    ) -> Result<(f64, Vec<f64>)> {
        self.noised(sched, t)?.log_density_grad(x, domain, class)
    }
}

/// `E[ε | x_t]` for a single Gaussian cell:
/// `√(1−ᾱ_t) (x_t − √ᾱ_t μ) / (ᾱ_t v + 1 − ᾱ_t)`.
pub fn oracle_eps(
    spec: &GaussianSpec,
    x_t: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    domain: Option<Domain>,
    class: Option<usize>,
) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    let cell = spec.component(domain, class)?;
    if x_t.len() != cell.mean.len() {
        return Err(Error::shape("x_t dimension differs from the spec"));
    }
    let (a, ab, s) = (sched.signal(t), sched.alpha_bar(t), sched.noise(t));
    let denom = ab * cell.var + 1.0 - ab;
    Ok(x_t
        .iter()
        .zip(&cell.mean)
        .map(|(x, m)| s * (x - a * m) / denom)
        .collect())
}

/// `E[ε | x_t]` for a mixture selection, `−√(1−ᾱ_t) ∇ log q_t(x_t)`.
pub fn oracle_mixture_eps(
    spec: &GaussianSpec,
    x_t: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    domain: Option<Domain>,
    class: Option<usize>,
) -> Result<Vec<f64>> {
    let (_, g) = spec.noisy_log_density_grad(sched, x_t, t, domain, class)?;
    let s = sched.noise(t);
    Ok(g.into_iter().map(|v| -s * v).collect())
}

/// `∇_x log p(domain | x_t)` under the Bayes posterior of the noisy domain marginals.
pub fn bayes_domain_log_posterior_grad(
    spec: &GaussianSpec,
    x_t: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    domain: Domain,
) -> Result<Vec<f64>> {
    let (_, g_dom) = spec.noisy_log_density_grad(sched, x_t, t, Some(domain), None)?;
    let (_, g_all) = spec.noisy_log_density_grad(sched, x_t, t, None, None)?;
    Ok(g_dom.iter().zip(&g_all).map(|(a, b)| a - b).collect())
}

/// Guided optimal noise for class `y`:
/// `E[ε | x_t, y] − s √(1−ᾱ_t) ∇ log p(target | x_t)`.
pub fn oracle_guided_eps(
    spec: &GaussianSpec,
    x_t: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    scale: f64,
    target: Domain,
    class: usize,
) -> Result<Vec<f64>> {
    let eps = oracle_mixture_eps(spec, x_t, t, sched, None, Some(class))?;
    let g = bayes_domain_log_posterior_grad(spec, x_t, t, sched, target)?;
    let c = scale * sched.noise(t);
    Ok(eps.iter().zip(&g).map(|(e, gi)| e - c * gi).collect())
}

fn standardised_scale(cell: &GaussianCell, alpha_bar: f64) -> f64 {
    (alpha_bar * cell.var + 1.0 - alpha_bar).sqrt()
}

/// Exact probability-flow ODE transport of `x` from step `from` to step `to`
/// for a single Gaussian cell. The standardised coordinate
/// `(x − √ᾱ μ) / √(ᾱ v + 1 − ᾱ)` is invariant along the flow.
pub fn oracle_ode_endpoint(
    spec: &GaussianSpec,
    x: &[f64],
    sched: &NoiseSchedule,
    from: usize,
    to: usize,
) -> Result<Vec<f64>> {
    sched.check_t(from)?;
    sched.check_t(to)?;
    let cell = spec.component(None, None)?;
    let (ab_f, ab_t) = (sched.alpha_bar(from), sched.alpha_bar(to));
    let ratio = standardised_scale(cell, ab_t) / standardised_scale(cell, ab_f);
    Ok(x.iter()
        .zip(&cell.mean)
        .map(|(xi, m)| ab_t.sqrt() * m + ratio * (xi - ab_f.sqrt() * m))
        .collect())
}

/// Dense Euler integration of `dx/dλ = −α² x + α x_θ(x, λ)` with `α² = sigmoid(2λ)`.
pub fn euler_ode_reference(
    spec: &GaussianSpec,
    x: &[f64],
    sched: &NoiseSchedule,
    from: usize,
    to: usize,
    steps: usize,
) -> Result<Vec<f64>> {
    let cell = spec.component(None, None)?;
    let (l0, l1) = (sched.lambda(from), sched.lambda(to));
    let h = (l1 - l0) / steps as f64;
    let mut state = x.to_vec();
    for i in 0..steps {
        let lam = l0 + h * i as f64;
        let a2 = 1.0 / (1.0 + (-2.0 * lam).exp());
        let a = a2.sqrt();
        let gain = a * cell.var / (a2 * cell.var + 1.0 - a2);
        for (s, m) in state.iter_mut().zip(&cell.mean) {
            let x0 = m + gain * (*s - a * m);
            *s += h * (-a2 * *s + a * x0);
        }
    }
    Ok(state)
}

/// Bayes error of discriminating two single-Gaussian domains with equal
/// isotropic variance under the spec's domain priors.
pub fn oracle_bayes_domain_error(spec: &GaussianSpec) -> Result<f64> {
    let s = spec.component(Some(Domain::Source), None)?;
    let t = spec.component(Some(Domain::Target), None)?;
    if (s.var - t.var).abs() > 1e-12 * s.var {
        return Err(Error::invalid("closed-form Bayes error needs equal variances"));
    }
    let dist = s
        .mean
        .iter()
        .zip(&t.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
        / s.var.sqrt();
    let (p0, p1) = (1.0 - spec.target_prior, spec.target_prior);
    if dist == 0.0 {
        return Ok(p0.min(p1));
    }
    let phi = Normal::new(0.0, 1.0).expect("standard normal");
    // projected, standardised: source ~ N(0,1), target ~ N(dist,1); decide target above c
    let c = dist / 2.0 + (p0 / p1).ln() / dist;
    Ok(p0 * (1.0 - phi.cdf(c)) + p1 * phi.cdf(c - dist))
}

/// The optimal (mixture) noise predictor of a spec, usable wherever a
/// trained denoiser is expected.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub spec: GaussianSpec,
    pub sched: NoiseSchedule,
    /// Whether the condition's class selects cells (otherwise all classes mix).
    pub class_conditional: bool,
}

impl NoisePredictor for OracleDenoiser {
    fn data_dim(&self) -> usize {
        self.spec.dim()
    }

    fn predict(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        let class = self.class_conditional.then_some(cond.class);
        let domain = cond
            .domain
            .map(|d| if d == 0 { Domain::Source } else { Domain::Target });
        oracle_mixture_eps(&self.spec, x, t, &self.sched, domain, class)
    }
}

/// Bayes domain classifier over the noisy domain marginals.
#[derive(Debug, Clone)]
pub struct BayesDomainClassifier {
    pub spec: GaussianSpec,
    pub sched: NoiseSchedule,
}

impl BayesDomainClassifier {
    /// Log of `π_d q_t^d(x)` for source (0) and target (1), with gradients.
    fn joint_logits(&self, x: &[f64], t: usize) -> Result<[(f64, Vec<f64>); 2]> {
        let noisy = self.spec.noised(&self.sched, t)?;
        let s = noisy.log_density_grad(x, Some(Domain::Source), None)?;
        let g = noisy.log_density_grad(x, Some(Domain::Target), None)?;
        Ok([s, g])
    }

    pub fn prob(&self, x: &[f64], t: usize, label: usize) -> Result<f64> {
        let [(ls, _), (lt, _)] = self.joint_logits(x, t)?;
        let p = crate::tensor::softmax(&[ls, lt]);
        Ok(p[label])
    }
}

impl GuidanceSource for BayesDomainClassifier {
    fn grad_log_prob(&self, x: &[f64], t: usize, label: usize) -> Result<Vec<f64>> {
        let [(ls, gs), (lt, gt)] = self.joint_logits(x, t)?;
        let p = crate::tensor::softmax(&[ls, lt]);
        let (mine, other, p_other) = if label == 1 { (&gt, &gs, p[0]) } else { (&gs, &gt, p[1]) };
        Ok(mine.iter().zip(other).map(|(a, b)| p_other * (a - b)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::gradient_check;
    use approx::assert_relative_eq;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-3, 0.2).unwrap()
    }

    fn two_domain() -> GaussianSpec {
        GaussianSpec::new(vec![
            GaussianCell {
                domain: Domain::Source,
                class: 0,
                mean: vec![-2.0, 0.0],
                var: 0.5,
                weight: 1.0,
            },
            GaussianCell {
                domain: Domain::Target,
                class: 0,
                mean: vec![2.0, 0.0],
                var: 0.5,
                weight: 1.0,
            },
        ])
        .unwrap()
    }

    #[test]
    fn standard_normal_data_gives_scaled_identity() {
        let s = sched();
        let spec = GaussianSpec::single(vec![0.0, 0.0], 1.0).unwrap();
        for t in [1, 37, 100] {
            let e = oracle_eps(&spec, &[0.7, -1.2], t, &s, None, None).unwrap();
            assert_relative_eq!(e[0], s.noise(t) * 0.7, epsilon = 1e-14);
            assert_relative_eq!(e[1], -s.noise(t) * 1.2, epsilon = 1e-14);
        }
    }

    #[test]
    fn low_noise_limit_vanishes() {
        let s = NoiseSchedule::linear(10, 1e-8, 1e-8).unwrap();
        let spec = GaussianSpec::single(vec![1.0, 2.0], 0.3).unwrap();
        let x: Vec<f64> = spec.cells()[0].mean.iter().map(|m| s.signal(1) * m).collect();
        let e = oracle_eps(&spec, &x, 1, &s, None, None).unwrap();
        assert!(e.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn mixture_selection_is_rejected_for_single_oracle() {
        let r = oracle_eps(&two_domain(), &[0.0, 0.0], 5, &sched(), None, None);
        assert!(matches!(r, Err(Error::Invalid(_))));
    }

    #[test]
    fn oracle_eps_matches_monte_carlo_posterior_mean() {
        // E[ε | x_t] by importance weighting over draws of x_0 ~ N(μ, v).
        let s = sched();
        let spec = GaussianSpec::single(vec![0.5], 0.4).unwrap();
        let t = 30;
        let xt = 0.3;
        let (a, sd) = (s.signal(t), s.noise(t));
        let mut r = rng::stream(77);
        let n = 100_000;
        let (mut sw, mut swe, mut swe2) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let x0 = 0.5 + 0.4f64.sqrt() * rng::normal(&mut r);
            let eps = (xt - a * x0) / sd;
            let w = (-0.5 * eps * eps).exp();
            sw += w;
            swe += w * eps;
            swe2 += w * eps * eps;
        }
        let mean = swe / sw;
        let var = swe2 / sw - mean * mean;
        let ess = sw * sw / n as f64; // crude effective sample size bound
        let se = (var / ess.max(1.0)).sqrt();
        let exact = oracle_eps(&spec, &[xt], t, &s, None, None).unwrap()[0];
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn score_identity_holds() {
        let s = sched();
        let spec = GaussianSpec::single(vec![1.0, -0.5], 0.3).unwrap();
        for t in [2, 40, 90] {
            let x = [0.4, 0.9];
            let e = oracle_eps(&spec, &x, t, &s, None, None).unwrap();
            let score: Vec<f64> = e.iter().map(|v| -v / s.noise(t)).collect();
            let err = gradient_check(
                |p| Ok(spec.noisy_log_density_grad(&s, p, t, None, None)?.0),
                &x,
                &score,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-8, "t={t} err {err}");
        }
    }

    #[test]
    fn equal_domains_reduce_guided_to_plain() {
        let s = sched();
        let mut spec = two_domain();
        let spec = {
            let mut cells = spec.cells().to_vec();
            cells[1].mean = cells[0].mean.clone();
            spec = GaussianSpec::new(cells).unwrap();
            spec
        };
        let x = [0.3, -0.4];
        let g = oracle_guided_eps(&spec, &x, 20, &s, 1.0, Domain::Target, 0).unwrap();
        let e = oracle_mixture_eps(&spec, &x, 20, &s, None, Some(0)).unwrap();
        for (a, b) in g.iter().zip(&e) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn guidance_points_from_source_to_target() {
        let s = sched();
        let spec = two_domain();
        let x = [0.1, 0.3];
        let g = bayes_domain_log_posterior_grad(&spec, &x, 10, &s, Domain::Target).unwrap();
        // μ_T − μ_S = (4, 0)
        assert!(g[0] > 0.0);
        assert!(g[1].abs() < 1e-12 * g[0].abs().max(1.0));
        let guided = oracle_guided_eps(&spec, &x, 10, &s, 1.0, Domain::Target, 0).unwrap();
        let plain = oracle_mixture_eps(&spec, &x, 10, &s, None, Some(0)).unwrap();
        assert!(guided[0] < plain[0]);
    }

    #[test]
    fn log_posterior_gradient_matches_finite_differences() {
        let s = sched();
        let spec = two_domain().with_target_prior(0.3).unwrap();
        for t in [1, 25, 70] {
            let x = [0.2, -0.6];
            let g = bayes_domain_log_posterior_grad(&spec, &x, t, &s, Domain::Target).unwrap();
            let err = gradient_check(
                |p| {
                    let (lt, _) = spec.noisy_log_density_grad(&s, p, t, Some(Domain::Target), None)?;
                    let (la, _) = spec.noisy_log_density_grad(&s, p, t, None, None)?;
                    Ok(lt - la)
                },
                &x,
                &g,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-8, "t={t} err {err}");
        }
    }

    #[test]
    fn bayes_classifier_gradient_agrees_with_closed_form() {
        let s = sched();
        let spec = two_domain().with_target_prior(0.4).unwrap();
        let clf = BayesDomainClassifier {
            spec: spec.clone(),
            sched: s.clone(),
        };
        let x = [0.5, 1.0];
        let a = clf.grad_log_prob(&x, 15, 1).unwrap();
        let b = bayes_domain_log_posterior_grad(&spec, &x, 15, &s, Domain::Target).unwrap();
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn ode_endpoint_cases() {
        let s = sched();
        let spec = GaussianSpec::single(vec![0.0, 0.0], 1.0).unwrap();
        // identity covariance, zero mean: the flow is stationary
        let x = oracle_ode_endpoint(&spec, &[1.0, -2.0], &s, 100, 1).unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-14);
        let spec = GaussianSpec::single(vec![0.0], 0.25).unwrap();
        let x = oracle_ode_endpoint(&spec, &[0.0], &s, 100, 1).unwrap();
        assert_eq!(x, vec![0.0]);
        // scalar contraction for zero-mean data
        let y = oracle_ode_endpoint(&spec, &[1.0], &s, 100, 1).unwrap()[0];
        let ab = |t: usize| s.alpha_bar(t);
        let expect = ((ab(1) * 0.25 + 1.0 - ab(1)) / (ab(100) * 0.25 + 1.0 - ab(100))).sqrt();
        assert_relative_eq!(y, expect, epsilon = 1e-14);
    }

    #[test]
    fn dense_euler_agrees_with_closed_form() {
        let s = sched();
        let spec = GaussianSpec::single(vec![0.6, -0.4], 0.5).unwrap();
        let x = [1.1, 0.3];
        let exact = oracle_ode_endpoint(&spec, &x, &s, 100, 1).unwrap();
        let max_err = |v: &[f64]| exact.iter().zip(v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let coarse = euler_ode_reference(&spec, &x, &s, 100, 1, 100_000).unwrap();
        let fine = euler_ode_reference(&spec, &x, &s, 100, 1, 200_000).unwrap();
        // first order: halving the step halves the error
        let (ec, ef) = (max_err(&coarse), max_err(&fine));
        assert!(ec <= 1e-5 && (ec / ef - 2.0).abs() < 0.05, "{ec} {ef}");
        let extrapolated: Vec<f64> = coarse.iter().zip(&fine).map(|(c, f)| 2.0 * f - c).collect();
        assert!(max_err(&extrapolated) <= 1e-6, "{}", max_err(&extrapolated));
    }

    #[test]
    fn bayes_error_cases() {
        let spec = |sep: f64| {
            GaussianSpec::new(vec![
                GaussianCell {
                    domain: Domain::Source,
                    class: 0,
                    mean: vec![0.0, 0.0],
                    var: 1.0,
                    weight: 1.0,
                },
                GaussianCell {
                    domain: Domain::Target,
                    class: 0,
                    mean: vec![sep, 0.0],
                    var: 1.0,
                    weight: 1.0,
                },
            ])
            .unwrap()
        };
        assert_relative_eq!(oracle_bayes_domain_error(&spec(0.0)).unwrap(), 0.5);
        assert_relative_eq!(
            oracle_bayes_domain_error(&spec(4.0)).unwrap(),
            0.022_750_131_948_179_2,
            epsilon = 1e-10
        );
        let mut prev = 0.5;
        for k in 1..20 {
            let e = oracle_bayes_domain_error(&spec(0.3 * k as f64)).unwrap();
            assert!(e < prev);
            prev = e;
        }
    }
}
