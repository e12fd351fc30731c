//! Classifiers on noisy inputs and classifier-guided noise prediction.
//!
//! The domain classifier is a [`NoisyClassifier`] with two outputs
//! (0 = source, 1 = target). The same type with `K` outputs serves as the
//! class classifier for class-guidance ablations.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::data::DomainDataset;
use crate::diffusion::{Condition, NoisePredictor, TimeEmbedding, TrainConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{argmax, cross_entropy, softmax, Mlp, MlpGrads};

/// Provides `∇_x log p(label | x_t, t)`.
pub trait GuidanceSource: Sync {
    fn grad_log_prob(&self, x: &[f64], t: usize, label: usize) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub time_scale: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![32, 32],
            time_dim: 8,
            time_scale: 10.0,
        }
    }
}

/// `p_φ(label | x_t, t)` as a softmax over an MLP on `[x_t, time_embedding(t)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyClassifier {
    pub trunk: Mlp,
    pub time: TimeEmbedding,
    data_dim: usize,
}

pub type DomainClassifier = NoisyClassifier;

impl NoisyClassifier {
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        n_out: usize,
        horizon: usize,
        cfg: &ClassifierConfig,
        r: &mut R,
    ) -> Result<Self> {
        let mut time = TimeEmbedding::new(cfg.time_dim, horizon);
        time.scale = cfg.time_scale;
        let mut widths = vec![data_dim + cfg.time_dim];
        widths.extend(&cfg.hidden);
        widths.push(n_out);
        Ok(NoisyClassifier {
            trunk: Mlp::init(&widths, 1.0, r)?,
            time,
            data_dim,
        })
    }

    pub fn from_parts(trunk: Mlp, time: TimeEmbedding, data_dim: usize) -> Result<Self> {
        if trunk.in_dim() != data_dim + time.dim {
            return Err(Error::shape("classifier input width must be data_dim + time_dim"));
        }
        Ok(NoisyClassifier { trunk, time, data_dim })
    }

    pub fn n_out(&self) -> usize {
        self.trunk.out_dim()
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn logits(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        if x.len() != self.data_dim {
            return Err(Error::shape("classifier input has the wrong dimension"));
        }
        self.trunk.eval(&self.time.join(x, t))
    }

    pub fn probs(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x, t)?))
    }

    pub fn predict(&self, x: &[f64], t: usize) -> Result<usize> {
        Ok(argmax(&self.logits(x, t)?))
    }

    /// Cross-entropy of one example, accumulating parameter gradients.
    pub fn loss_accumulate(
        &self,
        x: &[f64],
        t: usize,
        label: usize,
        weight: f64,
        grads: Option<&mut MlpGrads>,
    ) -> Result<f64> {
        let (logits, cache) = self.trunk.forward(&self.time.join(x, t))?;
        let (loss, g) = cross_entropy(&logits, label);
        if let Some(grads) = grads {
            let g: Vec<f64> = g.iter().map(|v| v * weight).collect();
            self.trunk.backward_accumulate(&cache, &g, grads)?;
        }
        Ok(weight * loss)
    }

    pub fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(kind);
        ck.meta("data_dim", self.data_dim);
        ck.meta("time_dim", self.time.dim);
        ck.meta("time_scale", self.time.scale);
        ck.meta("max_period", self.time.max_period);
        ck.meta("horizon", self.time.horizon);
        ck.push_mlp("trunk", &self.trunk);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let time = TimeEmbedding {
            dim: ck.get_meta("time_dim")?,
            scale: ck.get_meta("time_scale")?,
            max_period: ck.get_meta("max_period")?,
            horizon: ck.get_meta("horizon")?,
        };
        NoisyClassifier::from_parts(ck.mlp("trunk")?, time, ck.get_meta("data_dim")?)
    }
}

impl GuidanceSource for NoisyClassifier {
    /// Gradient of the selected log-softmax entry w.r.t. `x_t`.
    fn grad_log_prob(&self, x: &[f64], t: usize, label: usize) -> Result<Vec<f64>> {
        if label >= self.n_out() {
            return Err(Error::invalid(format!("label {label} out of range")));
        }
        let (logits, cache) = self.trunk.forward(&self.time.join(x, t))?;
        let p = softmax(&logits);
        let og: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(j, pj)| f64::from(u8::from(j == label)) - pj)
            .collect();
        let (_, gin) = self.trunk.backward(&cache, &og)?;
        Ok(gin[..self.data_dim].to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: NoisyClassifier,
    pub loss_trace: Vec<f64>,
    /// `(t, accuracy)` on freshly noised copies of the training points.
    pub accuracy_by_t: Vec<(usize, f64)>,
}

/// Stochastic minimisation of `Σ_t Σ_x ℓ(φ(x_t, t), label)`: each step draws
/// one `t ~ U(1, T)` and noises a uniformly sampled mini-batch.
pub fn train_noisy_classifier(
    samples: &[(Vec<f64>, usize)],
    n_out: usize,
    sched: &NoiseSchedule,
    cfg: &ClassifierConfig,
    tcfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("classifier training set is empty"));
    }
    let dim = samples[0].0.len();
    let mut r = rng::child(tcfg.seed, "noisy-classifier", 0);
    let mut model = NoisyClassifier::new(dim, n_out, sched.steps(), cfg, &mut r)?;
    let mut trace = Vec::with_capacity(tcfg.iters);
    let w = 1.0 / tcfg.batch as f64;
    for iter in 0..tcfg.iters {
        let t = r.gen_range(1..=sched.steps());
        let mut g = MlpGrads::zeros_like(&model.trunk);
        let mut loss = 0.0;
        for _ in 0..tcfg.batch {
            let (x0, label) = &samples[r.gen_range(0..samples.len())];
            let eps = rng::normal_vec(&mut r, dim);
            let xt = sched.forward_noise(x0, t, &eps)?;
            loss += model.loss_accumulate(&xt, t, *label, w, Some(&mut g))?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "classifier loss at iteration {iter}, t = {t}"
            )));
        }
        model.trunk.sgd_step(&g, tcfg.lr);
        trace.push(loss);
    }
    let accuracy_by_t = accuracy_by_timestep(&model, samples, sched, tcfg.seed, 10)?;
    Ok(TrainedClassifier {
        model,
        loss_trace: trace,
        accuracy_by_t,
    })
}

/// Accuracy on noised copies of `samples` at `points` evenly spaced timesteps.
pub fn accuracy_by_timestep(
    model: &NoisyClassifier,
    samples: &[(Vec<f64>, usize)],
    sched: &NoiseSchedule,
    seed: u64,
    points: usize,
) -> Result<Vec<(usize, f64)>> {
    let mut r = rng::child(seed, "classifier-diagnostic", 0);
    let steps = sched.steps();
    let mut ts: Vec<usize> = (0..points.max(1))
        .map(|i| 1 + i * (steps - 1) / points.max(2).saturating_sub(1).max(1))
        .map(|t| t.min(steps))
        .collect();
    ts.dedup();
    ts.iter()
        .map(|&t| {
            let mut correct = 0usize;
            for (x0, label) in samples {
                let eps = rng::normal_vec(&mut r, x0.len());
                let xt = sched.forward_noise(x0, t, &eps)?;
                correct += usize::from(model.predict(&xt, t)? == *label);
            }
            Ok((t, correct as f64 / samples.len() as f64))
        })
        .collect()
}

/// Domain classifier on `D_s ∪ D_t` (source 0, target 1).
pub fn train_domain_classifier(
    source: &DomainDataset,
    target: &DomainDataset,
    sched: &NoiseSchedule,
    cfg: &ClassifierConfig,
    tcfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("domain classifier needs both domains non-empty"));
    }
    source.check_compatible(target)?;
    let samples: Vec<(Vec<f64>, usize)> = source
        .points
        .iter()
        .map(|p| (p.x.clone(), 0))
        .chain(target.points.iter().map(|p| (p.x.clone(), 1)))
        .collect();
    train_noisy_classifier(&samples, 2, sched, cfg, tcfg)
}

/// Class classifier on labeled points (used for class-guidance ablations).
pub fn train_class_classifier(
    labeled: &DomainDataset,
    sched: &NoiseSchedule,
    cfg: &ClassifierConfig,
    tcfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    let samples: Vec<(Vec<f64>, usize)> = labeled.points.iter().map(|p| (p.x.clone(), p.y)).collect();
    train_noisy_classifier(&samples, labeled.n_classes, sched, cfg, tcfg)
}

/// Coefficient multiplying the guidance gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceRule {
    /// `√(1 − ᾱ_t)`.
    SqrtOneMinusAlphaBar,
    /// Posterior standard deviation `σ_t`.
    Sigma,
}

impl GuidanceRule {
    pub fn coefficient(self, sched: &NoiseSchedule, t: usize) -> f64 {
        match self {
            GuidanceRule::SqrtOneMinusAlphaBar => sched.noise(t),
            GuidanceRule::Sigma => sched.sigma(t),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GuidanceRule::SqrtOneMinusAlphaBar => "sqrt_one_minus_alpha_bar",
            GuidanceRule::Sigma => "sigma_t",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sqrt_one_minus_alpha_bar" => Ok(GuidanceRule::SqrtOneMinusAlphaBar),
            "sigma_t" | "sigma" => Ok(GuidanceRule::Sigma),
            _ => Err(Error::config(format!("unknown guidance rule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    /// Domain label to guide towards (1 = target).
    pub target_domain: usize,
    pub rule: GuidanceRule,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            scale: 1.0,
            target_domain: 1,
            rule: GuidanceRule::SqrtOneMinusAlphaBar,
        }
    }
}

/// Which label a guidance term pushes towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuideLabel {
    Fixed(usize),
    /// The class `y` of the sample being generated.
    SampleClass,
}

/// A set of classifier terms whose log-probability gradients are summed.
pub struct Guide<'a> {
    pub terms: Vec<(&'a dyn GuidanceSource, GuideLabel)>,
    pub scale: f64,
    pub rule: GuidanceRule,
}

impl<'a> Guide<'a> {
    /// Domain guidance towards `cfg.target_domain`.
    pub fn domain(clf: &'a dyn GuidanceSource, cfg: &GuidanceConfig) -> Self {
        Guide {
            terms: vec![(clf, GuideLabel::Fixed(cfg.target_domain))],
            scale: cfg.scale,
            rule: cfg.rule,
        }
    }

    /// `Σ_k ∇ log p_k(label_k | x_t)`.
    pub fn gradient(&self, x: &[f64], t: usize, y: usize) -> Result<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        for (src, label) in &self.terms {
            let label = match label {
                GuideLabel::Fixed(l) => *l,
                GuideLabel::SampleClass => y,
            };
            let gi = src.grad_log_prob(x, t, label)?;
            g.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
        }
        Ok(g)
    }
}

/// `ε̃ = ε_θ(x_t, t, c) − s · coef(t) · ∇ log p(label | x_t, t)`.
///
/// With no guide or `s = 0` this returns the model prediction unchanged.
pub fn guided_noise(
    model: &dyn NoisePredictor,
    guide: Option<&Guide<'_>>,
    sched: &NoiseSchedule,
    x: &[f64],
    t: usize,
    cond: Condition,
    y: usize,
) -> Result<Vec<f64>> {
    let eps = model.predict(x, t, cond)?;
    let guide = match guide {
        Some(g) if g.scale != 0.0 && !g.terms.is_empty() => g,
        _ => return Ok(eps),
    };
    let grad = guide.gradient(x, t, y)?;
    let c = guide.rule.coefficient(sched, t);
    Ok(eps.iter().zip(&grad).map(|(e, g)| e - guide.scale * (c * g)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, LabeledPoint};
    use crate::tensor::{gradient_check, relative_error, Layer};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(50, 1e-3, 0.3).unwrap()
    }

    fn zero_classifier() -> NoisyClassifier {
        let cfg = ClassifierConfig {
            hidden: vec![4],
            time_dim: 4,
            time_scale: 10.0,
        };
        let mut c = NoisyClassifier::new(2, 2, 50, &cfg, &mut rng::stream(0)).unwrap();
        let n = c.trunk.num_params();
        c.trunk.set_flat_params(&vec![0.0; n]).unwrap();
        c
    }

    /// logits = W x with no time dependence: a single affine layer over `[x, temb]`
    /// whose time columns are zero.
    fn linear_classifier(w_src: [f64; 2], w_tgt: [f64; 2]) -> NoisyClassifier {
        let time = TimeEmbedding::new(2, 50);
        let weight = vec![w_src[0], w_src[1], 0.0, 0.0, w_tgt[0], w_tgt[1], 0.0, 0.0];
        let trunk = Mlp::new(vec![Layer::new(4, 2, weight, vec![0.0, 0.0]).unwrap()]).unwrap();
        NoisyClassifier::from_parts(trunk, time, 2).unwrap()
    }

    struct ConstModel;
    impl NoisePredictor for ConstModel {
        fn data_dim(&self) -> usize {
            2
        }
        fn predict(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
            Ok(vec![0.1 * x[0] + t as f64 * 1e-3, -0.2 * x[1] + cond.class as f64])
        }
    }

    #[test]
    fn uniform_classifier_has_zero_gradient() {
        let g = zero_classifier().grad_log_prob(&[0.3, -1.0], 7, 1).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_classifier_gradient_by_hand() {
        let (ws, wt) = ([0.5, -1.0], [2.0, 0.25]);
        let clf = linear_classifier(ws, wt);
        let x = [0.4, 0.8];
        let p_t = clf.probs(&x, 3).unwrap()[1];
        let g = clf.grad_log_prob(&x, 3, 1).unwrap();
        for k in 0..2 {
            let expect = (1.0 - p_t) * (wt[k] - ws[k]);
            assert!((g[k] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = ClassifierConfig::default();
        for seed in 0..5 {
            let clf = NoisyClassifier::new(2, 2, 50, &cfg, &mut rng::stream(seed)).unwrap();
            let x = rng::normal_vec(&mut rng::stream(100 + seed), 2);
            let g = clf.grad_log_prob(&x, 9, 1).unwrap();
            let err = gradient_check(|p| Ok(crate::tensor::log_softmax(&clf.logits(p, 9)?)[1]), &x, &g, 1e-5).unwrap();
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn zero_scale_is_bitwise_unguided() {
        let s = sched();
        let clf = linear_classifier([1.0, 2.0], [-1.0, 0.5]);
        let cfg = GuidanceConfig {
            scale: 0.0,
            ..GuidanceConfig::default()
        };
        let guide = Guide::domain(&clf, &cfg);
        let x = [0.3, 0.7];
        let a = guided_noise(&ConstModel, Some(&guide), &s, &x, 11, Condition::class(1), 1).unwrap();
        let b = ConstModel.predict(&x, 11, Condition::class(1)).unwrap();
        assert_eq!(a, b);
        let zero = zero_classifier();
        let guide = Guide::domain(&zero, &GuidanceConfig::default());
        let c = guided_noise(&ConstModel, Some(&guide), &s, &x, 11, Condition::class(1), 1).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn guided_noise_is_linear_in_scale() {
        let s = sched();
        let clf = linear_classifier([1.0, 2.0], [-1.0, 0.5]);
        let x = [0.3, 0.7];
        let at = |scale: f64| {
            let cfg = GuidanceConfig {
                scale,
                ..GuidanceConfig::default()
            };
            guided_noise(
                &ConstModel,
                Some(&Guide::domain(&clf, &cfg)),
                &s,
                &x,
                20,
                Condition::class(0),
                0,
            )
            .unwrap()
        };
        let (a, b, m) = (at(0.5), at(1.5), at(1.0));
        for k in 0..2 {
            assert!((a[k] + b[k] - 2.0 * m[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn sigma_rule_uses_posterior_std() {
        let s = sched();
        assert_eq!(GuidanceRule::Sigma.coefficient(&s, 1), 0.0);
        assert_eq!(GuidanceRule::SqrtOneMinusAlphaBar.coefficient(&s, 10), s.noise(10));
    }

    #[test]
    fn classifier_cross_entropy_gradient() {
        let cfg = ClassifierConfig::default();
        for seed in 0..5 {
            let clf = NoisyClassifier::new(2, 3, 50, &cfg, &mut rng::stream(seed)).unwrap();
            let x = rng::normal_vec(&mut rng::stream(seed + 50), 2);
            let mut g = MlpGrads::zeros_like(&clf.trunk);
            clf.loss_accumulate(&x, 4, 2, 1.0, Some(&mut g)).unwrap();
            let mut probe = clf.clone();
            let err = gradient_check(
                |p| {
                    probe.trunk.set_flat_params(p)?;
                    probe.loss_accumulate(&x, 4, 2, 1.0, None)
                },
                &clf.trunk.flat_params(),
                &g.flat(),
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-5);
        }
    }

    #[test]
    fn single_domain_is_rejected() {
        let ds = DomainDataset::new(
            1,
            1,
            vec![LabeledPoint {
                x: vec![0.0],
                y: 0,
                domain: Domain::Source,
            }],
        )
        .unwrap();
        let empty = DomainDataset::empty(1, 1);
        let tcfg = TrainConfig {
            lr: 0.1,
            batch: 4,
            iters: 1,
            seed: 0,
        };
        assert!(train_domain_classifier(&ds, &empty, &sched(), &ClassifierConfig::default(), &tcfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let clf = NoisyClassifier::new(2, 2, 50, &ClassifierConfig::default(), &mut rng::stream(2)).unwrap();
        let ck = Checkpoint::parse(&clf.to_checkpoint("domain_classifier").to_text()).unwrap();
        let back = NoisyClassifier::from_checkpoint(&ck).unwrap();
        assert_eq!(back, clf);
        let x = [0.1, 0.2];
        assert!(relative_error(back.logits(&x, 3).unwrap()[0], clf.logits(&x, 3).unwrap()[0]) == 0.0);
    }
}
