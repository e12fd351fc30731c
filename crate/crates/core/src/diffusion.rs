//! Label-conditioned noise predictor and its training loop.
//!
//! The network sees `[x_t, time_embedding(t)]`; the class embedding (and,
//! optionally, a domain embedding) is added to the first hidden
//! pre-activation.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{Domain, DomainDataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{ForwardCache, Mlp, MlpGrads};

/// What the noise predictor is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Condition {
    pub class: usize,
    /// Domain index (0 source, 1 target) when domains are a model input.
    pub domain: Option<usize>,
}

impl Condition {
    pub fn class(class: usize) -> Self {
        Condition { class, domain: None }
    }
}

/// Anything that predicts the injected noise `ε(x_t, t, c)`.
pub trait NoisePredictor: Sync {
    fn data_dim(&self) -> usize;
    fn predict(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>>;
}

/// Something that maps a point to a class label.
pub trait Labeler: Sync {
    fn label(&self, x: &[f64]) -> Result<usize>;
}

/// Sinusoidal embedding of `u = scale · t / T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub scale: f64,
    pub max_period: f64,
    pub horizon: usize,
}

impl TimeEmbedding {
    pub fn new(dim: usize, horizon: usize) -> Self {
        TimeEmbedding {
            dim,
            scale: 10.0,
            max_period: 100.0,
            horizon,
        }
    }

    pub fn embed(&self, t: usize) -> Vec<f64> {
        let half = self.dim / 2;
        let u = self.scale * t as f64 / self.horizon as f64;
        let mut out = Vec::with_capacity(self.dim);
        for i in 0..half {
            let freq = (-(self.max_period.ln()) * i as f64 / half.max(1) as f64).exp();
            out.push((u * freq).sin());
        }
        for i in 0..half {
            let freq = (-(self.max_period.ln()) * i as f64 / half.max(1) as f64).exp();
            out.push((u * freq).cos());
        }
        if self.dim % 2 == 1 {
            out.push(u / self.scale);
        }
        out
    }

    /// `[x, embed(t)]`.
    pub fn join(&self, x: &[f64], t: usize) -> Vec<f64> {
        let mut v = x.to_vec();
        v.extend(self.embed(t));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub time_scale: f64,
    pub out_scale: f64,
    pub embed_std: f64,
    /// Adds a learned domain embedding next to the class embedding.
    pub domain_embedding: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            hidden: vec![64, 64],
            time_dim: 16,
            time_scale: 10.0,
            out_scale: 0.1,
            embed_std: 0.1,
            domain_embedding: false,
        }
    }
}

/// `ε_θ(x_t, t, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedDenoiser {
    pub trunk: Mlp,
    pub time: TimeEmbedding,
    pub class_embed: Vec<Vec<f64>>,
    pub domain_embed: Option<Vec<Vec<f64>>>,
    data_dim: usize,
}

#[derive(Debug, Clone)]
pub struct DenoiserGrads {
    pub trunk: MlpGrads,
    pub class_embed: Vec<Vec<f64>>,
    pub domain_embed: Option<Vec<Vec<f64>>>,
}

impl DenoiserGrads {
    pub fn zeros_like(m: &ConditionedDenoiser) -> Self {
        let width = m.first_width();
        DenoiserGrads {
            trunk: MlpGrads::zeros_like(&m.trunk),
            class_embed: vec![vec![0.0; width]; m.class_embed.len()],
            domain_embed: m.domain_embed.as_ref().map(|d| vec![vec![0.0; width]; d.len()]),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.trunk.flat();
        v.extend(self.class_embed.iter().flatten());
        if let Some(d) = &self.domain_embed {
            v.extend(d.iter().flatten());
        }
        v
    }
}

/// Cache of one conditioned forward pass.
#[derive(Debug, Clone)]
pub struct DenoiserCache {
    inner: ForwardCache,
    cond: Condition,
}

impl ConditionedDenoiser {
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        n_classes: usize,
        horizon: usize,
        cfg: &DenoiserConfig,
        r: &mut R,
    ) -> Result<Self> {
        if data_dim == 0 || n_classes == 0 || cfg.hidden.is_empty() {
            return Err(Error::config(
                "denoiser needs data_dim, K and at least one hidden layer",
            ));
        }
        let mut time = TimeEmbedding::new(cfg.time_dim, horizon);
        time.scale = cfg.time_scale;
        let mut widths = vec![data_dim + cfg.time_dim];
        widths.extend(&cfg.hidden);
        widths.push(data_dim);
        let trunk = Mlp::init(&widths, cfg.out_scale, r)?;
        let h = cfg.hidden[0];
        let mut table = |rows: usize| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..h).map(|_| cfg.embed_std * rng::normal(r)).collect())
                .collect()
        };
        let class_embed = table(n_classes);
        let domain_embed = cfg.domain_embedding.then(|| table(2));
        Ok(ConditionedDenoiser {
            trunk,
            time,
            class_embed,
            domain_embed,
            data_dim,
        })
    }

    /// Network with every parameter zero.
    pub fn zeroed(data_dim: usize, n_classes: usize, horizon: usize, cfg: &DenoiserConfig) -> Result<Self> {
        let mut m = ConditionedDenoiser::new(data_dim, n_classes, horizon, cfg, &mut rng::stream(0))?;
        let n = m.num_params();
        m.set_flat_params(&vec![0.0; n])?;
        Ok(m)
    }

    pub fn n_classes(&self) -> usize {
        self.class_embed.len()
    }

    pub fn horizon(&self) -> usize {
        self.time.horizon
    }

    fn first_width(&self) -> usize {
        self.trunk.layers()[0].out_dim
    }

    fn check(&self, x: &[f64], t: usize, cond: Condition) -> Result<()> {
        if x.len() != self.data_dim {
            return Err(Error::shape(format!(
                "x_t has dim {}, model expects {}",
                x.len(),
                self.data_dim
            )));
        }
        if t == 0 || t > self.time.horizon {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.time.horizon
            )));
        }
        if cond.class >= self.n_classes() {
            return Err(Error::invalid(format!(
                "class {} out of range for K = {}",
                cond.class,
                self.n_classes()
            )));
        }
        match (&self.domain_embed, cond.domain) {
            (Some(d), Some(k)) if k < d.len() => Ok(()),
            (None, None) => Ok(()),
            (Some(_), None) => Err(Error::invalid("model is domain-conditioned; condition lacks a domain")),
            (None, Some(_)) => Err(Error::invalid("model has no domain embedding")),
            _ => Err(Error::invalid("domain index out of range")),
        }
    }

    fn offset(&self, cond: Condition) -> Vec<f64> {
        let mut off = self.class_embed[cond.class].clone();
        if let (Some(table), Some(d)) = (&self.domain_embed, cond.domain) {
            off.iter_mut().zip(&table[d]).for_each(|(o, e)| *o += e);
        }
        off
    }

    pub fn forward(&self, x: &[f64], t: usize, cond: Condition) -> Result<(Vec<f64>, DenoiserCache)> {
        self.check(x, t, cond)?;
        let (y, inner) = self
            .trunk
            .forward_with_offset(&self.time.join(x, t), Some(&self.offset(cond)))?;
        Ok((y, DenoiserCache { inner, cond }))
    }

    pub fn backward_accumulate(
        &self,
        cache: &DenoiserCache,
        out_grad: &[f64],
        grads: &mut DenoiserGrads,
    ) -> Result<()> {
        let before: Vec<f64> = grads.trunk.first_bias().to_vec();
        self.trunk
            .backward_accumulate(&cache.inner, out_grad, &mut grads.trunk)?;
        let delta: Vec<f64> = grads
            .trunk
            .first_bias()
            .iter()
            .zip(&before)
            .map(|(a, b)| a - b)
            .collect();
        let row = &mut grads.class_embed[cache.cond.class];
        row.iter_mut().zip(&delta).for_each(|(g, d)| *g += d);
        if let (Some(table), Some(d)) = (&mut grads.domain_embed, cache.cond.domain) {
            table[d].iter_mut().zip(&delta).for_each(|(g, v)| *g += v);
        }
        Ok(())
    }

    pub fn predict_noise(&self, x: &[f64], t: usize, class: usize) -> Result<Vec<f64>> {
        self.predict(x, t, Condition::class(class))
    }

    pub fn sgd_step(&mut self, g: &DenoiserGrads, lr: f64) {
        self.trunk.sgd_step(&g.trunk, lr);
        for (row, gr) in self.class_embed.iter_mut().zip(&g.class_embed) {
            row.iter_mut().zip(gr).for_each(|(w, d)| *w -= lr * d);
        }
        if let (Some(t), Some(gt)) = (&mut self.domain_embed, &g.domain_embed) {
            for (row, gr) in t.iter_mut().zip(gt) {
                row.iter_mut().zip(gr).for_each(|(w, d)| *w -= lr * d);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.flat_params().len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.trunk.flat_params();
        v.extend(self.class_embed.iter().flatten());
        if let Some(d) = &self.domain_embed {
            v.extend(d.iter().flatten());
        }
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("parameter vector has the wrong length"));
        }
        let n = self.trunk.num_params();
        self.trunk.set_flat_params(&flat[..n])?;
        let mut it = flat[n..].iter().copied();
        for v in self.class_embed.iter_mut().flatten() {
            *v = it.next().expect("length checked");
        }
        if let Some(d) = &mut self.domain_embed {
            for v in d.iter_mut().flatten() {
                *v = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("denoiser");
        ck.meta("data_dim", self.data_dim);
        ck.meta("time_dim", self.time.dim);
        ck.meta("time_scale", self.time.scale);
        ck.meta("max_period", self.time.max_period);
        ck.meta("horizon", self.time.horizon);
        ck.push_mlp("trunk", &self.trunk);
        ck.push_table("class_embed", &self.class_embed);
        if let Some(d) = &self.domain_embed {
            ck.push_table("domain_embed", d);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("denoiser")?;
        let time = TimeEmbedding {
            dim: ck.get_meta("time_dim")?,
            scale: ck.get_meta("time_scale")?,
            max_period: ck.get_meta("max_period")?,
            horizon: ck.get_meta("horizon")?,
        };
        Ok(ConditionedDenoiser {
            trunk: ck.mlp("trunk")?,
            time,
            class_embed: ck.table("class_embed")?,
            domain_embed: ck.table("domain_embed").ok(),
            data_dim: ck.get_meta("data_dim")?,
        })
    }
}

impl NoisePredictor for ConditionedDenoiser {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn predict(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        self.forward(x, t, cond).map(|(y, _)| y)
    }
}

/// Step size, mini-batch size, iteration budget and seed of an SGD loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub iters: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch == 0 {
            return Err(Error::config("need a finite step size >= 0 and batch >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub model: ConditionedDenoiser,
    /// Mini-batch loss per iteration.
    pub loss_trace: Vec<f64>,
}

/// `(ω_t / B) Σ ‖ε_i − ε_θ(x_{t,i}, t, c_i)‖²` and its parameter gradient for one
/// mini-batch sharing the timestep `t`.
pub fn minibatch_loss(
    model: &ConditionedDenoiser,
    sched: &NoiseSchedule,
    batch: &[(&[f64], Condition)],
    noise: &[Vec<f64>],
    t: usize,
    grads: Option<&mut DenoiserGrads>,
) -> Result<f64> {
    let w = sched.omega(t) / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = grads;
    for ((x0, cond), eps) in batch.iter().zip(noise) {
        let xt = sched.forward_noise(x0, t, eps)?;
        let (pred, cache) = model.forward(&xt, t, *cond)?;
        let diff: Vec<f64> = pred.iter().zip(eps).map(|(p, e)| p - e).collect();
        loss += w * diff.iter().map(|d| d * d).sum::<f64>();
        if let Some(g) = grads.as_deref_mut() {
            let og: Vec<f64> = diff.iter().map(|d| 2.0 * w * d).collect();
            model.backward_accumulate(&cache, &og, g)?;
        }
    }
    Ok(loss)
}

/// Plain-SGD denoiser training on `(x_0, condition)` pairs: one shared `t`
/// per mini-batch, fresh noise per sample, `θ ← θ − γ ∇θ L`.
pub fn train_denoiser(
    data: &[(Vec<f64>, Condition)],
    n_classes: usize,
    sched: &NoiseSchedule,
    dcfg: &DenoiserConfig,
    tcfg: &TrainConfig,
) -> Result<TrainedDenoiser> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("denoiser training set is empty"));
    }
    let dim = data[0].0.len();
    let mut r = rng::child(tcfg.seed, "denoiser", 0);
    let mut model = ConditionedDenoiser::new(dim, n_classes, sched.steps(), dcfg, &mut r)?;
    let mut trace = Vec::with_capacity(tcfg.iters);
    for iter in 0..tcfg.iters {
        let idx: Vec<usize> = (0..tcfg.batch).map(|_| r.gen_range(0..data.len())).collect();
        let t = r.gen_range(1..=sched.steps());
        let noise: Vec<Vec<f64>> = (0..tcfg.batch).map(|_| rng::normal_vec(&mut r, dim)).collect();
        let batch: Vec<(&[f64], Condition)> = idx.iter().map(|&i| (data[i].0.as_slice(), data[i].1)).collect();
        let mut g = DenoiserGrads::zeros_like(&model);
        let loss = minibatch_loss(&model, sched, &batch, &noise, t, Some(&mut g))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "denoiser loss {loss} at iteration {iter}, t = {t}"
            )));
        }
        model.sgd_step(&g, tcfg.lr);
        trace.push(loss);
    }
    Ok(TrainedDenoiser {
        model,
        loss_trace: trace,
    })
}

/// Conditions used for training: true labels for source points, the frozen
/// labeler's predictions for target points.
pub fn conditioning_pairs(
    source: &DomainDataset,
    target: &DomainDataset,
    labeler: &dyn Labeler,
    with_domain: bool,
) -> Result<Vec<(Vec<f64>, Condition)>> {
    if !source.is_empty() && !target.is_empty() {
        source.check_compatible(target)?;
    }
    let dom = |d: Domain| with_domain.then_some(d.binary());
    let mut out = Vec::with_capacity(source.len() + target.len());
    for p in &source.points {
        out.push((
            p.x.clone(),
            Condition {
                class: p.y,
                domain: dom(Domain::Source),
            },
        ));
    }
    for p in &target.points {
        let class = labeler.label(&p.x)?;
        out.push((
            p.x.clone(),
            Condition {
                class,
                domain: dom(Domain::Target),
            },
        ));
    }
    Ok(out)
}

/// Label-conditioned training on `D_s ∪ D_t` with pseudo-labels for `D_t`.
pub fn train_label_conditioned(
    source: &DomainDataset,
    target: &DomainDataset,
    pseudo_labeler: &dyn Labeler,
    sched: &NoiseSchedule,
    dcfg: &DenoiserConfig,
    tcfg: &TrainConfig,
) -> Result<TrainedDenoiser> {
    let k = if source.is_empty() {
        target.n_classes
    } else {
        source.n_classes
    };
    let data = conditioning_pairs(source, target, pseudo_labeler, dcfg.domain_embedding)?;
    train_denoiser(&data, k, sched, dcfg, tcfg)
}

/// Training on `D_t` only, conditioned on pseudo-labels.
pub fn train_target_only(
    target: &DomainDataset,
    pseudo_labeler: &dyn Labeler,
    sched: &NoiseSchedule,
    dcfg: &DenoiserConfig,
    tcfg: &TrainConfig,
) -> Result<TrainedDenoiser> {
    let empty = DomainDataset::empty(target.dim, target.n_classes);
    train_label_conditioned(&empty, target, pseudo_labeler, sched, dcfg, tcfg)
}

/// Labeler that puts every point in class 0 (unconditional, `K = 1`).
pub struct SingleClass;

impl Labeler for SingleClass {
    fn label(&self, _x: &[f64]) -> Result<usize> {
        Ok(0)
    }
}
