//! The UDA task model: feature extractor, label head and domain head, trained
//! on a labeled set plus unlabeled target points with an optional alignment
//! regularizer.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::DomainDataset;
use crate::diffusion::Labeler;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{argmax, cross_entropy, softmax, Mlp, MlpGrads};

/// Alignment term added to the supervised loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    /// Domain classifier on features trained through gradient reversal.
    DomainAdversarial,
    /// Penalty on between-class correlation of target predictions.
    ClassConfusion,
    None,
}

impl Regularizer {
    pub fn name(self) -> &'static str {
        match self {
            Regularizer::DomainAdversarial => "domain_adversarial",
            Regularizer::ClassConfusion => "class_confusion",
            Regularizer::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "domain_adversarial" => Ok(Regularizer::DomainAdversarial),
            "class_confusion" => Ok(Regularizer::ClassConfusion),
            "none" => Ok(Regularizer::None),
            _ => Err(Error::config(format!("unknown regularizer `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UdaConfig {
    pub regularizer: Regularizer,
    /// Trade-off `β` on the regularizer.
    pub beta: f64,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub domain_hidden: usize,
    /// Softmax temperature of the class-confusion term.
    pub temperature: f64,
    pub lr: f64,
    /// Size of both the labeled and the target mini-batch.
    pub batch: usize,
    pub iters: usize,
    /// Ramps `β` from 0 with `2 / (1 + e^{-10 p}) − 1`, `p` the training progress.
    pub beta_ramp: bool,
    pub seed: u64,
}

impl Default for UdaConfig {
    fn default() -> Self {
        UdaConfig {
            regularizer: Regularizer::DomainAdversarial,
            beta: 1.0,
            hidden: vec![32, 32],
            feature_dim: 16,
            domain_hidden: 32,
            temperature: 2.5,
            lr: 0.1,
            batch: 32,
            iters: 1500,
            beta_ramp: true,
            seed: 0,
        }
    }
}

impl UdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::config("uda beta must be finite and >= 0"));
        }
        if !(self.temperature > 0.0) || !(self.lr >= 0.0) || self.batch == 0 || self.feature_dim == 0 {
            return Err(Error::config(
                "uda temperature, lr, batch and feature width must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub extractor: Mlp,
    pub label_head: Mlp,
    pub domain_head: Mlp,
}

#[derive(Debug, Clone)]
pub struct TaskGrads {
    pub extractor: MlpGrads,
    pub label_head: MlpGrads,
    pub domain_head: MlpGrads,
}

impl TaskGrads {
    pub fn zeros_like(m: &TaskModel) -> Self {
        TaskGrads {
            extractor: MlpGrads::zeros_like(&m.extractor),
            label_head: MlpGrads::zeros_like(&m.label_head),
            domain_head: MlpGrads::zeros_like(&m.domain_head),
        }
    }
}

/// Per-term mini-batch losses.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLosses {
    pub supervised: f64,
    pub domain: f64,
    pub confusion: f64,
}

impl TaskModel {
    pub fn new<R: Rng + ?Sized>(dim: usize, n_classes: usize, cfg: &UdaConfig, r: &mut R) -> Result<Self> {
        let mut widths = vec![dim];
        widths.extend(&cfg.hidden);
        widths.push(cfg.feature_dim);
        Ok(TaskModel {
            extractor: Mlp::init(&widths, 1.0, r)?,
            label_head: Mlp::init(&[cfg.feature_dim, n_classes], 1.0, r)?,
            domain_head: Mlp::init(&[cfg.feature_dim, cfg.domain_hidden, 2], 1.0, r)?,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.label_head.out_dim()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.label_head.eval(&self.extractor.eval(x)?)
    }

    /// Argmax class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("task_model");
        ck.push_mlp("extractor", &self.extractor);
        ck.push_mlp("label_head", &self.label_head);
        ck.push_mlp("domain_head", &self.domain_head);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("task_model")?;
        Ok(TaskModel {
            extractor: ck.mlp("extractor")?,
            label_head: ck.mlp("label_head")?,
            domain_head: ck.mlp("domain_head")?,
        })
    }

    /// Losses and gradients of one paired mini-batch.
    ///
    /// The label head and extractor receive the gradient of
    /// `CE_labeled + β R`. For the adversarial regularizer `R` is the domain
    /// cross-entropy on features: the domain head descends `CE_dom` while the
    /// extractor receives the reversed gradient `−β ∂CE_dom/∂h`.
    pub fn batch_gradients(
        &self,
        labeled: &[(&[f64], usize)],
        target: &[&[f64]],
        cfg: &UdaConfig,
    ) -> Result<(BatchLosses, TaskGrads)> {
        let mut g = TaskGrads::zeros_like(self);
        let mut losses = BatchLosses::default();
        let nl = labeled.len() as f64;

        let mut feats = Vec::with_capacity(labeled.len());
        for (x, y) in labeled {
            let (h, ec) = self.extractor.forward(x)?;
            let (z, lc) = self.label_head.forward(&h)?;
            let (l, dz) = cross_entropy(&z, *y);
            losses.supervised += l / nl;
            let dz: Vec<f64> = dz.iter().map(|v| v / nl).collect();
            let dh = self.label_head.backward_accumulate(&lc, &dz, &mut g.label_head)?;
            feats.push((h, ec, dh));
        }

        let mut tfeats = Vec::new();
        let active = cfg.beta != 0.0 && cfg.regularizer != Regularizer::None && !target.is_empty();
        if active {
            for x in target {
                let (h, ec) = self.extractor.forward(x)?;
                let n = h.len();
                tfeats.push((h, ec, vec![0.0; n]));
            }
        }

        if active && cfg.regularizer == Regularizer::DomainAdversarial {
            let n = (feats.len() + tfeats.len()) as f64;
            let groups = [(&mut feats, 0usize), (&mut tfeats, 1usize)];
            for (set, d) in groups {
                for (h, _, dh) in set.iter_mut() {
                    let (z, dc) = self.domain_head.forward(h)?;
                    let (l, dz) = cross_entropy(&z, d);
                    losses.domain += l / n;
                    let dz: Vec<f64> = dz.iter().map(|v| v / n).collect();
                    let dhd = self.domain_head.backward_accumulate(&dc, &dz, &mut g.domain_head)?;
                    dh.iter_mut().zip(&dhd).for_each(|(a, b)| *a -= cfg.beta * b);
                }
            }
        }

        if active && cfg.regularizer == Regularizer::ClassConfusion {
            let mut caches = Vec::with_capacity(tfeats.len());
            let mut probs = Vec::with_capacity(tfeats.len());
            for (h, _, _) in &tfeats {
                let (z, lc) = self.label_head.forward(h)?;
                let scaled: Vec<f64> = z.iter().map(|v| v / cfg.temperature).collect();
                probs.push(softmax(&scaled));
                caches.push(lc);
            }
            let (l, dp) = class_confusion(&probs);
            losses.confusion = l;
            for (((_, _, dh), lc), (p, gp)) in tfeats.iter_mut().zip(&caches).zip(probs.iter().zip(&dp)) {
                let dot: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
                let dz: Vec<f64> = p
                    .iter()
                    .zip(gp)
                    .map(|(pi, gi)| cfg.beta * pi * (gi - dot) / cfg.temperature)
                    .collect();
                let back = self.label_head.backward_accumulate(lc, &dz, &mut g.label_head)?;
                dh.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
            }
        }

        for (_, ec, dh) in feats.iter().chain(&tfeats) {
            self.extractor.backward_accumulate(ec, dh, &mut g.extractor)?;
        }
        Ok((losses, g))
    }
}

/// `1 − (1/K) Σ_j (Σ_i p_ij²) / (Σ_i p_ij)` over a batch of probability rows,
/// with its gradient w.r.t. every `p_ij`.
pub fn class_confusion(probs: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let k = probs.first().map_or(0, Vec::len);
    if k == 0 {
        return (0.0, Vec::new());
    }
    let mut s = vec![1e-12; k];
    let mut q = vec![0.0; k];
    for p in probs {
        for j in 0..k {
            s[j] += p[j];
            q[j] += p[j] * p[j];
        }
    }
    let kf = k as f64;
    let loss = 1.0 - (0..k).map(|j| q[j] / s[j]).sum::<f64>() / kf;
    let grad = probs
        .iter()
        .map(|p| {
            (0..k)
                .map(|j| -(2.0 * p[j] / s[j] - q[j] / (s[j] * s[j])) / kf)
                .collect()
        })
        .collect();
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct TrainedTaskModel {
    pub model: TaskModel,
    pub supervised_trace: Vec<f64>,
    pub regularizer_trace: Vec<f64>,
}

/// Progress-dependent multiplier of the regularizer weight, 0 at `p = 0`.
pub fn beta_ramp(p: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

/// Minimises `(1/B) Σ CE(f(x), y) + β R` with plain SGD over paired mini-batches
/// drawn uniformly from `labeled` and `target`.
pub fn train_uda(labeled: &DomainDataset, target: &DomainDataset, cfg: &UdaConfig) -> Result<TrainedTaskModel> {
    cfg.validate()?;
    if labeled.is_empty() || target.is_empty() {
        return Err(Error::invalid("uda training needs labeled and target points"));
    }
    if labeled.dim != target.dim {
        return Err(Error::shape("labeled and target dimensions differ"));
    }
    let mut r = rng::child(cfg.seed, "uda", 0);
    let mut model = TaskModel::new(labeled.dim, labeled.n_classes, cfg, &mut r)?;
    let mut sup = Vec::with_capacity(cfg.iters);
    let mut reg = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let lb: Vec<(&[f64], usize)> = (0..cfg.batch)
            .map(|_| {
                let p = &labeled.points[r.gen_range(0..labeled.len())];
                (p.x.as_slice(), p.y)
            })
            .collect();
        let tb: Vec<&[f64]> = (0..cfg.batch)
            .map(|_| target.points[r.gen_range(0..target.len())].x.as_slice())
            .collect();
        let (l, g) = if cfg.beta_ramp {
            let p = iter as f64 / cfg.iters as f64;
            let step = UdaConfig {
                beta: cfg.beta * beta_ramp(p),
                ..cfg.clone()
            };
            model.batch_gradients(&lb, &tb, &step)?
        } else {
            model.batch_gradients(&lb, &tb, cfg)?
        };
        let r_term = l.domain + l.confusion;
        if !(l.supervised.is_finite() && r_term.is_finite()) {
            return Err(Error::NonFinite(format!(
                "uda loss at iteration {iter}: supervised {}, regularizer {r_term}",
                l.supervised
            )));
        }
        model.extractor.sgd_step(&g.extractor, cfg.lr);
        model.label_head.sgd_step(&g.label_head, cfg.lr);
        model.domain_head.sgd_step(&g.domain_head, cfg.lr);
        sup.push(l.supervised);
        reg.push(r_term);
    }
    Ok(TrainedTaskModel {
        model,
        supervised_trace: sup,
        regularizer_trace: reg,
    })
}

impl Labeler for TaskModel {
    fn label(&self, x: &[f64]) -> Result<usize> {
        self.predict(x)
    }
}

/// A copy of `target` whose labels are the model's argmax predictions.
pub fn pseudo_label(model: &TaskModel, target: &DomainDataset) -> Result<DomainDataset> {
    let mut out = target.clone();
    let labels: Vec<usize> = target
        .points
        .par_iter()
        .map(|p| model.predict(&p.x))
        .collect::<Result<_>>()?;
    for (p, y) in out.points.iter_mut().zip(labels) {
        p.y = y;
    }
    Ok(out)
}

/// `D_ŝ = D_s ∪ D_g` with `η = N_s / N_ŝ`.
#[derive(Debug, Clone)]
pub struct Augmented {
    pub data: DomainDataset,
    pub eta: f64,
}

pub fn augment_source(source: &DomainDataset, generated: &DomainDataset) -> Result<Augmented> {
    let data = if generated.is_empty() {
        source.clone()
    } else {
        source.concat(generated)?
    };
    let eta = if data.is_empty() {
        1.0
    } else {
        source.len() as f64 / data.len() as f64
    };
    Ok(Augmented { data, eta })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the dataset.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    /// `class,accuracy` rows plus an `all` summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,accuracy\n");
        for (k, a) in self.per_class.iter().enumerate() {
            match a {
                Some(a) => writeln!(s, "{k},{a}").unwrap(),
                None => writeln!(s, "{k},").unwrap(),
            }
        }
        writeln!(s, "all,{}", self.accuracy).unwrap();
        s
    }
}

pub fn evaluate(model: &dyn Labeler, dataset: &DomainDataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let k = dataset.n_classes;
    let preds: Vec<usize> = dataset
        .points
        .par_iter()
        .map(|p| model.label(&p.x))
        .collect::<Result<_>>()?;
    let mut confusion = vec![vec![0usize; k]; k];
    for (p, &y) in dataset.points.iter().zip(&preds) {
        if y >= k {
            return Err(Error::invalid(format!("prediction {y} outside {k} classes")));
        }
        confusion[p.y][y] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(Evaluation {
        accuracy: correct as f64 / dataset.len() as f64,
        per_class,
        confusion,
    })
}

/// Accuracy of pseudo-labels against the ground truth carried by `target`.
pub fn pseudo_label_accuracy(model: &TaskModel, target: &DomainDataset) -> Result<f64> {
    Ok(evaluate(model, target)?.accuracy)
}
