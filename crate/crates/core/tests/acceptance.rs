#![allow(clippy::type_complexity)]

//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line before asserting.
//!
//! Criteria 5 to 10 share one set of pipeline runs (built once per process).

use std::sync::OnceLock;

use dacdm_core::data::{gen_gaussian_domains, GaussianDomainsConfig};
use dacdm_core::diffusion::{minibatch_loss, train_denoiser, DenoiserGrads};
use dacdm_core::guidance::{guided_noise, train_domain_classifier, ClassifierConfig, Guide};
use dacdm_core::oracle::{
    oracle_eps, oracle_guided_eps, oracle_ode_endpoint, BayesDomainClassifier, GaussianCell, GaussianSpec,
    OracleDenoiser,
};
use dacdm_core::pipeline::*;
use dacdm_core::rng::{self, derive_seed};
use dacdm_core::sampler::{generate_dataset, make_plan, ClassRule, GenerateConfig, ModelInput, Sampler, SolverFormula};
use dacdm_core::tensor::{finite_diff_check, gradient_check, log_softmax, Mlp, MlpGrads, FD_STEP};
use dacdm_core::uda::{Regularizer, TaskModel, UdaConfig};
use dacdm_core::*;
use rand::Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const FD_SEEDS: u64 = 20;

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

// ---------- criterion 1 ----------

fn fd_mlp(seed: u64) -> f64 {
    let mut r = rng::stream(seed);
    let net = Mlp::init(&[3, 5, 4, 2], 1.0, &mut r).unwrap();
    let x = rng::normal_vec(&mut r, 3);
    let target = rng::normal_vec(&mut r, 2);
    finite_diff_check(&net, &x, |out| {
        let d: Vec<f64> = out.iter().zip(&target).map(|(o, t)| o - t).collect();
        (d.iter().map(|v| v * v).sum(), d.iter().map(|v| 2.0 * v).collect())
    })
    .unwrap()
}

fn fd_denoiser(seed: u64, with_domain: bool) -> f64 {
    let sched = NoiseSchedule::linear(30, 1e-3, 0.3).unwrap();
    let cfg = DenoiserConfig {
        hidden: vec![6, 5],
        time_dim: 4,
        embed_std: 0.5,
        domain_embedding: with_domain,
        ..Default::default()
    };
    let mut r = rng::stream(seed);
    let model = ConditionedDenoiser::new(2, 3, 30, &cfg, &mut r).unwrap();
    let xs: Vec<Vec<f64>> = (0..4).map(|_| rng::normal_vec(&mut r, 2)).collect();
    let noise: Vec<Vec<f64>> = (0..4).map(|_| rng::normal_vec(&mut r, 2)).collect();
    let batch: Vec<(&[f64], Condition)> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            (
                x.as_slice(),
                Condition {
                    class: i % 3,
                    domain: with_domain.then_some(i % 2),
                },
            )
        })
        .collect();
    let t = 1 + (seed as usize * 7) % 30;
    let mut g = DenoiserGrads::zeros_like(&model);
    minibatch_loss(&model, &sched, &batch, &noise, t, Some(&mut g)).unwrap();
    let mut probe = model.clone();
    gradient_check(
        |p| {
            probe.set_flat_params(p)?;
            minibatch_loss(&probe, &sched, &batch, &noise, t, None)
        },
        &model.flat_params(),
        &g.flat(),
        FD_STEP,
    )
    .unwrap()
}

fn fd_classifier(seed: u64) -> f64 {
    let cfg = ClassifierConfig {
        hidden: vec![6, 5],
        time_dim: 4,
        time_scale: 10.0,
    };
    let mut r = rng::stream(seed);
    let clf = NoisyClassifier::new(2, 3, 40, &cfg, &mut r).unwrap();
    let x = rng::normal_vec(&mut r, 2);
    let t = 1 + (seed as usize * 3) % 40;
    let label = seed as usize % 3;
    let mut g = MlpGrads::zeros_like(&clf.trunk);
    clf.loss_accumulate(&x, t, label, 1.0, Some(&mut g)).unwrap();
    let mut probe = clf.clone();
    let param_err = gradient_check(
        |p| {
            probe.trunk.set_flat_params(p)?;
            probe.loss_accumulate(&x, t, label, 1.0, None)
        },
        &clf.trunk.flat_params(),
        &g.flat(),
        FD_STEP,
    )
    .unwrap();
    // input gradient used by guidance
    let analytic = clf.grad_log_prob(&x, t, label).unwrap();
    let input_err = gradient_check(|xv| Ok(log_softmax(&clf.logits(xv, t)?)[label]), &x, &analytic, FD_STEP).unwrap();
    param_err.max(input_err)
}

fn fd_task_model(seed: u64, reg: Regularizer) -> f64 {
    let cfg = UdaConfig {
        regularizer: reg,
        beta: 0.6,
        hidden: vec![6],
        feature_dim: 4,
        ..UdaConfig::default()
    };
    let mut r = rng::stream(seed);
    let m = TaskModel::new(2, 3, &cfg, &mut r).unwrap();
    let xs: Vec<Vec<f64>> = (0..5).map(|_| rng::normal_vec(&mut r, 2)).collect();
    let ts: Vec<Vec<f64>> = (0..5).map(|_| rng::normal_vec(&mut r, 2)).collect();
    let lb: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 3)).collect();
    let tb: Vec<&[f64]> = ts.iter().map(Vec::as_slice).collect();
    let (_, g) = m.batch_gradients(&lb, &tb, &cfg).unwrap();
    let losses = |m: &TaskModel| m.batch_gradients(&lb, &tb, &cfg).map(|(l, _)| l);

    // Extractor and label head descend supervised + β·confusion − β·domain
    // (the reversal); the domain head descends the domain loss itself.
    let extractor_obj = |m: &TaskModel| -> Result<f64> {
        let l = losses(m)?;
        Ok(l.supervised + cfg.beta * l.confusion - cfg.beta * l.domain)
    };
    let mut probe = m.clone();
    let e_ext = gradient_check(
        |p| {
            probe.extractor.set_flat_params(p)?;
            extractor_obj(&probe)
        },
        &m.extractor.flat_params(),
        &g.extractor.flat(),
        FD_STEP,
    )
    .unwrap();
    let mut probe = m.clone();
    let e_lab = gradient_check(
        |p| {
            probe.label_head.set_flat_params(p)?;
            extractor_obj(&probe)
        },
        &m.label_head.flat_params(),
        &g.label_head.flat(),
        FD_STEP,
    )
    .unwrap();
    let mut e_dom = 0.0;
    if reg == Regularizer::DomainAdversarial {
        let mut probe = m.clone();
        e_dom = gradient_check(
            |p| {
                probe.domain_head.set_flat_params(p)?;
                Ok(losses(&probe)?.domain)
            },
            &m.domain_head.flat_params(),
            &g.domain_head.flat(),
            FD_STEP,
        )
        .unwrap();
    }
    e_ext.max(e_lab).max(e_dom)
}

#[test]
fn criterion_1_gradient_integrity() {
    let modules: Vec<(&str, Box<dyn Fn(u64) -> f64>)> = vec![
        ("mlp", Box::new(fd_mlp)),
        ("denoiser", Box::new(|s| fd_denoiser(s, false))),
        ("denoiser+domain", Box::new(|s| fd_denoiser(s, true))),
        ("noisy_classifier", Box::new(fd_classifier)),
        ("task_model/none", Box::new(|s| fd_task_model(s, Regularizer::None))),
        (
            "task_model/domain_adversarial",
            Box::new(|s| fd_task_model(s, Regularizer::DomainAdversarial)),
        ),
        (
            "task_model/class_confusion",
            Box::new(|s| fd_task_model(s, Regularizer::ClassConfusion)),
        ),
    ];
    let mut worst = Vec::new();
    for (name, f) in &modules {
        let e = (0..FD_SEEDS).map(f).fold(0.0, f64::max);
        worst.push(format!("{name}={e:.2e}"));
        if e > 1e-5 {
            report(
                1,
                false,
                format!("{FD_SEEDS} seeds/module, max rel-err: {}", worst.join(" ")),
            );
        }
    }
    report(
        1,
        true,
        format!("{FD_SEEDS} seeds/module, max rel-err: {}", worst.join(" ")),
    );
}

// ---------- criteria 2 and 3 share one Gaussian instance ----------

fn desk_schedule() -> NoiseSchedule {
    let cfg = ExperimentConfig::default();
    NoiseSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end).unwrap()
}

fn single_gaussian() -> GaussianSpec {
    GaussianSpec::single(vec![0.5, -0.5], 0.1).unwrap()
}

#[test]
fn criterion_2_denoiser_converges_to_oracle() {
    let sched = desk_schedule();
    assert_eq!(sched.steps(), 100);
    let spec = single_gaussian();
    let cfg = ExperimentConfig::default();
    let cell = spec.component(None, None).unwrap().clone();
    let mut r = rng::stream(21);
    let sd = cell.var.sqrt();
    let draw = |r: &mut rng::Stream| -> Vec<f64> { cell.mean.iter().map(|m| m + sd * rng::normal(r)).collect() };
    let train: Vec<(Vec<f64>, Condition)> = (0..500).map(|_| (draw(&mut r), Condition::class(0))).collect();
    let tcfg = TrainConfig {
        seed: 5,
        ..cfg.denoiser_train
    };
    let model = train_denoiser(&train, 1, &sched, &cfg.denoiser, &tcfg).unwrap().model;

    let mut held = rng::stream(99);
    let n = 2000;
    let mut mse = 0.0;
    for _ in 0..n {
        let x0 = draw(&mut held);
        let t = held.gen_range(1..=100);
        let eps = rng::normal_vec(&mut held, 2);
        let xt = sched.forward_noise(&x0, t, &eps).unwrap();
        let pred = model.predict(&xt, t, Condition::class(0)).unwrap();
        let opt = oracle_eps(&spec, &xt, t, &sched, None, None).unwrap();
        mse += pred.iter().zip(&opt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    }
    report(
        2,
        mse <= 0.05,
        format!(
            "mean squared deviation {mse:.4} (tol 0.05, {n} held-out noisy points, {} iters)",
            tcfg.iters
        ),
    );
}

#[test]
fn criterion_3_solver_order() {
    let sched = desk_schedule();
    let spec = single_gaussian();
    let model = OracleDenoiser {
        spec: spec.clone(),
        sched: sched.clone(),
        class_conditional: false,
    };
    let sampler = Sampler::new(&model, None, &sched);
    let mut r = rng::stream(33);
    let starts: Vec<Vec<f64>> = (0..16).map(|_| rng::normal_vec(&mut r, 2)).collect();
    let err = |m: usize, f: SolverFormula| -> f64 {
        let plan = make_plan(&sched, m).unwrap();
        starts
            .iter()
            .map(|x| {
                let exact = oracle_ode_endpoint(&spec, x, &sched, sched.steps(), 1).unwrap();
                let out = sampler.solve_from(x.clone(), &plan, f, Condition::class(0), 0).unwrap();
                out.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    };
    let ratios = |f: SolverFormula| {
        let e: Vec<f64> = [5, 10, 20].iter().map(|&m| err(m, f)).collect();
        (e.clone(), [e[0] / e[1], e[1] / e[2]])
    };
    let (e2, r2) = ratios(SolverFormula::Validated);
    let (e1, r1) = ratios(SolverFormula::FirstOrder);
    let pass = r2.iter().all(|r| *r >= 3.0) && r1.iter().all(|r| (1.5..=2.5).contains(r));
    report(
        3,
        pass,
        format!(
            "second-order errors {} ratios {r2:.2?} (need >= 3); first-order errors {} ratios {r1:.2?} (need [1.5, 2.5])",
            sci(&e2),
            sci(&e1)
        ),
    );
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join("/")
}

// ---------- criterion 4 ----------

fn two_domain_spec() -> GaussianSpec {
    let cell = |domain, class, mean: [f64; 2]| GaussianCell {
        domain,
        class,
        mean: mean.to_vec(),
        var: 0.3,
        weight: 0.5,
    };
    GaussianSpec::new(vec![
        cell(Domain::Source, 0, [-1.0, 0.5]),
        cell(Domain::Source, 1, [-1.0, -0.5]),
        cell(Domain::Target, 0, [1.2, 0.7]),
        cell(Domain::Target, 1, [0.8, -0.8]),
    ])
    .unwrap()
}

fn oracle_guidance_error() -> f64 {
    let sched = desk_schedule();
    let spec = two_domain_spec();
    let model = OracleDenoiser {
        spec: spec.clone(),
        sched: sched.clone(),
        class_conditional: true,
    };
    let bayes = BayesDomainClassifier {
        spec: spec.clone(),
        sched: sched.clone(),
    };
    let mut r = rng::stream(4);
    let mut worst = 0.0f64;
    for i in 0..400 {
        let x = rng::normal_vec(&mut r, 2)
            .into_iter()
            .map(|v| 2.0 * v)
            .collect::<Vec<_>>();
        let t = 1 + i % 100;
        let y = i % 2;
        let scale = [0.0, 0.5, 1.0, 2.0, 4.0][i % 5];
        let g = Guide::domain(
            &bayes,
            &GuidanceConfig {
                scale,
                ..GuidanceConfig::default()
            },
        );
        let got = guided_noise(&model, Some(&g), &sched, &x, t, Condition::class(y), y).unwrap();
        let want = oracle_guided_eps(&spec, &x, t, &sched, scale, Domain::Target, y).unwrap();
        let num: f64 = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = want.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(num / den);
    }
    worst
}

/// Fraction of guided samples the Bayes rule on the clean domains calls target.
fn learned_guidance_target_fraction(scale: f64, seed: u64) -> f64 {
    let sched = desk_schedule();
    let cfg = GaussianDomainsConfig {
        mu_source: vec![-1.0, 0.0],
        mu_target: vec![1.0, 0.0],
        std: 0.5,
        class_offsets: vec![vec![0.0, 0.0]],
        n_per_class: vec![400],
    };
    let (source, target, spec) = gen_gaussian_domains(&cfg, derive_seed(seed, "data", 0)).unwrap();
    let base = ExperimentConfig::default();
    let tcfg = TrainConfig {
        seed: derive_seed(seed, "classifier", 0),
        ..base.classifier_train
    };
    let clf = train_domain_classifier(&source, &target, &sched, &base.classifier, &tcfg)
        .unwrap()
        .model;
    // the noise model is the exact marginal over both domains, so s = 0 draws
    // half source and half target
    let model = OracleDenoiser {
        spec: spec.clone(),
        sched: sched.clone(),
        class_conditional: false,
    };
    let guide = Guide::domain(
        &clf,
        &GuidanceConfig {
            scale,
            ..GuidanceConfig::default()
        },
    );
    let sampler = Sampler::new(&model, Some(&guide), &sched);
    let plan = make_plan(&sched, base.solver_steps).unwrap();
    let gcfg = GenerateConfig {
        n: 400,
        n_classes: 1,
        rule: ClassRule::PerClass,
        formula: SolverFormula::Validated,
        input: ModelInput::default(),
        seed: derive_seed(seed, "generate", 0),
    };
    let g = generate_dataset(&sampler, &plan, &gcfg).unwrap();
    let target_hits = g
        .points
        .iter()
        .filter(|p| {
            let (ls, _) = spec.log_density_grad(&p.x, Some(Domain::Source), None).unwrap();
            let (lt, _) = spec.log_density_grad(&p.x, Some(Domain::Target), None).unwrap();
            lt > ls
        })
        .count();
    target_hits as f64 / g.len() as f64
}

#[test]
fn criterion_4_guidance() {
    let err = oracle_guidance_error();
    let on: Vec<f64> = SEEDS
        .iter()
        .map(|&s| learned_guidance_target_fraction(1.0, s))
        .collect();
    let off: Vec<f64> = SEEDS
        .iter()
        .map(|&s| learned_guidance_target_fraction(0.0, s))
        .collect();
    let (m_on, _) = mean_std(&on);
    let (m_off, _) = mean_std(&off);
    let pass = err <= 1e-6 && m_on >= 0.9 && (m_off - 0.5).abs() <= 0.05;
    report(
        4,
        pass,
        format!(
            "oracle rel-err {err:.2e} (tol 1e-6); target fraction s=1 {m_on:.3} {on:.3?} (need >= 0.90), s=0 {m_off:.3} {off:.3?} (need 0.50 +- 0.05)"
        ),
    );
}

// ---------- criteria 5 to 10: shared pipeline runs ----------

const PER_CLASS: [usize; 5] = [0, 50, 200, 400, 800];

struct Suite {
    /// `variants[v][seed]` with domain-adversarial regularizer.
    variants: Vec<Vec<RunManifest>>,
    /// Baseline and DACDM with the class-confusion regularizer.
    confusion: [Vec<RunManifest>; 2],
    /// `sweep[i][seed]` for `PER_CLASS[i]`.
    sweep: Vec<Vec<RunManifest>>,
}

impl Suite {
    fn build() -> Suite {
        let store = StageStore::memory();
        let run = |cfg: ExperimentConfig| {
            let m = run_pipeline(&cfg, &store, None).unwrap();
            assert!(m.is_complete(), "run failed: {:?}", m.status);
            m
        };
        let with = |variant: Variant, reg: Regularizer, seed: u64| {
            let mut c = ExperimentConfig {
                seed,
                variant,
                ..Default::default()
            };
            c.uda.regularizer = reg;
            c
        };
        let variants = Variant::ALL
            .iter()
            .map(|&v| {
                SEEDS
                    .iter()
                    .map(|&s| run(with(v, Regularizer::DomainAdversarial, s)))
                    .collect()
            })
            .collect();
        let confusion = [Variant::Baseline, Variant::Dacdm].map(|v| {
            SEEDS
                .iter()
                .map(|&s| run(with(v, Regularizer::ClassConfusion, s)))
                .collect()
        });
        let sweep = PER_CLASS
            .iter()
            .map(|&n| {
                SEEDS
                    .iter()
                    .map(|&s| {
                        let mut c = with(Variant::Dacdm, Regularizer::DomainAdversarial, s);
                        if n == 0 {
                            c.variant = Variant::Baseline;
                        } else {
                            c.per_class = n;
                        }
                        run(c)
                    })
                    .collect()
            })
            .collect();
        Suite {
            variants,
            confusion,
            sweep,
        }
    }

    fn all(&self) -> impl Iterator<Item = &RunManifest> {
        self.variants.iter().chain(&self.confusion).chain(&self.sweep).flatten()
    }

    fn snapshot(&self) -> String {
        self.all().map(|m| m.metrics_csv()).collect::<Vec<_>>().join("\n")
    }

    fn variant(&self, v: Variant) -> &[RunManifest] {
        &self.variants[Variant::ALL.iter().position(|x| *x == v).unwrap()]
    }
}

fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(Suite::build)
}

fn mean_acc(runs: &[RunManifest]) -> f64 {
    mean_std(&runs.iter().map(|m| m.accuracy().unwrap()).collect::<Vec<_>>()).0
}

fn mean_ad(runs: &[RunManifest], pair: &str) -> f64 {
    mean_std(&runs.iter().map(|m| m.a_dist(pair).unwrap()).collect::<Vec<_>>()).0
}

#[test]
fn criterion_5_a_distance_ordering() {
    let runs = suite().variant(Variant::Dacdm);
    let (s, g, shat) = (mean_ad(runs, "s_t"), mean_ad(runs, "g_t"), mean_ad(runs, "shat_t"));
    let pass = s - g >= 0.1 && s - shat >= 0.1;
    report(
        5,
        pass,
        format!("d_A(s,t) {s:.3}, d_A(g,t) {g:.3} (margin {:.3}), d_A(shat,t) {shat:.3} (margin {:.3}); need margins >= 0.1", s - g, s - shat),
    );
}

#[test]
fn criterion_6_end_to_end_improvement() {
    let s = suite();
    let da = (
        mean_acc(s.variant(Variant::Baseline)),
        mean_acc(s.variant(Variant::Dacdm)),
    );
    let cc = (mean_acc(&s.confusion[0]), mean_acc(&s.confusion[1]));
    let gain = |(b, d): (f64, f64)| 100.0 * (d - b);
    let pass = gain(da) >= 2.0 && gain(cc) >= 2.0;
    report(
        6,
        pass,
        format!(
            "domain_adversarial baseline {:.2} dacdm {:.2} (+{:.2}); class_confusion baseline {:.2} dacdm {:.2} (+{:.2}); need +2",
            100.0 * da.0,
            100.0 * da.1,
            gain(da),
            100.0 * cc.0,
            100.0 * cc.1,
            gain(cc)
        ),
    );
}

#[test]
fn criterion_7_ablation_ordering() {
    let s = suite();
    let order = [
        Variant::Baseline,
        Variant::PseudoLabel,
        Variant::NoDomainGuidance,
        Variant::GeneratedOnly,
        Variant::Dacdm,
    ];
    let means: Vec<f64> = order.iter().map(|v| 100.0 * mean_acc(s.variant(*v))).collect();
    let drops: Vec<f64> = means.windows(2).map(|w| w[0] - w[1]).collect();
    let pass = drops.iter().all(|d| *d <= 0.5);
    let listed: Vec<String> = order
        .iter()
        .zip(&means)
        .map(|(v, m)| format!("{} {m:.2}", v.name()))
        .collect();
    report(
        7,
        pass,
        format!(
            "{}; adjacent drops {drops:.2?} (each must be <= 0.5)",
            listed.join(" <= ")
        ),
    );
}

#[test]
fn criterion_8_bound_holds() {
    let s = suite();
    let mut checked = 0;
    let mut worst = f64::INFINITY;
    let mut pass = true;
    for m in s.all() {
        if let Some(b) = &m.bound {
            checked += 1;
            worst = worst.min(b.rhs - b.lhs);
            pass &= b.lhs <= b.rhs;
        }
    }
    report(
        8,
        pass && checked > 0,
        format!("{checked} runs checked, min(rhs - lhs) {worst:.3}"),
    );
}

#[test]
fn criterion_9_sweep_shape() {
    let s = suite();
    let means: Vec<f64> = s.sweep.iter().map(|r| 100.0 * mean_acc(r)).collect();
    let best_large = means[2..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pass = means[1] - means[0] >= 1.0 && best_large > means[1];
    let listed: Vec<String> = PER_CLASS
        .iter()
        .zip(&means)
        .map(|(n, m)| format!("{n}:{m:.2}"))
        .collect();
    report(
        9,
        pass,
        format!(
            "per-class N_g -> accuracy {}; need N_g=50 >= N_g=0 + 1 and max(200,400,800) > N_g=50",
            listed.join(" ")
        ),
    );
}

#[test]
fn criterion_10_determinism() {
    let first = suite().snapshot();
    let again = Suite::build().snapshot();
    let runs = suite().all().count();
    let same = first == again;
    let detail = if same {
        format!("{runs} runs rerun from scratch, metric CSVs identical")
    } else {
        let diff = first.lines().zip(again.lines()).find(|(a, b)| a != b);
        format!("metric CSVs differ, first differing line {diff:?}")
    };
    report(10, same, detail);
}
