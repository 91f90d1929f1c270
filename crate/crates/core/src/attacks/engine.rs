use std::cmp::Ordering;
use std::collections::HashMap;

use super::{fgsm::fgsm_with, AttackConfig, AttackResult, Optimizer};
use crate::classifier::{argmax, Classifier};
use crate::error::{Error, Result};
use crate::imagecore::{Image, Shape};
use crate::layers::{sequential_trace, sequential_vjp, LayerKind, LayerParams, SequentialPerturbation};
use crate::losses::{tv_flow_baseline, tv_flow_loss, AttackObjective};
use crate::metrics::MetricReport;
use crate::threat::{ComposedThreat, ThreatSpec};

/// Image-space term added to the objective, e.g. a perceptual distance to
/// the clean image. Returns its value and gradient.
pub(crate) type ImageTerm<'a> = dyn Fn(&Image) -> Result<(f64, Vec<f64>)> + Sync + 'a;

/// Per-sample cache of finished attacks, keyed by [`AttackConfig::memo_key`].
#[derive(Default)]
pub struct AttackMemo {
    results: HashMap<String, AttackResult>,
}

impl AttackMemo {
    pub fn new() -> Self {
        Self::default()
    }
}

pub(crate) struct Schedule {
    pub min_iterations: usize,
    pub max_iterations: usize,
    pub window: usize,
    pub tolerance: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub layer_lr: Vec<Option<f64>>,
}

impl Schedule {
    fn from_config(cfg: &AttackConfig) -> Result<Self> {
        let Optimizer::Adam { lr, beta1, beta2, eps } = cfg.optimizer else {
            return Err(Error::invalid("PGD needs the adam optimizer"));
        };
        Ok(Self {
            min_iterations: cfg.min_iterations,
            max_iterations: cfg.max_iterations,
            window: cfg.window,
            tolerance: cfg.tolerance,
            lr,
            beta1,
            beta2,
            eps,
            layer_lr: cfg.layers.iter().map(|l| l.lr).collect(),
        })
    }
}

pub(crate) struct Problem<'a, M: Classifier> {
    pub model: &'a M,
    pub x: &'a Image,
    pub label: usize,
    pub threat: ComposedThreat,
    pub objective: AttackObjective,
    /// Weight on the adversarial term.
    pub adv_weight: f64,
    pub image_term: Option<&'a ImageTerm<'a>>,
}

pub(crate) struct Eval {
    pub loss: f64,
    pub term: f64,
    pub success: bool,
    pub predicted: usize,
    pub grads: Vec<Vec<f64>>,
    pub image: Image,
}

impl Eval {
    /// Ordering of candidate iterates: successful before unsuccessful, then
    /// by the image term (when present) among successes, else by loss.
    fn key(&self, has_term: bool) -> (u8, f64) {
        if self.success {
            (0, if has_term { self.term } else { self.loss })
        } else {
            (1, self.loss)
        }
    }
}

fn better(a: (u8, f64), b: (u8, f64)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1.total_cmp(&b.1) == Ordering::Less)
}

impl<M: Classifier> Problem<'_, M> {
    pub fn evaluate(&self, params: &[LayerParams]) -> Result<Eval> {
        let seq = SequentialPerturbation::new(params.to_vec());
        let trace = sequential_trace(self.x, &seq)?;
        let image = trace.last().expect("trace is non-empty").clone();
        let (logits, cache) = self.model.forward(&image)?;
        let (adv, d_logits) = self.objective.adversarial.eval(&logits, self.label)?;
        let d_logits: Vec<f64> = d_logits.iter().map(|g| g * self.adv_weight).collect();
        let mut d_image = self.model.backward_input(&cache, &d_logits);
        let mut loss = self.adv_weight * adv;
        let mut term = 0.0;
        if let Some(f) = self.image_term {
            let (v, g) = f(&image)?;
            term = v;
            loss += v;
            for (a, b) in d_image.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let (mut grads, _) = sequential_vjp(&trace, &seq, &d_image)?;
        let tw = self.objective.tv_weight;
        if tw > 0.0 {
            for (p, g) in params.iter().zip(&mut grads) {
                if let LayerParams::Flow(f) = p {
                    let (tv, tg) = tv_flow_loss(f);
                    loss += tw * (tv - tv_flow_baseline(f.height, f.width));
                    for (a, b) in g.iter_mut().zip(&tg) {
                        *a += tw * b;
                    }
                }
            }
        }
        let predicted = argmax(&logits);
        Ok(Eval {
            loss,
            term,
            success: predicted != self.label,
            predicted,
            grads,
            image,
        })
    }

    fn has_term(&self) -> bool {
        self.image_term.is_some()
    }

    /// Index of the best candidate under the iterate ordering, with its
    /// evaluation. Ties keep the earliest.
    pub fn pick(&self, candidates: &[Vec<LayerParams>]) -> Result<(usize, Eval)> {
        let mut best: Option<(usize, Eval)> = None;
        for (i, c) in candidates.iter().enumerate() {
            let e = self.evaluate(c)?;
            if !e.loss.is_finite() {
                continue;
            }
            let replace = match &best {
                None => true,
                Some((_, b)) => better(e.key(self.has_term()), b.key(self.has_term())),
            };
            if replace {
                best = Some((i, e));
            }
        }
        best.ok_or_else(|| Error::invalid("no candidate with a finite objective"))
    }

    /// Adam on the flat parameters with projection after every step.
    /// Returns the best iterate, its evaluation and the number of steps.
    pub fn descend(&self, init: Vec<LayerParams>, sched: &Schedule) -> Result<(Vec<LayerParams>, Eval, usize)> {
        let shape = self.x.shape();
        let mut params = self.threat.project(&init)?;
        for p in &params {
            p.check_image(shape)?;
        }
        let scales: Vec<Vec<f64>> = params
            .iter()
            .zip(&sched.layer_lr)
            .map(|(p, lr)| step_scales(p, shape, lr.unwrap_or(sched.lr)))
            .collect();
        let mut m: Vec<Vec<f64>> = scales.iter().map(|s| vec![0.0; s.len()]).collect();
        let mut v = m.clone();
        let has_term = self.has_term();

        let mut best: Option<(Vec<LayerParams>, Eval)> = None;
        let mut best_loss = f64::INFINITY;
        let mut history = Vec::with_capacity(sched.max_iterations + 1);
        let mut last_finite = params.clone();
        let mut steps = 0;
        for it in 0..=sched.max_iterations {
            let e = self.evaluate(&params)?;
            if !e.loss.is_finite() || e.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::AttackDiverged {
                    iteration: it,
                    last_finite,
                });
            }
            last_finite.clone_from(&params);
            best_loss = best_loss.min(e.loss);
            history.push(best_loss);
            let replace = match &best {
                None => true,
                Some((_, b)) => better(e.key(has_term), b.key(has_term)),
            };
            let grads = e.grads.clone();
            if replace {
                best = Some((params.clone(), e));
            }
            steps = it;
            let converged = it >= sched.min_iterations
                && it >= sched.window
                && history[it - sched.window] - history[it] <= sched.tolerance;
            if converged || it == sched.max_iterations {
                break;
            }
            let t = (it + 1) as i32;
            let bc1 = 1.0 - sched.beta1.powi(t);
            let bc2 = 1.0 - sched.beta2.powi(t);
            let mut next = Vec::with_capacity(params.len());
            for (l, p) in params.iter().enumerate() {
                let mut flat = p.flat();
                for (k, w) in flat.iter_mut().enumerate() {
                    let g = grads[l][k];
                    m[l][k] = sched.beta1 * m[l][k] + (1.0 - sched.beta1) * g;
                    v[l][k] = sched.beta2 * v[l][k] + (1.0 - sched.beta2) * g * g;
                    let mhat = m[l][k] / bc1;
                    let vhat = v[l][k] / bc2;
                    *w -= scales[l][k] * mhat / (vhat.sqrt() + sched.eps);
                }
                let mut q = p.clone();
                q.set_flat(&flat)?;
                next.push(q);
            }
            params = self.threat.project(&next)?;
        }
        let (p, e) = best.expect("at least one iterate evaluated");
        Ok((p, e, steps))
    }
}

/// Per-parameter Adam step sizes; see [`super::LayerConfig`].
fn step_scales(p: &LayerParams, shape: Shape, lr: f64) -> Vec<f64> {
    let sx = lr * shape.width as f64 / 2.0;
    let sy = lr * shape.height as f64 / 2.0;
    match p {
        LayerParams::Delta(d) => vec![lr; d.delta.len()],
        LayerParams::Affine(_) => vec![lr, sx, sy, lr],
        LayerParams::Flow(f) => {
            let n = f.u.len();
            let mut s = vec![sx; 2 * n];
            s[n..].fill(sy);
            s
        }
    }
}

fn is_identity_threat(spec: &ThreatSpec) -> bool {
    *spec == ThreatSpec::identity(spec.kind())
}

pub(crate) fn finish<M: Classifier>(
    model: &M,
    x: &Image,
    label: usize,
    name: &str,
    params: Vec<LayerParams>,
    eval: Eval,
    iterations: usize,
) -> Result<AttackResult> {
    let metrics = MetricReport::compute(model, x, &eval.image)?;
    Ok(AttackResult {
        attack: name.to_string(),
        label,
        predicted: eval.predicted,
        success: eval.success,
        iterations,
        final_loss: eval.loss,
        layer_order: params.iter().map(LayerParams::kind).collect(),
        params,
        metrics,
        perturbed: eval.image,
    })
}

fn problem<'a, M: Classifier>(model: &'a M, x: &'a Image, label: usize, cfg: &AttackConfig) -> Problem<'a, M> {
    Problem {
        model,
        x,
        label,
        threat: cfg.threat(),
        objective: cfg.objective,
        adv_weight: 1.0,
        image_term: None,
    }
}

fn check_label<M: Classifier>(model: &M, label: usize) -> Result<()> {
    if label >= model.num_classes() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

/// PGD from the identity perturbation.
pub fn pgd<M: Classifier>(model: &M, x: &Image, label: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    let init = cfg
        .kinds()
        .into_iter()
        .map(|k| LayerParams::identity(k, x.shape()))
        .collect();
    pgd_from(model, x, label, cfg, init)
}

/// PGD from explicit starting parameters (projected into the threat first).
/// The starting point is itself a candidate for the returned best iterate.
pub fn pgd_from<M: Classifier>(
    model: &M,
    x: &Image,
    label: usize,
    cfg: &AttackConfig,
    init: Vec<LayerParams>,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_label(model, label)?;
    model.input_shape().check(&x.shape())?;
    if init.iter().map(LayerParams::kind).ne(cfg.kinds()) {
        return Err(Error::invalid("initial parameters do not match the attack's layers"));
    }
    let prob = problem(model, x, label, cfg);
    if cfg.layers.iter().all(|l| is_identity_threat(&l.threat)) {
        let params = prob.threat.project(&init)?;
        let e = prob.evaluate(&params)?;
        return finish(model, x, label, &cfg.name, params, e, 0);
    }
    let sched = Schedule::from_config(cfg)?;
    let (p, e, steps) = prob.descend(init, &sched)?;
    finish(model, x, label, &cfg.name, p, e, steps)
}

/// Runs an attack config: FGSM, plain PGD, or warm-started PGD for combined
/// configs.
pub fn run_attack<M: Classifier>(model: &M, x: &Image, label: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    run_attack_with(model, x, label, cfg, &mut AttackMemo::new(), &[])
}

/// [`run_attack`] with a per-sample memo and extra warm-start candidates
/// (e.g. solutions under tighter threats). Every candidate must match the
/// config's layer kinds; it is projected into the threat before use.
pub fn run_attack_with<M: Classifier>(
    model: &M,
    x: &Image,
    label: usize,
    cfg: &AttackConfig,
    memo: &mut AttackMemo,
    candidates: &[Vec<LayerParams>],
) -> Result<AttackResult> {
    cfg.validate()?;
    let key = cfg.memo_key();
    if candidates.is_empty() {
        if let Some(r) = memo.results.get(&key) {
            let mut r = r.clone();
            r.attack.clone_from(&cfg.name);
            return Ok(r);
        }
    }
    let result = match cfg.optimizer {
        Optimizer::Fgsm { step } => fgsm_with(model, x, label, &cfg.layers[0].threat, step, cfg)?,
        Optimizer::Adam { .. } => {
            let identity: Vec<LayerParams> = cfg
                .kinds()
                .into_iter()
                .map(|k| LayerParams::identity(k, x.shape()))
                .collect();
            let mut starts = vec![identity.clone()];
            if cfg.warm_start && cfg.layers.len() > 1 {
                for (i, layer) in cfg.layers.iter().enumerate() {
                    let mut sub = cfg.clone();
                    sub.name = format!("{}[{}]", cfg.name, i);
                    sub.layers = vec![*layer];
                    sub.warm_start = false;
                    if layer.threat.kind() != LayerKind::Flow {
                        sub.objective.tv_weight = 0.0;
                    }
                    let part = run_attack_with(model, x, label, &sub, memo, &[])?;
                    let mut start = identity.clone();
                    start[i] = part.params[0].clone();
                    starts.push(start);
                }
            }
            let threat = cfg.threat();
            for c in candidates {
                if c.iter().map(LayerParams::kind).ne(cfg.kinds()) {
                    return Err(Error::invalid("warm-start candidate does not match the attack's layers"));
                }
                starts.push(threat.project(c)?);
            }
            let init = if starts.len() == 1 {
                identity
            } else {
                let prob = problem(model, x, label, cfg);
                let (i, _) = prob.pick(&starts)?;
                starts.swap_remove(i)
            };
            pgd_from(model, x, label, cfg, init)?
        }
    };
    if candidates.is_empty() {
        memo.results.insert(key, result.clone());
    }
    Ok(result)
}
