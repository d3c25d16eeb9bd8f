//! Gradient-descent fitting of particle fields with adaptive particle control.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{loss_gradients, AnisoParticle2D, Evaluation, IsoParticle2D, LossConfig, ParamGroup, Particle2D, ParticleGrad};
use crate::image::{luminance, ImageGrid};
use crate::loss::{check_lambda, LossValue};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    /// Pixels per unit gradient.
    pub position: f64,
    /// Applied to angles and log-scales.
    pub shape: f64,
    pub amplitude: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1e-1,
            shape: 5e-3,
            amplitude: 1e-2,
        }
    }
}

impl LearningRates {
    pub fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Position => self.position,
            ParamGroup::Shape => self.shape,
            ParamGroup::Amplitude => self.amplitude,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            position: self.position * factor,
            shape: self.shape * factor,
            amplitude: self.amplitude * factor,
        }
    }

    fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.position, "position learning rate"),
            (self.shape, "shape learning rate"),
            (self.amplitude, "amplitude learning rate"),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// `theta <- theta - rate * grad`.
    Sgd,
    /// Heavy-ball: `v <- beta v + grad; theta <- theta - rate * v`.
    Momentum { beta: f64 },
    /// Bias-corrected first/second moment scaling of the step.
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub const MOMENTUM: Optimizer = Optimizer::Momentum { beta: 0.9 };
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveControlParams {
    /// Particles whose largest `|A|` is below this are removed.
    pub prune_threshold: f64,
    /// Merge candidates must lie closer than `factor * min(sigma1, sigma2)`.
    pub merge_distance_factor: f64,
    /// Merge candidates must have amplitude vectors closer than this (Euclidean).
    pub merge_color_tol: f64,
    /// Particles with a scale above this are split.
    pub split_sigma_max: f64,
    pub max_particles: usize,
}

impl Default for AdaptiveControlParams {
    fn default() -> Self {
        Self {
            prune_threshold: 1e-3,
            merge_distance_factor: 0.25,
            merge_color_tol: 0.02,
            split_sigma_max: 24.0,
            max_particles: 4000,
        }
    }
}

impl AdaptiveControlParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.prune_threshold >= 0.0) {
            return Err(Error::invalid("prune threshold", "must be >= 0"));
        }
        if !(self.merge_distance_factor > 0.0) {
            return Err(Error::invalid("merge distance factor", "must be > 0"));
        }
        if !(self.merge_color_tol >= 0.0) {
            return Err(Error::invalid("merge color tolerance", "must be >= 0"));
        }
        if !(self.split_sigma_max > 0.0) {
            return Err(Error::invalid("split sigma max", "must be > 0"));
        }
        if self.max_particles == 0 {
            return Err(Error::invalid("max particles", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Support radius `D` in pixels.
    pub support: f64,
    /// Particle budget `K` used by initialization.
    pub budget: usize,
    /// Weight of the D-SSIM term.
    pub lambda: f64,
    pub epochs: usize,
    pub rates: LearningRates,
    pub optimizer: Optimizer,
    /// Halve every rate and reject the step whenever it would raise the loss.
    pub backoff: bool,
    /// Run adaptive control after every `adapt_every` epochs; 0 disables it.
    pub adapt_every: usize,
    pub seed: u64,
    /// Evaluate on the rayon pool. Results are identical either way.
    pub parallel: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            support: 15.0,
            budget: 1000,
            lambda: 0.2,
            epochs: 2000,
            rates: LearningRates::default(),
            optimizer: Optimizer::ADAM,
            backoff: true,
            adapt_every: 0,
            seed: 0,
            parallel: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.support > 0.0) {
            return Err(Error::invalid("support radius D", format!("must be > 0, got {}", self.support)));
        }
        if self.budget == 0 {
            return Err(Error::invalid("particle budget K", "must be at least 1"));
        }
        check_lambda(self.lambda)?;
        self.rates.validate()?;
        match self.optimizer {
            Optimizer::Sgd => {}
            Optimizer::Momentum { beta } if (0.0..1.0).contains(&beta) => {}
            Optimizer::Adam { beta1, beta2, epsilon }
                if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0 => {}
            other => return Err(Error::invalid("optimizer", format!("bad coefficients in {other:?}"))),
        }
        Ok(())
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            support: self.support,
            lambda: self.lambda,
            parallel: self.parallel,
        }
    }
}

/// Plain gradient descent with per-group rates. Particles with a non-finite
/// gradient are left untouched; returns the updated list and the skip count.
pub fn update_step<P: Particle2D>(particles: &[P], grads: &[ParticleGrad], rates: &LearningRates) -> (Vec<P>, usize) {
    assert_eq!(particles.len(), grads.len(), "gradients must align with particles");
    let mut skipped = 0;
    let mut buf = Vec::new();
    let out = particles
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            let mut p = p.clone();
            if !g.is_finite() {
                skipped += 1;
                return p;
            }
            buf.resize(p.num_params(), 0.0);
            p.unconstrained_grad(g, &mut buf);
            for (i, v) in buf.iter_mut().enumerate() {
                *v *= rates.for_group(p.param_group(i));
            }
            p.apply_step(&buf);
            p
        })
        .collect();
    (out, skipped)
}

/// Moment buffers for the stateful optimizers, one flat vector per particle.
#[derive(Debug, Clone)]
struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl OptimizerState {
    fn new<P: Particle2D>(particles: &[P]) -> Self {
        let zeros: Vec<Vec<f64>> = particles.iter().map(|p| vec![0.0; p.num_params()]).collect();
        Self {
            second: zeros.clone(),
            first: zeros,
            steps: 0,
        }
    }
}

fn optimizer_step<P: Particle2D>(
    particles: &[P],
    grads: &[ParticleGrad],
    rates: &LearningRates,
    optimizer: Optimizer,
    state: &OptimizerState,
) -> (Vec<P>, OptimizerState, usize) {
    if optimizer == Optimizer::Sgd {
        let (out, skipped) = update_step(particles, grads, rates);
        return (out, state.clone(), skipped);
    }
    let mut next = state.clone();
    next.steps += 1;
    let mut skipped = 0;
    let mut g = Vec::new();
    let mut out = Vec::with_capacity(particles.len());
    for (k, (p, grad)) in particles.iter().zip(grads).enumerate() {
        let mut p = p.clone();
        if !grad.is_finite() {
            skipped += 1;
            out.push(p);
            continue;
        }
        g.resize(p.num_params(), 0.0);
        p.unconstrained_grad(grad, &mut g);
        let m = &mut next.first[k];
        let v = &mut next.second[k];
        for i in 0..g.len() {
            let rate = rates.for_group(p.param_group(i));
            g[i] = match optimizer {
                Optimizer::Momentum { beta } => {
                    m[i] = beta * m[i] + g[i];
                    rate * m[i]
                }
                Optimizer::Adam { beta1, beta2, epsilon } => {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / (1.0 - beta1.powi(next.steps));
                    let v_hat = v[i] / (1.0 - beta2.powi(next.steps));
                    rate * m_hat / (v_hat.sqrt() + epsilon)
                }
                Optimizer::Sgd => unreachable!(),
            };
        }
        p.apply_step(&g);
        out.push(p);
    }
    (out, next, skipped)
}

/// Removes particles whose largest `|A|` is below `threshold`, always keeping
/// at least the particle with the largest amplitude.
pub fn prune<P: Particle2D>(particles: Vec<P>, threshold: f64) -> Vec<P> {
    let peak = |p: &P| p.amplitude().iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let strongest = particles
        .iter()
        .enumerate()
        .max_by(|a, b| peak(a.1).total_cmp(&peak(b.1)).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    let kept: Vec<P> = particles.iter().filter(|p| peak(p) >= threshold).cloned().collect();
    if kept.is_empty() {
        strongest.map(|i| vec![particles[i].clone()]).unwrap_or_default()
    } else {
        kept
    }
}

/// Two children at `mu +- (sigma / 2) u` for a uniformly random unit vector
/// `u`, each with `sigma / sqrt(2)` and the parent's amplitude. Each child
/// carries half the parent's mass `A pi sigma^2`.
pub fn split(particle: &IsoParticle2D, rng: &mut impl Rng) -> (IsoParticle2D, IsoParticle2D) {
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let (s, c) = phi.sin_cos();
    let r = particle.sigma / 2.0;
    let sigma = particle.sigma * std::f64::consts::FRAC_1_SQRT_2;
    let child = |sign: f64| IsoParticle2D {
        mu: [particle.mu[0] + sign * r * c, particle.mu[1] + sign * r * s],
        sigma,
        amplitude: particle.amplitude.clone(),
    };
    (child(1.0), child(-1.0))
}

/// Moment-preserving merge of two isotropic particles.
///
/// Luminance masses `m_i = lum(A_i) pi sigma_i^2` weight the centroid and the
/// second moment; the amplitude is then chosen so that every channel's
/// zeroth moment is the sum of the inputs'. Returns `None` when the
/// luminance masses cancel.
pub fn merge(p1: &IsoParticle2D, p2: &IsoParticle2D) -> Option<IsoParticle2D> {
    let area1 = std::f64::consts::PI * p1.sigma * p1.sigma;
    let area2 = std::f64::consts::PI * p2.sigma * p2.sigma;
    let m1 = luminance(&p1.amplitude) * area1;
    let m2 = luminance(&p2.amplitude) * area2;
    let total = m1 + m2;
    if total.abs() < 1e-12 {
        return None;
    }
    let (w1, w2) = (m1 / total, m2 / total);
    let mu = [w1 * p1.mu[0] + w2 * p2.mu[0], w1 * p1.mu[1] + w2 * p2.mu[1]];
    let var = w1 * p1.sigma * p1.sigma + w2 * p2.sigma * p2.sigma;
    if !(var > 0.0) {
        return None;
    }
    let area = std::f64::consts::PI * var;
    let amplitude = p1
        .amplitude
        .iter()
        .zip(&p2.amplitude)
        .map(|(a1, a2)| (a1 * area1 + a2 * area2) / area)
        .collect();
    Some(IsoParticle2D {
        mu,
        sigma: var.sqrt(),
        amplitude,
    })
}

/// Kernel-specific hooks for adaptive control. Kernels without moment
/// preserving merge/split rules only take part in pruning.
pub trait ControlledParticle: Particle2D {
    fn merged(&self, _other: &Self) -> Option<Self> {
        None
    }

    fn split_in_two(&self, _rng: &mut ChaCha8Rng) -> Option<(Self, Self)> {
        None
    }

    fn can_split(&self) -> bool {
        false
    }
}

impl ControlledParticle for IsoParticle2D {
    fn merged(&self, other: &Self) -> Option<Self> {
        merge(self, other)
    }

    fn split_in_two(&self, rng: &mut ChaCha8Rng) -> Option<(Self, Self)> {
        Some(split(self, rng))
    }

    fn can_split(&self) -> bool {
        true
    }
}

impl ControlledParticle for AnisoParticle2D {}

fn amplitude_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Greedy nearest-first merging: every qualifying pair is visited in order of
/// increasing center distance (ties by index) and merged if neither member
/// has been merged yet. The merged particle takes the lower index's slot.
pub fn merge_pass<P: ControlledParticle>(particles: Vec<P>, adapt: &AdaptiveControlParams) -> Vec<P> {
    let mut pairs = Vec::new();
    for i in 0..particles.len() {
        for j in i + 1..particles.len() {
            let (a, b) = (&particles[i], &particles[j]);
            let (ma, mb) = (a.mu(), b.mu());
            let dist = (ma[0] - mb[0]).hypot(ma[1] - mb[1]);
            if dist < adapt.merge_distance_factor * a.scale().min(b.scale())
                && amplitude_distance(a.amplitude(), b.amplitude()) < adapt.merge_color_tol
            {
                pairs.push((dist, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut replaced: Vec<Option<P>> = vec![None; particles.len()];
    let mut used = vec![false; particles.len()];
    let mut dropped = vec![false; particles.len()];
    for (_, i, j) in pairs {
        if used[i] || used[j] {
            continue;
        }
        if let Some(m) = particles[i].merged(&particles[j]) {
            used[i] = true;
            used[j] = true;
            dropped[j] = true;
            replaced[i] = Some(m);
        }
    }
    particles
        .into_iter()
        .zip(replaced)
        .zip(dropped)
        .filter_map(|((p, r), d)| if d { None } else { Some(r.unwrap_or(p)) })
        .collect()
}

/// Splits particles whose scale exceeds `split_sigma_max`, largest first,
/// while the count stays within `max_particles`. Children replace the parent
/// in place; offsets are drawn in index order.
pub fn split_pass<P: ControlledParticle>(particles: Vec<P>, adapt: &AdaptiveControlParams, rng: &mut ChaCha8Rng) -> Vec<P> {
    let mut order: Vec<usize> = (0..particles.len())
        .filter(|&i| particles[i].can_split() && particles[i].scale() > adapt.split_sigma_max)
        .collect();
    order.sort_by(|&a, &b| particles[b].scale().total_cmp(&particles[a].scale()).then(a.cmp(&b)));
    let room = adapt.max_particles.saturating_sub(particles.len());
    order.truncate(room);
    let mut chosen = vec![false; particles.len()];
    order.iter().for_each(|&i| chosen[i] = true);
    let mut out = Vec::with_capacity(particles.len() + order.len());
    for (p, split_it) in particles.into_iter().zip(chosen) {
        match split_it.then(|| p.split_in_two(rng)).flatten() {
            Some((a, b)) => {
                out.push(a);
                out.push(b);
            }
            None => out.push(p),
        }
    }
    out
}

/// Prune, then merge, then split.
pub fn adaptive_control<P: ControlledParticle>(particles: Vec<P>, adapt: &AdaptiveControlParams, rng: &mut ChaCha8Rng) -> Vec<P> {
    let particles = prune(particles, adapt.prune_threshold);
    let particles = merge_pass(particles, adapt);
    split_pass(particles, adapt, rng)
}

#[derive(Debug, Clone)]
pub struct FitState<P> {
    pub particles: Vec<P>,
    pub epoch: usize,
    /// Loss at the start of each completed epoch.
    pub loss_history: Vec<f64>,
    pub particle_count_history: Vec<usize>,
    /// Loss of `particles` after the last epoch.
    pub final_loss: LossValue,
    /// Rates after backoff.
    pub rates: LearningRates,
    pub rejected_steps: usize,
    pub skipped_updates: usize,
    pub rng: ChaCha8Rng,
}

fn first_bad_particle<P: Particle2D>(particles: &[P], grads: &[ParticleGrad]) -> Option<usize> {
    particles
        .iter()
        .zip(grads)
        .position(|(p, g)| p.validate().is_err() || !g.is_finite())
        .or_else(|| {
            // Everything finite on its own: blame the largest amplitude.
            let peak = |p: &P| p.amplitude().iter().fold(0.0f64, |m, a| m.max(a.abs()));
            (0..particles.len()).max_by(|&a, &b| peak(&particles[a]).total_cmp(&peak(&particles[b])))
        })
}

fn evaluate_checked<P: Particle2D>(particles: &[P], target: &ImageGrid, cfg: &LossConfig, epoch: usize) -> Result<Evaluation> {
    let diverged = |loss: f64, particle| Error::Diverged { epoch, loss, particle };
    if let Some(i) = particles.iter().position(|p| p.validate().is_err()) {
        return Err(diverged(f64::NAN, Some(i)));
    }
    let eval = loss_gradients(particles, target, cfg)?;
    if !eval.loss.total.is_finite() {
        return Err(diverged(eval.loss.total, first_bad_particle(particles, &eval.grads)));
    }
    Ok(eval)
}

/// Fits `init` to `target`. Each epoch records the current loss, takes one
/// optimizer step, and (with backoff) rejects the step and halves all rates
/// if the loss would increase. Adaptive control runs after every
/// `adapt_every` epochs when enabled.
pub fn fit<P: ControlledParticle>(
    target: &ImageGrid,
    init: Vec<P>,
    config: &FitConfig,
    adapt: Option<&AdaptiveControlParams>,
) -> Result<FitState<P>> {
    fit_with_progress(target, init, config, adapt, |_, _| {})
}

/// [`fit`] with a callback receiving `(epoch, loss)` at the start of every epoch.
pub fn fit_with_progress<P: ControlledParticle>(
    target: &ImageGrid,
    init: Vec<P>,
    config: &FitConfig,
    adapt: Option<&AdaptiveControlParams>,
    mut progress: impl FnMut(usize, f64),
) -> Result<FitState<P>> {
    config.validate()?;
    if let Some(a) = adapt {
        a.validate()?;
        if a.max_particles < init.len() {
            return Err(Error::invalid(
                "max particles",
                format!("{} is below the initial count {}", a.max_particles, init.len()),
            ));
        }
    }
    if init.is_empty() {
        return Err(Error::invalid("initial particles", "need at least one particle"));
    }
    target.check_target_range()?;
    let cfg = config.loss_config();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut particles = init;
    let mut eval = evaluate_checked(&particles, target, &cfg, 0)?;
    let mut opt = OptimizerState::new(&particles);
    let mut rates = config.rates;
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut particle_count_history = Vec::with_capacity(config.epochs);
    let (mut rejected_steps, mut skipped_updates) = (0, 0);

    for epoch in 0..config.epochs {
        progress(epoch, eval.loss.total);
        loss_history.push(eval.loss.total);
        particle_count_history.push(particles.len());

        let (candidate, next_opt, skipped) = optimizer_step(&particles, &eval.grads, &rates, config.optimizer, &opt);
        skipped_updates += skipped;
        let cand_eval = evaluate_checked(&candidate, target, &cfg, epoch)?;
        if config.backoff && cand_eval.loss.total > eval.loss.total {
            rates = rates.scaled(0.5);
            rejected_steps += 1;
        } else {
            particles = candidate;
            eval = cand_eval;
            opt = next_opt;
        }

        if let Some(a) = adapt {
            if config.adapt_every > 0 && (epoch + 1) % config.adapt_every == 0 && epoch + 1 < config.epochs {
                let before = particles.len();
                let controlled = adaptive_control(particles.clone(), a, &mut rng);
                if controlled.len() != before || controlled.iter().zip(&particles).any(|(x, y)| x.mu() != y.mu()) {
                    particles = controlled;
                    eval = evaluate_checked(&particles, target, &cfg, epoch)?;
                    opt = OptimizerState::new(&particles);
                }
            }
        }
    }

    Ok(FitState {
        particles,
        epoch: config.epochs,
        loss_history,
        particle_count_history,
        final_loss: eval.loss,
        rates,
        rejected_steps,
        skipped_updates,
        rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{reconstruct, GridSpec};

    fn iso(x: f64, y: f64, sigma: f64, a: &[f64]) -> IsoParticle2D {
        IsoParticle2D::new([x, y], sigma, a.to_vec()).unwrap()
    }

    #[test]
    fn update_step_examples() {
        let ps = vec![iso(2.0, 3.0, 2.0, &[0.5])];
        let (same, skipped) = update_step(&ps, &[ParticleGrad::zeros(1)], &LearningRates::default());
        assert_eq!(same, ps);
        assert_eq!(skipped, 0);

        let mut g = ParticleGrad::zeros(1);
        g.d_amp[0] = 1.0;
        let rates = LearningRates {
            amplitude: 0.1,
            ..LearningRates::default()
        };
        let (out, _) = update_step(&ps, &[g], &rates);
        assert!((out[0].amplitude[0] - 0.4).abs() < 1e-15);
        assert_eq!(out[0].sigma, 2.0);

        let mut bad = ParticleGrad::zeros(1);
        bad.d_mu[0] = f64::NAN;
        let (out, skipped) = update_step(&ps, &[bad], &rates);
        assert_eq!(out, ps);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn sigma_moves_in_log_space() {
        let ps = vec![iso(0.0, 0.0, 2.0, &[0.5])];
        let mut g = ParticleGrad::zeros(1);
        g.d_shape[0] = 100.0;
        let (out, _) = update_step(&ps, &[g], &LearningRates::default());
        assert!(out[0].sigma > 0.0 && out[0].sigma < 2.0);
        assert!((out[0].sigma - 2.0 * (-5e-3 * 2.0 * 100.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn prune_examples() {
        let ps = vec![iso(0.0, 0.0, 1.0, &[0.5]), iso(1.0, 0.0, 1.0, &[0.0]), iso(2.0, 0.0, 1.0, &[-0.3])];
        assert_eq!(prune(ps.clone(), 0.0), ps);
        let out = prune(ps.clone(), 1e-3);
        assert_eq!(out, vec![ps[0].clone(), ps[2].clone()]);
        let out = prune(ps.clone(), 10.0);
        assert_eq!(out, vec![ps[0].clone()]);
    }

    #[test]
    fn merge_examples() {
        let p = iso(3.0, 4.0, 2.0, &[0.2, 0.4, 0.6]);
        let m = merge(&p, &p).unwrap();
        assert_eq!(m.mu, p.mu);
        assert!((m.sigma - p.sigma).abs() < 1e-15);
        for (a, b) in m.amplitude.iter().zip(&p.amplitude) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }

        let q = iso(7.0, 2.0, 2.0, &[0.2, 0.4, 0.6]);
        let m = merge(&p, &q).unwrap();
        assert!((m.mu[0] - 5.0).abs() < 1e-15 && (m.mu[1] - 3.0).abs() < 1e-15);

        let neg = iso(3.0, 4.0, 2.0, &[-0.2, -0.4, -0.6]);
        assert!(merge(&p, &neg).is_none());
    }

    #[test]
    fn merge_conserves_zeroth_moment() {
        let p = iso(3.0, 4.0, 2.0, &[0.2, 0.9, 0.1]);
        let q = iso(3.5, 4.2, 1.1, &[0.4, 0.3, 0.8]);
        let m = merge(&p, &q).unwrap();
        for c in 0..3 {
            let want = p.mass()[c] + q.mass()[c];
            assert!((m.mass()[c] - want).abs() < 1e-9 * want.abs());
        }
    }

    #[test]
    fn split_conserves_mass_and_is_deterministic() {
        let parent = iso(10.0, 10.0, 2.0, &[1.0]);
        let (a, b) = split(&parent, &mut ChaCha8Rng::seed_from_u64(3));
        assert!((a.sigma - 2f64.sqrt()).abs() < 1e-15);
        let total = a.mass()[0] + b.mass()[0];
        assert!((total - parent.mass()[0]).abs() <= 1e-12 * parent.mass()[0]);
        assert!((a.mu[0] + b.mu[0] - 20.0).abs() < 1e-12);
        let off = (a.mu[0] - 10.0).hypot(a.mu[1] - 10.0);
        assert!((off - 1.0).abs() < 1e-12);
        let again = split(&parent, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!((a, b), again);
    }

    #[test]
    fn adaptive_control_identity_and_cap() {
        let adapt = AdaptiveControlParams::default();
        let ps = vec![iso(5.0, 5.0, 2.0, &[0.5]), iso(40.0, 40.0, 3.0, &[0.7])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(adaptive_control(ps.clone(), &adapt, &mut rng), ps);

        let big: Vec<_> = (0..10).map(|i| iso(10.0 * i as f64, 0.0, 50.0, &[0.5])).collect();
        let capped = AdaptiveControlParams {
            max_particles: 13,
            merge_distance_factor: 1e-6,
            ..adapt
        };
        let out = adaptive_control(big, &capped, &mut rng);
        assert_eq!(out.len(), 13);
    }

    #[test]
    fn adaptive_control_matches_scripted_rules() {
        let adapt = AdaptiveControlParams {
            prune_threshold: 0.05,
            merge_distance_factor: 0.5,
            merge_color_tol: 0.1,
            split_sigma_max: 6.0,
            max_particles: 10,
        };
        let ps = vec![
            iso(10.0, 10.0, 2.0, &[0.5]),  // merges with 2
            iso(30.0, 30.0, 8.0, &[0.4]),  // splits
            iso(10.5, 10.0, 2.0, &[0.52]), // merges with 0
            iso(50.0, 5.0, 1.0, &[0.01]),  // pruned
            iso(20.0, 40.0, 3.0, &[0.9]),  // untouched
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = adaptive_control(ps.clone(), &adapt, &mut rng);

        let mut script_rng = ChaCha8Rng::seed_from_u64(11);
        let merged = merge(&ps[0], &ps[2]).unwrap();
        let (c1, c2) = split(&ps[1], &mut script_rng);
        let want = vec![merged, c1, c2, ps[4].clone()];
        assert_eq!(out, want);
    }

    #[test]
    fn fit_at_fixed_point_stays_put() {
        let ps = vec![iso(6.0, 6.0, 2.5, &[0.6]), iso(10.0, 9.0, 3.0, &[0.3])];
        let grid = GridSpec::new(16, 16, 1, 8.0).unwrap();
        let target = reconstruct(&ps, &grid).unwrap();
        let config = FitConfig {
            support: 8.0,
            lambda: 0.0,
            epochs: 20,
            ..FitConfig::default()
        };
        let state = fit(&target, ps.clone(), &config, None).unwrap();
        assert!(state.loss_history.iter().all(|l| *l == 0.0));
        assert_eq!(state.particles, ps);
        assert_eq!(state.loss_history.len(), 20);
    }

    #[test]
    fn fit_rejects_bad_config() {
        let target = ImageGrid::filled(8, 8, 1, 0.5).unwrap();
        let ps = vec![iso(4.0, 4.0, 2.0, &[0.5])];
        let bad = FitConfig {
            lambda: 2.0,
            ..FitConfig::default()
        };
        assert!(matches!(fit(&target, ps.clone(), &bad, None), Err(Error::InvalidParameter { name: "lambda", .. })));
        let bad = FitConfig {
            support: -1.0,
            ..FitConfig::default()
        };
        assert!(fit(&target, ps.clone(), &bad, None).is_err());
        assert!(fit::<IsoParticle2D>(&target, vec![], &FitConfig::default(), None).is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        let target = ImageGrid::filled(8, 8, 1, 0.5).unwrap();
        let ps = vec![iso(4.0, 4.0, 2.0, &[0.1])];
        let config = FitConfig {
            lambda: 0.0,
            epochs: 5,
            backoff: false,
            rates: LearningRates {
                amplitude: 1e308,
                ..LearningRates::default()
            },
            ..FitConfig::default()
        };
        match fit(&target, ps, &config, None) {
            Err(Error::Diverged { epoch, particle, .. }) => {
                assert!(epoch < 5);
                assert_eq!(particle, Some(0));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
