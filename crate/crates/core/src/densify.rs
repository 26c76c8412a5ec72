//! Adaptive density control: direction-aware weighting, split/clone
//! classification and the scene mutations of one densification round.
//!
//! The coherence ratio `C` of a Gaussian maps to a weight
//! `w = alpha + beta * (1 - C)^p`. Split candidates compare `grad * w` against
//! the threshold, clone candidates compare `grad / w`. Conflicted Gaussians
//! (low `C`) are therefore pushed toward splitting and held back from
//! cloning, while coherent ones get the opposite treatment.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian2D, Scene, Vec2};
use crate::index_map::IndexMap;
use crate::optim::SceneOptimizer;
use crate::stats::{GcrMode, GradStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Policy {
    /// Mean view-space gradient norm, no weighting.
    Baseline,
    /// Mean of per-pixel gradient norms, no weighting.
    Abs,
    /// Coherence weighting on both split and clone metrics.
    Gdags,
    /// Coherence weighting on the split metric only.
    GdagsSplit,
    /// Coherence weighting on the clone metric only.
    GdagsClone,
}

impl Policy {
    pub const ALL: [Policy; 5] = [Policy::Baseline, Policy::Abs, Policy::Gdags, Policy::GdagsSplit, Policy::GdagsClone];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Baseline => "baseline",
            Policy::Abs => "abs",
            Policy::Gdags => "gdags",
            Policy::GdagsSplit => "gdags-s",
            Policy::GdagsClone => "gdags-c",
        }
    }

    fn weights_split(self) -> bool {
        matches!(self, Policy::Gdags | Policy::GdagsSplit)
    }

    fn weights_clone(self) -> bool {
        matches!(self, Policy::Gdags | Policy::GdagsClone)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?} (expected one of baseline, abs, gdags, gdags-s, gdags-c)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensifyConfig {
    pub policy: Policy,
    /// Floor of the weight curve, reached at perfect coherence.
    pub weight_alpha: f64,
    /// Height of the weight curve above the floor, reached at zero coherence.
    pub weight_beta: f64,
    /// Exponent shaping the weight curve.
    pub weight_p: f64,
    /// Gradient threshold.
    pub tau_p: f64,
    /// Size threshold in pixels on the larger standard deviation.
    pub tau_s: f64,
    pub split_factor: f64,
    pub opacity_prune_threshold: f64,
    /// Gaussians whose larger standard deviation exceeds this (pixels) are pruned.
    pub max_scale_limit: f64,
    pub interval: u64,
    pub start_iteration: u64,
    pub stop_iteration: u64,
    pub gcr_mode: GcrMode,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            policy: Policy::Gdags,
            weight_alpha: 0.8,
            weight_beta: 25.0,
            weight_p: 15.0,
            tau_p: 2e-4,
            tau_s: 1.28,
            split_factor: 1.6,
            opacity_prune_threshold: 0.005,
            max_scale_limit: 64.0,
            interval: 50,
            start_iteration: 250,
            stop_iteration: 2500,
            gcr_mode: GcrMode::Global,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.weight_alpha) {
            return bad("weight_alpha must lie in [0, 1]");
        }
        if !(self.weight_beta > 0.0) {
            return bad("weight_beta must be > 0");
        }
        if !(self.weight_p >= 1.0) {
            return bad("weight_p must be >= 1");
        }
        if !(self.tau_p > 0.0) || !(self.tau_s > 0.0) {
            return bad("tau_p and tau_s must be > 0");
        }
        if !(self.split_factor > 1.0) {
            return bad("split_factor must be > 1");
        }
        if !(self.opacity_prune_threshold > 0.0 && self.opacity_prune_threshold < 1.0) {
            return bad("opacity_prune_threshold must lie in (0, 1)");
        }
        if !(self.max_scale_limit > 0.0) {
            return bad("max_scale_limit must be > 0");
        }
        if self.interval == 0 {
            return bad("densify interval must be >= 1");
        }
        Ok(())
    }

    /// Whether a round runs after `iteration`.
    pub fn is_round(&self, iteration: u64) -> bool {
        iteration >= self.start_iteration && iteration < self.stop_iteration && iteration % self.interval == 0
    }
}

/// `alpha + beta * (1 - gcr)^p`.
pub fn weight(gcr: f64, cfg: &DensifyConfig) -> f64 {
    cfg.weight_alpha + cfg.weight_beta * (1.0 - gcr).powf(cfg.weight_p)
}

/// `(grad * w, grad / w)`.
pub fn decision_metrics(grad_norm: f64, w: f64) -> Result<(f64, f64)> {
    if !(w > 0.0) {
        return Err(Error::OutOfRange(format!("densification weight must be > 0, got {w}")));
    }
    Ok((grad_norm * w, grad_norm / w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    None,
    Split,
    Clone,
}

/// The inputs to one Gaussian's decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evidence {
    pub mean_grad_norm: f64,
    pub abs_mean_grad_norm: f64,
    pub gcr: f64,
    pub max_scale: f64,
}

pub fn decide(e: &Evidence, cfg: &DensifyConfig) -> Action {
    let base = match cfg.policy {
        Policy::Abs => e.abs_mean_grad_norm,
        _ => e.mean_grad_norm,
    };
    let w = weight(e.gcr, cfg);
    if e.max_scale > cfg.tau_s {
        let metric = if cfg.policy.weights_split() { base * w } else { base };
        if metric > cfg.tau_p {
            return Action::Split;
        }
    } else {
        let metric = if cfg.policy.weights_clone() { base / w } else { base };
        if metric > cfg.tau_p {
            return Action::Clone;
        }
    }
    Action::None
}

pub fn evidence(scene: &Scene, stats: &GradStats, i: usize, mode: GcrMode) -> Evidence {
    Evidence {
        mean_grad_norm: stats.mean_grad_norm(i),
        abs_mean_grad_norm: stats.abs_mean_grad_norm(i),
        gcr: stats.gcr_with(i, mode),
        max_scale: scene.gaussians[i].max_scale(),
    }
}

pub fn classify(scene: &Scene, stats: &GradStats, cfg: &DensifyConfig) -> Result<Vec<Action>> {
    if stats.len() != scene.len() {
        return Err(Error::ShapeMismatch(format!("stats sized {} for a scene of {}", stats.len(), scene.len())));
    }
    Ok((0..scene.len()).map(|i| decide(&evidence(scene, stats, i, cfg.gcr_mode), cfg)).collect())
}

/// Two children drawn from the parent's own density, each shrunk by `split_factor`.
pub fn split<R: Rng + ?Sized>(g: &Gaussian2D, split_factor: f64, rng: &mut R) -> [Gaussian2D; 2] {
    let shrink = split_factor.ln();
    let [s0, s1] = g.scales();
    let (sin, cos) = g.rotation.sin_cos();
    let mut child = || {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let (a, b) = (s0 * z0, s1 * z1);
        Gaussian2D {
            mu: [g.mu[0] + cos * a - sin * b, g.mu[1] + sin * a + cos * b],
            log_scale: [g.log_scale[0] - shrink, g.log_scale[1] - shrink],
            ..*g
        }
    };
    [child(), child()]
}

/// A copy of `g` displaced by one descent step of size `step` along `-mu_grad`.
pub fn clone(g: &Gaussian2D, mu_grad: Vec2, step: f64) -> Gaussian2D {
    Gaussian2D { mu: [g.mu[0] - step * mu_grad[0], g.mu[1] - step * mu_grad[1]], ..*g }
}

/// Removes near-transparent and oversized Gaussians, keeping relative order.
/// Never empties the scene: if everything qualifies, the most opaque survives.
pub fn prune(scene: &mut Scene, cfg: &DensifyConfig) -> (Vec<usize>, IndexMap) {
    let doomed: Vec<bool> = scene
        .gaussians
        .iter()
        .map(|g| g.opacity() < cfg.opacity_prune_threshold || g.max_scale() > cfg.max_scale_limit)
        .collect();
    let mut keep: Vec<usize> = (0..scene.len()).filter(|&i| !doomed[i]).collect();
    if keep.is_empty() && !scene.is_empty() {
        let best = (0..scene.len())
            .max_by(|&a, &b| {
                scene.gaussians[a]
                    .logit_opacity
                    .total_cmp(&scene.gaussians[b].logit_opacity)
                    .then(b.cmp(&a))
            })
            .unwrap();
        keep.push(best);
    }
    let removed: Vec<usize> = (0..scene.len()).filter(|i| keep.binary_search(i).is_err()).collect();
    let old_len = scene.len();
    scene.gaussians = keep.iter().map(|&i| scene.gaussians[i]).collect();
    let map = IndexMap::new(old_len, keep.into_iter().map(Some).collect()).expect("increasing indices");
    (removed, map)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DensifyReport {
    pub iteration: u64,
    pub n_split: usize,
    pub n_clone: usize,
    pub n_pruned: usize,
    pub n_total_after: usize,
}

/// Per-round inputs that come from the training loop rather than the config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundContext {
    pub iteration: u64,
    /// Step size used to displace clones; the current position learning rate.
    pub clone_step: f64,
    /// Factor that converts accumulated gradients back to pixel units.
    pub grad_to_pixels: Vec2,
}

/// Classify, split and clone from a snapshot, prune, then reset stats and
/// resize optimizer state to the new layout.
///
/// Layout after the round: untouched and clone-source Gaussians in their
/// original order, then clones, then split children (two per parent, in
/// parent order), with pruned entries removed.
pub fn densify_round<R: Rng + ?Sized>(
    scene: &mut Scene,
    stats: &mut GradStats,
    optimizer: &mut SceneOptimizer,
    cfg: &DensifyConfig,
    ctx: RoundContext,
    rng: &mut R,
) -> Result<DensifyReport> {
    let actions = classify(scene, stats, cfg)?;
    let n_before = scene.len();

    let mut kept = Vec::with_capacity(n_before);
    let mut sources = Vec::with_capacity(n_before);
    let mut clones = Vec::new();
    let mut children = Vec::new();
    for (i, (g, action)) in scene.gaussians.iter().zip(&actions).enumerate() {
        match action {
            Action::None => {
                kept.push(*g);
                sources.push(Some(i));
            }
            Action::Clone => {
                kept.push(*g);
                sources.push(Some(i));
                let mean = stats.mean_grad(i);
                let dir = [mean[0] * ctx.grad_to_pixels[0], mean[1] * ctx.grad_to_pixels[1]];
                clones.push(clone(g, dir, ctx.clone_step));
            }
            Action::Split => children.extend(split(g, cfg.split_factor, rng)),
        }
    }
    let n_clone = clones.len();
    let n_split = children.len() / 2;
    sources.extend(std::iter::repeat_n(None, clones.len() + children.len()));
    kept.extend(clones);
    kept.extend(children);
    let grow = IndexMap::new(n_before, sources)?;
    scene.gaussians = kept;

    let (removed, shrink) = prune(scene, cfg);
    let map = grow.then(&shrink)?;
    optimizer.resize_for_mutation(&map)?;
    stats.reset(scene.len());

    Ok(DensifyReport {
        iteration: ctx.iteration,
        n_split,
        n_clone,
        n_pruned: removed.len(),
        n_total_after: scene.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{AdamConfig, LearningRates};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reference_cfg(policy: Policy) -> DensifyConfig {
        DensifyConfig { policy, tau_p: 0.002, tau_s: 1.0, ..DensifyConfig::default() }
    }

    #[test]
    fn weight_examples() {
        let cfg = reference_cfg(Policy::Gdags);
        assert_eq!(weight(1.0, &cfg), 0.8);
        assert_eq!(weight(0.0, &cfg), 25.8);
        assert_eq!(weight(0.5, &cfg), 0.800762939453125);
    }

    #[test]
    fn metric_examples() {
        let (s, c) = decision_metrics(0.001, 0.8).unwrap();
        assert!((s - 0.0008).abs() < 1e-18 && (c - 0.00125).abs() < 1e-18);
        assert_eq!(decision_metrics(0.0, 3.0).unwrap(), (0.0, 0.0));
        let (s, c) = decision_metrics(0.001, 25.8).unwrap();
        assert!((s - 0.0258).abs() < 1e-15 && (c - 3.87597e-5).abs() < 1e-10);
        assert!(decision_metrics(1.0, 0.0).is_err());
        assert!(decision_metrics(1.0, -1.0).is_err());
    }

    fn ev(base: f64, gcr: f64, max_scale: f64) -> Evidence {
        Evidence { mean_grad_norm: base, abs_mean_grad_norm: base, gcr, max_scale }
    }

    #[test]
    fn classify_examples() {
        let cfg = reference_cfg(Policy::Gdags);
        assert_eq!(decide(&ev(0.001, 0.0, 2.0), &cfg), Action::Split);
        assert_eq!(decide(&ev(0.003, 1.0, 0.5), &cfg), Action::Clone);
        assert_eq!(decide(&ev(0.003, 0.0, 0.5), &cfg), Action::None);
        // baseline leaves the first one alone
        assert_eq!(decide(&ev(0.001, 0.0, 2.0), &reference_cfg(Policy::Baseline)), Action::None);
    }

    #[test]
    fn ablation_policies_weight_one_side() {
        let s = reference_cfg(Policy::GdagsSplit);
        assert_eq!(decide(&ev(0.001, 0.0, 2.0), &s), Action::Split);
        assert_eq!(decide(&ev(0.003, 0.0, 0.5), &s), Action::Clone);
        let c = reference_cfg(Policy::GdagsClone);
        assert_eq!(decide(&ev(0.001, 0.0, 2.0), &c), Action::None);
        assert_eq!(decide(&ev(0.003, 0.0, 0.5), &c), Action::None);
    }

    #[test]
    fn abs_policy_uses_norm_sum() {
        let cfg = reference_cfg(Policy::Abs);
        let e = Evidence { mean_grad_norm: 0.0, abs_mean_grad_norm: 0.01, gcr: 0.0, max_scale: 2.0 };
        assert_eq!(decide(&e, &cfg), Action::Split);
    }

    #[test]
    fn policy_names_roundtrip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert_eq!("GDAGS_S".parse::<Policy>().unwrap(), Policy::GdagsSplit);
        assert!("pixel-gs".parse::<Policy>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DensifyConfig::default().validate().is_ok());
        assert!(DensifyConfig { weight_alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(DensifyConfig { weight_p: 0.5, ..Default::default() }.validate().is_err());
        assert!(DensifyConfig { tau_p: 0.0, ..Default::default() }.validate().is_err());
        assert!(DensifyConfig { interval: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn split_children_shrink_and_inherit() {
        let parent = Gaussian2D { rotation: 0.4, logit_opacity: 1.3, ..Gaussian2D::isotropic([5.0, 6.0], 1.0, 0.5, [0.1, 0.2, 0.3], 0.77) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kids = split(&parent, 1.6, &mut rng);
        for k in &kids {
            assert!((k.log_scale[0] + 0.4700).abs() < 1e-4 && (k.log_scale[1] + 0.4700).abs() < 1e-4);
            assert_eq!((k.color, k.logit_opacity, k.rotation, k.depth), (parent.color, parent.logit_opacity, parent.rotation, parent.depth));
        }
        let again = split(&parent, 1.6, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(kids, again);
    }

    #[test]
    fn clone_examples() {
        let g = Gaussian2D::isotropic([5.0, 6.0], 2.0, 0.3, [0.1, 0.2, 0.3], 0.5);
        assert_eq!(clone(&g, [0.0, 0.0], 0.1), g);
        let c = clone(&g, [1.0, 0.0], 0.1);
        assert_eq!(c.mu, [4.9, 6.0]);
        assert_eq!(Gaussian2D { mu: g.mu, ..c }, g);
    }

    fn with_opacity(op: f64) -> Gaussian2D {
        Gaussian2D::isotropic([0.0, 0.0], 1.0, op, [op, 0.0, 0.0], 0.0)
    }

    #[test]
    fn prune_examples() {
        let cfg = DensifyConfig::default();
        let mut scene = Scene::new(vec![with_opacity(0.001)], [0.0; 3]);
        scene.gaussians.push(with_opacity(0.5));
        let (removed, _) = prune(&mut scene, &cfg);
        assert_eq!(removed, vec![0]);

        let mut scene = Scene::new(vec![with_opacity(0.3), with_opacity(0.6)], [0.0; 3]);
        let (removed, map) = prune(&mut scene, &cfg);
        assert!(removed.is_empty());
        assert_eq!(map, IndexMap::identity(2));

        let ops = [0.2, 0.001, 0.4, 0.002, 0.9];
        let mut scene = Scene::new(ops.iter().map(|&o| with_opacity(o)).collect(), [0.0; 3]);
        let (removed, map) = prune(&mut scene, &cfg);
        assert_eq!(removed, vec![1, 3]);
        assert_eq!(map.sources(), &[Some(0), Some(2), Some(4)]);
        let left: Vec<f64> = scene.gaussians.iter().map(|g| g.color[0]).collect();
        assert_eq!(left, vec![0.2, 0.4, 0.9]);
    }

    #[test]
    fn prune_never_empties() {
        let cfg = DensifyConfig::default();
        let mut scene = Scene::new(vec![with_opacity(0.001), with_opacity(0.003), with_opacity(0.002)], [0.0; 3]);
        let (removed, _) = prune(&mut scene, &cfg);
        assert_eq!(removed, vec![0, 2]);
        assert_eq!(scene.gaussians[0].color[0], 0.003);
    }

    #[test]
    fn prune_drops_oversized() {
        let cfg = DensifyConfig { max_scale_limit: 10.0, ..DensifyConfig::default() };
        let big = Gaussian2D::isotropic([0.0, 0.0], 11.0, 0.5, [0.0; 3], 0.0);
        let mut scene = Scene::new(vec![big, with_opacity(0.5)], [0.0; 3]);
        assert_eq!(prune(&mut scene, &cfg).0, vec![0]);
    }

    fn ctx() -> RoundContext {
        RoundContext { iteration: 100, clone_step: 0.01, grad_to_pixels: [1.0, 1.0] }
    }

    fn optimizer(n: usize) -> SceneOptimizer {
        SceneOptimizer::new(n, LearningRates::for_extent(32.0, 100), AdamConfig::default())
    }

    #[test]
    fn zero_gradient_round_only_prunes() {
        let mut scene = Scene::new(vec![with_opacity(0.5), with_opacity(0.001), with_opacity(0.7)], [0.0; 3]);
        let mut stats = GradStats::new(3);
        let mut opt = optimizer(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = densify_round(&mut scene, &mut stats, &mut opt, &reference_cfg(Policy::Gdags), ctx(), &mut rng).unwrap();
        assert_eq!((r.n_split, r.n_clone, r.n_pruned, r.n_total_after), (0, 0, 1, 2));
        assert_eq!(opt.state.rows(), 2);
    }

    #[test]
    fn single_split_adds_one_net() {
        let big = Gaussian2D::isotropic([8.0, 8.0], 3.0, 0.5, [1.0; 3], 0.0);
        let mut scene = Scene::new(vec![with_opacity(0.5), big, with_opacity(0.6)], [0.0; 3]);
        let mut stats = GradStats::new(3);
        stats.accumulate(1, [0.01, 0.0]).unwrap();
        stats.end_step();
        let mut opt = optimizer(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = densify_round(&mut scene, &mut stats, &mut opt, &reference_cfg(Policy::Baseline), ctx(), &mut rng).unwrap();
        assert_eq!((r.n_split, r.n_clone, r.n_pruned, r.n_total_after), (1, 0, 0, 4));
        assert_eq!(stats.len(), 4);
        assert_eq!(opt.state.rows(), 4);
        // survivors first, then the two children
        assert_eq!(scene.gaussians[0].color, [0.5, 0.0, 0.0]);
        assert_eq!(scene.gaussians[1].color, [0.6, 0.0, 0.0]);
        assert_eq!(scene.gaussians[2].color, [1.0; 3]);
    }

    #[test]
    fn clone_moves_against_mean_gradient() {
        let small = Gaussian2D::isotropic([8.0, 8.0], 0.5, 0.5, [1.0; 3], 0.0);
        let mut scene = Scene::new(vec![small], [0.0; 3]);
        let mut stats = GradStats::new(1);
        stats.accumulate(0, [0.01, 0.0]).unwrap();
        stats.end_step();
        let mut opt = optimizer(1);
        let cfg = reference_cfg(Policy::Baseline);
        let r = densify_round(&mut scene, &mut stats, &mut opt, &cfg, ctx(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((r.n_clone, r.n_total_after), (1, 2));
        assert_eq!(scene.gaussians[0].mu, [8.0, 8.0]);
        assert_eq!(scene.gaussians[1].mu, [8.0 - 0.01 * 0.01, 8.0]);
    }
}
