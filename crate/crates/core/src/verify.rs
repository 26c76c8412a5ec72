//! Self-checks runnable from the command line: analytic gradients against
//! central finite differences of the forward renderer, and the coherence
//! ratio of von Mises samples against the Bessel-function ratio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gaussian::{Gaussian2D, Scene};
use crate::image::Image;
use crate::raster::{self, LossKind, ParamGrads, RasterConfig};
use crate::vmf::{self, ConsistencyCheck};

/// Which scalar of a Gaussian a finite-difference probe perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Param {
    Mu(usize),
    LogScale(usize),
    Rotation,
    LogitOpacity,
    Color(usize),
}

impl Param {
    pub const ALL: [Param; 9] = [
        Param::Mu(0),
        Param::Mu(1),
        Param::LogScale(0),
        Param::LogScale(1),
        Param::Rotation,
        Param::LogitOpacity,
        Param::Color(0),
        Param::Color(1),
        Param::Color(2),
    ];

    fn slot(self, g: &mut Gaussian2D) -> &mut f64 {
        match self {
            Param::Mu(k) => &mut g.mu[k],
            Param::LogScale(k) => &mut g.log_scale[k],
            Param::Rotation => &mut g.rotation,
            Param::LogitOpacity => &mut g.logit_opacity,
            Param::Color(k) => &mut g.color[k],
        }
    }

    pub fn analytic(self, grads: &ParamGrads, i: usize) -> f64 {
        match self {
            Param::Mu(k) => grads.mu[i][k],
            Param::LogScale(k) => grads.log_scale[i][k],
            Param::Rotation => grads.rotation[i],
            Param::LogitOpacity => grads.logit_opacity[i],
            Param::Color(k) => grads.color[i][k],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdProbe {
    pub gaussian: usize,
    pub param: Param,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdProbe {
    /// `|analytic - numeric| / max(|numeric|, 1e-6)`.
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.numeric.abs().max(1e-6)
    }
}

fn loss_at(scene: &Scene, target: &Image, loss: LossKind, cfg: &RasterConfig) -> Result<f64> {
    let img = raster::render(scene, target.width(), target.height(), cfg);
    raster::loss_value(&img, target, loss)
}

/// Central differences `(L(x + h) - L(x - h)) / 2h` for every parameter of every Gaussian.
pub fn finite_difference_probes(
    scene: &Scene,
    target: &Image,
    loss: LossKind,
    cfg: &RasterConfig,
    h: f64,
) -> Result<Vec<FdProbe>> {
    let rendered = raster::render(scene, target.width(), target.height(), cfg);
    let grads = raster::render_backward(scene, &rendered, target, loss, cfg, None, false)?.grads;
    let mut probes = Vec::with_capacity(scene.len() * Param::ALL.len());
    for i in 0..scene.len() {
        for param in Param::ALL {
            let mut plus = scene.clone();
            *param.slot(&mut plus.gaussians[i]) += h;
            let mut minus = scene.clone();
            *param.slot(&mut minus.gaussians[i]) -= h;
            let numeric = (loss_at(&plus, target, loss, cfg)? - loss_at(&minus, target, loss, cfg)?) / (2.0 * h);
            probes.push(FdProbe { gaussian: i, param, analytic: param.analytic(&grads, i), numeric });
        }
    }
    Ok(probes)
}

/// A small random scene whose Gaussians sit inside a `size x size` image.
pub fn random_scene(rng: &mut impl Rng, n: usize, size: f64) -> Scene {
    let gaussians = (0..n)
        .map(|_| Gaussian2D {
            mu: [rng.random_range(0.15 * size..0.85 * size), rng.random_range(0.15 * size..0.85 * size)],
            log_scale: [rng.random_range(0.2..1.4), rng.random_range(0.2..1.4)],
            rotation: rng.random_range(-3.0..3.0),
            logit_opacity: rng.random_range(-2.0..2.0),
            color: [rng.random(), rng.random(), rng.random()],
            depth: rng.random(),
        })
        .collect();
    Scene::new(gaussians, [rng.random(), rng.random(), rng.random()])
}

pub fn random_target(rng: &mut impl Rng, size: usize) -> Image {
    Image::from_fn(size, size, |_, _| [rng.random(), rng.random(), rng.random()])
}

#[derive(Clone, Debug)]
pub struct GradientSuite {
    pub scenes: usize,
    pub probes: usize,
    pub worst_rel_error: f64,
    /// Largest relative gap between the summed subgradient stream and the total position gradient.
    pub worst_stream_gap: f64,
}

/// Finite-difference checks on `scenes` random scenes of up to five Gaussians
/// at 16x16, rendered without cutoffs so the loss is smooth in every parameter.
pub fn gradient_suite(scenes: usize, seed: u64) -> Result<GradientSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RasterConfig::exact();
    let mut suite = GradientSuite { scenes, probes: 0, worst_rel_error: 0.0, worst_stream_gap: 0.0 };
    for s in 0..scenes {
        let n = rng.random_range(1..=5);
        let scene = random_scene(&mut rng, n, 16.0);
        let target = random_target(&mut rng, 16);
        let loss = if s % 2 == 0 { LossKind::Mse } else { LossKind::L1 };
        for p in finite_difference_probes(&scene, &target, loss, &cfg, 1e-4)? {
            suite.probes += 1;
            suite.worst_rel_error = suite.worst_rel_error.max(p.rel_error());
        }
        suite.worst_stream_gap = suite.worst_stream_gap.max(stream_gap(&scene, &target, loss, &cfg)?);
    }
    Ok(suite)
}

/// Relative difference between the per-pixel subgradients summed per
/// Gaussian and the total position gradient.
pub fn stream_gap(scene: &Scene, target: &Image, loss: LossKind, cfg: &RasterConfig) -> Result<f64> {
    let rendered = raster::render(scene, target.width(), target.height(), cfg);
    let back = raster::render_backward(scene, &rendered, target, loss, cfg, None, true)?;
    let mut sums = vec![[0.0; 2]; scene.len()];
    for s in back.stream.iter().flatten() {
        sums[s.gaussian][0] += s.grad[0];
        sums[s.gaussian][1] += s.grad[1];
    }
    let mut worst: f64 = 0.0;
    for (i, sum) in sums.iter().enumerate() {
        for k in 0..2 {
            let total = back.grads.mu[i][k];
            worst = worst.max((sum[k] - total).abs() / total.abs().max(1e-12));
        }
    }
    Ok(worst)
}

pub const VMF_KAPPAS: [f64; 5] = [0.5, 1.0, 2.0, 5.0, 10.0];

pub fn vmf_table(kappas: &[f64], samples: usize, seed: u64) -> Result<Vec<ConsistencyCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kappas
        .iter()
        .map(|&k| vmf::check_consistency_relation(k, samples, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_differences_on_a_single_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scene = random_scene(&mut rng, 1, 8.0);
        let target = random_target(&mut rng, 8);
        for p in finite_difference_probes(&scene, &target, LossKind::Mse, &RasterConfig::exact(), 1e-4).unwrap() {
            assert!(p.rel_error() < 1e-3, "{p:?}");
        }
    }

    #[test]
    fn small_suite_passes() {
        let s = gradient_suite(3, 1).unwrap();
        assert!(s.worst_rel_error < 1e-3, "{s:?}");
        assert!(s.worst_stream_gap < 1e-6, "{s:?}");
    }
}
