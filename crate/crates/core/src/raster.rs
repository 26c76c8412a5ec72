//! Front-to-back alpha compositing of 2D Gaussians and its analytic backward pass.
//!
//! The image is cut into square tiles. Every Gaussian is binned into the tiles
//! its footprint box touches, in compositing order, so each tile carries a
//! depth-sorted candidate list. Forward and backward both walk the same lists
//! with the same cutoffs, so the gradients belong to the function that was
//! actually rendered.
//!
//! The reference path visits tiles sequentially and folds per-pixel positional
//! subgradients straight into [`GradStats`]. The parallel path processes tiles
//! on the rayon pool into per-tile partial sums and reduces them in tile order,
//! which keeps it deterministic run to run.

use rayon::prelude::*;

use crate::error::Result;
use crate::gaussian::{Rgb, Scene, Vec2};
use crate::image::Image;
use crate::stats::GradStats;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    L1,
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Mse => "mse",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "mse" | "l2" => Ok(LossKind::Mse),
            other => Err(format!("unknown loss kind {other:?} (expected l1 or mse)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterConfig {
    /// Densities below this are skipped at a pixel.
    pub contrib_cutoff: f64,
    /// Compositing at a pixel stops once transmittance drops below this.
    pub min_transmittance: f64,
    /// Half-width of the square footprint, in standard deviations of the major axis.
    pub footprint_sigmas: f64,
    pub tile_size: usize,
    pub parallel: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            contrib_cutoff: 1.0 / 255.0,
            min_transmittance: 1e-4,
            footprint_sigmas: 3.0,
            tile_size: 16,
            parallel: false,
        }
    }
}

impl RasterConfig {
    /// No cutoffs and unbounded footprints: the rendered image is a smooth
    /// function of every parameter.
    pub fn exact() -> Self {
        RasterConfig {
            contrib_cutoff: 0.0,
            min_transmittance: 0.0,
            footprint_sigmas: f64::INFINITY,
            ..RasterConfig::default()
        }
    }

    pub fn with_parallel(self, parallel: bool) -> Self {
        RasterConfig { parallel, ..self }
    }
}

/// One Gaussian's participation in one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelContribution {
    pub gaussian_index: usize,
    pub pixel: [usize; 2],
    /// Opacity times density.
    pub alpha: f64,
    /// Transmittance in front of this Gaussian.
    pub transmittance: f64,
}

/// Analytic loss gradients, one entry per Gaussian in scene order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub mu: Vec<Vec2>,
    pub log_scale: Vec<Vec2>,
    pub rotation: Vec<f64>,
    pub logit_opacity: Vec<f64>,
    pub color: Vec<Rgb>,
}

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        ParamGrads {
            mu: vec![[0.0; 2]; n],
            log_scale: vec![[0.0; 2]; n],
            rotation: vec![0.0; n],
            logit_opacity: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    fn add(&mut self, i: usize, g: &LocalGrad) {
        self.mu[i][0] += g.mu[0];
        self.mu[i][1] += g.mu[1];
        self.log_scale[i][0] += g.log_scale[0];
        self.log_scale[i][1] += g.log_scale[1];
        self.rotation[i] += g.rotation;
        self.logit_opacity[i] += g.logit_opacity;
        for c in 0..3 {
            self.color[i][c] += g.color[c];
        }
    }
}

/// A positional subgradient of one Gaussian restricted to one pixel, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Subgradient {
    pub gaussian: usize,
    pub pixel: [usize; 2],
    pub grad: Vec2,
}

/// Destination for per-pixel positional subgradients during the backward sweep.
pub struct StatsFold<'a> {
    pub stats: &'a mut GradStats,
    /// Per-axis factor applied before accumulation (e.g. pixel to normalized device units).
    pub scale: Vec2,
}

#[derive(Clone, Debug)]
pub struct Backward {
    pub loss: f64,
    pub grads: ParamGrads,
    /// Every emitted subgradient, in fold order. Only filled when requested.
    pub stream: Option<Vec<Subgradient>>,
}

#[derive(Clone, Copy, Debug)]
struct Prepared {
    mu: Vec2,
    sin: f64,
    cos: f64,
    inv_var: Vec2,
    opacity: f64,
    color: Rgb,
    // q(dx + 1) - q(dx) = qxx * (2 dx + 1) + 2 qxy * dy
    qxx: f64,
    qxy: f64,
    // exp(-qxx), the per-pixel change of the density ratio along a row
    row_decay: f64,
    // pixel index bounds, half-open
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

impl Prepared {
    /// Mahalanobis form at a pixel center and the offset in the principal-axis frame.
    #[inline]
    fn quad(&self, px: Vec2) -> (f64, Vec2) {
        let d = [px[0] - self.mu[0], px[1] - self.mu[1]];
        let u = [self.cos * d[0] + self.sin * d[1], -self.sin * d[0] + self.cos * d[1]];
        (self.inv_var[0] * u[0] * u[0] + self.inv_var[1] * u[1] * u[1], u)
    }
}

struct Layout {
    width: usize,
    height: usize,
    tile: usize,
    tiles_x: usize,
    tiles_y: usize,
    prepared: Vec<Prepared>,
    /// Per tile: Gaussian indices in compositing order.
    bins: Vec<Vec<u32>>,
    q_max: f64,
}

impl Layout {
    fn build(scene: &Scene, width: usize, height: usize, cfg: &RasterConfig) -> Self {
        let tile = cfg.tile_size.max(1);
        let tiles_x = width.div_ceil(tile);
        let tiles_y = height.div_ceil(tile);
        let prepared: Vec<Prepared> = scene
            .gaussians
            .iter()
            .map(|g| {
                let (sin, cos) = g.rotation.sin_cos();
                let inv_var = [(-2.0 * g.log_scale[0]).exp(), (-2.0 * g.log_scale[1]).exp()];
                let (lambda_max, _) = g.covariance().eigenvalues();
                let radius = cfg.footprint_sigmas * lambda_max.max(0.0).sqrt();
                let (x0, x1) = pixel_span(g.mu[0], radius, width);
                let (y0, y1) = pixel_span(g.mu[1], radius, height);
                let qxx = inv_var[0] * cos * cos + inv_var[1] * sin * sin;
                let qxy = (inv_var[0] - inv_var[1]) * cos * sin;
                Prepared {
                    mu: g.mu,
                    sin,
                    cos,
                    inv_var,
                    opacity: g.opacity(),
                    color: g.color,
                    qxx,
                    qxy,
                    row_decay: (-qxx).exp(),
                    x0,
                    x1,
                    y0,
                    y1,
                }
            })
            .collect();

        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        for idx in scene.compositing_order() {
            let p = &prepared[idx];
            if p.x0 >= p.x1 || p.y0 >= p.y1 {
                continue;
            }
            for ty in p.y0 / tile..=(p.y1 - 1) / tile {
                for tx in p.x0 / tile..=(p.x1 - 1) / tile {
                    bins[ty * tiles_x + tx].push(idx as u32);
                }
            }
        }
        let q_max = if cfg.contrib_cutoff > 0.0 { -2.0 * cfg.contrib_cutoff.ln() + 1e-9 } else { f64::INFINITY };
        Layout { width, height, tile, tiles_x, tiles_y, prepared, bins, q_max }
    }

    fn tile_rect(&self, t: usize) -> TileRect {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        TileRect { x0, x1: (x0 + self.tile).min(self.width), y0, y1: (y0 + self.tile).min(self.height) }
    }

    /// The tile's Gaussians copied out in compositing order.
    fn tile_gaussians(&self, t: usize) -> Vec<Prepared> {
        self.bins[t].iter().map(|&i| self.prepared[i as usize]).collect()
    }

    fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }
}

/// Half-open range of pixel indices whose centers lie within `radius` of `center`.
fn pixel_span(center: f64, radius: f64, len: usize) -> (usize, usize) {
    if !radius.is_finite() {
        return (0, len);
    }
    let lo = (center - radius - 0.5).ceil();
    let hi = (center + radius - 0.5).floor() + 1.0;
    let lo = lo.clamp(0.0, len as f64) as usize;
    let hi = hi.clamp(0.0, len as f64) as usize;
    (lo, hi.max(lo))
}

/// Pixel rectangle of one tile, half-open.
#[derive(Clone, Copy)]
struct TileRect {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

impl TileRect {
    fn width(&self) -> usize {
        self.x1 - self.x0
    }

    fn len(&self) -> usize {
        self.width() * (self.y1 - self.y0)
    }

    fn pixel(&self, k: usize) -> (usize, usize) {
        (self.x0 + k % self.width(), self.y0 + k / self.width())
    }
}

#[derive(Clone, Copy)]
struct Hit {
    /// position in the tile bin
    slot: u32,
    /// pixel index within the tile
    pixel: u32,
    alpha: f64,
    transmittance: f64,
    u: Vec2,
}

struct TileShade {
    colors: Vec<Rgb>,
    transmittance: Vec<f64>,
}

/// Composites one tile, Gaussian by Gaussian in front-to-back order. Every
/// pixel sees exactly the sequence of terms a per-pixel loop would produce.
/// Hits are appended in bin order, so per pixel they run front to back.
fn shade_tile(
    local: &[Prepared],
    rect: TileRect,
    q_max: f64,
    background: Rgb,
    cfg: &RasterConfig,
    mut hits: Option<&mut Vec<Hit>>,
) -> TileShade {
    let n = rect.len();
    let w = rect.width();
    let mut colors = vec![[0.0; 3]; n];
    let mut transmittance = vec![1.0; n];
    for (slot, p) in local.iter().enumerate() {
        let (xs, xe) = (p.x0.max(rect.x0), p.x1.min(rect.x1));
        let (ys, ye) = (p.y0.max(rect.y0), p.y1.min(rect.y1));
        for y in ys..ye {
            let row = (y - rect.y0) * w;
            let py = y as f64 + 0.5;
            // density at the next pixel and the ratio after it, while inside the cutoff ellipse
            let mut run: Option<(f64, f64)> = None;
            for x in xs..xe {
                let px = x as f64 + 0.5;
                let (q, u) = p.quad([px, py]);
                // exp(-q/2) < cutoff, without the exp for far pixels
                if q > q_max {
                    run = None;
                    continue;
                }
                let density = match run {
                    Some((g, r)) => {
                        run = Some((g * r, r * p.row_decay));
                        g
                    }
                    None => {
                        let g = (-0.5 * q).exp();
                        let dq = p.qxx * (2.0 * (px - p.mu[0]) + 1.0) + 2.0 * p.qxy * (py - p.mu[1]);
                        let r = (-0.5 * dq).exp();
                        run = Some((g * r, r * p.row_decay));
                        g
                    }
                };
                let k = row + x - rect.x0;
                let t = transmittance[k];
                // terminated pixels take no further terms
                if t < cfg.min_transmittance {
                    continue;
                }
                if density < cfg.contrib_cutoff {
                    continue;
                }
                let alpha = p.opacity * density;
                let wt = alpha * t;
                let c = &mut colors[k];
                c[0] += p.color[0] * wt;
                c[1] += p.color[1] * wt;
                c[2] += p.color[2] * wt;
                if let Some(h) = hits.as_deref_mut() {
                    h.push(Hit { slot: slot as u32, pixel: k as u32, alpha, transmittance: t, u });
                }
                transmittance[k] = t * (1.0 - alpha);
            }
        }
    }
    for (c, &t) in colors.iter_mut().zip(&transmittance) {
        for ch in 0..3 {
            c[ch] += t * background[ch];
        }
    }
    TileShade { colors, transmittance }
}

pub fn render(scene: &Scene, width: usize, height: usize, cfg: &RasterConfig) -> Image {
    let layout = Layout::build(scene, width, height, cfg);
    let shade = |t: usize| {
        shade_tile(&layout.tile_gaussians(t), layout.tile_rect(t), layout.q_max, scene.background, cfg, None).colors
    };
    let tiles: Vec<Vec<Rgb>> = if cfg.parallel {
        (0..layout.tile_count()).into_par_iter().map(shade).collect()
    } else {
        (0..layout.tile_count()).map(shade).collect()
    };
    let mut image = Image::new(width, height);
    for (t, colors) in tiles.into_iter().enumerate() {
        let rect = layout.tile_rect(t);
        for (k, rgb) in colors.into_iter().enumerate() {
            let (x, y) = rect.pixel(k);
            image.set(x, y, rgb);
        }
    }
    image
}

/// Per-pixel compositing record, for inspection and tests.
pub fn pixel_contributions(
    scene: &Scene,
    width: usize,
    height: usize,
    x: usize,
    y: usize,
    cfg: &RasterConfig,
) -> (Vec<PixelContribution>, f64) {
    let layout = Layout::build(scene, width, height, cfg);
    let t = (y / layout.tile) * layout.tiles_x + x / layout.tile;
    let rect = layout.tile_rect(t);
    let k = (y - rect.y0) * rect.width() + (x - rect.x0);
    let mut hits = Vec::new();
    let shade = shade_tile(&layout.tile_gaussians(t), rect, layout.q_max, scene.background, cfg, Some(&mut hits));
    let contributions = hits
        .iter()
        .filter(|h| h.pixel as usize == k)
        .map(|h| PixelContribution {
            gaussian_index: layout.bins[t][h.slot as usize] as usize,
            pixel: [x, y],
            alpha: h.alpha,
            transmittance: h.transmittance,
        })
        .collect();
    (contributions, shade.transmittance[k])
}

pub fn loss_value(rendered: &Image, target: &Image, kind: LossKind) -> Result<f64> {
    rendered.same_dims(target)?;
    let n = rendered.data().len() as f64;
    let it = rendered.data().iter().zip(target.data());
    let sum: f64 = match kind {
        LossKind::L1 => it.map(|(a, b)| (a - b).abs()).sum(),
        LossKind::Mse => it.map(|(a, b)| (a - b) * (a - b)).sum(),
    };
    Ok(sum / n)
}

#[inline]
fn loss_grad(c: f64, t: f64, kind: LossKind, inv_n: f64) -> f64 {
    let r = c - t;
    match kind {
        LossKind::L1 => {
            if r > 0.0 {
                inv_n
            } else if r < 0.0 {
                -inv_n
            } else {
                0.0
            }
        }
        LossKind::Mse => 2.0 * r * inv_n,
    }
}

#[derive(Clone, Copy, Default)]
struct LocalGrad {
    mu: Vec2,
    log_scale: Vec2,
    rotation: f64,
    logit_opacity: f64,
    color: Rgb,
}

/// Per-tile partial sums for the parallel path, one per bin slot.
#[derive(Clone, Copy, Default)]
struct SlotAcc {
    grad: LocalGrad,
    sub_vec: Vec2,
    sub_norm: f64,
    touched: bool,
}

impl SlotAcc {
    #[inline]
    fn add<const STATS: bool>(&mut self, g: &LocalGrad, scale: Vec2) {
        let acc = &mut self.grad;
        acc.mu[0] += g.mu[0];
        acc.mu[1] += g.mu[1];
        acc.log_scale[0] += g.log_scale[0];
        acc.log_scale[1] += g.log_scale[1];
        acc.rotation += g.rotation;
        acc.logit_opacity += g.logit_opacity;
        for c in 0..3 {
            acc.color[c] += g.color[c];
        }
        if STATS {
            let s = [g.mu[0] * scale[0], g.mu[1] * scale[1]];
            self.sub_vec[0] += s[0];
            self.sub_vec[1] += s[1];
            self.sub_norm += (s[0] * s[0] + s[1] * s[1]).sqrt();
        }
        self.touched = true;
    }
}

/// Backward sweep over one tile. Walks the hits in reverse, so each pixel is
/// visited back to front, and calls `emit(slot, pixel, grad)` with that
/// Gaussian's parameter gradient at that pixel.
#[inline]
fn backward_tile(
    local: &[Prepared],
    hits: &[Hit],
    dl_dc: &[Rgb],
    background: Rgb,
    mut emit: impl FnMut(usize, usize, &LocalGrad),
) {
    // per pixel: color of everything behind the current hit, normalized by the transmittance behind it
    let mut behind = vec![background; dl_dc.len()];
    for h in hits.iter().rev() {
        let slot = h.slot as usize;
        let k = h.pixel as usize;
        let p = &local[slot];
        let dl = dl_dc[k];
        let b = &mut behind[k];
        let w = h.alpha * h.transmittance;
        let mut g = LocalGrad::default();
        let mut dl_dalpha = 0.0;
        for c in 0..3 {
            g.color[c] = dl[c] * w;
            dl_dalpha += dl[c] * h.transmittance * (p.color[c] - b[c]);
            b[c] = p.color[c] * h.alpha + (1.0 - h.alpha) * b[c];
        }
        g.logit_opacity = dl_dalpha * h.alpha * (1.0 - p.opacity);
        // alpha = opacity * exp(-q/2)
        let dl_dq = -0.5 * dl_dalpha * h.alpha;
        let dq_du0 = 2.0 * p.inv_var[0] * h.u[0];
        let dq_du1 = 2.0 * p.inv_var[1] * h.u[1];
        g.mu = [
            -dl_dq * (dq_du0 * p.cos - dq_du1 * p.sin),
            -dl_dq * (dq_du0 * p.sin + dq_du1 * p.cos),
        ];
        g.log_scale = [
            dl_dq * -2.0 * p.inv_var[0] * h.u[0] * h.u[0],
            dl_dq * -2.0 * p.inv_var[1] * h.u[1] * h.u[1],
        ];
        g.rotation = dl_dq * 2.0 * h.u[0] * h.u[1] * (p.inv_var[0] - p.inv_var[1]);
        emit(slot, k, &g);
    }
}

/// Gradients of the scalar loss with respect to every Gaussian parameter.
///
/// `rendered` must come from [`render`] on this scene with the same config.
/// When `fold` is given, every per-pixel positional subgradient (scaled by
/// `fold.scale`) is accumulated into the stats and the step is closed.
/// `materialize` records the subgradient stream and forces the sequential path.
pub fn render_backward(
    scene: &Scene,
    rendered: &Image,
    target: &Image,
    loss: LossKind,
    cfg: &RasterConfig,
    fold: Option<StatsFold<'_>>,
    materialize: bool,
) -> Result<Backward> {
    rendered.same_dims(target)?;
    let (_, back) = sweep(scene, Some(rendered), target, loss, cfg, fold, materialize);
    Ok(back)
}

/// Forward render and backward pass in one sweep, compositing each pixel once.
pub fn render_and_backward(
    scene: &Scene,
    target: &Image,
    loss: LossKind,
    cfg: &RasterConfig,
    fold: Option<StatsFold<'_>>,
) -> (Image, Backward) {
    sweep(scene, None, target, loss, cfg, fold, false)
}

/// Per-slot sums of one tile's backward pass. A slot's hits are contiguous,
/// so each block is summed in a local before it is stored.
fn backward_partials<const STATS: bool>(
    local: &[Prepared],
    hits: &[Hit],
    dl_dc: &[Rgb],
    background: Rgb,
    scale: Vec2,
) -> Vec<SlotAcc> {
    let mut part = vec![SlotAcc::default(); local.len()];
    let mut current: Option<(usize, SlotAcc)> = None;
    backward_tile(local, hits, dl_dc, background, |slot, _, g| match &mut current {
        Some((s, acc)) if *s == slot => acc.add::<STATS>(g, scale),
        _ => {
            if let Some((s, acc)) = current.take() {
                part[s] = acc;
            }
            let mut acc = SlotAcc::default();
            acc.add::<STATS>(g, scale);
            current = Some((slot, acc));
        }
    });
    if let Some((s, acc)) = current {
        part[s] = acc;
    }
    part
}

fn sweep(
    scene: &Scene,
    rendered: Option<&Image>,
    target: &Image,
    loss: LossKind,
    cfg: &RasterConfig,
    fold: Option<StatsFold<'_>>,
    materialize: bool,
) -> (Image, Backward) {
    let (width, height) = (target.width(), target.height());
    let layout = Layout::build(scene, width, height, cfg);
    let inv_n = 1.0 / (width * height * 3) as f64;
    let mut grads = ParamGrads::zeros(scene.len());
    let mut stream = materialize.then(Vec::new);
    let mut image = Image::new(width, height);

    // forward one tile and derive the per-pixel color gradients
    let forward = |t: usize, hits: &mut Vec<Hit>| -> (Vec<Prepared>, TileRect, Vec<Rgb>, Vec<Rgb>) {
        let local = layout.tile_gaussians(t);
        let rect = layout.tile_rect(t);
        hits.clear();
        let shade = shade_tile(&local, rect, layout.q_max, scene.background, cfg, Some(hits));
        let dl_dc = (0..rect.len())
            .map(|k| {
                let (x, y) = rect.pixel(k);
                let c = rendered.map_or(shade.colors[k], |r| r.get(x, y));
                let t = target.get(x, y);
                [loss_grad(c[0], t[0], loss, inv_n), loss_grad(c[1], t[1], loss, inv_n), loss_grad(c[2], t[2], loss, inv_n)]
            })
            .collect();
        (local, rect, shade.colors, dl_dc)
    };
    let mut fold = fold;

    if cfg.parallel && stream.is_none() {
        let scale = fold.as_ref().map(|f| f.scale).unwrap_or([1.0, 1.0]);
        let with_stats = fold.is_some();
        let partials: Vec<(Vec<SlotAcc>, Vec<Rgb>)> = (0..layout.tile_count())
            .into_par_iter()
            .map_init(Vec::new, |hits, t| {
                let (local, _, colors, dl_dc) = forward(t, hits);
                let part = if with_stats {
                    backward_partials::<true>(&local, hits, &dl_dc, scene.background, scale)
                } else {
                    backward_partials::<false>(&local, hits, &dl_dc, scene.background, scale)
                };
                (part, colors)
            })
            .collect();
        for (t, (part, colors)) in partials.iter().enumerate() {
            let rect = layout.tile_rect(t);
            for (k, &rgb) in colors.iter().enumerate() {
                let (x, y) = rect.pixel(k);
                image.set(x, y, rgb);
            }
            for (acc, &idx) in part.iter().zip(&layout.bins[t]) {
                if !acc.touched {
                    continue;
                }
                let i = idx as usize;
                grads.add(i, &acc.grad);
                if let Some(f) = fold.as_mut() {
                    f.stats.accumulate_partial(i, acc.sub_vec, acc.sub_norm);
                }
            }
        }
    } else {
        let mut hits = Vec::new();
        for t in 0..layout.tile_count() {
            let (local, rect, colors, dl_dc) = forward(t, &mut hits);
            for (k, &rgb) in colors.iter().enumerate() {
                let (x, y) = rect.pixel(k);
                image.set(x, y, rgb);
            }
            let bin = &layout.bins[t];
            backward_tile(&local, &hits, &dl_dc, scene.background, |slot, k, g| {
                let i = bin[slot] as usize;
                grads.add(i, g);
                if let Some(f) = fold.as_mut() {
                    let s = [g.mu[0] * f.scale[0], g.mu[1] * f.scale[1]];
                    f.stats.accumulate_partial(i, s, (s[0] * s[0] + s[1] * s[1]).sqrt());
                }
                if let Some(st) = stream.as_mut() {
                    let (x, y) = rect.pixel(k);
                    st.push(Subgradient { gaussian: i, pixel: [x, y], grad: g.mu });
                }
            });
        }
    }
    if let Some(f) = fold {
        f.stats.end_step();
    }

    let loss_value = loss_value(rendered.unwrap_or(&image), target, loss).unwrap_or(f64::NAN);
    (image, Backward { loss: loss_value, grads, stream })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{eval_gaussian, logit, Gaussian2D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, size: f64) -> Scene {
        let gaussians = (0..n)
            .map(|_| Gaussian2D {
                mu: [rng.random_range(0.0..size), rng.random_range(0.0..size)],
                log_scale: [rng.random_range(0.3..1.5), rng.random_range(0.3..1.5)],
                rotation: rng.random_range(-3.0..3.0),
                logit_opacity: rng.random_range(-1.5..1.5),
                color: [rng.random(), rng.random(), rng.random()],
                depth: rng.random(),
            })
            .collect();
        Scene::new(gaussians, [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn empty_pixel_is_background() {
        let g = Gaussian2D::isotropic([2.0, 2.0], 0.5, 0.9, [1.0, 0.0, 0.0], 0.0);
        let scene = Scene::new(vec![g], [0.2, 0.3, 0.4]);
        let img = render(&scene, 32, 32, &RasterConfig::default());
        assert_eq!(img.get(30, 30), [0.2, 0.3, 0.4]);
    }

    #[test]
    fn single_gaussian_at_center() {
        let g = Gaussian2D { logit_opacity: 12.0, ..Gaussian2D::isotropic([4.5, 4.5], 1.0, 0.5, [1.0, 0.0, 0.0], 0.0) };
        let scene = Scene::new(vec![g], [0.0; 3]);
        let img = render(&scene, 9, 9, &RasterConfig::default());
        let a = crate::gaussian::sigmoid(12.0);
        let c = img.get(4, 4);
        assert!((c[0] - a).abs() < 1e-12 && c[1] == 0.0 && c[2] == 0.0, "{c:?}");
    }

    #[test]
    fn two_half_alphas() {
        // two Gaussians centered on the pixel with opacity 0.5 each
        let c1 = [1.0, 0.0, 0.0];
        let c2 = [0.0, 1.0, 0.0];
        let bg = [0.0, 0.0, 1.0];
        let g1 = Gaussian2D::isotropic([0.5, 0.5], 1.0, 0.5, c1, 0.1);
        let g2 = Gaussian2D::isotropic([0.5, 0.5], 1.0, 0.5, c2, 0.2);
        // list order reversed, depth decides
        let scene = Scene::new(vec![g2, g1], bg);
        let px = render(&scene, 1, 1, &RasterConfig::default()).get(0, 0);
        let want = [0.5 * c1[0] + 0.25 * c2[0] + 0.25 * bg[0], 0.5 * c1[1] + 0.25 * c2[1] + 0.25 * bg[1], 0.5 * c1[2] + 0.25 * c2[2] + 0.25 * bg[2]];
        for c in 0..3 {
            assert!((px[c] - want[c]).abs() < 1e-15, "{px:?} vs {want:?}");
        }
    }

    #[test]
    fn alpha_uses_eval_gaussian() {
        let g = Gaussian2D { rotation: 0.7, log_scale: [1.1, 0.2], ..Gaussian2D::isotropic([3.2, 4.1], 1.0, 0.7, [1.0; 3], 0.0) };
        let scene = Scene::new(vec![g], [0.0; 3]);
        let (hits, _) = pixel_contributions(&scene, 8, 8, 5, 3, &RasterConfig::default());
        assert_eq!(hits.len(), 1);
        let expected = g.opacity() * eval_gaussian(&g, [5.5, 3.5]);
        assert!((hits[0].alpha - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn footprint_excludes_far_pixels() {
        let g = Gaussian2D::isotropic([8.0, 8.0], 1.0, 0.9, [1.0; 3], 0.0);
        let scene = Scene::new(vec![g], [0.0; 3]);
        // 3 sigma box around 8.0: centers in [5, 11]
        let (hits, _) = pixel_contributions(&scene, 16, 16, 11, 8, &RasterConfig::default());
        assert!(hits.is_empty());
        let (hits, _) = pixel_contributions(&scene, 16, 16, 10, 8, &RasterConfig::default());
        assert_eq!(hits.len(), 1);
    }

    #[test]
    fn offscreen_gaussian_is_culled() {
        let g = Gaussian2D::isotropic([-40.0, 8.0], 1.0, 0.9, [1.0; 3], 0.0);
        let scene = Scene::new(vec![g], [0.0; 3]);
        let img = render(&scene, 16, 16, &RasterConfig::default());
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn early_termination_respects_floor() {
        let layers: Vec<_> = (0..40)
            .map(|k| Gaussian2D { logit_opacity: logit(0.5), ..Gaussian2D::isotropic([0.5, 0.5], 2.0, 0.5, [1.0; 3], k as f64) })
            .collect();
        let scene = Scene::new(layers, [0.0; 3]);
        let (hits, t_final) = pixel_contributions(&scene, 1, 1, 0, 0, &RasterConfig::default());
        // density at distance 0 is 1, so T halves per layer: 2^-14 < 1e-4 <= 2^-13
        assert_eq!(hits.len(), 14);
        assert!(t_final < 1e-4);
        assert!(hits.last().unwrap().transmittance >= 1e-4);
    }

    #[test]
    fn compositing_identity_and_monotone_transmittance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let scene = random_scene(&mut rng, 12, 16.0);
            for y in 0..16 {
                for x in 0..16 {
                    let (hits, t_final) = pixel_contributions(&scene, 16, 16, x, y, &RasterConfig::default());
                    let total: f64 = hits.iter().map(|h| h.alpha * h.transmittance).sum::<f64>() + t_final;
                    assert!((total - 1.0).abs() < 1e-6);
                    assert!(hits.windows(2).all(|w| w[1].transmittance <= w[0].transmittance));
                }
            }
        }
    }

    #[test]
    fn zero_l1_residual_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = random_scene(&mut rng, 4, 16.0);
        let cfg = RasterConfig::default();
        let img = render(&scene, 16, 16, &cfg);
        let back = render_backward(&scene, &img, &img, LossKind::L1, &cfg, None, false).unwrap();
        assert_eq!(back.loss, 0.0);
        assert_eq!(back.grads, ParamGrads::zeros(4));
    }

    #[test]
    fn single_pixel_color_gradient_mse() {
        let g = Gaussian2D::isotropic([0.7, 0.4], 1.0, 0.6, [0.3, 0.5, 0.9], 0.0);
        let scene = Scene::new(vec![g], [0.1, 0.1, 0.1]);
        let cfg = RasterConfig::default();
        let img = render(&scene, 1, 1, &cfg);
        let target = Image::filled(1, 1, [0.2, 0.8, 0.0]);
        let back = render_backward(&scene, &img, &target, LossKind::Mse, &cfg, None, false).unwrap();
        let a = g.opacity() * eval_gaussian(&g, [0.5, 0.5]);
        let c = img.get(0, 0);
        let want = 2.0 * (c[0] - 0.2) * a * 1.0 / 3.0;
        assert!((back.grads.color[0][0] - want).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let scene = Scene::new(vec![Gaussian2D::isotropic([1.0, 1.0], 1.0, 0.5, [1.0; 3], 0.0)], [0.0; 3]);
        let cfg = RasterConfig::default();
        let img = render(&scene, 4, 4, &cfg);
        let other = Image::new(4, 5);
        assert!(render_backward(&scene, &img, &other, LossKind::L1, &cfg, None, false).is_err());
    }

    #[test]
    fn parallel_render_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = random_scene(&mut rng, 60, 48.0);
        let seq = render(&scene, 48, 40, &RasterConfig::default());
        let par = render(&scene, 48, 40, &RasterConfig::default().with_parallel(true));
        assert_eq!(seq, par);
    }

    #[test]
    fn parallel_backward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scene = random_scene(&mut rng, 60, 48.0);
        let target = Image::from_fn(48, 40, |x, y| [(x % 7) as f64 / 7.0, (y % 5) as f64 / 5.0, 0.5]);
        let cfg = RasterConfig::default();
        let img = render(&scene, 48, 40, &cfg);
        let mut s_seq = GradStats::new(60);
        let mut s_par = GradStats::new(60);
        let seq = render_backward(&scene, &img, &target, LossKind::L1, &cfg, Some(StatsFold { stats: &mut s_seq, scale: [24.0, 20.0] }), false).unwrap();
        let par = render_backward(&scene, &img, &target, LossKind::L1, &cfg.with_parallel(true), Some(StatsFold { stats: &mut s_par, scale: [24.0, 20.0] }), false).unwrap();
        for i in 0..60 {
            for k in 0..2 {
                assert!((seq.grads.mu[i][k] - par.grads.mu[i][k]).abs() < 1e-6);
                assert!((seq.grads.log_scale[i][k] - par.grads.log_scale[i][k]).abs() < 1e-6);
                assert!((s_seq.vec_sum(i)[k] - s_par.vec_sum(i)[k]).abs() < 1e-6);
            }
            assert!((seq.grads.rotation[i] - par.grads.rotation[i]).abs() < 1e-6);
            assert!((seq.grads.logit_opacity[i] - par.grads.logit_opacity[i]).abs() < 1e-6);
            assert!((s_seq.norm_sum(i) - s_par.norm_sum(i)).abs() < 1e-6);
            assert!((s_seq.grad_norm_sum(i) - s_par.grad_norm_sum(i)).abs() < 1e-6);
            assert_eq!(s_seq.visible_count(i), s_par.visible_count(i));
        }
    }

    #[test]
    fn fold_equals_materialized_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let scene = random_scene(&mut rng, 20, 32.0);
        let target = Image::filled(32, 32, [0.5, 0.2, 0.7]);
        let cfg = RasterConfig::default();
        let img = render(&scene, 32, 32, &cfg);
        let scale = [16.0, 16.0];
        let mut folded = GradStats::new(20);
        let back = render_backward(&scene, &img, &target, LossKind::L1, &cfg, Some(StatsFold { stats: &mut folded, scale }), true).unwrap();
        let mut replayed = GradStats::new(20);
        for s in back.stream.as_ref().unwrap() {
            replayed.accumulate(s.gaussian, [s.grad[0] * scale[0], s.grad[1] * scale[1]]).unwrap();
        }
        replayed.end_step();
        for i in 0..20 {
            assert_eq!(folded.vec_sum(i), replayed.vec_sum(i));
            assert_eq!(folded.norm_sum(i), replayed.norm_sum(i));
            assert_eq!(folded.grad_norm_sum(i), replayed.grad_norm_sum(i));
            assert_eq!(folded.visible_count(i), replayed.visible_count(i));
        }
    }
}
