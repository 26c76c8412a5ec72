//! Adam with per-group learning rates and an exponentially decaying position rate.

use crate::error::{Error, Result};
use crate::gaussian::Scene;
use crate::index_map::IndexMap;
use crate::raster::ParamGrads;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-15 }
    }
}

/// Log-linear interpolation from `init` to `end` over `max_steps`, then held at `end`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpDecay {
    pub init: f64,
    pub end: f64,
    pub max_steps: u64,
}

impl ExpDecay {
    pub fn at(&self, iteration: u64) -> f64 {
        if self.max_steps == 0 {
            return self.end;
        }
        let r = (iteration as f64 / self.max_steps as f64).clamp(0.0, 1.0);
        (self.init.ln() * (1.0 - r) + self.end.ln() * r).exp()
    }
}

/// Moments for a table of `rows x width` parameters sharing one step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    width: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(rows: usize, width: usize) -> Self {
        AdamState { width, m: vec![0.0; rows * width], v: vec![0.0; rows * width], t: 0 }
    }

    pub fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.m.len() / self.width
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, row: usize) -> (&[f64], &[f64]) {
        let r = row * self.width..(row + 1) * self.width;
        (&self.m[r.clone()], &self.v[r])
    }

    /// Zeroes the moments of one column across every row.
    pub fn zero_column(&mut self, col: usize) {
        for r in 0..self.rows() {
            self.m[r * self.width + col] = 0.0;
            self.v[r * self.width + col] = 0.0;
        }
    }

    /// One bias-corrected Adam update. `lrs` holds one rate per column.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lrs: &[f64], cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || lrs.len() != self.width {
            return Err(Error::ShapeMismatch(format!(
                "params {}, grads {}, rates {} against state {}x{}",
                params.len(),
                grads.len(),
                lrs.len(),
                self.rows(),
                self.width
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (k, ((p, &g), (m, v))) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .enumerate()
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lrs[k % self.width] * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        Ok(())
    }

    /// Survivors keep their moments, fresh rows start at zero.
    pub fn resize_for_mutation(&mut self, map: &IndexMap) -> Result<()> {
        if map.old_len() != self.rows() {
            return Err(Error::InvalidIndexMap(format!(
                "map built for {} rows, optimizer holds {}",
                map.old_len(),
                self.rows()
            )));
        }
        let w = self.width;
        let mut m = Vec::with_capacity(map.new_len() * w);
        let mut v = Vec::with_capacity(map.new_len() * w);
        for src in map.sources() {
            match src {
                Some(i) => {
                    m.extend_from_slice(&self.m[i * w..(i + 1) * w]);
                    v.extend_from_slice(&self.v[i * w..(i + 1) * w]);
                }
                None => {
                    m.extend(std::iter::repeat_n(0.0, w));
                    v.extend(std::iter::repeat_n(0.0, w));
                }
            }
        }
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub position: ExpDecay,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl LearningRates {
    /// Rates for an image whose longer side is `extent` pixels.
    pub fn for_extent(extent: f64, max_steps: u64) -> Self {
        LearningRates {
            position: ExpDecay { init: 1.6e-4 * extent, end: 1.6e-6 * extent, max_steps },
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 0.05,
            color: 2.5e-3,
        }
    }
}

/// Row layout of the per-Gaussian parameter vector.
pub const PARAMS_PER_GAUSSIAN: usize = 9;
pub const OPACITY_COLUMN: usize = 5;

/// Adam over every Gaussian parameter of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneOptimizer {
    pub state: AdamState,
    pub rates: LearningRates,
    pub adam: AdamConfig,
    params: Vec<f64>,
    flat_grads: Vec<f64>,
}

impl SceneOptimizer {
    pub fn new(len: usize, rates: LearningRates, adam: AdamConfig) -> Self {
        SceneOptimizer {
            state: AdamState::new(len, PARAMS_PER_GAUSSIAN),
            rates,
            adam,
            params: Vec::new(),
            flat_grads: Vec::new(),
        }
    }

    pub fn lr_pos(&self, iteration: u64) -> f64 {
        self.rates.position.at(iteration)
    }

    /// Updates every Gaussian; colors are projected back onto `[0, 1]`.
    pub fn step(&mut self, scene: &mut Scene, grads: &ParamGrads, iteration: u64) -> Result<()> {
        let n = scene.len();
        if grads.len() != n || self.state.rows() != n {
            return Err(Error::ShapeMismatch(format!(
                "scene has {n} gaussians, gradients {}, optimizer {}",
                grads.len(),
                self.state.rows()
            )));
        }
        self.params.clear();
        self.flat_grads.clear();
        for (i, g) in scene.gaussians.iter().enumerate() {
            self.params.extend_from_slice(&[
                g.mu[0],
                g.mu[1],
                g.log_scale[0],
                g.log_scale[1],
                g.rotation,
                g.logit_opacity,
                g.color[0],
                g.color[1],
                g.color[2],
            ]);
            self.flat_grads.extend_from_slice(&[
                grads.mu[i][0],
                grads.mu[i][1],
                grads.log_scale[i][0],
                grads.log_scale[i][1],
                grads.rotation[i],
                grads.logit_opacity[i],
                grads.color[i][0],
                grads.color[i][1],
                grads.color[i][2],
            ]);
        }
        let r = &self.rates;
        let lp = r.position.at(iteration);
        let lrs = [lp, lp, r.scale, r.scale, r.rotation, r.opacity, r.color, r.color, r.color];
        self.state.step(&mut self.params, &self.flat_grads, &lrs, &self.adam)?;
        for (g, p) in scene.gaussians.iter_mut().zip(self.params.chunks_exact(PARAMS_PER_GAUSSIAN)) {
            g.mu = [p[0], p[1]];
            g.log_scale = [p[2], p[3]];
            g.rotation = p[4];
            g.logit_opacity = p[5];
            g.color = [p[6].clamp(0.0, 1.0), p[7].clamp(0.0, 1.0), p[8].clamp(0.0, 1.0)];
        }
        Ok(())
    }

    pub fn resize_for_mutation(&mut self, map: &IndexMap) -> Result<()> {
        self.state.resize_for_mutation(map)
    }
}
