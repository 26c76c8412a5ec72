//! Per-Gaussian positional gradient statistics between densification rounds.
//!
//! Two families of sums are kept for every Gaussian:
//!
//! * per-pixel sums, `vec_sum` (the vector sum of every per-pixel positional
//!   subgradient) and `norm_sum` (the sum of their Euclidean norms). Their
//!   ratio is the gradient coherence ratio.
//! * per-step sums, `grad_norm_sum` (norm of the pixel-summed gradient, summed
//!   over steps) and `visible_count` (number of steps the Gaussian touched at
//!   least one pixel). Their ratio is the mean view-space gradient norm used
//!   by classic density control.
//!
//! A step is opened implicitly by the first `accumulate` and closed by
//! [`GradStats::end_step`].

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gaussian::Vec2;
use crate::index_map::IndexMap;

pub const GCR_EPSILON: f64 = 1e-8;

/// How the coherence ratio is aggregated over the accumulation window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GcrMode {
    /// One ratio over every pixel of every step since the last reset.
    #[default]
    Global,
    /// Ratio per step, averaged over the steps where the Gaussian was visible.
    PerViewMean,
}

#[derive(Clone, Debug, Default)]
pub struct GradStats {
    vec_sum: Vec<Vec2>,
    norm_sum: Vec<f64>,
    grad_norm_sum: Vec<f64>,
    visible_count: Vec<u32>,
    view_gcr_sum: Vec<f64>,
    steps: u32,

    step_vec: Vec<Vec2>,
    step_norm: Vec<f64>,
    step_touched: Vec<usize>,
    touched_flag: Vec<bool>,
}

#[inline]
fn norm(v: Vec2) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

impl GradStats {
    pub fn new(len: usize) -> Self {
        let mut s = GradStats::default();
        s.resize_zeroed(len);
        s
    }

    pub fn len(&self) -> usize {
        self.vec_sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vec_sum.is_empty()
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange { index: i, len: self.len() });
        }
        Ok(())
    }

    /// Adds one per-pixel subgradient of Gaussian `i`.
    pub fn accumulate(&mut self, i: usize, pixel_grad: Vec2) -> Result<()> {
        self.check(i)?;
        self.accumulate_partial(i, pixel_grad, norm(pixel_grad));
        Ok(())
    }

    /// Adds a pre-reduced batch of subgradients: their vector sum and the sum of their norms.
    pub(crate) fn accumulate_partial(&mut self, i: usize, vec: Vec2, norm_total: f64) {
        self.vec_sum[i][0] += vec[0];
        self.vec_sum[i][1] += vec[1];
        self.norm_sum[i] += norm_total;
        self.step_vec[i][0] += vec[0];
        self.step_vec[i][1] += vec[1];
        self.step_norm[i] += norm_total;
        if !self.touched_flag[i] {
            self.touched_flag[i] = true;
            self.step_touched.push(i);
        }
    }

    /// Closes the current step: every Gaussian that received at least one
    /// subgradient counts as visible once.
    pub fn end_step(&mut self) {
        for &i in &self.step_touched {
            let v = norm(self.step_vec[i]);
            self.grad_norm_sum[i] += v;
            self.view_gcr_sum[i] += (v / (self.step_norm[i] + GCR_EPSILON)).min(1.0);
            self.visible_count[i] += 1;
            self.step_vec[i] = [0.0; 2];
            self.step_norm[i] = 0.0;
            self.touched_flag[i] = false;
        }
        self.step_touched.clear();
        self.steps += 1;
    }

    pub fn vec_sum(&self, i: usize) -> Vec2 {
        self.vec_sum[i]
    }

    pub fn norm_sum(&self, i: usize) -> f64 {
        self.norm_sum[i]
    }

    pub fn grad_norm_sum(&self, i: usize) -> f64 {
        self.grad_norm_sum[i]
    }

    pub fn visible_count(&self, i: usize) -> u32 {
        self.visible_count[i]
    }

    /// Gradient coherence ratio: `|sum g| / (sum |g| + eps)`, in `[0, 1]`.
    pub fn gcr(&self, i: usize) -> f64 {
        (norm(self.vec_sum[i]) / (self.norm_sum[i] + GCR_EPSILON)).min(1.0)
    }

    pub fn gcr_with(&self, i: usize, mode: GcrMode) -> f64 {
        match mode {
            GcrMode::Global => self.gcr(i),
            GcrMode::PerViewMean => match self.visible_count[i] {
                0 => 0.0,
                n => self.view_gcr_sum[i] / f64::from(n),
            },
        }
    }

    /// Mean over visible steps of the norm of the pixel-summed gradient.
    pub fn mean_grad_norm(&self, i: usize) -> f64 {
        self.grad_norm_sum[i] / f64::from(self.visible_count[i].max(1))
    }

    /// Mean over visible steps of the sum of per-pixel norms; immune to cancellation.
    pub fn abs_mean_grad_norm(&self, i: usize) -> f64 {
        self.norm_sum[i] / f64::from(self.visible_count[i].max(1))
    }

    /// Mean pixel-summed gradient per visible step.
    pub fn mean_grad(&self, i: usize) -> Vec2 {
        let n = f64::from(self.visible_count[i].max(1));
        [self.vec_sum[i][0] / n, self.vec_sum[i][1] / n]
    }

    /// Zeroes every accumulator and resizes to `len`.
    pub fn reset(&mut self, len: usize) {
        self.vec_sum.clear();
        self.norm_sum.clear();
        self.grad_norm_sum.clear();
        self.visible_count.clear();
        self.view_gcr_sum.clear();
        self.step_vec.clear();
        self.step_norm.clear();
        self.step_touched.clear();
        self.touched_flag.clear();
        self.steps = 0;
        self.resize_zeroed(len);
    }

    fn resize_zeroed(&mut self, len: usize) {
        self.vec_sum.resize(len, [0.0; 2]);
        self.norm_sum.resize(len, 0.0);
        self.grad_norm_sum.resize(len, 0.0);
        self.visible_count.resize(len, 0);
        self.view_gcr_sum.resize(len, 0.0);
        self.step_vec.resize(len, [0.0; 2]);
        self.step_norm.resize(len, 0.0);
        self.touched_flag.resize(len, false);
    }

    /// Carries survivors' sums to their new slots; fresh slots start at zero.
    /// Must be called between steps.
    pub fn remap(&mut self, map: &IndexMap) -> Result<()> {
        if !self.step_touched.is_empty() {
            return Err(Error::InvalidIndexMap("remap in the middle of a step".into()));
        }
        self.vec_sum = map.apply(&self.vec_sum, [0.0; 2])?;
        self.norm_sum = map.apply(&self.norm_sum, 0.0)?;
        self.grad_norm_sum = map.apply(&self.grad_norm_sum, 0.0)?;
        self.visible_count = map.apply(&self.visible_count, 0)?;
        self.view_gcr_sum = map.apply(&self.view_gcr_sum, 0.0)?;
        let len = map.new_len();
        self.step_vec = vec![[0.0; 2]; len];
        self.step_norm = vec![0.0; len];
        self.touched_flag = vec![false; len];
        Ok(())
    }

    /// Debug dump, one row per Gaussian.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,vec_sum_x,vec_sum_y,norm_sum,grad_norm_sum,visible_count,gcr\n");
        for i in 0..self.len() {
            let v = self.vec_sum[i];
            let _ = writeln!(
                out,
                "{i},{:e},{:e},{:e},{:e},{},{}",
                v[0],
                v[1],
                self.norm_sum[i],
                self.grad_norm_sum[i],
                self.visible_count[i],
                self.gcr(i)
            );
        }
        out
    }
}
