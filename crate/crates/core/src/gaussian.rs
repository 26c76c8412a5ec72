//! The 2D Gaussian primitive and its covariance parameterization.

pub type Vec2 = [f64; 2];
pub type Rgb = [f64; 3];

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Symmetric 2x2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn inverse(&self) -> Option<Sym2> {
        let det = self.det();
        if det <= 0.0 || !det.is_finite() {
            return None;
        }
        Some(Sym2 { xx: self.yy / det, xy: -self.xy / det, yy: self.xx / det })
    }

    pub fn quad_form(&self, d: Vec2) -> f64 {
        self.xx * d[0] * d[0] + 2.0 * self.xy * d[0] * d[1] + self.yy * d[1] * d[1]
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mid = 0.5 * (self.xx + self.yy);
        let half_diff = 0.5 * (self.xx - self.yy);
        let r = (half_diff * half_diff + self.xy * self.xy).sqrt();
        (mid + r, mid - r)
    }
}

/// `R diag(exp(log_scale))^2 R^T` for a rotation by `rotation` radians.
pub fn covariance(log_scale: Vec2, rotation: f64) -> Sym2 {
    let (s, c) = rotation.sin_cos();
    let a = (2.0 * log_scale[0]).exp();
    let b = (2.0 * log_scale[1]).exp();
    Sym2 { xx: c * c * a + s * s * b, xy: c * s * (a - b), yy: s * s * a + c * c * b }
}

/// One anisotropic splat in image space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian2D {
    /// Center in pixel coordinates.
    pub mu: Vec2,
    /// Natural log of the per-axis standard deviations, in pixels.
    pub log_scale: Vec2,
    /// Rotation of the first principal axis, radians.
    pub rotation: f64,
    pub logit_opacity: f64,
    pub color: Rgb,
    /// Compositing sort key; lower is in front.
    pub depth: f64,
}

impl Gaussian2D {
    pub fn isotropic(mu: Vec2, sigma: f64, opacity: f64, color: Rgb, depth: f64) -> Self {
        Gaussian2D {
            mu,
            log_scale: [sigma.ln(); 2],
            rotation: 0.0,
            logit_opacity: logit(opacity),
            color,
            depth,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.logit_opacity)
    }

    pub fn scales(&self) -> Vec2 {
        [self.log_scale[0].exp(), self.log_scale[1].exp()]
    }

    pub fn max_scale(&self) -> f64 {
        self.log_scale[0].max(self.log_scale[1]).exp()
    }

    pub fn covariance(&self) -> Sym2 {
        covariance(self.log_scale, self.rotation)
    }

    /// Offset of `x` from the center expressed in the principal-axis frame.
    #[inline]
    pub fn local_offset(&self, x: Vec2) -> Vec2 {
        let (s, c) = self.rotation.sin_cos();
        let d = [x[0] - self.mu[0], x[1] - self.mu[1]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
    }
}

/// Unnormalized density `exp(-1/2 (x-mu)^T Sigma^-1 (x-mu))`.
///
/// Evaluated in the principal-axis frame, where the inverse covariance is
/// diagonal with entries `exp(-2 log_scale)`.
pub fn eval_gaussian(g: &Gaussian2D, x: Vec2) -> f64 {
    let u = g.local_offset(x);
    let q = (-2.0 * g.log_scale[0]).exp() * u[0] * u[0]
        + (-2.0 * g.log_scale[1]).exp() * u[1] * u[1];
    (-0.5 * q).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian2D>,
    pub background: Rgb,
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian2D>, background: Rgb) -> Self {
        Scene { gaussians, background }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Indices in compositing order: ascending depth, ties by list index.
    pub fn compositing_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.gaussians.len()).collect();
        order.sort_by(|&a, &b| {
            self.gaussians[a]
                .depth
                .total_cmp(&self.gaussians[b].depth)
                .then(a.cmp(&b))
        });
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, LN_2};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn explicit_density(g: &Gaussian2D, x: Vec2) -> f64 {
        let inv = g.covariance().inverse().unwrap();
        let d = [x[0] - g.mu[0], x[1] - g.mu[1]];
        (-0.5 * inv.quad_form(d)).exp()
    }

    #[test]
    fn covariance_examples() {
        for rot in [0.0, 0.3, -2.0, 7.5] {
            let c = covariance([0.0, 0.0], rot);
            assert!(close(c.xx, 1.0, 1e-15) && close(c.yy, 1.0, 1e-15) && close(c.xy, 0.0, 1e-15));
        }
        let c = covariance([LN_2, 0.0], 0.0);
        assert_eq!((c.xx, c.xy, c.yy), (4.0, 0.0, 1.0));
        // R = [[0,-1],[1,0]], R diag(4,1) R^T = diag(1,4)
        let c = covariance([LN_2, 0.0], FRAC_PI_2);
        assert!(close(c.xx, 1.0, 1e-12) && close(c.yy, 4.0, 1e-12) && close(c.xy, 0.0, 1e-12));
    }

    #[test]
    fn eval_examples() {
        let g = Gaussian2D::isotropic([3.0, 4.0], 1.0, 0.5, [1.0; 3], 0.0);
        assert_eq!(eval_gaussian(&g, [3.0, 4.0]), 1.0);
        assert!(close(eval_gaussian(&g, [4.0, 4.0]), (-0.5f64).exp(), 1e-15));
        assert!(close(eval_gaussian(&g, [4.0, 4.0]), 0.60653, 1e-5));

        let g = Gaussian2D { log_scale: [LN_2, 0.0], ..g };
        assert!(close(eval_gaussian(&g, [5.0, 4.0]), (-0.5f64).exp(), 1e-15));
    }

    #[test]
    fn sigmoid_logit_roundtrip() {
        for p in [1e-6, 0.01, 0.1, 0.5, 0.9, 0.999] {
            assert!(close(sigmoid(logit(p)), p, 1e-12));
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn compositing_order_breaks_ties_by_index() {
        let mk = |d| Gaussian2D::isotropic([0.0, 0.0], 1.0, 0.5, [0.0; 3], d);
        let scene = Scene::new(vec![mk(0.5), mk(0.1), mk(0.5), mk(0.0)], [0.0; 3]);
        assert_eq!(scene.compositing_order(), vec![3, 1, 0, 2]);
    }

    proptest! {
        #[test]
        fn covariance_is_spd_with_expected_det(l0 in -3.0..3.0f64, l1 in -3.0..3.0f64, rot in -10.0..10.0f64) {
            let c = covariance([l0, l1], rot);
            let (e0, e1) = c.eigenvalues();
            prop_assert!(e0 > 0.0 && e1 > 0.0);
            let want = (2.0 * (l0 + l1)).exp();
            prop_assert!((c.det() - want).abs() <= 1e-9 * want.max(1.0));
        }

        #[test]
        fn density_matches_inverse_covariance_form(
            l0 in -1.0..2.0f64, l1 in -1.0..2.0f64, rot in -4.0..4.0f64,
            dx in -6.0..6.0f64, dy in -6.0..6.0f64,
        ) {
            let g = Gaussian2D { log_scale: [l0, l1], rotation: rot, ..Gaussian2D::isotropic([1.0, 2.0], 1.0, 0.5, [0.0; 3], 0.0) };
            let x = [1.0 + dx, 2.0 + dy];
            let a = eval_gaussian(&g, x);
            prop_assert!((a - explicit_density(&g, x)).abs() < 1e-12);
            prop_assert!(a <= 1.0);
            if dx != 0.0 || dy != 0.0 {
                prop_assert!(a < 1.0 || (dx.abs() < 1e-7 && dy.abs() < 1e-7));
            }
        }

        #[test]
        fn density_is_rotation_covariant(
            l0 in -1.0..2.0f64, l1 in -1.0..2.0f64, rot in -4.0..4.0f64, phi in -4.0..4.0f64,
            dx in -5.0..5.0f64, dy in -5.0..5.0f64,
        ) {
            let g = Gaussian2D { log_scale: [l0, l1], rotation: rot, ..Gaussian2D::isotropic([0.0, 0.0], 1.0, 0.5, [0.0; 3], 0.0) };
            let (s, c) = phi.sin_cos();
            let turned = Gaussian2D { rotation: rot + phi, ..g };
            let x = [c * dx - s * dy, s * dx + c * dy];
            prop_assert!((eval_gaussian(&g, [dx, dy]) - eval_gaussian(&turned, x)).abs() < 1e-12);
        }
    }
}
