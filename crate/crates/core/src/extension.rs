//! Closed-form divergence-free fields.
//!
//! Every vector field here is a perpendicular gradient `(-d2 psi, d1 psi)` of
//! a scalar potential assembled from one-dimensional quintic ramps, so the
//! divergence vanishes identically. The ramps have two continuous
//! derivatives, which is all the finite element integrals need.

use nalgebra::{Matrix2, Point2, Vector2};
use thiserror::Error;

use crate::geometry::Layout;
use crate::quadrature::gauss_legendre;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExtensionError {
    #[error("{side} gap {gap} is not positive")]
    GapTooSmall { side: &'static str, gap: f64 },
    #[error("cut-off support half-width {width} reaches the channel end at {half_length}")]
    TooWide { width: f64, half_length: f64 },
    #[error("invalid inflow profile: {0}")]
    InvalidProfile(String),
    #[error("invalid collar fraction {0}; expected a value in (0, 1)")]
    InvalidCollar(f64),
}

/// Value, gradient and Hessian of a scalar at a point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet {
    pub value: f64,
    pub grad: Vector2<f64>,
    pub hess: Matrix2<f64>,
}

impl Jet {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            ..Self::default()
        }
    }

    /// Lift a function of `x1` alone given its value and two derivatives.
    pub fn of_x1(v: f64, d1: f64, d2: f64) -> Self {
        Self {
            value: v,
            grad: Vector2::new(d1, 0.0),
            hess: Matrix2::new(d2, 0.0, 0.0, 0.0),
        }
    }

    pub fn of_x2(v: f64, d1: f64, d2: f64) -> Self {
        Self {
            value: v,
            grad: Vector2::new(0.0, d1),
            hess: Matrix2::new(0.0, 0.0, 0.0, d2),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            value: c * self.value,
            grad: self.grad * c,
            hess: self.hess * c,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            value: self.value + o.value,
            grad: self.grad + o.grad,
            hess: self.hess + o.hess,
        }
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(-1.0))
    }

    pub fn mul(&self, o: &Self) -> Self {
        let (f, g) = (self, o);
        let xx = f.hess[(0, 0)] * g.value + 2.0 * f.grad.x * g.grad.x + f.value * g.hess[(0, 0)];
        let yy = f.hess[(1, 1)] * g.value + 2.0 * f.grad.y * g.grad.y + f.value * g.hess[(1, 1)];
        let xy = f.hess[(0, 1)] * g.value
            + f.grad.x * g.grad.y
            + f.grad.y * g.grad.x
            + f.value * g.hess[(0, 1)];
        Self {
            value: f.value * g.value,
            grad: f.grad * g.value + g.grad * f.value,
            hess: Matrix2::new(xx, xy, xy, yy),
        }
    }

    /// `(-d2, d1)` of the scalar together with its gradient. The off-diagonal
    /// Hessian entry is shared, so the trace of the returned gradient is an
    /// exact floating point zero.
    pub fn perp_gradient(&self) -> (Vector2<f64>, Matrix2<f64>) {
        let xy = self.hess[(0, 1)];
        (
            Vector2::new(-self.grad.y, self.grad.x),
            Matrix2::new(-xy, -self.hess[(1, 1)], self.hess[(0, 0)], xy),
        )
    }
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, p: &Point2<f64>) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn intersects_box(&self, lo: &Point2<f64>, hi: &Point2<f64>) -> bool {
        lo.x <= self.x1 && hi.x >= self.x0 && lo.y <= self.y1 && hi.y >= self.y0
    }
}

pub trait ScalarField: Send + Sync {
    fn jet(&self, p: &Point2<f64>) -> Jet;

    fn value(&self, p: &Point2<f64>) -> f64 {
        self.jet(p).value
    }
}

/// A vector field with its exact gradient `grad[(i, j)] = d_j v_i`.
pub trait AnalyticField: Send + Sync {
    fn eval(&self, p: &Point2<f64>) -> (Vector2<f64>, Matrix2<f64>);

    /// Rectangles whose union contains the support; `None` means unbounded.
    fn support(&self) -> Option<Vec<Rect>> {
        None
    }

    /// Shortest length over which the field varies inside the box
    /// `[lo, hi]`; `None` when it is smooth on the scale of the box.
    fn length_scale(&self, _lo: &Point2<f64>, _hi: &Point2<f64>) -> Option<f64> {
        None
    }

    fn value(&self, p: &Point2<f64>) -> Vector2<f64> {
        self.eval(p).0
    }

    fn divergence(&self, p: &Point2<f64>) -> f64 {
        self.eval(p).1.trace()
    }
}

/// A scalar with partial derivatives of any order, used for manufactured
/// solutions.
pub trait SmoothScalar: Send + Sync {
    fn partial(&self, p: &Point2<f64>, dx: u32, dy: u32) -> f64;
}

/// The quintic smoothstep `6t^5 - 15t^4 + 10t^3` clamped to `[0, 1]`, with
/// its first two derivatives.
pub fn quintic_ramp(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let s = t * t * t * (10.0 + t * (-15.0 + 6.0 * t));
        let d1 = 30.0 * t * t * (1.0 - t) * (1.0 - t);
        let d2 = 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
        (s, d1, d2)
    }
}

/// Ramp rising from 0 at `start` to 1 at `start + width` (falling when
/// `width < 0`): value and two derivatives in the physical variable.
fn ramp(x: f64, start: f64, width: f64) -> (f64, f64, f64) {
    let (s, d1, d2) = quintic_ramp((x - start) / width);
    (s, d1 / width, d2 / (width * width))
}

fn one_minus(r: (f64, f64, f64)) -> (f64, f64, f64) {
    (1.0 - r.0, -r.1, -r.2)
}

/// A real polynomial in `x2`, coefficients by increasing degree.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn derivative(&self) -> Self {
        Self::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, c)| k as f64 * c)
                .collect(),
        )
    }

    /// Antiderivative vanishing at `x = a`.
    pub fn antiderivative_from(&self, a: f64) -> Self {
        let mut c = vec![0.0];
        c.extend(
            self.coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c / (k as f64 + 1.0)),
        );
        let mut p = Self::new(c);
        p.coeffs[0] = -p.eval(a);
        p
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }
}

/// Inflow and outflow profiles `V_in`, `V_out` and the top wall speed `U`.
///
/// Standard profiles vanish on the bottom wall and equal `U` on the top wall.
/// Symmetric profiles are even in `x2` and equal `U` on both walls.
#[derive(Debug, Clone, PartialEq)]
pub struct InflowProfile {
    half_height: f64,
    u_top: f64,
    v_in: Polynomial,
    v_out: Polynomial,
    symmetric: bool,
}

impl InflowProfile {
    /// Linear shear `U (x2 + H) / (2H)` at both ends.
    pub fn couette(half_height: f64, u_top: f64) -> Result<Self, ExtensionError> {
        let v = vec![0.5 * u_top, 0.5 * u_top / half_height];
        Self::polynomial(half_height, u_top, v.clone(), v)
    }

    pub fn polynomial(
        half_height: f64,
        u_top: f64,
        v_in: Vec<f64>,
        v_out: Vec<f64>,
    ) -> Result<Self, ExtensionError> {
        let p = Self {
            half_height,
            u_top,
            v_in: Polynomial::new(v_in),
            v_out: Polynomial::new(v_out),
            symmetric: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn symmetric_polynomial(
        half_height: f64,
        u_top: f64,
        v_in: Vec<f64>,
        v_out: Vec<f64>,
    ) -> Result<Self, ExtensionError> {
        let p = Self {
            half_height,
            u_top,
            v_in: Polynomial::new(v_in),
            v_out: Polynomial::new(v_out),
            symmetric: true,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), ExtensionError> {
        let h = self.half_height;
        let bad = |m: String| Err(ExtensionError::InvalidProfile(m));
        if !(h > 0.0 && h.is_finite()) {
            return bad(format!("half height must be positive, got {h}"));
        }
        if self.u_top != 0.0 && self.u_top != 1.0 {
            return bad(format!("top wall speed must be 0 or 1, got {}", self.u_top));
        }
        let all = self.v_in.coeffs.iter().chain(&self.v_out.coeffs);
        if self.v_in.coeffs.is_empty() || self.v_out.coeffs.is_empty() {
            return bad("empty coefficient list".into());
        }
        if all.clone().any(|c| !c.is_finite()) {
            return bad("non-finite coefficient".into());
        }
        let scale = all.fold(1.0_f64, |m, c| m.max(c.abs()))
            * (1.0 + h).powi(self.v_in.degree().max(self.v_out.degree()) as i32);
        let tol = 1e-10 * scale;
        let bottom = if self.symmetric { self.u_top } else { 0.0 };
        for (name, v) in [("V_in", &self.v_in), ("V_out", &self.v_out)] {
            if (v.eval(-h) - bottom).abs() > tol {
                return bad(format!("{name}(-H) = {} but must be {bottom}", v.eval(-h)));
            }
            if (v.eval(h) - self.u_top).abs() > tol {
                return bad(format!("{name}(H) = {} but must be {}", v.eval(h), self.u_top));
            }
            if self.symmetric {
                let odd = v.coeffs.iter().skip(1).step_by(2);
                if odd.clone().any(|c| c.abs() > 1e-14 * scale) {
                    return bad(format!("{name} is not even in x2"));
                }
            }
        }
        let (fi, fo) = (self.flux_in(), self.flux_out());
        if (fi - fo).abs() > tol.max(1e-10 * fi.abs()) {
            return bad(format!("fluxes differ: {fi} in, {fo} out"));
        }
        Ok(())
    }

    fn quadrature_flux(&self, v: &Polynomial) -> f64 {
        let n = v.degree() / 2 + 2;
        let (x, w) = gauss_legendre(n);
        let h = self.half_height;
        x.iter().zip(&w).map(|(x, w)| w * h * v.eval(h * x)).sum()
    }

    pub fn flux_in(&self) -> f64 {
        self.quadrature_flux(&self.v_in)
    }

    pub fn flux_out(&self) -> f64 {
        self.quadrature_flux(&self.v_out)
    }

    pub fn half_height(&self) -> f64 {
        self.half_height
    }

    pub fn u_top(&self) -> f64 {
        self.u_top
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn v_in(&self, x2: f64) -> f64 {
        self.v_in.eval(x2)
    }

    pub fn v_out(&self, x2: f64) -> f64 {
        self.v_out.eval(x2)
    }

    pub fn v_in_poly(&self) -> &Polynomial {
        &self.v_in
    }

    pub fn v_out_poly(&self) -> &Polynomial {
        &self.v_out
    }

    /// Prescribed velocity on the bottom wall.
    pub fn bottom_speed(&self) -> f64 {
        if self.symmetric {
            self.u_top
        } else {
            0.0
        }
    }
}

/// Which horizontal wall strip carries the `x2`-dependent part of the
/// cut-offs `zeta_l`, `zeta_r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strip {
    /// Strip of width `eps` below the top wall.
    Top { eps: f64 },
    /// Mirror image: strip of width `eps` above the bottom wall.
    Bottom { eps: f64 },
    Both { eps_top: f64, eps_bottom: f64 },
}

impl Strip {
    /// The strip used by the extension of standard boundary data: the current
    /// top gap when `U = 1`; for `U = 0` the top gap at `h = 0` when `h <= 0`
    /// and the mirrored bottom strip with the bottom gap at `h = 0` otherwise.
    pub fn for_flow(layout: &Layout, u_top: f64) -> Self {
        let big_h = layout.channel.half_height();
        let h = layout.placement.h;
        if u_top != 0.0 {
            Strip::Top {
                eps: layout.gaps.eps_t,
            }
        } else if h <= 0.0 {
            Strip::Top {
                eps: big_h - layout.extents.delta_t,
            }
        } else {
            Strip::Bottom {
                eps: big_h - layout.extents.delta_b,
            }
        }
    }

    fn check(&self) -> Result<(), ExtensionError> {
        let (t, b) = match *self {
            Strip::Top { eps } => (eps, 1.0),
            Strip::Bottom { eps } => (1.0, eps),
            Strip::Both {
                eps_top,
                eps_bottom,
            } => (eps_top, eps_bottom),
        };
        if !(t > 0.0) {
            return Err(ExtensionError::GapTooSmall { side: "top", gap: t });
        }
        if !(b > 0.0) {
            return Err(ExtensionError::GapTooSmall {
                side: "bottom",
                gap: b,
            });
        }
        Ok(())
    }
}

/// The pair `zeta_l`, `zeta_r`.
///
/// Away from the strip, `zeta_l` falls from 1 to 0 over `[-2 tau, -tau]` and
/// `zeta_r` rises from 0 to 1 over `[tau, 2 tau]`. Inside the strip, between
/// `eps/2` and `eps/4` from the wall, both blend into a single ramp `B` over
/// `[-tau, tau]` with `zeta_l = B` and `zeta_r = 1 - B` next to the wall.
#[derive(Debug, Clone, Copy)]
pub struct Cutoffs {
    tau: f64,
    half_height: f64,
    strip: Strip,
}

impl Cutoffs {
    pub fn new(layout: &Layout, strip: Strip) -> Result<Self, ExtensionError> {
        strip.check()?;
        let tau = layout.extents.tau;
        let half_length = layout.channel.half_length();
        if 2.0 * tau >= half_length {
            return Err(ExtensionError::TooWide {
                width: 2.0 * tau,
                half_length,
            });
        }
        Ok(Self {
            tau,
            half_height: layout.channel.half_height(),
            strip,
        })
    }

    pub fn strip(&self) -> Strip {
        self.strip
    }

    fn strip_weight(&self, x2: f64) -> Jet {
        let big_h = self.half_height;
        let top = |eps: f64| ramp(x2, big_h - 0.5 * eps, 0.25 * eps);
        let bot = |eps: f64| ramp(x2, -big_h + 0.5 * eps, -0.25 * eps);
        let y = match self.strip {
            Strip::Top { eps } => top(eps),
            Strip::Bottom { eps } => bot(eps),
            Strip::Both {
                eps_top,
                eps_bottom,
            } => {
                let (a, b) = (top(eps_top), bot(eps_bottom));
                (a.0 + b.0, a.1 + b.1, a.2 + b.2)
            }
        };
        Jet::of_x2(y.0, y.1, y.2)
    }

    /// `(zeta_l, zeta_r)` at `p`.
    pub fn eval(&self, p: &Point2<f64>) -> (Jet, Jet) {
        let t = self.tau;
        let a = one_minus(ramp(p.x, -2.0 * t, t));
        let b = one_minus(ramp(p.x, -t, 2.0 * t));
        let c = ramp(p.x, t, t);
        let (a, b, c) = (
            Jet::of_x1(a.0, a.1, a.2),
            Jet::of_x1(b.0, b.1, b.2),
            Jet::of_x1(c.0, c.1, c.2),
        );
        let y = self.strip_weight(p.y);
        let one = Jet::constant(1.0);
        let not_y = one.sub(&y);
        let zl = a.mul(&not_y).add(&b.mul(&y));
        let zr = c.mul(&not_y).add(&one.sub(&b).mul(&y));
        (zl, zr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutoffKind {
    ZetaL,
    ZetaR,
    Chi,
}

/// One of the scalar cut-offs as a field.
#[derive(Debug, Clone, Copy)]
pub enum Cutoff {
    Zeta(Cutoffs, CutoffKind),
    Chi(Chi),
}

impl ScalarField for Cutoff {
    fn jet(&self, p: &Point2<f64>) -> Jet {
        match self {
            Cutoff::Zeta(z, kind) => {
                let (l, r) = z.eval(p);
                if *kind == CutoffKind::ZetaL {
                    l
                } else {
                    r
                }
            }
            Cutoff::Chi(c) => c.jet(p),
        }
    }
}

/// Build `zeta_l`, `zeta_r` (with the strip of [`Strip::for_flow`]) or `chi`
/// (with the default collars).
pub fn cutoff(kind: CutoffKind, layout: &Layout, u_top: f64) -> Result<Cutoff, ExtensionError> {
    match kind {
        CutoffKind::Chi => Ok(Cutoff::Chi(Chi::new(layout, ChiCollars::default())?)),
        k => Ok(Cutoff::Zeta(
            Cutoffs::new(layout, Strip::for_flow(layout, u_top))?,
            k,
        )),
    }
}

/// The extension `s = grad_perp(psi)` of the boundary data, scaled by
/// `lambda`.
#[derive(Debug, Clone)]
pub struct SolenoidalExtension {
    cutoffs: Cutoffs,
    lambda: f64,
    /// `x2`-antiderivatives of the profiles, normalised to vanish on the wall
    /// opposite the strip.
    f_in: Polynomial,
    f_out: Polynomial,
}

impl SolenoidalExtension {
    fn build(
        profile: &InflowProfile,
        cutoffs: Cutoffs,
        lambda: f64,
    ) -> Result<Self, ExtensionError> {
        let big_h = profile.half_height();
        let anchor = match cutoffs.strip {
            Strip::Bottom { .. } => big_h,
            _ => -big_h,
        };
        Ok(Self {
            cutoffs,
            lambda,
            f_in: profile.v_in.antiderivative_from(anchor),
            f_out: profile.v_out.antiderivative_from(anchor),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn cutoffs(&self) -> &Cutoffs {
        &self.cutoffs
    }

    fn potential(&self, p: &Point2<f64>) -> Jet {
        let (zl, zr) = self.cutoffs.eval(p);
        let prof = |f: &Polynomial| {
            let d = f.derivative();
            Jet::of_x2(f.eval(p.y), d.eval(p.y), d.derivative().eval(p.y))
        };
        zl.mul(&prof(&self.f_in))
            .add(&zr.mul(&prof(&self.f_out)))
            .scale(-self.lambda)
    }
}

impl AnalyticField for SolenoidalExtension {
    fn eval(&self, p: &Point2<f64>) -> (Vector2<f64>, Matrix2<f64>) {
        self.potential(p).perp_gradient()
    }
}

/// The extension of the standard boundary data: `lambda V_in e1` on the
/// inlet, `lambda V_out e1` on the outlet, `lambda U e1` on the top wall and
/// zero on the bottom wall and on the body.
pub fn solenoidal_s(
    profile: &InflowProfile,
    layout: &Layout,
    lambda: f64,
) -> Result<SolenoidalExtension, ExtensionError> {
    if profile.is_symmetric() {
        return Err(ExtensionError::InvalidProfile(
            "symmetric profiles need the symmetric variant".into(),
        ));
    }
    check_half_height(profile, layout)?;
    let strip = Strip::for_flow(layout, profile.u_top());
    SolenoidalExtension::build(profile, Cutoffs::new(layout, strip)?, lambda)
}

/// The extension of symmetric boundary data, where the bottom wall also moves
/// with speed `U`: cut-offs with a strip at each wall, sized by the current
/// gaps.
pub fn symmetric_variant(
    profile: &InflowProfile,
    layout: &Layout,
    lambda: f64,
) -> Result<SolenoidalExtension, ExtensionError> {
    if !profile.is_symmetric() {
        return Err(ExtensionError::InvalidProfile(
            "the symmetric variant needs even profiles equal to U on both walls".into(),
        ));
    }
    check_half_height(profile, layout)?;
    let strip = Strip::Both {
        eps_top: layout.gaps.eps_t,
        eps_bottom: layout.gaps.eps_b,
    };
    SolenoidalExtension::build(profile, Cutoffs::new(layout, strip)?, lambda)
}

fn check_half_height(profile: &InflowProfile, layout: &Layout) -> Result<(), ExtensionError> {
    let (a, b) = (profile.half_height(), layout.channel.half_height());
    if (a - b).abs() > 1e-14 * b {
        return Err(ExtensionError::InvalidProfile(format!(
            "profile half height {a} differs from channel half height {b}"
        )));
    }
    Ok(())
}

/// Collar sizes of `chi`: the horizontal ramp width as a multiple of `tau`
/// and the vertical ramp widths as fractions of the bottom and top gaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiCollars {
    pub horizontal: f64,
    pub bottom: f64,
    pub top: f64,
}

impl Default for ChiCollars {
    fn default() -> Self {
        Self {
            horizontal: 1.0,
            bottom: 0.5,
            top: 0.5,
        }
    }
}

/// `chi = X(x1) Y(x2)`, equal to 1 on the box `[-tau, tau] x [h - delta_b,
/// h + delta_t]` holding the body and 0 outside the collars around it.
#[derive(Debug, Clone, Copy)]
pub struct Chi {
    tau: f64,
    x_width: f64,
    bottom: f64,
    top: f64,
    bottom_width: f64,
    top_width: f64,
}

impl Chi {
    pub fn new(layout: &Layout, collars: ChiCollars) -> Result<Self, ExtensionError> {
        for c in [collars.bottom, collars.top] {
            if !(c > 0.0 && c < 1.0) {
                return Err(ExtensionError::InvalidCollar(c));
            }
        }
        if !(collars.horizontal > 0.0 && collars.horizontal.is_finite()) {
            return Err(ExtensionError::InvalidCollar(collars.horizontal));
        }
        let g = layout.gaps;
        if !(g.eps_b > 0.0) {
            return Err(ExtensionError::GapTooSmall {
                side: "bottom",
                gap: g.eps_b,
            });
        }
        if !(g.eps_t > 0.0) {
            return Err(ExtensionError::GapTooSmall {
                side: "top",
                gap: g.eps_t,
            });
        }
        let tau = layout.extents.tau;
        let x_width = collars.horizontal * tau;
        let half_length = layout.channel.half_length();
        if tau + x_width >= half_length {
            return Err(ExtensionError::TooWide {
                width: tau + x_width,
                half_length,
            });
        }
        Ok(Self {
            tau,
            x_width,
            bottom: layout.body_bottom(),
            top: layout.body_top(),
            bottom_width: collars.bottom * g.eps_b,
            top_width: collars.top * g.eps_t,
        })
    }

    /// Rectangles covering the support of `chi`: bottom collar, central band
    /// and top collar.
    pub fn support_rects(&self) -> Vec<Rect> {
        let xr = self.tau + self.x_width;
        let band = |y0, y1| Rect {
            x0: -xr,
            x1: xr,
            y0,
            y1,
        };
        vec![
            band(self.bottom - self.bottom_width, self.bottom),
            band(self.bottom, self.top),
            band(self.top, self.top + self.top_width),
        ]
    }

    /// Narrowest ramp of `chi` meeting the box `[lo, hi]`.
    pub fn ramp_width(&self, lo: &Point2<f64>, hi: &Point2<f64>) -> Option<f64> {
        let xr = self.tau + self.x_width;
        let (y0, y1) = (self.bottom - self.bottom_width, self.top + self.top_width);
        let rect = |x0, x1, y0, y1| Rect { x0, x1, y0, y1 };
        [
            (rect(-xr, xr, y0, self.bottom), self.bottom_width),
            (rect(-xr, xr, self.top, y1), self.top_width),
            (rect(-xr, -self.tau, y0, y1), self.x_width),
            (rect(self.tau, xr, y0, y1), self.x_width),
        ]
        .iter()
        .filter(|(r, _)| r.intersects_box(lo, hi))
        .map(|&(_, w)| w)
        .reduce(f64::min)
    }
}

impl ScalarField for Chi {
    fn jet(&self, p: &Point2<f64>) -> Jet {
        let x = one_minus(ramp(p.x.abs(), self.tau, self.x_width));
        let sx = p.x.signum();
        let x = Jet::of_x1(x.0, sx * x.1, x.2);
        let y = if p.y < self.bottom {
            ramp(p.y, self.bottom - self.bottom_width, self.bottom_width)
        } else {
            one_minus(ramp(p.y, self.top, self.top_width))
        };
        x.mul(&Jet::of_x2(y.0, y.1, y.2))
    }
}

/// `w = grad_perp(x1 chi)`: divergence free, `e2` on the body, zero on the
/// channel walls.
#[derive(Debug, Clone, Copy)]
pub struct LiftTestField {
    chi: Chi,
}

impl LiftTestField {
    pub fn chi(&self) -> &Chi {
        &self.chi
    }
}

impl AnalyticField for LiftTestField {
    fn eval(&self, p: &Point2<f64>) -> (Vector2<f64>, Matrix2<f64>) {
        Jet::of_x1(p.x, 1.0, 0.0)
            .mul(&self.chi.jet(p))
            .perp_gradient()
    }

    fn support(&self) -> Option<Vec<Rect>> {
        Some(self.chi.support_rects())
    }

    fn length_scale(&self, lo: &Point2<f64>, hi: &Point2<f64>) -> Option<f64> {
        self.chi.ramp_width(lo, hi)
    }
}

pub fn lift_field_w(layout: &Layout) -> Result<LiftTestField, ExtensionError> {
    lift_field_w_with(layout, ChiCollars::default())
}

pub fn lift_field_w_with(
    layout: &Layout,
    collars: ChiCollars,
) -> Result<LiftTestField, ExtensionError> {
    Ok(LiftTestField {
        chi: Chi::new(layout, collars)?,
    })
}

/// `sum a sin(kx x1 + px) sin(ky x2 + py)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrigScalar {
    pub terms: Vec<[f64; 5]>,
}

impl SmoothScalar for TrigScalar {
    fn partial(&self, p: &Point2<f64>, dx: u32, dy: u32) -> f64 {
        let quarter = std::f64::consts::FRAC_PI_2;
        self.terms
            .iter()
            .map(|&[a, kx, px, ky, py]| {
                a * kx.powi(dx as i32)
                    * ky.powi(dy as i32)
                    * (kx * p.x + px + dx as f64 * quarter).sin()
                    * (ky * p.y + py + dy as f64 * quarter).sin()
            })
            .sum()
    }
}

/// Bivariate polynomial, `coeffs[i][j]` multiplying `x1^i x2^j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolyScalar {
    pub coeffs: Vec<Vec<f64>>,
}

impl SmoothScalar for PolyScalar {
    fn partial(&self, p: &Point2<f64>, dx: u32, dy: u32) -> f64 {
        let falling = |n: usize, k: u32| (0..k as usize).map(|m| (n - m) as f64).product::<f64>();
        let mut sum = 0.0;
        for (i, row) in self.coeffs.iter().enumerate() {
            if i < dx as usize {
                continue;
            }
            for (j, &c) in row.iter().enumerate() {
                if j < dy as usize || c == 0.0 {
                    continue;
                }
                sum += c
                    * falling(i, dx)
                    * falling(j, dy)
                    * p.x.powi((i - dx as usize) as i32)
                    * p.y.powi((j - dy as usize) as i32);
            }
        }
        sum
    }
}

/// The velocity `(-d2 psi, d1 psi)` of a smooth stream function.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamVelocity<S> {
    pub stream: S,
}

impl<S: SmoothScalar> StreamVelocity<S> {
    pub fn new(stream: S) -> Self {
        Self { stream }
    }

    /// Partial derivative of velocity component `i`.
    pub fn partial(&self, p: &Point2<f64>, i: usize, dx: u32, dy: u32) -> f64 {
        if i == 0 {
            -self.stream.partial(p, dx, dy + 1)
        } else {
            self.stream.partial(p, dx + 1, dy)
        }
    }

    pub fn laplacian(&self, p: &Point2<f64>) -> Vector2<f64> {
        Vector2::from_fn(|i, _| self.partial(p, i, 2, 0) + self.partial(p, i, 0, 2))
    }
}

impl<S: SmoothScalar> AnalyticField for StreamVelocity<S> {
    fn eval(&self, p: &Point2<f64>) -> (Vector2<f64>, Matrix2<f64>) {
        let s = &self.stream;
        let xy = s.partial(p, 1, 1);
        (
            Vector2::new(-s.partial(p, 0, 1), s.partial(p, 1, 0)),
            Matrix2::new(-xy, -s.partial(p, 0, 2), s.partial(p, 2, 0), xy),
        )
    }
}
