//! Ionic current models `f(u, w) = f₁(u) + f₂(u)·w`, `g(u, w) = g₁(u) + g₂·w`
//! and bounded-box certificates for their structural conditions.
//!
//! The growth, dissipativity and monotonicity conditions hold globally for
//! the named models, but a uniform mechanism that also covers user-supplied
//! callables can only certify them on a box. Every fit reports the box it used.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User-supplied decomposition. `quartic_lead` declares `L` in
/// `u·f₁(u) ~ L·u⁴`; when absent it is estimated far out on both sides.
#[derive(Clone)]
pub struct CustomModel {
    pub f1: ScalarFn,
    pub f2: ScalarFn,
    pub g1: ScalarFn,
    pub g2: f64,
    pub quartic_lead: Option<f64>,
}

impl fmt::Debug for CustomModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomModel")
            .field("g2", &self.g2)
            .field("quartic_lead", &self.quartic_lead)
            .finish_non_exhaustive()
    }
}

/// FitzHugh–Nagumo uses `g = b·w − c·u`; the coefficient checker calls the
/// same numbers `(k, d)`.
#[derive(Debug, Clone)]
pub enum IonicModel {
    FitzHughNagumo { eta: f64, a: f64, b: f64, c: f64 },
    AlievPanfilov { eta: f64, k: f64, a: f64 },
    RogersMcCulloch { eta: f64, b: f64, a: f64, c: f64, d: f64 },
    AllenCahn { eta: f64 },
    Custom(CustomModel),
}

fn cubic(u: f64, a: f64) -> f64 {
    u * (u - a) * (u - 1.0)
}

fn cubic_prime(u: f64, a: f64) -> f64 {
    3.0 * u * u - 2.0 * (1.0 + a) * u + a
}

fn numeric_derivative(h: &ScalarFn, u: f64) -> f64 {
    let step = 1e-6 * u.abs().max(1.0);
    (h(u + step) - h(u - step)) / (2.0 * step)
}

impl IonicModel {
    pub fn name(&self) -> &'static str {
        match self {
            IonicModel::FitzHughNagumo { .. } => "fitzhugh_nagumo",
            IonicModel::AlievPanfilov { .. } => "aliev_panfilov",
            IonicModel::RogersMcCulloch { .. } => "rogers_mcculloch",
            IonicModel::AllenCahn { .. } => "allen_cahn",
            IonicModel::Custom(_) => "custom",
        }
    }

    /// Checks `0 < a < 1` and positivity of the remaining coefficients.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{}: {name} must be positive, got {v}", self.name())))
            }
        };
        let threshold = |a: f64| {
            if a > 0.0 && a < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{}: need 0 < a < 1, got {a}", self.name())))
            }
        };
        match *self {
            IonicModel::FitzHughNagumo { eta, a, b, c } => {
                threshold(a)?;
                positive("eta", eta)?;
                positive("b", b)?;
                positive("c", c)
            }
            IonicModel::AlievPanfilov { eta, k, a } => {
                threshold(a)?;
                positive("eta", eta)?;
                positive("k", k)
            }
            IonicModel::RogersMcCulloch { eta, b, a, c, d } => {
                threshold(a)?;
                positive("eta", eta)?;
                positive("b", b)?;
                positive("c", c)?;
                positive("d", d)
            }
            IonicModel::AllenCahn { eta } => positive("eta", eta),
            IonicModel::Custom(ref m) => {
                if m.g2.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid("custom: g2 must be finite"))
                }
            }
        }
    }

    pub fn f1(&self, u: f64) -> f64 {
        match *self {
            IonicModel::FitzHughNagumo { eta, a, .. } => eta * cubic(u, a),
            IonicModel::AlievPanfilov { eta, k, a } => eta * k * cubic(u, a),
            IonicModel::RogersMcCulloch { eta, b, a, .. } => eta * b * cubic(u, a),
            IonicModel::AllenCahn { eta } => eta * (u * u * u - u),
            IonicModel::Custom(ref m) => (m.f1)(u),
        }
    }

    pub fn f2(&self, u: f64) -> f64 {
        match *self {
            IonicModel::FitzHughNagumo { eta, .. } => eta,
            IonicModel::AlievPanfilov { eta, .. } | IonicModel::RogersMcCulloch { eta, .. } => eta * u,
            IonicModel::AllenCahn { .. } => 0.0,
            IonicModel::Custom(ref m) => (m.f2)(u),
        }
    }

    pub fn g1(&self, u: f64) -> f64 {
        match *self {
            IonicModel::FitzHughNagumo { c, .. } => -c * u,
            IonicModel::AlievPanfilov { k, a, .. } => k * u * (u - 1.0 - a),
            IonicModel::RogersMcCulloch { c, .. } => -c * u,
            IonicModel::AllenCahn { .. } => 0.0,
            IonicModel::Custom(ref m) => (m.g1)(u),
        }
    }

    pub fn g2(&self) -> f64 {
        match *self {
            IonicModel::FitzHughNagumo { b, .. } => b,
            IonicModel::AlievPanfilov { .. } => 1.0,
            IonicModel::RogersMcCulloch { d, .. } => d,
            IonicModel::AllenCahn { .. } => 0.0,
            IonicModel::Custom(ref m) => m.g2,
        }
    }

    pub fn f1_prime(&self, u: f64) -> f64 {
        match *self {
            IonicModel::FitzHughNagumo { eta, a, .. } => eta * cubic_prime(u, a),
            IonicModel::AlievPanfilov { eta, k, a } => eta * k * cubic_prime(u, a),
            IonicModel::RogersMcCulloch { eta, b, a, .. } => eta * b * cubic_prime(u, a),
            IonicModel::AllenCahn { eta } => eta * (3.0 * u * u - 1.0),
            IonicModel::Custom(ref m) => numeric_derivative(&m.f1, u),
        }
    }

    pub fn f2_prime(&self, u: f64) -> f64 {
        match *self {
            IonicModel::FitzHughNagumo { .. } | IonicModel::AllenCahn { .. } => 0.0,
            IonicModel::AlievPanfilov { eta, .. } | IonicModel::RogersMcCulloch { eta, .. } => eta,
            IonicModel::Custom(ref m) => numeric_derivative(&m.f2, u),
        }
    }

    pub fn g1_prime(&self, u: f64) -> f64 {
        match *self {
            IonicModel::FitzHughNagumo { c, .. } | IonicModel::RogersMcCulloch { c, .. } => -c,
            IonicModel::AlievPanfilov { k, a, .. } => k * (2.0 * u - 1.0 - a),
            IonicModel::AllenCahn { .. } => 0.0,
            IonicModel::Custom(ref m) => numeric_derivative(&m.g1, u),
        }
    }

    pub fn f(&self, u: f64, w: f64) -> f64 {
        self.f1(u) + self.f2(u) * w
    }

    pub fn g(&self, u: f64, w: f64) -> f64 {
        self.g1(u) + self.g2() * w
    }

    /// `L` with `u·f₁(u) ~ L·u⁴` as `|u| → ∞`.
    pub fn quartic_lead(&self) -> f64 {
        match *self {
            IonicModel::FitzHughNagumo { eta, .. } | IonicModel::AllenCahn { eta } => eta,
            IonicModel::AlievPanfilov { eta, k, .. } => eta * k,
            IonicModel::RogersMcCulloch { eta, b, .. } => eta * b,
            IonicModel::Custom(ref m) => m.quartic_lead.unwrap_or_else(|| {
                let r = 1e3;
                let right = (m.f1)(r) / (r * r * r);
                let left = (m.f1)(-r) / (-r * r * r);
                right.min(left)
            }),
        }
    }

    /// True when `w` feeds back into `u`, i.e. the system does not decouple.
    pub fn is_coupled(&self) -> bool {
        !matches!(self, IonicModel::AllenCahn { .. })
    }
}

pub fn eval_f(model: &IonicModel, u: f64, w: f64) -> f64 {
    model.f(u, w)
}

pub fn eval_g(model: &IonicModel, u: f64, w: f64) -> f64 {
    model.g(u, w)
}

/// Symmetric sampling box `|u| ≤ u_max`, `|w| ≤ w_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleBox {
    pub u_max: f64,
    pub w_max: f64,
}

impl Default for SampleBox {
    fn default() -> Self {
        SampleBox { u_max: 10.0, w_max: 10.0 }
    }
}

impl SampleBox {
    fn check(&self) -> Result<()> {
        if self.u_max > 0.0 && self.w_max >= 0.0 && self.u_max.is_finite() && self.w_max.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("empty or unbounded sampling box {self:?}")))
        }
    }

    fn doubled(&self) -> SampleBox {
        SampleBox { u_max: 2.0 * self.u_max, w_max: 2.0 * self.w_max }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let n = n.max(2);
    (0..n).map(move |i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
}

/// Golden-section maximisation on `[lo, hi]`.
fn golden_max(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if (hi - lo).abs() <= 1e-14 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Grid search on `[lo, hi]` followed by golden refinement around the best
/// node. Returns `(argmax, max)`.
fn max_1d(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let xs: Vec<f64> = linspace(lo, hi, n).collect();
    let mut best = (xs[0], f(xs[0]));
    let mut best_i = 0;
    for (i, &x) in xs.iter().enumerate() {
        let v = f(x);
        if v > best.1 {
            best = (x, v);
            best_i = i;
        }
    }
    let a = xs[best_i.saturating_sub(1)];
    let b = xs[(best_i + 1).min(xs.len() - 1)];
    if b > a {
        let r = golden_max(f, a, b);
        if r.1 > best.1 {
            best = r;
        }
    }
    best
}

/// Maximises `f` over the rectangle `[u0,u1]×[w0,w1]`: grid scan, exact
/// refinement along the four edges, and compass search from the best
/// interior nodes.
fn max_rect(f: &dyn Fn(f64, f64) -> f64, u: (f64, f64), w: (f64, f64), n: usize) -> (f64, (f64, f64)) {
    let mut best = (f64::NEG_INFINITY, (u.0, w.0));
    let mut candidates: Vec<(f64, (f64, f64))> = Vec::new();
    for wi in linspace(w.0, w.1, n) {
        for ui in linspace(u.0, u.1, n) {
            let v = f(ui, wi);
            if v.is_nan() {
                continue;
            }
            candidates.push((v, (ui, wi)));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
    if let Some(&c) = candidates.first() {
        best = c;
    }
    for &wb in &[w.0, w.1] {
        let (x, v) = max_1d(&|x| f(x, wb), u.0, u.1, n);
        if v > best.0 {
            best = (v, (x, wb));
        }
    }
    for &ub in &[u.0, u.1] {
        let (y, v) = max_1d(&|y| f(ub, y), w.0, w.1, n);
        if v > best.0 {
            best = (v, (ub, y));
        }
    }
    let step0 = ((u.1 - u.0).max(w.1 - w.0)) / n.max(2) as f64;
    for &(v0, p0) in candidates.iter().take(4) {
        let r = compass(f, p0, v0, step0, |x, y| x >= u.0 && x <= u.1 && y >= w.0 && y <= w.1);
        if r.0 > best.0 {
            best = r;
        }
    }
    best
}

fn compass(
    f: &dyn Fn(f64, f64) -> f64,
    mut p: (f64, f64),
    mut v: f64,
    mut step: f64,
    inside: impl Fn(f64, f64) -> bool,
) -> (f64, (f64, f64)) {
    let dirs = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)];
    let scale = 1.0 + p.0.abs().max(p.1.abs());
    while step > 1e-13 * scale {
        let mut moved = false;
        for (dx, dy) in dirs {
            let q = (p.0 + dx * step, p.1 + dy * step);
            if !inside(q.0, q.1) {
                continue;
            }
            let vq = f(q.0, q.1);
            if vq > v {
                p = q;
                v = vq;
                moved = true;
                break;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (v, p)
}

/// Fitted constants of the growth condition:
/// `|f₁| ≤ c₁ + c₂|u|³`, `|f₂| ≤ c₃ + c₄|u|`, `|g₁| ≤ c₅ + c₆|u|²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthConstants {
    pub c: [f64; 6],
}

const CERT_SLACK: f64 = 1e-12;

fn pad(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * (1.0 + CERT_SLACK) + CERT_SLACK
    }
}

/// `(c_low, c_high)` with `|h(u)| ≤ c_low + c_high|u|^p` on `|u| ≤ u_max`.
/// `c_low` is the sup on `|u| ≤ 1`; `c_high` the sup of the excess ratio
/// beyond.
fn fit_growth_pair(h: &dyn Fn(f64) -> f64, p: f64, u_max: f64, n: usize, label: &str) -> Result<(f64, f64)> {
    let inner = u_max.min(1.0);
    let abs_h = |u: f64| h(u).abs();
    let c_low = pad(max_1d(&abs_h, -inner, inner, n).1);
    let mut c_high = 0.0f64;
    if u_max > 1.0 {
        let ratio = |u: f64| (h(u).abs() - c_low).max(0.0) / u.abs().powf(p);
        c_high = max_1d(&ratio, 1.0, u_max, n).1.max(max_1d(&ratio, -u_max, -1.0, n).1);
        c_high = pad(c_high);
    }
    let r = u_max.max(1e3);
    for sign in [1.0, -1.0] {
        let far = h(sign * r).abs();
        let half = h(sign * r / 2.0).abs();
        let exponent = if far == 0.0 {
            0.0
        } else if half == 0.0 || !far.is_finite() {
            f64::INFINITY
        } else {
            (far / half).ln() / std::f64::consts::LN_2
        };
        if !(exponent <= p + 0.25) {
            return Err(Error::GrowthViolation(format!(
                "{label} grows like |u|^{exponent:.3}, allowed |u|^{p}"
            )));
        }
    }
    if !(c_low.is_finite() && c_high.is_finite()) {
        return Err(Error::GrowthViolation(format!("{label} is unbounded on the box")));
    }
    Ok((c_low, c_high))
}

pub fn fit_condition_c1(model: &IonicModel, bx: SampleBox, n_samples: usize) -> Result<GrowthConstants> {
    bx.check()?;
    let (c1, c2) = fit_growth_pair(&|u| model.f1(u), 3.0, bx.u_max, n_samples, "f1")?;
    let (c3, c4) = fit_growth_pair(&|u| model.f2(u), 1.0, bx.u_max, n_samples, "f2")?;
    let (c5, c6) = fit_growth_pair(&|u| model.g1(u), 2.0, bx.u_max, n_samples, "g1")?;
    Ok(GrowthConstants { c: [c1, c2, c3, c4, c5, c6] })
}

/// Outcome of the dissipativity fit `u·f + w·g ≥ a·u⁴ − b(u² + w²) − c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DissipativityFit {
    Fitted { a: f64, b: f64, c: f64 },
    Violation { u: f64, w: f64, lead: f64 },
}

impl DissipativityFit {
    pub fn constants(&self) -> Option<(f64, f64, f64)> {
        match *self {
            DissipativityFit::Fitted { a, b, c } => Some((a, b, c)),
            DissipativityFit::Violation { .. } => None,
        }
    }
}

/// `uf + wg − (a u⁴ − b(u²+w²) − c)`; non-negative where the inequality holds.
pub fn dissipativity_residual(model: &IonicModel, (a, b, c): (f64, f64, f64), u: f64, w: f64) -> f64 {
    u * model.f(u, w) + w * model.g(u, w) - (a * u.powi(4) - b * (u * u + w * w) - c)
}

/// Fixes `a` at half the quartic lead of `u·f₁` and takes the smallest `c`
/// covering the deficit on `u² + w² ≤ 1` and the smallest `b` covering the
/// remaining deficit per unit `u² + w²` outside.
pub fn fit_condition_c3(model: &IonicModel, bx: SampleBox, n_samples: usize) -> Result<DissipativityFit> {
    bx.check()?;
    let lead = model.quartic_lead();
    if !(lead > 0.0) {
        return Ok(DissipativityFit::Violation { u: bx.u_max, w: 0.0, lead });
    }
    let a = 0.5 * lead;
    let deficit = |u: f64, w: f64| a * u.powi(4) - u * model.f(u, w) - w * model.g(u, w);

    // c: sup of the deficit on the unit disc ∩ box
    let ru = bx.u_max.min(1.0);
    let rw = bx.w_max.min(1.0);
    let in_disc = |u: f64, w: f64| u * u + w * w <= 1.0 && u.abs() <= ru && w.abs() <= rw;
    let mut c = 0.0f64;
    let mut starts: Vec<(f64, (f64, f64))> = Vec::new();
    for wi in linspace(-rw, rw, n_samples) {
        for ui in linspace(-ru, ru, n_samples) {
            if in_disc(ui, wi) {
                starts.push((deficit(ui, wi), (ui, wi)));
            }
        }
    }
    starts.sort_by(|x, y| y.0.total_cmp(&x.0));
    if let Some(s) = starts.first() {
        c = c.max(s.0);
    }
    let step0 = 2.0 / n_samples.max(2) as f64;
    for &(v0, p0) in starts.iter().take(4) {
        c = c.max(compass(&deficit, p0, v0, step0, in_disc).0);
    }
    // boundary of the disc (clipped by the box when the box is thinner)
    let on_circle = |theta: f64| {
        let (u, w) = (theta.cos(), theta.sin());
        if u.abs() <= ru && w.abs() <= rw {
            deficit(u, w)
        } else {
            f64::NEG_INFINITY
        }
    };
    c = c.max(max_1d(&on_circle, -std::f64::consts::PI, std::f64::consts::PI, 4 * n_samples).1);
    if rw < 1.0 {
        for wb in [-rw, rw] {
            let lim = (1.0 - wb * wb).max(0.0).sqrt().min(ru);
            c = c.max(max_1d(&|u| deficit(u, wb), -lim, lim, n_samples).1);
        }
    }
    let c = pad(c);

    // b: sup of (deficit − c)/(u² + w²) outside the unit disc
    let ratio = |u: f64, w: f64| {
        let s = u * u + w * w;
        if s <= 1.0 {
            0.0
        } else {
            (deficit(u, w) - c).max(0.0) / s
        }
    };
    let b = pad(max_rect(&ratio, (-bx.u_max, bx.u_max), (-bx.w_max, bx.w_max), n_samples).0.max(0.0));
    Ok(DissipativityFit::Fitted { a, b, c })
}

/// Monotonicity fit `Δf·Δu + Δg·Δw ≥ c₁Δu² + c₂Δw²`, equivalently
/// `(𝓕(p₁) − 𝓕(p₂))·(p₁ − p₂) ≤ −c₁Δu² − c₂Δw²` with `𝓕 = (−f + I, −g)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicityFit {
    pub c1: f64,
    pub c2: f64,
    /// Smallest pair gap `Q − c₁Δu² − c₂Δw²` over the random pairs.
    pub min_pair_gap: f64,
    pub certified: bool,
    /// Present when the constants keep degrading as the box grows, i.e.
    /// the Jacobian is unbounded and no global constants exist.
    pub violation: Option<MonotonicityViolation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicityViolation {
    pub c1_doubled_box: f64,
    pub c2_doubled_box: f64,
    pub u: f64,
    pub w: f64,
}

/// `Q − c₁Δu² − c₂Δw²` for one pair.
pub fn monotonicity_gap(model: &IonicModel, (c1, c2): (f64, f64), p1: (f64, f64), p2: (f64, f64)) -> f64 {
    let du = p1.0 - p2.0;
    let dw = p1.1 - p2.1;
    let q = (model.f(p1.0, p1.1) - model.f(p2.0, p2.1)) * du + (model.g(p1.0, p1.1) - model.g(p2.0, p2.1)) * dw;
    q - c1 * du * du - c2 * dw * dw
}

/// Diagonal-dominance bounds on the symmetrised Jacobian of `(f, g)`:
/// `c₁ = min(∂f/∂u − |B|)`, `c₂ = min(∂g/∂w − |B|)`, `B = (∂f/∂w + ∂g/∂u)/2`.
fn jacobian_bounds(model: &IonicModel, bx: SampleBox, n: usize) -> (f64, f64, (f64, f64)) {
    let cross = |u: f64| 0.5 * (model.f2(u) + model.g1_prime(u));
    let d1 = |u: f64, w: f64| -(model.f1_prime(u) + model.f2_prime(u) * w - cross(u).abs());
    let d2 = |u: f64, _w: f64| -(model.g2() - cross(u).abs());
    let u = (-bx.u_max, bx.u_max);
    let w = (-bx.w_max, bx.w_max);
    let (m1, p1) = max_rect(&d1, u, w, n);
    let (m2, _) = max_rect(&d2, u, w, n);
    (-m1, -m2, p1)
}

pub fn fit_monotonicity(model: &IonicModel, bx: SampleBox, n_pairs: usize, seed: u64) -> Result<MonotonicityFit> {
    bx.check()?;
    let n = 201;
    let (c1, c2, _) = jacobian_bounds(model, bx, n);
    let (d1, d2, at) = jacobian_bounds(model, bx.doubled(), n);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_gap = f64::INFINITY;
    for _ in 0..n_pairs {
        let p1 = (rng.random_range(-bx.u_max..=bx.u_max), rng.random_range(-bx.w_max..=bx.w_max));
        let p2 = (rng.random_range(-bx.u_max..=bx.u_max), rng.random_range(-bx.w_max..=bx.w_max));
        min_gap = min_gap.min(monotonicity_gap(model, (c1, c2), p1, p2));
    }
    if n_pairs == 0 {
        min_gap = 0.0;
    }
    let degraded = |c: f64, d: f64| d < c - 1e-9 * (1.0 + c.abs());
    let violation = (degraded(c1, d1) || degraded(c2, d2)).then_some(MonotonicityViolation {
        c1_doubled_box: d1,
        c2_doubled_box: d2,
        u: at.0,
        w: at.1,
    });
    let scale = model.f(bx.u_max, bx.w_max).abs().max(1.0) * bx.u_max.max(bx.w_max);
    Ok(MonotonicityFit {
        c1,
        c2,
        min_pair_gap: min_gap,
        certified: violation.is_none() && min_gap >= -1e-9 * scale,
        violation,
    })
}

/// Verdict on the coefficient condition `c₂ ≥ 0`, `c₁ ≥ −α/C_p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoefficientCondition {
    pub satisfied: bool,
    /// `α/C_p − requirement`.
    pub margin: f64,
    pub requirement: f64,
    pub threshold: f64,
}

/// Closed forms for Allen–Cahn (`η ≤ α/C_p`) and FitzHugh–Nagumo
/// (`((1+a)²/3 − a)η + |η−d|/2 ≤ α/C_p` and `|η−d|/2 ≤ k`); fitted
/// monotonicity constants on the default box otherwise.
pub fn check_coefficient_condition(model: &IonicModel, alpha: f64, poincare_cp: f64) -> Result<CoefficientCondition> {
    if !(alpha > 0.0 && poincare_cp > 0.0) {
        return Err(Error::invalid(format!(
            "need alpha > 0 and poincare_cp > 0, got {alpha}, {poincare_cp}"
        )));
    }
    let threshold = alpha / poincare_cp;
    let (requirement, extra) = match *model {
        IonicModel::AllenCahn { eta } => (eta, true),
        IonicModel::FitzHughNagumo { eta, a, b: k, c: d } => {
            let half_gap = 0.5 * (eta - d).abs();
            (((1.0 + a).powi(2) / 3.0 - a) * eta + half_gap, half_gap <= k)
        }
        _ => {
            let fit = fit_monotonicity(model, SampleBox::default(), 1000, 0)?;
            (-fit.c1, fit.certified && fit.c2 >= 0.0)
        }
    };
    let margin = threshold - requirement;
    Ok(CoefficientCondition {
        satisfied: extra && margin >= 0.0,
        margin,
        requirement,
        threshold,
    })
}

/// Everything the model checker reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub model: String,
    pub sampled_box: SampleBox,
    pub c1_constants: GrowthConstants,
    pub c3_constants: DissipativityFit,
    /// Example-style closed-form flag for the dissipativity condition:
    /// `|η−d|/2 ≤ k` for FitzHugh–Nagumo, the fit status otherwise.
    pub c3_criterion: bool,
    pub monotonicity_constants: MonotonicityFit,
    pub coefficient_condition: Option<CoefficientCondition>,
    pub notes: Vec<String>,
}

pub const DEFAULT_SAMPLES: usize = 401;
pub const DEFAULT_PAIRS: usize = 10_000;

/// Runs every fit; `constants = Some((α, C_p))` also evaluates the
/// coefficient condition.
pub fn check_model(model: &IonicModel, bx: SampleBox, constants: Option<(f64, f64)>) -> Result<ConditionReport> {
    model.validate()?;
    let c1 = fit_condition_c1(model, bx, DEFAULT_SAMPLES)?;
    let c3 = fit_condition_c3(model, bx, DEFAULT_SAMPLES)?;
    let mono = fit_monotonicity(model, bx, DEFAULT_PAIRS, 0)?;
    let c3_criterion = match *model {
        IonicModel::FitzHughNagumo { eta, b: k, c: d, .. } => 0.5 * (eta - d).abs() <= k,
        _ => c3.constants().is_some(),
    };
    let coefficient_condition = constants
        .map(|(alpha, cp)| check_coefficient_condition(model, alpha, cp))
        .transpose()?;
    let mut notes = Vec::new();
    if let IonicModel::AlievPanfilov { .. } = model {
        notes.push(
            "g(u,w) = k u (u-1-a) + w is taken as written: unit relaxation rate on w, no separate time-scale parameter"
                .to_string(),
        );
    }
    if let IonicModel::FitzHughNagumo { .. } = model {
        notes.push("g = b w - c u is checked under the names k = b, d = c".to_string());
    }
    if let Some(v) = mono.violation {
        notes.push(format!(
            "monotonicity constants degrade on the doubled box (c1 {:.4e}, c2 {:.4e}): the Jacobian is unbounded",
            v.c1_doubled_box, v.c2_doubled_box
        ));
    }
    Ok(ConditionReport {
        model: model.name().to_string(),
        sampled_box: bx,
        c1_constants: c1,
        c3_constants: c3,
        c3_criterion,
        monotonicity_constants: mono,
        coefficient_condition,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fhn(eta: f64, a: f64, k: f64, d: f64) -> IonicModel {
        IonicModel::FitzHughNagumo { eta, a, b: k, c: d }
    }

    fn named() -> Vec<IonicModel> {
        vec![
            fhn(1.0, 0.1, 1.0, 1.0),
            IonicModel::AlievPanfilov { eta: 1.0, k: 8.0, a: 0.15 },
            IonicModel::RogersMcCulloch { eta: 1.0, b: 1.0, a: 0.13, c: 0.26, d: 0.1 },
            IonicModel::AllenCahn { eta: 1.0 },
        ]
    }

    // independent scalar evaluation of the textbook formulas
    fn reference_fg(m: &IonicModel, u: f64, w: f64) -> (f64, f64) {
        match *m {
            IonicModel::FitzHughNagumo { eta, a, b, c } => (eta * (u * (u - a) * (u - 1.0) + w), b * w - c * u),
            IonicModel::AlievPanfilov { eta, k, a } => {
                (eta * (k * u * (u - a) * (u - 1.0) + w * u), k * u * (u - 1.0 - a) + w)
            }
            IonicModel::RogersMcCulloch { eta, b, a, c, d } => {
                (eta * (b * u * (u - a) * (u - 1.0) + w * u), -(c * u - d * w))
            }
            IonicModel::AllenCahn { eta } => (eta * (u * u * u - u), 0.0),
            IonicModel::Custom(_) => unreachable!(),
        }
    }

    #[test]
    fn pointwise_examples() {
        let m = fhn(1.0, 0.5, 1.0, 1.0);
        assert_eq!(eval_f(&m, 0.0, 0.0), 0.0);
        assert_eq!(eval_f(&m, 1.0, 0.0), 0.0);
        assert!((eval_f(&m, 2.0, 1.0) - 4.0).abs() < 1e-15);
        let ac = IonicModel::AllenCahn { eta: 1.0 };
        for u in [-1.0, 0.0, 1.0] {
            assert_eq!(eval_f(&ac, u, 3.0), 0.0);
        }
    }

    #[test]
    fn decomposition_reproduces_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in named() {
            for _ in 0..100_000 {
                let u: f64 = rng.random_range(-20.0..20.0);
                let w: f64 = rng.random_range(-20.0..20.0);
                let (f, g) = reference_fg(&m, u, w);
                let scale = 1.0 + f.abs() + g.abs();
                assert!((m.f(u, w) - f).abs() <= 1e-12 * scale);
                assert!((m.g(u, w) - g).abs() <= 1e-12 * scale);
                assert_eq!(m.f(u, w), m.f1(u) + m.f2(u) * w);
                assert_eq!(m.g(u, w), m.g1(u) + m.g2() * w);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(fhn(1.0, 1.2, 1.0, 1.0).validate().is_err());
        assert!(fhn(-1.0, 0.2, 1.0, 1.0).validate().is_err());
        assert!(IonicModel::AllenCahn { eta: 0.0 }.validate().is_err());
        for m in named() {
            m.validate().unwrap();
        }
    }

    #[test]
    fn growth_constants_examples() {
        let ac = IonicModel::AllenCahn { eta: 1.0 };
        let c = fit_condition_c1(&ac, SampleBox::default(), 401).unwrap().c;
        // dense-grid max-ratio oracle
        let c_low = (0..=20_000)
            .map(|i| -1.0 + 2.0 * i as f64 / 20_000.0)
            .map(|u: f64| (u * u * u - u).abs())
            .fold(0.0, f64::max);
        let c_high = (0..=90_000)
            .map(|i| 1.0 + 9.0 * i as f64 / 90_000.0)
            .map(|u: f64| ((u * u * u - u).abs() - c_low).max(0.0) / (u * u * u))
            .fold(0.0, f64::max);
        assert!((c[0] - c_low).abs() < 1e-8);
        assert!((c[1] - c_high).abs() < 1e-8);
        assert!((c[1] - 1.0).abs() < 0.05);

        let m = fhn(0.7, 0.2, 1.0, 1.0);
        let c = fit_condition_c1(&m, SampleBox::default(), 401).unwrap().c;
        assert_eq!(c[3], 0.0);
        assert!((c[2] - 0.7).abs() < 1e-10);

        let rm = IonicModel::RogersMcCulloch { eta: 1.0, b: 1.0, a: 0.13, c: 0.26, d: 0.1 };
        let c = fit_condition_c1(&rm, SampleBox { u_max: 1.0, w_max: 1.0 }, 401).unwrap().c;
        assert_eq!(c[5], 0.0);
        assert!((c[4] - 0.26).abs() < 1e-10);
    }

    #[test]
    fn super_cubic_custom_is_rejected() {
        let m = IonicModel::Custom(CustomModel {
            f1: Arc::new(|u| u.powi(5)),
            f2: Arc::new(|_| 0.0),
            g1: Arc::new(|_| 0.0),
            g2: 0.0,
            quartic_lead: None,
        });
        assert!(matches!(
            fit_condition_c1(&m, SampleBox::default(), 101),
            Err(Error::GrowthViolation(_))
        ));
    }

    #[test]
    fn fitted_constants_are_certificates_on_denser_grid() {
        let bx = SampleBox::default();
        for m in named() {
            let g = fit_condition_c1(&m, bx, 201).unwrap().c;
            let (a, b, c) = fit_condition_c3(&m, bx, 201).unwrap().constants().unwrap();
            let n = 2001;
            for i in 0..n {
                let u = -bx.u_max + 2.0 * bx.u_max * i as f64 / (n - 1) as f64;
                let tol = |x: f64| 1e-9 * (1.0 + x.abs());
                assert!(m.f1(u).abs() <= g[0] + g[1] * u.abs().powi(3) + tol(m.f1(u)));
                assert!(m.f2(u).abs() <= g[2] + g[3] * u.abs() + tol(m.f2(u)));
                assert!(m.g1(u).abs() <= g[4] + g[5] * u * u + tol(m.g1(u)));
            }
            let n2 = 1001;
            for i in 0..n2 {
                for j in 0..n2 {
                    let u = -bx.u_max + 2.0 * bx.u_max * i as f64 / (n2 - 1) as f64;
                    let w = -bx.w_max + 2.0 * bx.w_max * j as f64 / (n2 - 1) as f64;
                    let r = dissipativity_residual(&m, (a, b, c), u, w);
                    let scale = 1.0 + a * u.powi(4) + b * (u * u + w * w);
                    assert!(r >= -1e-9 * scale, "{} at ({u},{w}): {r}", m.name());
                }
            }
        }
    }

    #[test]
    fn allen_cahn_dissipativity_closed_form() {
        let ac = IonicModel::AllenCahn { eta: 2.0 };
        let (a, b, _) = fit_condition_c3(&ac, SampleBox::default(), 401).unwrap().constants().unwrap();
        assert_eq!(a, 1.0);
        // uf = ηu⁴ − ηu² ≥ (η/2)u⁴ − ηu²: b never needs to exceed η
        assert!(b <= 2.0 + 1e-9);
    }

    #[test]
    fn fhn_cross_term_inflates_b() {
        let bx = SampleBox::default();
        let ok = fit_condition_c3(&fhn(1.0, 0.2, 1.0, 1.0), bx, 201).unwrap().constants().unwrap();
        let bad = fit_condition_c3(&fhn(1.0, 0.2, 0.1, 5.0), bx, 201).unwrap().constants().unwrap();
        assert!(bad.1 > ok.1, "{bad:?} vs {ok:?}");
    }

    #[test]
    fn monotonicity_examples() {
        let ac = IonicModel::AllenCahn { eta: 1.0 };
        let fit = fit_monotonicity(&ac, SampleBox::default(), 5000, 3).unwrap();
        assert!(fit.c1 >= -1.0 - 1e-9 && fit.certified);
        assert!((fit.c1 + 1.0).abs() < 1e-9);

        let m = fhn(1.0, 0.3, 0.7, 1.0);
        let fit = fit_monotonicity(&m, SampleBox::default(), 5000, 3).unwrap();
        assert!(fit.c2 >= 0.7 && fit.certified);
        assert!(fit.min_pair_gap >= -1e-9);

        assert_eq!(monotonicity_gap(&m, (fit.c1, fit.c2), (0.3, 0.2), (0.3, 0.2)), 0.0);

        // Aliev–Panfilov: unbounded cross term
        let ap = IonicModel::AlievPanfilov { eta: 1.0, k: 8.0, a: 0.15 };
        let fit = fit_monotonicity(&ap, SampleBox::default(), 1000, 3).unwrap();
        assert!(fit.violation.is_some() && !fit.certified);
    }

    #[test]
    fn fhn_monotonicity_matches_closed_form() {
        for (eta, a, k, d) in [(1.0, 0.1, 1.0, 1.0), (0.5, 0.4, 2.0, 1.5), (2.0, 0.7, 3.0, 0.5)] {
            let fit = fit_monotonicity(&fhn(eta, a, k, d), SampleBox::default(), 100, 0).unwrap();
            let half_gap = 0.5f64 * (eta - d).abs();
            let c1 = -(((1.0 + a) * (1.0 + a) / 3.0 - a) * eta + half_gap);
            assert!((fit.c1 - c1).abs() < 1e-9, "{} vs {c1}", fit.c1);
            assert!((fit.c2 - (k - half_gap)).abs() < 1e-12);
        }
    }

    #[test]
    fn coefficient_condition_examples() {
        let r = check_coefficient_condition(&IonicModel::AllenCahn { eta: 0.5 }, 1.0, 1.0).unwrap();
        assert!(r.satisfied && (r.margin - 0.5).abs() < 1e-15);
        let r = check_coefficient_condition(&IonicModel::AllenCahn { eta: 2.0 }, 1.0, 1.0).unwrap();
        assert!(!r.satisfied);
        let r = check_coefficient_condition(&fhn(0.2, 0.5, 1e-3, 0.2), 1.0, 1.0).unwrap();
        assert!(r.satisfied);
        let r = check_coefficient_condition(&fhn(0.2, 0.5, 0.1, 1.0), 1.0, 1.0).unwrap();
        assert!(!r.satisfied);
        assert!(check_coefficient_condition(&fhn(0.2, 0.5, 0.1, 1.0), 0.0, 1.0).is_err());
    }

    #[test]
    fn report_for_named_models() {
        for m in named() {
            let r = check_model(&m, SampleBox::default(), Some((0.5, 1.0))).unwrap();
            assert!(r.c3_constants.constants().is_some());
            assert!(r.c3_criterion);
            assert!(r.c1_constants.c.iter().all(|c| *c >= 0.0 && c.is_finite()));
        }
        let r = check_model(&fhn(1.0, 0.2, 0.1, 5.0), SampleBox::default(), None).unwrap();
        assert!(!r.c3_criterion);
    }
}
