//! Genus-2 Riemann theta functions with characteristics.
//!
//! The series is summed over the lattice points inside an ellipsoid in the
//! `Im Ω` metric, centred where the Gaussian factor of the terms peaks. The
//! radius comes from a rigorous tail bound (see [`truncation_radius`]) so the
//! discarded terms sum to less than the requested absolute accuracy.
//! Derivatives in `z` are applied term by term.

use std::fmt;

use num_complex::Complex;
use num_rational::Rational64;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Largest total derivative order supported by the series evaluator.
pub const MAX_DERIV_ORDER: u8 = 12;

/// Smallest accepted absolute accuracy.
pub const EPS_FLOOR: f64 = 1e-14;

/// Default lower bound on the eigenvalues of `Im Ω`.
pub const DEFAULT_IM_FLOOR: f64 = 0.25;

/// Default largest admissible ellipsoid radius.
pub const DEFAULT_RADIUS_CAP: f64 = 40.0;

/// Default relative floor on `|θ(z)|` below which log-derivatives are refused.
pub const DEFAULT_DIVISOR_FLOOR: f64 = 1e-10;

/// Derivative order `(d1, d2)` with respect to `(z1, z2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u8; 2]", into = "[u8; 2]")]
pub struct MultiIndex {
    d: [u8; 2],
}

impl MultiIndex {
    pub const ZERO: MultiIndex = MultiIndex { d: [0, 0] };

    pub fn new(d1: u8, d2: u8) -> Result<Self> {
        if d1 as u16 + d2 as u16 > MAX_DERIV_ORDER as u16 {
            return Err(Error::InvalidInput(format!(
                "derivative order ({d1}, {d2}) exceeds {MAX_DERIV_ORDER}"
            )));
        }
        Ok(MultiIndex { d: [d1, d2] })
    }

    /// Unit index `e_j`, `j` in `{0, 1}`.
    pub fn unit(j: usize) -> Self {
        let mut d = [0, 0];
        d[j] = 1;
        MultiIndex { d }
    }

    pub fn d1(self) -> u8 {
        self.d[0]
    }

    pub fn d2(self) -> u8 {
        self.d[1]
    }

    pub fn get(self, j: usize) -> u8 {
        self.d[j]
    }

    pub fn total(self) -> usize {
        self.d[0] as usize + self.d[1] as usize
    }

    pub fn checked_add(self, other: MultiIndex) -> Result<Self> {
        MultiIndex::new(self.d[0] + other.d[0], self.d[1] + other.d[1])
    }

    pub fn bump(self, j: usize) -> Result<Self> {
        self.checked_add(MultiIndex::unit(j))
    }

    /// Componentwise `self - other`, if nonnegative.
    pub fn checked_sub(self, other: MultiIndex) -> Option<Self> {
        Some(MultiIndex {
            d: [
                self.d[0].checked_sub(other.d[0])?,
                self.d[1].checked_sub(other.d[1])?,
            ],
        })
    }

    /// All indices `γ ≤ self` componentwise, in lexicographic order.
    pub fn below(self) -> impl Iterator<Item = MultiIndex> {
        let [a, b] = self.d;
        (0..=a).flat_map(move |i| (0..=b).map(move |j| MultiIndex { d: [i, j] }))
    }

    /// All indices of total order at most `order`, lexicographic.
    pub fn up_to(order: usize) -> Vec<MultiIndex> {
        let mut out = Vec::new();
        for i in 0..=order {
            for j in 0..=(order - i) {
                out.push(MultiIndex {
                    d: [i as u8, j as u8],
                });
            }
        }
        out
    }

    /// Product of binomial coefficients `C(self, gamma)`.
    pub fn binomial(self, gamma: MultiIndex) -> f64 {
        binom(self.d[0], gamma.d[0]) * binom(self.d[1], gamma.d[1])
    }

    /// Expansion into a list of coordinate indices, e.g. `(2,1) -> [0,0,1]`.
    pub fn coordinates(self) -> Vec<usize> {
        let mut v = vec![0; self.d[0] as usize];
        v.extend(std::iter::repeat_n(1, self.d[1] as usize));
        v
    }

    /// Inverse of [`MultiIndex::coordinates`].
    pub fn from_coordinates(coords: &[usize]) -> Self {
        let mut d = [0u8; 2];
        for &c in coords {
            d[c] += 1;
        }
        MultiIndex { d }
    }
}

fn binom(n: u8, k: u8) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

impl TryFrom<[u8; 2]> for MultiIndex {
    type Error = Error;
    fn try_from(d: [u8; 2]) -> Result<Self> {
        MultiIndex::new(d[0], d[1])
    }
}

impl From<MultiIndex> for [u8; 2] {
    fn from(m: MultiIndex) -> Self {
        m.d
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.d[0], self.d[1])
    }
}

/// Real characteristic `[a, b]`, kept as exact rationals.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Characteristic {
    pub a: [Rational64; 2],
    pub b: [Rational64; 2],
}

impl Characteristic {
    pub fn zero() -> Self {
        let z = Rational64::zero();
        Characteristic {
            a: [z, z],
            b: [z, z],
        }
    }

    /// `[num / den, 0]`, the characteristics indexing sections of the
    /// `den`-th power of the polarization.
    pub fn section(num: [i64; 2], den: i64) -> Self {
        Characteristic {
            a: [Rational64::new(num[0], den), Rational64::new(num[1], den)],
            b: [Rational64::zero(), Rational64::zero()],
        }
    }

    pub fn new(a: [Rational64; 2], b: [Rational64; 2]) -> Self {
        Characteristic { a, b }
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|r| r.is_zero())
    }

    pub fn a_real<T: Real>(&self) -> [T; 2] {
        [ratio::<T>(&self.a[0]), ratio::<T>(&self.a[1])]
    }

    pub fn b_real<T: Real>(&self) -> [T; 2] {
        [ratio::<T>(&self.b[0]), ratio::<T>(&self.b[1])]
    }
}

fn ratio<T: Real>(r: &Rational64) -> T {
    T::from_i64(*r.numer()).unwrap() / T::from_i64(*r.denom()).unwrap()
}

/// Symmetric period matrix with positive definite imaginary part.
#[derive(Clone, Debug, PartialEq)]
pub struct RiemannMatrix<T: Real> {
    omega: [[Complex<T>; 2]; 2],
    im: [[T; 2]; 2],
    im_inv: [[T; 2]; 2],
    lambda_min: T,
    shortest: T,
    radius_cap: T,
}

impl<T: Real> RiemannMatrix<T> {
    pub fn new(omega: [[Complex<T>; 2]; 2]) -> Result<Self> {
        Self::with_floor(omega, T::lit(DEFAULT_IM_FLOOR))
    }

    /// Validates `omega`, requiring both eigenvalues of `Im Ω` to be at least
    /// `im_floor`.
    pub fn with_floor(omega: [[Complex<T>; 2]; 2], im_floor: T) -> Result<Self> {
        let entries = omega.iter().flatten();
        if entries
            .clone()
            .any(|w| !w.re.is_finite() || !w.im.is_finite())
        {
            return Err(Error::InvalidOmega("non-finite entry".into()));
        }
        let norm = entries.fold(T::zero(), |acc, w| acc.max(w.norm()));
        let sym_tol = T::lit(EPS_FLOOR).max(T::epsilon() * T::lit(4.0)) * norm.max(T::one());
        if (omega[0][1] - omega[1][0]).norm() > sym_tol {
            return Err(Error::InvalidOmega("matrix is not symmetric".into()));
        }
        let off = (omega[0][1] + omega[1][0]) * T::lit(0.5);
        let omega = [[omega[0][0], off], [off, omega[1][1]]];
        let im = [[omega[0][0].im, off.im], [off.im, omega[1][1].im]];
        let (lo, _) = sym_eigenvalues(&im);
        if !(lo >= im_floor) {
            return Err(Error::InvalidOmega(format!(
                "smallest eigenvalue of Im(Omega) is {:.4e}, below floor {:.4e}",
                lo.to_f64().unwrap_or(f64::NAN),
                im_floor.to_f64().unwrap_or(f64::NAN)
            )));
        }
        let det = im[0][0] * im[1][1] - im[0][1] * im[0][1];
        let im_inv = [
            [im[1][1] / det, -im[0][1] / det],
            [-im[0][1] / det, im[0][0] / det],
        ];
        let shortest = shortest_vector(&im, lo);
        Ok(RiemannMatrix {
            omega,
            im,
            im_inv,
            lambda_min: lo,
            shortest,
            radius_cap: T::lit(DEFAULT_RADIUS_CAP),
        })
    }

    pub fn with_radius_cap(mut self, cap: T) -> Self {
        self.radius_cap = cap;
        self
    }

    pub fn omega(&self) -> &[[Complex<T>; 2]; 2] {
        &self.omega
    }

    pub fn im(&self) -> &[[T; 2]; 2] {
        &self.im
    }

    pub fn im_inv(&self) -> &[[T; 2]; 2] {
        &self.im_inv
    }

    pub fn radius_cap(&self) -> T {
        self.radius_cap
    }

    /// `Ω m` for an integer vector `m`.
    pub fn apply(&self, m: [T; 2]) -> [Complex<T>; 2] {
        [
            self.omega[0][0] * m[0] + self.omega[0][1] * m[1],
            self.omega[1][0] * m[0] + self.omega[1][1] * m[1],
        ]
    }

    /// `⟨Ω u, v⟩` for complex vectors.
    pub fn quad(&self, u: &[Complex<T>; 2], v: &[Complex<T>; 2]) -> Complex<T> {
        let mut acc = Complex::zero();
        for i in 0..2 {
            for j in 0..2 {
                acc = acc + u[i] * self.omega[i][j] * v[j];
            }
        }
        acc
    }

    /// The same lattice scaled by a positive integer, `s Ω`.
    pub fn scaled(&self, s: u32) -> Self {
        let f = T::from_u32(s).unwrap();
        let omega = self.omega.map(|row| row.map(|w| w * f));
        let im = self.im.map(|row| row.map(|w| w * f));
        let im_inv = self.im_inv.map(|row| row.map(|w| w / f));
        RiemannMatrix {
            omega,
            im,
            im_inv,
            lambda_min: self.lambda_min * f,
            shortest: self.shortest * f.sqrt(),
            radius_cap: self.radius_cap,
        }
    }

    /// `(Im Ω)^{-1} y`.
    pub fn im_solve(&self, y: [T; 2]) -> [T; 2] {
        [
            self.im_inv[0][0] * y[0] + self.im_inv[0][1] * y[1],
            self.im_inv[1][0] * y[0] + self.im_inv[1][1] * y[1],
        ]
    }

    fn im_quad(&self, u: [T; 2]) -> T {
        self.im[0][0] * u[0] * u[0]
            + T::lit(2.0) * self.im[0][1] * u[0] * u[1]
            + self.im[1][1] * u[1] * u[1]
    }
}

impl RiemannMatrix<f64> {
    /// Entries as `[re, im]` pairs, row major.
    pub fn to_pairs(&self) -> [[[f64; 2]; 2]; 2] {
        self.omega.map(|row| row.map(|w| [w.re, w.im]))
    }

    pub fn from_pairs(p: [[[f64; 2]; 2]; 2]) -> Result<Self> {
        Self::new(p.map(|row| row.map(|w| Complex::new(w[0], w[1]))))
    }
}

fn sym_eigenvalues<T: Real>(m: &[[T; 2]; 2]) -> (T, T) {
    let half = T::lit(0.5);
    let mean = (m[0][0] + m[1][1]) * half;
    let diff = (m[0][0] - m[1][1]) * half;
    let rad = (diff * diff + m[0][1] * m[0][1]).sqrt();
    (mean - rad, mean + rad)
}

/// Length of the shortest nonzero lattice vector in the `Im Ω` metric.
fn shortest_vector<T: Real>(im: &[[T; 2]; 2], lambda_min: T) -> T {
    let quad = |n: [T; 2]| {
        im[0][0] * n[0] * n[0] + T::lit(2.0) * im[0][1] * n[0] * n[1] + im[1][1] * n[1] * n[1]
    };
    let mut best = quad([T::one(), T::zero()])
        .min(quad([T::zero(), T::one()]))
        .sqrt();
    // any vector shorter than `best` has Euclidean length below best / sqrt(lambda_min)
    let bound = (best / lambda_min.sqrt())
        .ceil()
        .to_i64()
        .unwrap_or(1)
        .max(1);
    for i in -bound..=bound {
        for j in -bound..=bound {
            if i == 0 && j == 0 {
                continue;
            }
            let q = quad([T::from_i64(i).unwrap(), T::from_i64(j).unwrap()]).sqrt();
            if q < best {
                best = q;
            }
        }
    }
    best
}

/// Magnitude of the largest term of the theta series at `Im z`,
/// `exp(π ⟨Im z, (Im Ω)^{-1} Im z⟩)`; the natural size of `θ(z)`.
pub fn theta_scale<T: Real>(omega: &RiemannMatrix<T>, im_z: [T; 2]) -> T {
    let c = omega.im_solve(im_z);
    (T::PI() * omega.im_quad(c)).exp()
}

/// Upper bound on the absolute tail of the (derivative) theta series outside
/// the ellipsoid of radius `r`.
fn tail_bound<T: Real>(omega: &RiemannMatrix<T>, c: [T; 2], order: usize, r: T) -> T {
    let pi = T::PI();
    let two = T::lit(2.0);
    let rho = omega.shortest;
    let c_norm = omega.im_quad(c).sqrt();
    let prefactor = (pi * omega.im_quad(c)).exp();
    let sqrt_lmin = omega.lambda_min.sqrt();
    let mut total = T::zero();
    for k in 0..200 {
        let lo = r + T::from_usize(k).unwrap();
        let hi = lo + T::one();
        // disjoint discs of radius rho/2 around each lattice point in the shell
        let outer = hi + rho / two;
        let inner = (lo - rho / two).max(T::zero());
        let count = T::lit(4.0) * (outer * outer - inner * inner) / (rho * rho);
        let poly = (two * pi * (hi + c_norm) / sqrt_lmin)
            .max(T::one())
            .powi(order as i32);
        let term = count * (-pi * lo * lo).exp() * poly;
        total = total + term;
        if term <= total * T::lit(1e-20) || term.is_zero() {
            break;
        }
    }
    prefactor * total
}

/// Radius `R` of the summation ellipsoid `‖n − center‖_{Im Ω} ≤ R` such that
/// the absolute tail of the series for derivative order `d` is below `eps`.
///
/// The value is the smallest point of a 0.01 grid beyond which the tail
/// bound stays below `eps`, so it is monotone in both `eps` and `|d|`.
pub fn truncation_radius<T: Real>(
    omega: &RiemannMatrix<T>,
    im_z: [T; 2],
    d: MultiIndex,
    eps: T,
) -> Result<T> {
    check_eps(eps)?;
    let c = omega.im_solve(im_z);
    let order = d.total();
    let step = T::lit(0.01);
    let cap = omega.radius_cap;
    let steps = (cap / step).ceil().to_usize().unwrap_or(0);
    if tail_bound(omega, c, order, cap) >= eps {
        let mut r = cap;
        while tail_bound(omega, c, order, r) >= eps && r < cap * T::lit(16.0) {
            r = r * T::lit(1.25);
        }
        return Err(Error::NonConvergent {
            radius: r.to_f64().unwrap_or(f64::INFINITY),
            cap: cap.to_f64().unwrap_or(f64::NAN),
        });
    }
    // past `start` the bound is strictly decreasing in r
    let start_idx = ((T::lit(2.0) + (T::from_usize(order).unwrap() / T::PI()).sqrt()) / step)
        .ceil()
        .to_usize()
        .unwrap()
        .min(steps);
    let at = |k: usize| tail_bound(omega, c, order, step * T::from_usize(k).unwrap());
    let idx = if at(start_idx) < eps {
        let mut k = start_idx;
        while k > 0 && at(k - 1) < eps {
            k -= 1;
        }
        k
    } else {
        let (mut lo, mut hi) = (start_idx, steps);
        while hi > lo + 1 {
            let mid = (lo + hi) / 2;
            if at(mid) < eps {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };
    Ok(step * T::from_usize(idx).unwrap())
}

fn check_eps<T: Real>(eps: T) -> Result<()> {
    if !(eps >= T::lit(EPS_FLOOR)) || !eps.is_finite() {
        return Err(Error::InvalidInput(format!(
            "accuracy {:e} below floor {EPS_FLOOR:e}",
            eps.to_f64().unwrap_or(f64::NAN)
        )));
    }
    Ok(())
}

/// Lattice points `n` with `‖n − center‖_{Im Ω} ≤ r`, in lexicographic order.
fn ellipsoid_points<T: Real>(omega: &RiemannMatrix<T>, center: [T; 2], r: T) -> Vec<[i64; 2]> {
    let im = omega.im;
    let det = im[0][0] * im[1][1] - im[0][1] * im[0][1];
    let width = r * (im[1][1] / det).sqrt();
    let lo = (center[0] - width).ceil().to_i64().unwrap();
    let hi = (center[0] + width).floor().to_i64().unwrap();
    let mut pts = Vec::new();
    for n1 in lo..=hi {
        let u1 = T::from_i64(n1).unwrap() - center[0];
        let rem = r * r - det / im[1][1] * u1 * u1;
        if rem < T::zero() {
            continue;
        }
        let half = (rem / im[1][1]).sqrt();
        let mid = center[1] - im[0][1] * u1 / im[1][1];
        let a = (mid - half).ceil().to_i64().unwrap();
        let b = (mid + half).floor().to_i64().unwrap();
        for n2 in a..=b {
            pts.push([n1, n2]);
        }
    }
    pts
}

/// Number of terms the series at `im_z` would sum; exposed for diagnostics.
pub fn term_count<T: Real>(
    omega: &RiemannMatrix<T>,
    im_z: [T; 2],
    ch: &Characteristic,
    d: MultiIndex,
    eps: T,
) -> Result<usize> {
    let r = truncation_radius(omega, im_z, d, eps)?;
    let a = ch.a_real::<T>();
    let c = omega.im_solve(im_z);
    Ok(ellipsoid_points(omega, [-a[0] - c[0], -a[1] - c[1]], r).len())
}

/// All partial derivatives `∂^d θ[ch](z, Ω)` with `|d| ≤ max_order`, indexed
/// in the order of [`MultiIndex::up_to`].
pub fn theta_jet<T: Real>(
    z: &[Complex<T>; 2],
    omega: &RiemannMatrix<T>,
    ch: &Characteristic,
    max_order: usize,
    eps: T,
) -> Result<Vec<Complex<T>>> {
    let indices = MultiIndex::up_to(max_order);
    let top = indices.last().copied().unwrap_or(MultiIndex::ZERO);
    let top = MultiIndex::new(top.total() as u8, 0)?;
    let im_z = [z[0].im, z[1].im];
    let r = truncation_radius(omega, im_z, top, eps)?;
    let a = ch.a_real::<T>();
    let b = ch.b_real::<T>();
    let c = omega.im_solve(im_z);
    let center = [-a[0] - c[0], -a[1] - c[1]];
    let pi = T::PI();
    let i = Complex::<T>::i();
    let zb = [z[0] + b[0], z[1] + b[1]];
    let mut out = vec![Complex::<T>::zero(); indices.len()];
    let mut pow1 = vec![Complex::<T>::zero(); max_order + 1];
    let mut pow2 = vec![Complex::<T>::zero(); max_order + 1];
    for n in ellipsoid_points(omega, center, r) {
        let w = [
            T::from_i64(n[0]).unwrap() + a[0],
            T::from_i64(n[1]).unwrap() + a[1],
        ];
        let wc = [Complex::from(w[0]), Complex::from(w[1])];
        let phase = i * pi * omega.quad(&wc, &wc) + i * (pi + pi) * (zb[0] * w[0] + zb[1] * w[1]);
        let term = phase.exp();
        let f1 = i * (pi + pi) * w[0];
        let f2 = i * (pi + pi) * w[1];
        pow1[0] = Complex::from(T::one());
        pow2[0] = Complex::from(T::one());
        for k in 1..=max_order {
            pow1[k] = pow1[k - 1] * f1;
            pow2[k] = pow2[k - 1] * f2;
        }
        for (slot, m) in out.iter_mut().zip(indices.iter()) {
            *slot = *slot + term * pow1[m.d1() as usize] * pow2[m.d2() as usize];
        }
    }
    Ok(out)
}

/// `∂^d θ[ch](z, Ω)` summed to absolute accuracy `eps`.
pub fn theta_eval<T: Real>(
    z: &[Complex<T>; 2],
    omega: &RiemannMatrix<T>,
    ch: &Characteristic,
    d: MultiIndex,
    eps: T,
) -> Result<Complex<T>> {
    let im_z = [z[0].im, z[1].im];
    let r = truncation_radius(omega, im_z, d, eps)?;
    let a = ch.a_real::<T>();
    let b = ch.b_real::<T>();
    let c = omega.im_solve(im_z);
    let center = [-a[0] - c[0], -a[1] - c[1]];
    let pi = T::PI();
    let i = Complex::<T>::i();
    let zb = [z[0] + b[0], z[1] + b[1]];
    let mut acc = Complex::<T>::zero();
    for n in ellipsoid_points(omega, center, r) {
        let w = [
            T::from_i64(n[0]).unwrap() + a[0],
            T::from_i64(n[1]).unwrap() + a[1],
        ];
        let wc = [Complex::from(w[0]), Complex::from(w[1])];
        let phase = i * pi * omega.quad(&wc, &wc) + i * (pi + pi) * (zb[0] * w[0] + zb[1] * w[1]);
        let mut term = phase.exp();
        for _ in 0..d.d1() {
            term = term * i * (pi + pi) * w[0];
        }
        for _ in 0..d.d2() {
            term = term * i * (pi + pi) * w[1];
        }
        acc = acc + term;
    }
    Ok(acc)
}

/// Riemann theta function `θ(z) = θ[0,0](z, Ω)` and its derivatives.
pub fn riemann_theta<T: Real>(
    z: &[Complex<T>; 2],
    omega: &RiemannMatrix<T>,
    d: MultiIndex,
    eps: T,
) -> Result<Complex<T>> {
    theta_eval(z, omega, &Characteristic::zero(), d, eps)
}

/// Logarithmic derivative `∂^d log θ(z)` for `1 ≤ |d| ≤ 3`, expanded exactly
/// through the quotient rule.
pub fn log_theta_deriv<T: Real>(
    z: &[Complex<T>; 2],
    omega: &RiemannMatrix<T>,
    d: MultiIndex,
    eps: T,
) -> Result<Complex<T>> {
    log_theta_deriv_with_floor(z, omega, d, eps, T::lit(DEFAULT_DIVISOR_FLOOR))
}

/// As [`log_theta_deriv`], refusing points with `|θ(z)| < floor · scale`.
pub fn log_theta_deriv_with_floor<T: Real>(
    z: &[Complex<T>; 2],
    omega: &RiemannMatrix<T>,
    d: MultiIndex,
    eps: T,
    floor: T,
) -> Result<Complex<T>> {
    let order = d.total();
    if !(1..=3).contains(&order) {
        return Err(Error::InvalidInput(format!(
            "log-derivative order {order} outside 1..=3"
        )));
    }
    let jet = theta_jet(z, omega, &Characteristic::zero(), order, eps)?;
    let scale = theta_scale(omega, [z[0].im, z[1].im]);
    log_derivative_from_jet(&jet, d, floor * scale)
}

/// Position of `m` in the ordering of [`MultiIndex::up_to`].
pub fn jet_index(m: MultiIndex, max_order: usize) -> usize {
    let (a, b) = (m.d1() as usize, m.d2() as usize);
    // rows i = 0..a each hold (max_order - i + 1) entries
    let before: usize = (0..a).map(|i| max_order - i + 1).sum();
    before + b
}

/// `∂^d log f` from the jet of `f`; `jet` must be ordered as
/// [`MultiIndex::up_to`] of an order at least `|d|`.
pub fn log_derivative_from_jet<T: Real>(
    jet: &[Complex<T>],
    d: MultiIndex,
    floor: T,
) -> Result<Complex<T>> {
    let max_order = jet_max_order(jet.len());
    let at = |coords: &[usize]| jet[jet_index(MultiIndex::from_coordinates(coords), max_order)];
    let t = jet[0];
    if t.norm() < floor {
        return Err(Error::OnDivisor {
            value: t.norm().to_f64().unwrap_or(f64::NAN),
            floor: floor.to_f64().unwrap_or(f64::NAN),
        });
    }
    let idx = d.coordinates();
    let two = T::lit(2.0);
    let val = match idx.as_slice() {
        [i] => at(&[*i]) / t,
        [i, j] => at(&[*i, *j]) / t - at(&[*i]) * at(&[*j]) / (t * t),
        [i, j, k] => {
            at(&[*i, *j, *k]) / t
                - (at(&[*i, *j]) * at(&[*k])
                    + at(&[*i, *k]) * at(&[*j])
                    + at(&[*j, *k]) * at(&[*i]))
                    / (t * t)
                + at(&[*i]) * at(&[*j]) * at(&[*k]) * two / (t * t * t)
        }
        _ => unreachable!("order checked by caller"),
    };
    Ok(val)
}

fn jet_max_order(len: usize) -> usize {
    // len = (m+1)(m+2)/2
    let mut m = 0;
    while (m + 1) * (m + 2) / 2 < len {
        m += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn omega_default() -> RiemannMatrix<f64> {
        RiemannMatrix::new([
            [Complex::new(0.0, 1.0), Complex::new(0.0, 0.3)],
            [Complex::new(0.0, 0.3), Complex::new(0.0, 1.2)],
        ])
        .unwrap()
    }

    fn identity_omega() -> RiemannMatrix<f64> {
        RiemannMatrix::new([
            [Complex::new(0.0, 1.0), Complex::new(0.0, 0.0)],
            [Complex::new(0.0, 0.0), Complex::new(0.0, 1.0)],
        ])
        .unwrap()
    }

    #[test]
    fn rejects_asymmetric_and_degenerate_matrices() {
        let bad = RiemannMatrix::<f64>::new([
            [Complex::new(0.0, 1.0), Complex::new(0.0, 0.3)],
            [Complex::new(0.0, 0.2), Complex::new(0.0, 1.2)],
        ]);
        assert!(matches!(bad, Err(Error::InvalidOmega(_))));
        let flat = RiemannMatrix::<f64>::new([
            [Complex::new(0.0, 1.0), Complex::new(0.0, 1.0)],
            [Complex::new(0.0, 1.0), Complex::new(0.0, 1.0)],
        ]);
        assert!(matches!(flat, Err(Error::InvalidOmega(_))));
    }

    #[test]
    fn multi_index_bounds() {
        assert!(MultiIndex::new(6, 6).is_ok());
        assert!(MultiIndex::new(7, 6).is_err());
        assert_eq!(MultiIndex::new(2, 1).unwrap().coordinates(), vec![0, 0, 1]);
        assert_eq!(MultiIndex::up_to(2).len(), 6);
        for (k, m) in MultiIndex::up_to(4).into_iter().enumerate() {
            assert_eq!(jet_index(m, 4), k);
        }
    }

    #[test]
    fn radius_monotone_in_eps_and_order() {
        let om = identity_omega();
        let r12 = truncation_radius(&om, [0.0, 0.0], MultiIndex::ZERO, 1e-12).unwrap();
        let r14 = truncation_radius(&om, [0.0, 0.0], MultiIndex::ZERO, 1e-14).unwrap();
        let r8 = truncation_radius(&om, [0.0, 0.0], MultiIndex::ZERO, 1e-8).unwrap();
        assert!(r14 > r8);
        assert!(r14 >= r12 && r12 >= r8);
        // at R the Gaussian factor alone is already tiny
        assert!((-std::f64::consts::PI * r12 * r12).exp() < 1e-12);
        let d2 = MultiIndex::new(2, 0).unwrap();
        let r_d2 = truncation_radius(&om, [0.0, 0.0], d2, 1e-12).unwrap();
        assert!(r_d2 >= r12);
    }

    #[test]
    fn radius_cap_reports_non_convergence() {
        let om = identity_omega().with_radius_cap(1.0);
        let err = truncation_radius(&om, [0.0, 0.0], MultiIndex::ZERO, 1e-14).unwrap_err();
        assert!(matches!(err, Error::NonConvergent { .. }));
    }

    #[test]
    fn eps_floor_enforced() {
        let om = identity_omega();
        let z = [Complex::new(0.0, 0.0); 2];
        assert!(theta_eval(&z, &om, &Characteristic::zero(), MultiIndex::ZERO, 1e-16).is_err());
    }

    #[test]
    fn theta_is_even() {
        let om = omega_default();
        let z = [Complex::new(0.31, 0.12), Complex::new(-0.2, 0.4)];
        let mz = [-z[0], -z[1]];
        let eps = 1e-13;
        let a = riemann_theta(&z, &om, MultiIndex::ZERO, eps).unwrap();
        let b = riemann_theta(&mz, &om, MultiIndex::ZERO, eps).unwrap();
        assert!((a - b).norm() < eps);
    }

    #[test]
    fn jet_matches_single_evaluations() {
        let om = omega_default();
        let z = [Complex::new(0.1, 0.2), Complex::new(0.3, -0.1)];
        let ch = Characteristic::section([1, 0], 2);
        let jet = theta_jet(&z, &om, &ch, 3, 1e-13).unwrap();
        for (k, m) in MultiIndex::up_to(3).into_iter().enumerate() {
            let v = theta_eval(&z, &om, &ch, m, 1e-13).unwrap();
            assert!((v - jet[k]).norm() < 1e-11 * (1.0 + v.norm()), "{m}");
        }
    }

    #[test]
    fn first_log_derivative_vanishes_at_origin() {
        let om = omega_default();
        let z = [Complex::new(0.0, 0.0); 2];
        for j in 0..2 {
            let v = log_theta_deriv(&z, &om, MultiIndex::unit(j), 1e-14).unwrap();
            assert!(v.norm() < 1e-12);
        }
    }

    #[test]
    fn log_derivative_refuses_divisor_points() {
        let jet = vec![
            Complex::new(1e-14, 0.0),
            Complex::new(1.0, 0.0),
            Complex::new(1.0, 0.0),
        ];
        let err = log_derivative_from_jet(&jet, MultiIndex::unit(0), 1e-10).unwrap_err();
        assert!(matches!(err, Error::OnDivisor { .. }));
    }

    #[test]
    fn single_precision_tracks_double() {
        let om64 = omega_default();
        let om32 = RiemannMatrix::<f32>::new([
            [Complex::new(0.0, 1.0), Complex::new(0.0, 0.3)],
            [Complex::new(0.0, 0.3), Complex::new(0.0, 1.2)],
        ])
        .unwrap();
        let z64 = [Complex::new(0.21, 0.1), Complex::new(-0.4, 0.3)];
        let z32 = [Complex::new(0.21f32, 0.1), Complex::new(-0.4f32, 0.3)];
        let a = riemann_theta(&z64, &om64, MultiIndex::ZERO, 1e-10).unwrap();
        let b = riemann_theta(&z32, &om32, MultiIndex::ZERO, 1e-6).unwrap();
        assert!((a.re - b.re as f64).abs() < 1e-5 && (a.im - b.im as f64).abs() < 1e-5);
    }
}
