//! Points of the Abelian surface `C^2 / (Z^2 + Ω Z^2)` and zeros of theta
//! translates: a point `Δ` of the theta divisor and the two points where the
//! divisor meets its translate by `c'`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::ThetaJet;
use crate::linalg::{cond2, solve2};
use crate::{Point, RiemannMatrix, C64};

/// Lattice-coordinate slack absorbed when taking integer parts.
const SNAP: f64 = 1e-12;

/// A point of the universal cover together with its canonical representative
/// `rep` and the lattice shift with `z = rep + Ω m + n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbelianPoint {
    pub z: Point,
    pub rep: Point,
    /// `(m1, m2, n1, n2)`.
    pub shift: [i64; 4],
}

/// Real lattice coordinates `(s, t)` of `z = s + Ω t`.
pub fn lattice_coords(z: &Point, omega: &RiemannMatrix) -> ([f64; 2], [f64; 2]) {
    let t = omega.im_solve([z[0].im, z[1].im]);
    let om = omega.omega();
    let s = [
        z[0].re - om[0][0].re * t[0] - om[0][1].re * t[1],
        z[1].re - om[1][0].re * t[0] - om[1][1].re * t[1],
    ];
    (s, t)
}

/// `s + Ω t`.
pub fn from_lattice_coords(s: [f64; 2], t: [f64; 2], omega: &RiemannMatrix) -> Point {
    let ot = omega.apply(t);
    [ot[0] + s[0], ot[1] + s[1]]
}

/// Canonical decomposition `z = rep + Ω m + n` with the lattice coordinates
/// of `rep` in `[0, 1)`.
pub fn reduce_mod_lattice(z: &Point, omega: &RiemannMatrix) -> AbelianPoint {
    let (s, t) = lattice_coords(z, omega);
    let m = [(t[0] + SNAP).floor(), (t[1] + SNAP).floor()];
    let n = [(s[0] + SNAP).floor(), (s[1] + SNAP).floor()];
    let lat = from_lattice_coords(n, m, omega);
    let rep = [z[0] - lat[0], z[1] - lat[1]];
    AbelianPoint {
        z: *z,
        rep,
        shift: [m[0] as i64, m[1] as i64, n[0] as i64, n[1] as i64],
    }
}

/// Representative of `z` with lattice coordinates in `[-1/2, 1/2)`, where
/// the theta series is best conditioned.
pub fn centered(z: &Point, omega: &RiemannMatrix) -> Point {
    let (s, t) = lattice_coords(z, omega);
    let m = [(t[0] + 0.5).floor(), (t[1] + 0.5).floor()];
    let n = [(s[0] + 0.5).floor(), (s[1] + 0.5).floor()];
    let lat = from_lattice_coords(n, m, omega);
    [z[0] - lat[0], z[1] - lat[1]]
}

/// Distance from `a - b` to the lattice, measured in lattice coordinates.
pub fn lattice_distance(a: &Point, b: &Point, omega: &RiemannMatrix) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1]];
    let (s, t) = lattice_coords(&d, omega);
    s.iter()
        .chain(t.iter())
        .map(|v| (v - v.round()).abs())
        .fold(0.0, f64::max)
}

/// Random point with lattice coordinates uniform in `[-1/2, 1/2)`.
pub fn random_cell_point<R: Rng>(rng: &mut R, omega: &RiemannMatrix) -> Point {
    let s = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
    let t = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
    from_lattice_coords(s, t, omega)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DivisorTag {
    Delta,
    P1,
    P2,
    Q1,
    Q2,
}

/// A zero of a theta translate, with the residual recorded at `point.z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisorPoint {
    pub point: AbelianPoint,
    pub residual: f64,
    pub which: DivisorTag,
}

impl DivisorPoint {
    pub fn z(&self) -> Point {
        self.point.z
    }
}

/// Tolerances and search sizes for the root finders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RootSettings {
    pub root_tol: f64,
    pub eps: f64,
    /// Starts per real lattice direction pair; the intersection search uses
    /// `grid^4` starts.
    pub grid: usize,
    pub max_starts: usize,
    pub dedup_tol: f64,
    pub cond_cap: f64,
    pub max_iter: usize,
    pub theta_zero_starts: usize,
    pub min_gradient: f64,
}

impl Default for RootSettings {
    fn default() -> Self {
        RootSettings {
            root_tol: 1e-11,
            eps: 1e-14,
            grid: 8,
            max_starts: 4096,
            dedup_tol: 1e-7,
            cond_cap: 1e8,
            max_iter: 60,
            theta_zero_starts: 64,
            min_gradient: 1e-6,
        }
    }
}

fn theta_grad(omega: &RiemannMatrix, z: &Point, eps: f64) -> Result<(C64, [C64; 2])> {
    let jet = ThetaJet::new(omega, z, 1, eps)?;
    Ok((jet.value(), jet.grad()))
}

/// Minimal-norm Newton steps on the scalar equation `θ(z) = 0`.
fn polish_scalar(omega: &RiemannMatrix, mut z: Point, steps: usize, eps: f64) -> Result<Point> {
    for _ in 0..steps {
        let (v, g) = theta_grad(omega, &z, eps)?;
        let gn = g[0].norm_sqr() + g[1].norm_sqr();
        if gn == 0.0 || v.norm() == 0.0 {
            break;
        }
        let f = v / gn;
        z = [z[0] - f * g[0].conj(), z[1] - f * g[1].conj()];
    }
    Ok(z)
}

/// A nonsingular zero `Δ` of `θ`, found by Newton's method along seeded
/// random complex lines.
pub fn find_theta_zero(
    omega: &RiemannMatrix,
    seed: u64,
    settings: &RootSettings,
) -> Result<DivisorPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = settings.eps;
    for _ in 0..settings.theta_zero_starts {
        let z0 = random_cell_point(&mut rng, omega);
        let v = [
            C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5),
            C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5),
        ];
        let mut t = C64::new(0.0, 0.0);
        let at = |t: C64| [z0[0] + v[0] * t, z0[1] + v[1] * t];
        let mut converged = false;
        for _ in 0..settings.max_iter {
            let (f, g) = theta_grad(omega, &at(t), eps)?;
            let df = g[0] * v[0] + g[1] * v[1];
            if df.norm() == 0.0 {
                break;
            }
            let mut step = f / df;
            // damping keeps the iterate from jumping across many cells
            if step.norm() > 0.5 {
                step *= 0.5 / step.norm();
            }
            t -= step;
            if step.norm() < 1e-15 * (1.0 + t.norm()) || f.norm() < 1e-15 {
                converged = true;
                break;
            }
        }
        if !converged {
            continue;
        }
        let z = centered(&at(t), omega);
        let z = polish_scalar(omega, z, 3, eps)?;
        let (f, g) = theta_grad(omega, &z, eps)?;
        let gnorm = (g[0].norm_sqr() + g[1].norm_sqr()).sqrt();
        if f.norm() < settings.root_tol && gnorm > settings.min_gradient {
            return Ok(DivisorPoint {
                point: reduce_mod_lattice(&z, omega),
                residual: f.norm(),
                which: DivisorTag::Delta,
            });
        }
    }
    Err(Error::NoConvergence {
        starts: settings.theta_zero_starts,
    })
}

/// Residuals `(|θ(z)|, |θ(z - c')|)` and the Jacobian of that pair.
fn pair_system(
    omega: &RiemannMatrix,
    c_prime: &Point,
    z: &Point,
    eps: f64,
) -> Result<([C64; 2], [[C64; 2]; 2])> {
    let (f0, g0) = theta_grad(omega, z, eps)?;
    let zs = [z[0] - c_prime[0], z[1] - c_prime[1]];
    let (f1, g1) = theta_grad(omega, &zs, eps)?;
    Ok(([f0, f1], [g0, g1]))
}

fn newton_pair(
    omega: &RiemannMatrix,
    c_prime: &Point,
    start: Point,
    settings: &RootSettings,
) -> Option<Point> {
    let eps = settings.eps;
    let mut z = start;
    let (mut f, mut jac) = pair_system(omega, c_prime, &z, eps).ok()?;
    let mut fnorm = f[0].norm().max(f[1].norm());
    for _ in 0..settings.max_iter {
        let delta = solve2(&jac, &f)?;
        let mut lambda = 1.0;
        let dn = delta[0].norm().max(delta[1].norm());
        if dn > 0.5 {
            lambda = 0.5 / dn;
        }
        let mut accepted = false;
        for _ in 0..12 {
            let trial = [z[0] - delta[0] * lambda, z[1] - delta[1] * lambda];
            let (ft, jt) = pair_system(omega, c_prime, &trial, eps).ok()?;
            let tn = ft[0].norm().max(ft[1].norm());
            if tn < fnorm || tn < 1e-14 {
                z = trial;
                f = ft;
                jac = jt;
                fnorm = tn;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
        if dn * lambda < 1e-14 || fnorm < 1e-15 {
            break;
        }
    }
    (fnorm < 1e-9).then_some(z)
}

/// The two points `p1, p2` (modulo the lattice) where `θ(z) = 0` meets
/// `θ(z - c') = 0`, from a deterministic multistart grid.
pub fn intersect_divisors(
    omega: &RiemannMatrix,
    c_prime: &Point,
    settings: &RootSettings,
) -> Result<(DivisorPoint, DivisorPoint)> {
    let c_prime = centered(c_prime, omega);
    if lattice_distance(&c_prime, &[C64::new(0.0, 0.0); 2], omega) < 1e-8 {
        return Err(Error::Degenerate("c' lies on the lattice".into()));
    }
    let g = settings.grid.max(1);
    let node = |k: usize| (k as f64 + 0.5) / g as f64 - 0.5;
    let mut starts = Vec::with_capacity(g.pow(4));
    'outer: for a in 0..g {
        for b in 0..g {
            for c in 0..g {
                for d in 0..g {
                    if starts.len() >= settings.max_starts {
                        break 'outer;
                    }
                    let s = [node(a), node(c)];
                    let t = [node(b), node(d)];
                    starts.push(from_lattice_coords(s, t, omega));
                }
            }
        }
    }
    let roots: Vec<Option<Point>> = starts
        .par_iter()
        .map(|z0| newton_pair(omega, &c_prime, *z0, settings))
        .collect();
    let mut classes: Vec<Point> = Vec::new();
    for z in roots.into_iter().flatten() {
        let z = centered(&z, omega);
        if classes
            .iter()
            .all(|p| lattice_distance(p, &z, omega) > settings.dedup_tol)
        {
            classes.push(z);
        }
    }
    if classes.len() != 2 {
        if classes.len() == 1 {
            return Err(Error::Degenerate(
                "only one intersection class; p1 and p2 coincide".into(),
            ));
        }
        return Err(Error::WrongCount {
            expected: 2,
            found: classes.len(),
        });
    }
    let mut out = Vec::with_capacity(2);
    for z in classes {
        // polish at the centred representative
        let z = newton_pair(omega, &c_prime, z, settings).unwrap_or(z);
        let z = centered(&z, omega);
        let (f, jac) = pair_system(omega, &c_prime, &z, settings.eps)?;
        let residual = f[0].norm().max(f[1].norm());
        if residual >= settings.root_tol {
            return Err(Error::NoConvergence {
                starts: settings.max_starts,
            });
        }
        let cond = cond2(&jac);
        if !(cond < settings.cond_cap) {
            return Err(Error::IllConditioned {
                what: "intersection Jacobian".into(),
                cond,
            });
        }
        out.push((z, residual));
    }
    let key = |z: &Point| {
        let ap = reduce_mod_lattice(z, omega);
        let (s, t) = lattice_coords(&ap.rep, omega);
        [s[0], s[1], t[0], t[1]]
    };
    out.sort_by(|a, b| key(&a.0).partial_cmp(&key(&b.0)).unwrap());
    if lattice_distance(&out[0].0, &out[1].0, omega) < settings.dedup_tol {
        return Err(Error::Degenerate(
            "p1 and p2 coincide modulo the lattice".into(),
        ));
    }
    let mk = |(z, residual): (Point, f64), which| DivisorPoint {
        point: reduce_mod_lattice(&z, omega),
        residual,
        which,
    };
    let p2 = mk(out[1], DivisorTag::P2);
    let p1 = mk(out[0], DivisorTag::P1);
    Ok((p1, p2))
}

/// Condition number of `[[θ1(p1), θ2(p1)], [θ1(p2), θ2(p2)]]`.
pub fn gradient_condition(omega: &RiemannMatrix, p1: &Point, p2: &Point, eps: f64) -> Result<f64> {
    let (_, g1) = theta_grad(omega, p1, eps)?;
    let (_, g2) = theta_grad(omega, p2, eps)?;
    Ok(cond2(&[g1, g2]))
}
