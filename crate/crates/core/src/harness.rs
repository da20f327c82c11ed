//! End-to-end pipeline: generic parameter draws, operator construction and
//! the identity report.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::avgeom::{
    find_theta_zero, intersect_divisors, random_cell_point, DivisorPoint, RootSettings,
};
use crate::bamodule::{
    freeness_report, mc_dimension_report, residues, sample_x, sample_z,
    second_derivative_discrepancy, xz_derivative_discrepancy, BAParams, Discrepancy, SAMPLE_FLOOR,
};
use crate::error::{Error, Result};
use crate::jet::ThetaJet;
use crate::nakayashiki::{
    basis_change, basis_change_coefficients, basis_change_discrepancy, basis_change_fit,
    build_second_order_all, drop_cancelled_terms, eigen_discrepancy, generator_rank,
    third_order_raw, Action, BuildSettings, OperatorRing, SpectralConfig, TRIPLES,
};
use crate::opcalc::{
    commutator_residual, operators_to_json, sampled_relative_difference, MatDiffOp,
};
use crate::theta::{theta_eval, theta_scale};
use crate::{Characteristic, MultiIndex, Point, RiemannMatrix, C64};

/// Identity names, in report order.
pub const IDENTITIES: [&str; 13] = [
    "theta_quasi_periodicity",
    "x_z_derivative_identity",
    "divisor_intersection_count",
    "module_dimension",
    "module_freeness",
    "second_x_derivative_identity",
    "eigen_relations",
    "ring_commutativity",
    "commutator_derivative_rule",
    "quadratic_theta_expansion",
    "generator_independence",
    "basis_change_conjugation",
    "determinism",
];

/// Tolerance of each identity when the configuration does not override it.
pub fn default_tolerance(name: &str) -> Option<f64> {
    Some(match name {
        "theta_quasi_periodicity" => 1e-10,
        "x_z_derivative_identity" => 1e-8,
        "divisor_intersection_count" => 1e-11,
        "module_dimension" | "module_freeness" | "generator_independence" => 1e-3,
        "second_x_derivative_identity" => 1e-8,
        "eigen_relations" | "ring_commutativity" => 1e-7,
        "commutator_derivative_rule" | "basis_change_conjugation" => 1e-6,
        "quadratic_theta_expansion" => 1e-8,
        "determinism" => 1.0,
        _ => return None,
    })
}

/// Output file locations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputPaths {
    pub ring: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Period matrix entries as `[re, im]` pairs.
    pub omega: [[[f64; 2]; 2]; 2],
    pub c: Option<Point>,
    pub c_prime: Option<Point>,
    /// Shift of the second basis used by the change-of-basis check.
    pub c_second: Option<Point>,
    pub seed: u64,
    /// `(z, x)` samples per identity.
    pub samples: usize,
    pub quasi_periodicity_samples: usize,
    pub intersection_draws: usize,
    /// Radius of the polydisc `|x_j| ≤ radius`.
    pub radius: f64,
    /// Absolute accuracy of the theta series.
    pub eps: f64,
    /// Draws of `c'` (each with an intersection search) before giving up.
    pub max_retries: usize,
    /// Draws of `c` per accepted `c'`.
    pub c_retries: usize,
    /// Required distance from the divisor, in units of the polydisc
    /// diameter `√2 · radius`, for every point `w` with `θ(w + x)` in a
    /// denominator.
    pub genericity_margin: f64,
    /// Overrides every identity tolerance.
    pub tolerance: Option<f64>,
    /// Per-identity overrides, applied after `tolerance`.
    pub tolerances: BTreeMap<String, f64>,
    pub root: RootSettings,
    pub build: BuildSettings,
    pub output: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            omega: [[[0.0, 1.0], [0.0, 0.3]], [[0.0, 0.3], [0.0, 1.2]]],
            c: None,
            c_prime: None,
            c_second: None,
            seed: 20240601,
            samples: 50,
            quasi_periodicity_samples: 100,
            intersection_draws: 5,
            radius: 0.1,
            eps: 1e-14,
            max_retries: 16,
            c_retries: 64,
            genericity_margin: 1.5,
            tolerance: None,
            tolerances: BTreeMap::new(),
            root: RootSettings::default(),
            build: BuildSettings::default(),
            output: OutputPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.omega_matrix()?;
        for name in self.tolerances.keys() {
            if default_tolerance(name).is_none() {
                return Err(Error::InvalidInput(format!("unknown identity {name}")));
            }
        }
        let bad = |what: &str| Err(Error::InvalidInput(what.to_string()));
        if !(self.radius > 0.0 && self.radius < 1.0) {
            return bad("radius must lie in (0, 1)");
        }
        if self.samples == 0 || self.quasi_periodicity_samples == 0 || self.intersection_draws == 0
        {
            return bad("sample counts must be positive");
        }
        if self.max_retries == 0 || self.c_retries == 0 {
            return bad("retry caps must be positive");
        }
        let tols = self.tolerance.iter().chain(self.tolerances.values());
        if tols.into_iter().any(|t| !(*t >= 0.0)) {
            return bad("tolerances must be non-negative");
        }
        Ok(())
    }

    pub fn omega_matrix(&self) -> Result<RiemannMatrix> {
        RiemannMatrix::from_pairs(self.omega)
    }

    pub fn tolerance_for(&self, name: &str) -> f64 {
        if let Some(t) = self.tolerances.get(name) {
            return *t;
        }
        self.tolerance
            .or_else(|| default_tolerance(name))
            .expect("identity names are fixed")
    }

    fn root_settings(&self) -> RootSettings {
        RootSettings {
            eps: self.eps,
            ..self.root.clone()
        }
    }
}

fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

/// First-order estimate `|θ(w)| / |∇θ(w)|` of the distance from `w` to the
/// divisor.
pub fn divisor_clearance(omega: &RiemannMatrix, w: Point, eps: f64) -> Result<f64> {
    let j = ThetaJet::new(omega, &w, 1, eps)?;
    let g = j.grad();
    let gn = (g[0].norm_sqr() + g[1].norm_sqr()).sqrt();
    Ok(if gn > 0.0 {
        j.value().norm() / gn
    } else {
        f64::INFINITY
    })
}

/// Drawn parameters and their resampling history.
#[derive(Clone, Debug)]
pub struct Draw {
    pub spectral: SpectralConfig,
    /// Configuration of the second basis `(ψ, ψ_{c''})`.
    pub second: SpectralConfig,
    pub log: Vec<String>,
}

struct Drawer<'a> {
    cfg: &'a RunConfig,
    omega: RiemannMatrix,
    root: RootSettings,
    delta: DivisorPoint,
}

impl Drawer<'_> {
    fn clearance_ok(&self, w: Point) -> Result<bool> {
        let need = self.cfg.genericity_margin * std::f64::consts::SQRT_2 * self.cfg.radius;
        Ok(divisor_clearance(&self.omega, w, self.cfg.eps)? >= need)
    }

    fn floor_ok(&self, w: Point) -> Result<bool> {
        let j = ThetaJet::new(&self.omega, &w, 0, self.cfg.eps)?;
        Ok(j.value().norm() > self.cfg.build.floor * j.scale())
    }

    /// Points fixed by `c'` alone: `θ(c')`, `θ(Δ ± c')` and `θ(0)` enter
    /// denominators.
    fn accept_c_prime(&self, cp: Point) -> Result<()> {
        let d = self.delta.z();
        for (what, w) in [
            ("c'", cp),
            ("Delta + c'", add(d, cp)),
            ("Delta - c'", sub(d, cp)),
        ] {
            if !self.floor_ok(w)? {
                return Err(Error::DivisorHit(format!("theta({what}) below floor")));
            }
        }
        Ok(())
    }

    /// Points `w` with `θ(w + x)` in a denominator must stay clear of the
    /// divisor on the whole polydisc.
    fn accept_c(&self, c: Point, cp: Point, p: &[DivisorPoint; 2]) -> Result<()> {
        let d = self.delta.z();
        let ws = [
            ("c + c'", add(c, cp)),
            ("Delta + c' + c", add(add(d, cp), c)),
            ("p1 + c", add(p[0].z(), c)),
            ("p2 + c", add(p[1].z(), c)),
            ("c", c),
            ("Delta + c", add(d, c)),
        ];
        for (what, w) in ws {
            if !self.clearance_ok(w)? {
                return Err(Error::DivisorHit(format!(
                    "{what} too close to the divisor"
                )));
            }
        }
        Ok(())
    }

    fn intersect(&self, cp: Point) -> Result<[DivisorPoint; 2]> {
        self.accept_c_prime(cp)?;
        let (p1, p2) = intersect_divisors(&self.omega, &cp, &self.root)?;
        Ok([p1, p2])
    }

    fn spectral(&self, c: Point, cp: Point, p: [DivisorPoint; 2]) -> Result<SpectralConfig> {
        self.accept_c(c, cp, &p)?;
        let params = BAParams::new(
            self.omega.clone(),
            c,
            cp,
            self.cfg.eps,
            self.cfg.build.floor,
        )?;
        SpectralConfig::new(params, self.delta, p, self.cfg.build.clone(), self.cfg.seed)
    }
}

fn retry<T>(
    tries: usize,
    fixed: bool,
    what: &str,
    log: &mut Vec<String>,
    mut attempt: impl FnMut(&mut Vec<String>) -> Result<T>,
) -> Result<T> {
    let tries = if fixed { 1 } else { tries };
    let mut last = None;
    for _ in 0..tries {
        match attempt(log) {
            Ok(v) => return Ok(v),
            Err(e) if e.is_genericity_failure() => {
                log.push(format!("rejected {what}: {e}"));
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    let e = last.expect("at least one attempt");
    if fixed {
        Err(e)
    } else {
        Err(Error::Degenerate(format!(
            "no generic {what} after {tries} draws; last: {e}"
        )))
    }
}

/// Draws `(c, c', c'')` for which every formula is well defined on the
/// polydisc, resampling on genericity failures only.
pub fn draw_parameters(cfg: &RunConfig) -> Result<Draw> {
    let omega = cfg.omega_matrix()?;
    let root = cfg.root_settings();
    let delta = find_theta_zero(&omega, cfg.seed, &root)?;
    if !(delta.residual < root.root_tol) {
        return Err(Error::NoConvergence {
            starts: root.theta_zero_starts,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = Drawer {
        cfg,
        omega: omega.clone(),
        root,
        delta,
    };
    let mut log = Vec::new();

    let spectral = retry(
        cfg.max_retries,
        cfg.c_prime.is_some(),
        "c'",
        &mut log,
        |log| {
            let cp = cfg
                .c_prime
                .unwrap_or_else(|| random_cell_point(&mut rng, &omega));
            let p = d.intersect(cp)?;
            retry(cfg.c_retries, cfg.c.is_some(), "c", log, |_| {
                let c = cfg.c.unwrap_or_else(|| random_cell_point(&mut rng, &omega));
                d.spectral(c, cp, p)
            })
        },
    )?;
    let c = spectral.params.c;
    let second = retry(
        cfg.max_retries,
        cfg.c_second.is_some(),
        "c''",
        &mut log,
        |_| {
            let c2 = cfg
                .c_second
                .unwrap_or_else(|| random_cell_point(&mut rng, &omega));
            let p = d.intersect(c2)?;
            d.spectral(c, c2, p)
        },
    )?;
    Ok(Draw {
        spectral,
        second,
        log,
    })
}

/// The `(z, x)` samples shared by the identity checks.
pub fn identity_samples(
    cfg: &RunConfig,
    omega: &RiemannMatrix,
    stream: u64,
) -> Result<Vec<(Point, [C64; 2])>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    (0..cfg.samples)
        .map(|_| {
            Ok((
                sample_z(&mut rng, omega, cfg.eps)?,
                sample_x(&mut rng, cfg.radius),
            ))
        })
        .collect()
}

/// Parameters, operators and the samples they were checked on.
#[derive(Clone, Debug)]
pub struct Built {
    pub draw: Draw,
    pub ring: OperatorRing,
    pub samples: Vec<(Point, [C64; 2])>,
}

impl Built {
    pub fn x_samples(&self) -> Vec<[C64; 2]> {
        self.samples.iter().map(|s| s.1).collect()
    }

    /// Serialized configuration and operators.
    pub fn artifact(&self) -> Value {
        json!({
            "spectral": self.draw.spectral.record(),
            "ring": operators_to_json(&self.ring.named()),
        })
    }

    pub fn artifact_text(&self) -> String {
        serde_json::to_string_pretty(&self.artifact()).expect("artifact serializes")
    }
}

pub fn build(cfg: &RunConfig) -> Result<Built> {
    cfg.validate()?;
    let draw = draw_parameters(cfg)?;
    let samples = identity_samples(cfg, &draw.spectral.params.omega, 1)?;
    let xs: Vec<[C64; 2]> = samples.iter().map(|s| s.1).collect();
    let ring = OperatorRing::build(&draw.spectral, &xs)?;
    Ok(Built {
        draw,
        ring,
        samples,
    })
}

/// Outcome of one identity check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityResult {
    pub name: String,
    pub residual: f64,
    pub samples: usize,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub float: String,
}

impl Fingerprint {
    pub fn current() -> Self {
        Fingerprint {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            float: "IEEE-754 binary64".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub identities: Vec<IdentityResult>,
    pub all_pass: bool,
    pub parameters: Value,
    pub resampling: Vec<String>,
    pub environment: Fingerprint,
    pub config: RunConfig,
}

impl ResidualReport {
    pub fn get(&self, name: &str) -> Option<&IdentityResult> {
        self.identities.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Raw measurement before the tolerance is applied. `ok` carries the
/// conditions that are not a number, such as exact ranks.
struct Measurement {
    value: f64,
    samples: usize,
    ok: bool,
    detail: String,
}

impl Measurement {
    fn new(value: f64, samples: usize, detail: String) -> Self {
        Measurement {
            value,
            samples,
            ok: true,
            detail,
        }
    }
}

fn finite(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::MAX
    }
}

fn random_characteristic<R: Rng>(rng: &mut R) -> Characteristic {
    let den = rng.gen_range(1..=4);
    let mut num = || rng.gen_range(0..den);
    let (a1, a2, b1, b2) = (num(), num(), num(), num());
    let r = |n: i64| num_rational::Rational64::new(n, den);
    Characteristic::new([r(a1), r(a2)], [r(b1), r(b2)])
}

fn check_quasi_periodicity(cfg: &RunConfig, omega: &RiemannMatrix) -> Result<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let tau = std::f64::consts::TAU;
    let i = C64::i();
    let mut cases = Vec::with_capacity(cfg.quasi_periodicity_samples);
    while cases.len() < cfg.quasi_periodicity_samples {
        let ch = random_characteristic(&mut rng);
        let z = random_cell_point(&mut rng, omega);
        let m = [rng.gen_range(-2i64..=2), rng.gen_range(-2i64..=2)];
        let n = [rng.gen_range(-2i64..=2), rng.gen_range(-2i64..=2)];
        let base = theta_eval(&z, omega, &ch, MultiIndex::ZERO, cfg.eps)?;
        if base.norm() > SAMPLE_FLOOR * theta_scale(omega, [z[0].im, z[1].im]) {
            cases.push((ch, z, m, n, base));
        }
    }
    let per: Vec<Result<f64>> = cases
        .par_iter()
        .map(|(ch, z, m, n, base)| {
            let (a, b) = (ch.a_real::<f64>(), ch.b_real::<f64>());
            let nf = [n[0] as f64, n[1] as f64];
            let mf = [m[0] as f64, m[1] as f64];
            let zn = [z[0] + nf[0], z[1] + nf[1]];
            let lhs1 = theta_eval(&zn, omega, ch, MultiIndex::ZERO, cfg.eps)?;
            let rhs1 = (i * tau * (a[0] * nf[0] + a[1] * nf[1])).exp() * base;
            let om = omega.apply(mf);
            let zm = [z[0] + om[0], z[1] + om[1]];
            let lhs2 = theta_eval(&zm, omega, ch, MultiIndex::ZERO, cfg.eps)?;
            let mc = [C64::from(mf[0]), C64::from(mf[1])];
            let expo = -i * tau * (b[0] * mf[0] + b[1] * mf[1])
                - i * std::f64::consts::PI * omega.quad(&mc, &mc)
                - i * tau * (mc[0] * z[0] + mc[1] * z[1]);
            let rhs2 = expo.exp() * base;
            Ok(Discrepancy::between(lhs1, rhs1)
                .merge(Discrepancy::between(lhs2, rhs2))
                .worst())
        })
        .collect();
    let worst = per
        .into_iter()
        .try_fold(0.0f64, |a, r| Ok::<f64, Error>(a.max(r?)))?;
    Ok(Measurement::new(
        worst,
        cases.len(),
        "integer and period shifts, |m|, |n| <= 2".into(),
    ))
}

fn check_xz_derivative(b: &Built) -> Result<Measurement> {
    let p = &b.draw.spectral.params;
    let per: Vec<Result<Discrepancy>> = b
        .samples
        .par_iter()
        .map(|(z, x)| {
            let mut acc = Discrepancy::default();
            for n in 1..=2u32 {
                for a in residues(n) {
                    for j in 0..2 {
                        acc = acc.merge(xz_derivative_discrepancy(p, n, a, j, *z, *x)?);
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let d: Discrepancy = per
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    Ok(Measurement::new(
        d.worst(),
        b.samples.len(),
        "levels 1 and 2, all residues, j = 1, 2".into(),
    ))
}

fn check_intersections(cfg: &RunConfig, omega: &RiemannMatrix) -> Result<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let root = cfg.root_settings();
    let mut worst: f64 = 0.0;
    let mut counts = Vec::new();
    let mut ok = true;
    for _ in 0..cfg.intersection_draws {
        let cp = random_cell_point(&mut rng, omega);
        match intersect_divisors(omega, &cp, &root) {
            Ok((p1, p2)) => {
                counts.push("2".to_string());
                worst = worst.max(p1.residual).max(p2.residual);
            }
            Err(Error::WrongCount { found, .. }) => {
                counts.push(found.to_string());
                ok = false;
            }
            Err(e) => {
                counts.push(format!("error ({e})"));
                ok = false;
            }
        }
    }
    Ok(Measurement {
        value: worst,
        samples: cfg.intersection_draws,
        ok,
        detail: format!("classes per draw: {}", counts.join(", ")),
    })
}

fn rank_measurement(ranks: Vec<(usize, usize, f64)>, samples: usize, what: &str) -> Measurement {
    let ok = ranks.iter().all(|(r, e, _)| r == e);
    let value = ranks.iter().map(|t| t.2).fold(0.0, f64::max);
    let detail = ranks
        .iter()
        .map(|(r, e, g)| format!("rank {r}/{e} gap {g:.2e}"))
        .collect::<Vec<_>>()
        .join("; ");
    Measurement {
        value,
        samples,
        ok,
        detail: format!("{what}: {detail}"),
    }
}

fn check_dimension(b: &Built) -> Result<Measurement> {
    let p = &b.draw.spectral.params;
    let mut ranks = Vec::new();
    let mut total = 0;
    for k in 1..=4usize {
        let count = 2 * (1..=k).map(|n| n * n).sum::<usize>();
        total += count;
        let r = mc_dimension_report(p, k, count, b.draw.spectral.seed + k as u64)?;
        ranks.push((r.rank, r.expected, r.gap_ratio()));
    }
    Ok(rank_measurement(ranks, total, "k = 1..4"))
}

fn check_freeness(b: &Built) -> Result<Measurement> {
    let p = &b.draw.spectral.params;
    let mut ranks = Vec::new();
    let mut total = 0;
    for k in 1..=4usize {
        let count = 2 * k * k + 4;
        total += count;
        let r = freeness_report(p, k, count, b.draw.spectral.seed + 10 + k as u64)?;
        let rank = if r.derivatives.rank == r.derivatives.expected {
            r.joint.rank
        } else {
            r.derivatives.rank
        };
        ranks.push((rank, r.joint.expected, r.joint.gap_ratio()));
    }
    Ok(rank_measurement(
        ranks,
        total,
        "k = 1..4, derivatives and joint with the level-k family",
    ))
}

fn check_second_derivative(b: &Built) -> Result<Measurement> {
    let p = &b.draw.spectral.params;
    let per: Vec<Result<Discrepancy>> = b
        .samples
        .par_iter()
        .map(|(z, x)| {
            let mut acc = Discrepancy::default();
            for (k, j) in [(0, 0), (0, 1), (1, 1)] {
                acc = acc.merge(second_derivative_discrepancy(p, k, j, *z, *x)?);
            }
            Ok(acc)
        })
        .collect();
    let d: Discrepancy = per
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    Ok(Measurement::new(
        d.worst(),
        b.samples.len(),
        "kj = 11, 12, 22".into(),
    ))
}

fn check_eigen(b: &Built) -> Result<Measurement> {
    let p = &b.draw.spectral.params;
    let ring = &b.ring;
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, (k, j)) in [(0, 0), (0, 1), (1, 1)].into_iter().enumerate() {
        let d = eigen_discrepancy(
            p,
            &ring.second[i],
            &Action::LogDerivative(vec![k, j]),
            &b.samples,
        )?;
        parts.push(format!("L{}{} {:.2e}", k + 1, j + 1, d.worst()));
        worst = worst.max(d.worst());
    }
    for j in 0..2 {
        let d = eigen_discrepancy(p, &ring.z[j], &Action::Derivation(j), &b.samples)?;
        parts.push(format!("Z{} {:.2e}", j + 1, d.worst()));
        worst = worst.max(d.worst());
    }
    Ok(Measurement::new(worst, b.samples.len(), parts.join(", ")))
}

fn check_commutativity(b: &Built) -> Result<Measurement> {
    let ring = &b.ring;
    let ctx = b.draw.spectral.context();
    let xs = b.x_samples();
    let cap = b.draw.spectral.settings.order_cap;
    let mut second: Vec<(String, &MatDiffOp)> = vec![("L1".into(), &ring.identity)];
    for (i, n) in ["L11", "L12", "L22"].iter().enumerate() {
        second.push((n.to_string(), &ring.second[i]));
    }
    let mut pairs: Vec<(String, &MatDiffOp, &MatDiffOp, bool)> = Vec::new();
    for i in 0..second.len() {
        for j in i + 1..second.len() {
            pairs.push((
                format!("{},{}", second[i].0, second[j].0),
                second[i].1,
                second[j].1,
                false,
            ));
        }
    }
    pairs.push(("Z1,Z2".into(), &ring.z[0], &ring.z[1], false));
    let third_names = ["L111", "L112", "L122", "L222"];
    for (i, t) in ring.third.iter().enumerate() {
        for (name, op) in &second {
            pairs.push((format!("{},{}", third_names[i], name), t, op, true));
        }
        for j in i + 1..4 {
            pairs.push((
                format!("{},{}", third_names[i], third_names[j]),
                t,
                &ring.third[j],
                true,
            ));
        }
    }
    let results: Vec<Result<(String, f64, bool)>> = pairs
        .par_iter()
        .map(|(n, a, c, third)| {
            Ok((
                n.clone(),
                commutator_residual(a, c, &xs, &ctx, cap)?,
                *third,
            ))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let max_of = |third: bool| {
        results
            .iter()
            .filter(|r| r.2 == third)
            .map(|r| r.1)
            .fold(0.0, f64::max)
    };
    let (s, t) = (max_of(false), max_of(true));
    // third-order pairs are allowed one rung more on the tolerance ladder
    let value = s.max(t / 10.0);
    Ok(Measurement::new(
        value,
        xs.len(),
        format!(
            "{} pairs; second order and Z1,Z2 max {s:.2e}; with third order max {t:.2e} (weighted 1/10)",
            results.len()
        ),
    ))
}

fn check_commutator_rule(b: &Built) -> Result<Measurement> {
    let cfg = &b.draw.spectral;
    let p = &cfg.params;
    let ring = &b.ring;
    let ctx = cfg.context();
    let xs = b.x_samples();
    let cap = cfg.settings.order_cap;
    let tol = cfg.settings.cancellation_tol;
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, t) in TRIPLES.iter().enumerate() {
        let d = eigen_discrepancy(
            p,
            &ring.third[i],
            &Action::LogDerivative(t.to_vec()),
            &b.samples,
        )?;
        worst = worst.max(d.worst());
        parts.push(format!(
            "[L{}{},Z{}] {:.2e}",
            t[0] + 1,
            t[1] + 1,
            t[2] + 1,
            d.worst()
        ));
    }
    // the same third derivatives reached through the other factorization
    for (i, (k, j, s)) in [(1usize, (0, 1, 0)), (2, (1, 1, 0))] {
        let raw = third_order_raw(&ring.second, &ring.z, k, j, s, cap)?;
        let alt = drop_cancelled_terms(&raw, 3, &xs, &ctx, tol)?;
        let t = TRIPLES[i];
        let d = eigen_discrepancy(p, &alt, &Action::LogDerivative(t.to_vec()), &b.samples)?;
        let diff = sampled_relative_difference(&alt, &ring.third[i], &xs, &ctx)?;
        worst = worst.max(d.worst()).max(diff);
        parts.push(format!(
            "[L{}{},Z{}] {:.2e}, vs stored {diff:.2e}",
            k + 1,
            j + 1,
            s + 1,
            d.worst()
        ));
    }
    Ok(Measurement::new(worst, b.samples.len(), parts.join(", ")))
}

fn check_alphas(cfg: &RunConfig, b: &Built) -> Result<Measurement> {
    let p = &b.draw.spectral.params;
    let al = b.draw.spectral.alphas.as_array();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let count = b.draw.spectral.settings.alpha_holdout_points;
    let zs = (0..count)
        .map(|_| sample_z(&mut rng, &p.omega, p.eps))
        .collect::<Result<Vec<_>>>()?;
    let mut pooled = Discrepancy::default();
    for z in &zs {
        let f = crate::bamodule::ZFrame::new(&p.omega, *z, p.eps)?;
        let t = f.theta();
        let minus = ThetaJet::new(&p.omega, &sub(*z, p.c_prime), 0, p.eps)?.value();
        let plus = ThetaJet::new(&p.omega, &add(*z, p.c_prime), 0, p.eps)?.value();
        let lhs = minus * plus / (t * t);
        let rhs =
            al[0] * f.log_d(&[0, 0]) + al[1] * f.log_d(&[0, 1]) + al[2] * f.log_d(&[1, 1]) + al[3];
        pooled = pooled.merge(Discrepancy::between(lhs, rhs));
    }
    Ok(Measurement::new(
        pooled.relative(),
        zs.len(),
        format!(
            "fresh holdout; build-time holdout {:.2e}",
            b.draw.spectral.alphas.holdout_residual
        ),
    ))
}

fn check_generators(b: &Built) -> Result<Measurement> {
    let p = &b.draw.spectral.params;
    let r = generator_rank(p, 24, b.draw.spectral.seed + 99)?;
    let smallest = r.singular_values.last().copied().unwrap_or(0.0) / r.singular_values[0];
    let mut m = rank_measurement(vec![(r.rank, 9, r.gap_ratio())], 24, "9 functions");
    m.detail
        .push_str(&format!(", sigma_9/sigma_1 {smallest:.2e}"));
    Ok(m)
}

fn check_conjugation(b: &Built) -> Result<Measurement> {
    let first = &b.draw.spectral;
    let second = &b.draw.second;
    let ctx = first.context();
    let xs = b.x_samples();
    let cap = first.settings.order_cap;
    let c2 = second.params.c_prime;
    let a = basis_change(first, c2)?;
    let inv = basis_change(second, first.params.c_prime)?;
    let forward = basis_change_discrepancy(&first.params, &a, c2, &b.samples)?.worst();
    let backward =
        basis_change_discrepancy(&second.params, &inv, first.params.c_prime, &b.samples)?.worst();
    let id = MatDiffOp::identity();
    let ab = sampled_relative_difference(&a.compose(&inv, cap)?, &id, &xs, &ctx)?;
    let ba = sampled_relative_difference(&inv.compose(&a, cap)?, &id, &xs, &ctx)?;

    // coefficients from a sampled fit in the level-2 part of the module
    let mut rng = ChaCha8Rng::seed_from_u64(first.seed);
    rng.set_stream(5);
    let zs = (0..16)
        .map(|_| sample_z(&mut rng, &first.params.omega, first.params.eps))
        .collect::<Result<Vec<_>>>()?;
    let mut fit = Discrepancy::default();
    for x in xs.iter().take(5) {
        let closed = basis_change_coefficients(&a, &ctx, *x)?;
        let sampled = basis_change_fit(&first.params, c2, *x, &zs)?;
        for (u, v) in closed.iter().zip(sampled.iter()) {
            fit = fit.merge(Discrepancy::between(*u, *v));
        }
    }

    let own = build_second_order_all(first)?;
    let other = build_second_order_all(second)?;
    let mut conj: f64 = 0.0;
    for i in 0..3 {
        let moved = a.compose(&own[i], cap)?.compose(&inv, cap)?;
        conj = conj.max(sampled_relative_difference(&moved, &other[i], &xs, &ctx)?);
    }
    let aux = forward.max(backward).max(ab).max(ba).max(fit.relative());
    // construction-level checks sit one rung below the conjugation tolerance
    let value = conj.max(aux * 10.0);
    Ok(Measurement::new(
        value,
        xs.len(),
        format!(
            "conjugation {conj:.2e}; A Phi {forward:.2e}; B Psi {backward:.2e}; AB {ab:.2e}; BA {ba:.2e}; fit {:.2e} (weighted x10)",
            fit.relative()
        ),
    ))
}

fn check_determinism(cfg: &RunConfig, b: &Built) -> Result<Measurement> {
    let again = build(cfg)?;
    let mut mismatches = 0;
    let mut what = Vec::new();
    if again.artifact_text() != b.artifact_text() {
        mismatches += 1;
        what.push("ring");
    }
    let rec =
        |x: &Built| serde_json::to_string(&x.draw.second.record()).expect("record serializes");
    if rec(&again) != rec(b) {
        mismatches += 1;
        what.push("second basis");
    }
    let detail = if what.is_empty() {
        "rebuilt artifacts byte-identical".to_string()
    } else {
        format!("differs: {}", what.join(", "))
    };
    Ok(Measurement::new(mismatches as f64, 2, detail))
}

fn measure(name: &str, cfg: &RunConfig, b: &Built) -> Result<Measurement> {
    let omega = &b.draw.spectral.params.omega;
    match name {
        "theta_quasi_periodicity" => check_quasi_periodicity(cfg, omega),
        "x_z_derivative_identity" => check_xz_derivative(b),
        "divisor_intersection_count" => check_intersections(cfg, omega),
        "module_dimension" => check_dimension(b),
        "module_freeness" => check_freeness(b),
        "second_x_derivative_identity" => check_second_derivative(b),
        "eigen_relations" => check_eigen(b),
        "ring_commutativity" => check_commutativity(b),
        "commutator_derivative_rule" => check_commutator_rule(b),
        "quadratic_theta_expansion" => check_alphas(cfg, b),
        "generator_independence" => check_generators(b),
        "basis_change_conjugation" => check_conjugation(b),
        "determinism" => check_determinism(cfg, b),
        other => Err(Error::InvalidInput(format!("unknown identity {other}"))),
    }
}

fn parameters(b: &Built) -> Value {
    let s = &b.draw.spectral;
    json!({
        "c": s.params.c,
        "c_prime": s.params.c_prime,
        "c_second": b.draw.second.params.c_prime,
        "delta": s.delta.z(),
        "p": [s.p[0].z(), s.p[1].z()],
    })
}

/// Runs the named identity checks (all of them when `only` is `None`).
pub fn verify(cfg: &RunConfig, b: &Built, only: Option<&str>) -> Result<ResidualReport> {
    let names: Vec<&str> = match only {
        Some(n) if IDENTITIES.contains(&n) => vec![n],
        Some(n) => return Err(Error::InvalidInput(format!("unknown identity {n}"))),
        None => IDENTITIES.to_vec(),
    };
    let mut identities = Vec::with_capacity(names.len());
    for name in names {
        let tolerance = cfg.tolerance_for(name);
        let (m, err) = match measure(name, cfg, b) {
            Ok(m) => (m, None),
            Err(e) => (
                Measurement {
                    value: f64::MAX,
                    samples: 0,
                    ok: false,
                    detail: String::new(),
                },
                Some(e),
            ),
        };
        let residual = finite(m.value);
        let detail = match err {
            Some(e) => format!("check failed: {e}"),
            None => m.detail,
        };
        identities.push(IdentityResult {
            name: name.to_string(),
            residual,
            samples: m.samples,
            tolerance,
            pass: m.ok && residual < tolerance,
            detail,
        });
    }
    Ok(ResidualReport {
        all_pass: identities.iter().all(|r| r.pass),
        identities,
        parameters: parameters(b),
        resampling: b.draw.log.clone(),
        environment: Fingerprint::current(),
        config: cfg.clone(),
    })
}

/// Build plus full verification.
pub fn run_pipeline(cfg: &RunConfig) -> Result<(Built, ResidualReport)> {
    let b = build(cfg)?;
    let report = verify(cfg, &b, None)?;
    Ok((b, report))
}
