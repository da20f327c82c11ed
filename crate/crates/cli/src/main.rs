//! Command-line front end for the theta-ring pipeline.
//!
//! Exit codes: 0 success, 1 an identity failed, 2 bad input or
//! configuration, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use num_complex::Complex64 as C64;
use num_rational::Rational64;
use serde_json::{json, Value};
use theta_ring::avgeom::{intersect_divisors, RootSettings};
use theta_ring::harness::{build, verify, RunConfig};
use theta_ring::opcalc::{evaluate, operators_from_json, EvalContext};
use theta_ring::theta::theta_eval;
use theta_ring::{Characteristic, Error, MultiIndex, RiemannMatrix};

#[derive(Parser)]
#[command(
    name = "theta-ring",
    version,
    about = "Commuting matrix differential operators from genus-2 theta functions"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Evaluate a theta function or one of its derivatives.
    ThetaEval {
        /// `re1,im1,re2,im2`
        #[arg(long, allow_hyphen_values = true)]
        z: String,
        /// JSON file holding `[[[re, im], [re, im]], [[re, im], [re, im]]]`.
        #[arg(long)]
        omega_file: PathBuf,
        /// Characteristic `a1,a2,b1,b2` with rational entries such as `1/2`.
        #[arg(long = "char", allow_hyphen_values = true)]
        characteristic: Option<String>,
        /// Derivative orders `d1,d2`.
        #[arg(long)]
        deriv: Option<String>,
        #[arg(long, default_value_t = 1e-14)]
        eps: f64,
    },
    /// Intersection points of the divisor with its translate by `c'`.
    Points {
        #[arg(long)]
        omega_file: PathBuf,
        /// `re1,im1,re2,im2`
        #[arg(long, allow_hyphen_values = true)]
        c_prime: String,
    },
    /// Draw parameters, build the operators and write the ring artifact.
    Build {
        #[arg(long)]
        config: PathBuf,
        /// Output file; defaults to the configured path or stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build and check the identities, writing the residual report.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Check a single identity.
        #[arg(long)]
        only: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate operator coefficients of a ring artifact on a real grid.
    Emit {
        #[arg(long)]
        ring: PathBuf,
        /// Points per axis.
        #[arg(long, default_value_t = 5)]
        grid: usize,
        #[arg(long, default_value_t = 0.1)]
        radius: f64,
    },
}

enum Failure {
    Input(String),
    Numerical(String),
    Identities,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

fn input<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Input(format!("{what}: {e}"))
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = fs::read_to_string(path).map_err(input(&path.display().to_string()))?;
    serde_json::from_str(&text).map_err(input(&path.display().to_string()))
}

fn read_omega(path: &Path) -> Result<RiemannMatrix, Failure> {
    let pairs: [[[f64; 2]; 2]; 2] =
        serde_json::from_value(read_json(path)?).map_err(input("period matrix"))?;
    Ok(RiemannMatrix::from_pairs(pairs)?)
}

fn parse_list<T: std::str::FromStr>(s: &str, n: usize, what: &str) -> Result<Vec<T>, Failure> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != n {
        return Err(Failure::Input(format!(
            "{what}: expected {n} comma-separated values"
        )));
    }
    parts
        .iter()
        .map(|p| {
            p.parse()
                .map_err(|_| Failure::Input(format!("{what}: cannot parse {p:?}")))
        })
        .collect()
}

fn parse_point(s: &str, what: &str) -> Result<[C64; 2], Failure> {
    let v: Vec<f64> = parse_list(s, 4, what)?;
    if v.iter().any(|t| !t.is_finite()) {
        return Err(Failure::Input(format!("{what}: non-finite entry")));
    }
    Ok([C64::new(v[0], v[1]), C64::new(v[2], v[3])])
}

fn write_out(text: &str, path: Option<&Path>) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(input(&p.display().to_string())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(input(&path.display().to_string()))?;
    Ok(RunConfig::from_json(&text)?)
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json values serialize")
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::ThetaEval {
            z,
            omega_file,
            characteristic,
            deriv,
            eps,
        } => {
            let omega = read_omega(&omega_file)?;
            let z = parse_point(&z, "z")?;
            let ch = match characteristic {
                Some(s) => {
                    let r: Vec<Rational64> = parse_list(&s, 4, "characteristic")?;
                    Characteristic::new([r[0], r[1]], [r[2], r[3]])
                }
                None => Characteristic::zero(),
            };
            let d = match deriv {
                Some(s) => {
                    let d: Vec<u8> = parse_list(&s, 2, "derivative")?;
                    MultiIndex::new(d[0], d[1])?
                }
                None => MultiIndex::ZERO,
            };
            let v = theta_eval(&z, &omega, &ch, d, eps)?;
            println!("{}", json!({ "value": [v.re, v.im] }));
            Ok(())
        }
        Cmd::Points {
            omega_file,
            c_prime,
        } => {
            let omega = read_omega(&omega_file)?;
            let cp = parse_point(&c_prime, "c-prime")?;
            let (p1, p2) = intersect_divisors(&omega, &cp, &RootSettings::default())?;
            println!("{}", pretty(&json!({ "points": [p1, p2] })));
            Ok(())
        }
        Cmd::Build { config, out } => {
            let cfg = load_config(&config)?;
            let built = build(&cfg)?;
            for line in &built.draw.log {
                eprintln!("{line}");
            }
            write_out(
                &built.artifact_text(),
                out.as_deref().or(cfg.output.ring.as_deref()),
            )
        }
        Cmd::Verify { config, only, out } => {
            let cfg = load_config(&config)?;
            let built = build(&cfg)?;
            let report = verify(&cfg, &built, only.as_deref())?;
            for r in &report.identities {
                let mark = if r.pass { "PASS" } else { "FAIL" };
                eprintln!(
                    "{mark} {} residual {:.3e} tolerance {:.1e}",
                    r.name, r.residual, r.tolerance
                );
            }
            write_out(
                &report.to_text(),
                out.as_deref().or(cfg.output.report.as_deref()),
            )?;
            if report.all_pass {
                Ok(())
            } else {
                Err(Failure::Identities)
            }
        }
        Cmd::Emit { ring, grid, radius } => {
            if grid == 0 || !radius.is_finite() || radius <= 0.0 {
                return Err(Failure::Input(
                    "grid must be positive and radius > 0".into(),
                ));
            }
            let artifact = read_json(&ring)?;
            let rec = &artifact["spectral"];
            let pairs: [[[f64; 2]; 2]; 2] =
                serde_json::from_value(rec["omega"].clone()).map_err(input("spectral.omega"))?;
            let eps = rec["eps"]
                .as_f64()
                .ok_or_else(|| Failure::Input("spectral.eps missing".into()))?;
            let ctx = EvalContext::new(RiemannMatrix::from_pairs(pairs)?, eps);
            let ops = operators_from_json(&artifact["ring"])?;
            // real grid inscribed in the polydisc |x_j| <= radius
            let axis: Vec<f64> = (0..grid)
                .map(|i| {
                    if grid == 1 {
                        0.0
                    } else {
                        -radius + 2.0 * radius * i as f64 / (grid - 1) as f64
                    }
                })
                .collect();
            let mut points = Vec::new();
            for &x1 in &axis {
                for &x2 in &axis {
                    let x = [C64::new(x1, 0.0), C64::new(x2, 0.0)];
                    let mut table = serde_json::Map::new();
                    for (name, op) in &ops {
                        let mut terms = Vec::new();
                        for (r, row) in op.entries.iter().enumerate() {
                            for (c, entry) in row.iter().enumerate() {
                                for (beta, coeff) in entry.terms() {
                                    let v = evaluate(coeff, &ctx, x)?;
                                    let b: [u8; 2] = (*beta).into();
                                    terms.push(json!({ "row": r, "col": c, "beta": b, "value": [v.re, v.im] }));
                                }
                            }
                        }
                        table.insert(name.clone(), Value::Array(terms));
                    }
                    points.push(json!({ "x": [x1, x2], "operators": table }));
                }
            }
            println!(
                "{}",
                pretty(&json!({ "grid": grid, "radius": radius, "points": points }))
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Identities) => ExitCode::from(1),
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}
