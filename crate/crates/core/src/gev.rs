//! Generalized extreme value distribution: density, quantiles, maximum
//! likelihood fitting and target-level derivation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::LevelRange;

/// Shapes closer to zero than this use the Gumbel limit.
const GUMBEL_EPS: f64 = 1e-8;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

pub const DEFAULT_MIN_SAMPLES: usize = 5;
pub const DEFAULT_QUANTILE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    pub location: f64,
    pub scale: f64,
    pub shape: f64,
}

impl GevParams {
    pub fn new(location: f64, scale: f64, shape: f64) -> Result<Self> {
        if !(scale > 0.0) || !location.is_finite() || !shape.is_finite() || !scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "GEV parameters ({location}, {scale}, {shape}) are invalid"
            )));
        }
        Ok(Self {
            location,
            scale,
            shape,
        })
    }

    /// `t(x)` with `F(x) = exp(-t(x))`; `None` outside the support.
    fn t(&self, x: f64) -> Option<f64> {
        let z = (x - self.location) / self.scale;
        if self.shape.abs() < GUMBEL_EPS {
            Some((-z).exp())
        } else {
            let u = 1.0 + self.shape * z;
            (u > 0.0).then(|| u.powf(-1.0 / self.shape))
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self.t(x) {
            Some(t) => (-t).exp(),
            // below a lower endpoint (shape > 0) or above an upper one
            None if self.shape > 0.0 => 0.0,
            None => 1.0,
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let z = (x - self.location) / self.scale;
        if self.shape.abs() < GUMBEL_EPS {
            return -self.scale.ln() - z - (-z).exp();
        }
        let u = 1.0 + self.shape * z;
        if u <= 0.0 {
            return f64::NEG_INFINITY;
        }
        -self.scale.ln() - (1.0 + 1.0 / self.shape) * u.ln() - u.powf(-1.0 / self.shape)
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        samples.iter().map(|&x| self.ln_pdf(x)).sum()
    }

    /// Inverse CDF for `p` in (0, 1).
    pub fn quantile(&self, p: f64) -> f64 {
        let y = -p.ln();
        if self.shape.abs() < GUMBEL_EPS {
            self.location - self.scale * y.ln()
        } else {
            self.location + self.scale / self.shape * (y.powf(-self.shape) - 1.0)
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let p: f64 = rng.gen_range(f64::EPSILON..1.0);
        self.quantile(p)
    }
}

/// Quantile rounded to the nearest level and clamped into `range`.
pub fn gev_target(params: &GevParams, quantile: f64, range: LevelRange) -> u32 {
    let x = params.quantile(quantile).round();
    if x.is_nan() {
        return range.lo();
    }
    let clamped = x.clamp(f64::from(range.lo()), f64::from(range.hi()));
    range.clamp(clamped as i64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GevFit {
    pub params: GevParams,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximum-likelihood fit from a moment-matched Gumbel start.
pub fn fit_gev(samples: &[f64], min_n: usize) -> Result<GevFit> {
    if samples.len() < min_n.max(2) {
        return Err(Error::TooFewSamples {
            got: samples.len(),
            need: min_n.max(2),
        });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("non-finite GEV sample".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let variance = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if variance < 1e-9 {
        return Err(Error::DegenerateSamples { variance });
    }
    let scale0 = (6.0 * variance).sqrt() / std::f64::consts::PI;
    let start = [mean - EULER_GAMMA * scale0, scale0.ln(), 0.1];

    let nll = |p: &[f64; 3]| -> f64 {
        let params = GevParams {
            location: p[0],
            scale: p[1].exp(),
            shape: p[2],
        };
        let ll = params.log_likelihood(samples);
        if ll.is_finite() {
            -ll
        } else {
            f64::INFINITY
        }
    };

    let steps = [scale0.max(1e-3) * 0.5, 0.3, 0.1];
    let mut best = nelder_mead(&nll, start, steps, 4000);
    let mut iterations = best.iterations;
    // one restart around the optimum guards against a collapsed simplex
    let mut converged = best.converged;
    if converged {
        let again = nelder_mead(&nll, best.point, [steps[0] * 0.1, 0.03, 0.01], 4000);
        iterations += again.iterations;
        converged = again.converged;
        if again.value <= best.value {
            best = again;
        }
    }
    if !converged || !best.value.is_finite() {
        return Err(Error::NoConvergence {
            iterations,
            trace: best.trace,
        });
    }
    let params = GevParams::new(best.point[0], best.point[1].exp(), best.point[2])?;
    Ok(GevFit {
        params,
        log_likelihood: -best.value,
        iterations,
        converged,
    })
}

struct Minimum {
    point: [f64; 3],
    value: f64,
    iterations: usize,
    converged: bool,
    /// Best objective value every 100 iterations, last 20 kept.
    trace: Vec<f64>,
}

/// Standard Nelder–Mead on three parameters.
fn nelder_mead(
    f: &dyn Fn(&[f64; 3]) -> f64,
    start: [f64; 3],
    steps: [f64; 3],
    max_iter: usize,
) -> Minimum {
    const ALPHA: f64 = 1.0;
    const GAMMA: f64 = 2.0;
    const RHO: f64 = 0.5;
    const SIGMA: f64 = 0.5;
    const F_TOL: f64 = 1e-10;
    const X_TOL: f64 = 1e-9;

    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    simplex.push((start, f(&start)));
    for i in 0..3 {
        let mut p = start;
        p[i] += steps[i];
        simplex.push((p, f(&p)));
    }
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iter = 0;
    while iter < max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if iter % 100 == 0 {
            trace.push(simplex[0].1);
            if trace.len() > 20 {
                trace.remove(0);
            }
        }
        let spread = (simplex[3].1 - simplex[0].1).abs();
        let size = simplex[1..]
            .iter()
            .map(|(p, _)| {
                (0..3)
                    .map(|i| (p[i] - simplex[0].0[i]).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if simplex[0].1.is_finite() && spread <= F_TOL * (1.0 + simplex[0].1.abs()) && size <= X_TOL {
            converged = true;
            break;
        }
        iter += 1;

        let mut centroid = [0.0; 3];
        for (p, _) in &simplex[..3] {
            for i in 0..3 {
                centroid[i] += p[i] / 3.0;
            }
        }
        let worst = simplex[3];
        let along = |c: f64| -> [f64; 3] {
            std::array::from_fn(|i| centroid[i] + c * (worst.0[i] - centroid[i]))
        };
        let reflected = along(-ALPHA);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = along(-GAMMA);
            let fe = f(&expanded);
            simplex[3] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
            continue;
        }
        if fr < simplex[2].1 {
            simplex[3] = (reflected, fr);
            continue;
        }
        let contracted = if fr < worst.1 { along(-RHO) } else { along(RHO) };
        let fc = f(&contracted);
        if fc < worst.1.min(fr) {
            simplex[3] = (contracted, fc);
            continue;
        }
        let best = simplex[0].0;
        for entry in simplex.iter_mut().skip(1) {
            let p: [f64; 3] = std::array::from_fn(|i| best[i] + SIGMA * (entry.0[i] - best[i]));
            *entry = (p, f(&p));
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    Minimum {
        point: simplex[0].0,
        value: simplex[0].1,
        iterations: iter,
        converged,
        trace,
    }
}

/// One row of the fit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GevLogRow {
    pub image_id: String,
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
    pub target: u32,
}

pub fn write_gev_log(path: &std::path::Path, rows: &[GevLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &std::path::Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Bisection on the CDF, independent of the closed-form inverse.
    fn bisect_quantile(p: &GevParams, q: f64) -> f64 {
        let (mut lo, mut hi) = (p.location - 1e4, p.location + 1e4);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if p.cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn degenerate_and_short_inputs() {
        assert!(matches!(
            fit_gev(&[40.0; 10], 5),
            Err(Error::DegenerateSamples { .. })
        ));
        assert!(matches!(
            fit_gev(&[1.0, 2.0, 3.0], 5),
            Err(Error::TooFewSamples { got: 3, need: 5 })
        ));
    }

    #[test]
    fn recovers_known_parameters() {
        let truth = GevParams::new(30.0, 5.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let xs: Vec<f64> = (0..200).map(|_| truth.sample(&mut rng)).collect();
        let fit = fit_gev(&xs, DEFAULT_MIN_SAMPLES).unwrap();
        assert!(fit.converged);
        assert!((fit.params.location - 30.0).abs() <= 1.0, "{:?}", fit.params);
        assert!((fit.params.scale - 5.0).abs() <= 0.8, "{:?}", fit.params);
        // the optimum beats the truth on its own sample
        assert!(fit.log_likelihood >= truth.log_likelihood(&xs) - 1e-9);
    }

    #[test]
    fn gumbel_cdf_at_location() {
        let p = GevParams::new(50.0, 10.0, 0.0).unwrap();
        let q = (-1.0f64).exp();
        assert!((p.cdf(50.0) - q).abs() < 1e-15);
        assert_eq!(gev_target(&p, q, LevelRange::default()), 50);
    }

    #[test]
    fn median_matches_bisection() {
        for (mu, s, xi) in [(30.0, 5.0, 0.1), (60.0, 12.0, -0.2), (45.0, 3.0, 0.0), (20.0, 8.0, 0.4)] {
            let p = GevParams::new(mu, s, xi).unwrap();
            let closed = p.quantile(0.5);
            assert!((closed - bisect_quantile(&p, 0.5)).abs() < 1e-6);
            assert_eq!(
                gev_target(&p, 0.5, LevelRange::default()),
                LevelRange::default().clamp(closed.round() as i64)
            );
        }
    }

    #[test]
    fn targets_are_clamped() {
        let low = GevParams::new(-20.0, 2.0, 0.0).unwrap();
        assert_eq!(gev_target(&low, 0.5, LevelRange::default()), 1);
        let high = GevParams::new(500.0, 2.0, 0.0).unwrap();
        assert_eq!(gev_target(&high, 0.5, LevelRange::default()), 100);
    }

    #[test]
    fn log_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gev.csv");
        let rows = vec![GevLogRow {
            image_id: "a".into(),
            mu: 1.5,
            sigma: 2.0,
            xi: 0.1,
            target: 3,
        }];
        write_gev_log(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "image_id,mu,sigma,xi,target");
        let back: Vec<GevLogRow> = csv::Reader::from_path(&path)
            .unwrap()
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .unwrap();
        assert_eq!(back, rows);
    }
}
