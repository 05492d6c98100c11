//! Fast built-in invariant checks behind the `selftest` subcommand.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fusion::CsaParams;
use crate::head::{aggregate, PatchAssessment};
use crate::ladder::labels_from_jnd;
use crate::search::{naive_search, window_search, SearchSpec};
use crate::tape::{grouped_attention, Tape};
use crate::types::{CodecSpec, LabelOrigin, LabelSequence, LevelRange};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-2.0..2.0))
}

fn attention_normalization() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (tq, tk) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let q = random(tq, 8, &mut rng);
        let k = random(tk, 8, &mut rng);
        let v = random(tk, 4, &mut rng);
        let (_, probs) = grouped_attention(q.view(), k.view(), v.view(), 1, 2);
        for p in &probs {
            for row in p.rows() {
                worst = worst.max((row.sum() - 1.0).abs());
            }
        }
    }
    CheckResult {
        name: "attention_normalization",
        passed: worst <= 1e-6,
        detail: format!("max |row sum - 1| = {worst:.1e}"),
    }
}

fn search_oracle() -> CheckResult {
    let codec = CodecSpec::jpeg().with_range(LevelRange::new(1, 10).expect("static range"));
    let mut mismatches = 0usize;
    for mask in 0u32..1024 {
        let bits: Vec<u8> = (0..10).map(|i| ((mask >> i) & 1) as u8).collect();
        let seq = LabelSequence::from_levels(codec.clone(), &bits, LabelOrigin::Predicted)
            .expect("static sequence");
        for w in 0..=3u32 {
            for theta in 0..=w + 1 {
                let got = window_search(&seq, &SearchSpec::window(w, theta)).map(|r| r.jnd_level);
                let want = (0..bits.len())
                    .filter(|&s| s + (w as usize) < bits.len())
                    .find(|&s| bits[s..=s + w as usize].iter().map(|&b| u32::from(b)).sum::<u32>() <= theta)
                    .map(|s| s as u32 + 1);
                if got.ok() != Some(want) {
                    mismatches += 1;
                }
            }
        }
    }
    let full = CodecSpec::jpeg();
    for t in 1..=100i64 {
        let hit = labels_from_jnd(t, &full)
            .and_then(|s| naive_search(&s))
            .map(|r| r.jnd_level == Some(t as u32));
        if !matches!(hit, Ok(true)) {
            mismatches += 1;
        }
    }
    CheckResult {
        name: "search_oracle",
        passed: mismatches == 0,
        detail: format!("{mismatches} mismatches against brute force and round trip"),
    }
}

fn csa_gradients() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let query = random(4, 8, &mut rng);
    let kv = random(4, 8, &mut rng);
    let probe = random(4, 8, &mut rng);
    let params = CsaParams::<f64>::init(8, 2, &mut rng);
    let loss = |q: &Array2<f64>, k: &Array2<f64>| {
        let mut t = Tape::new();
        let (qv, kv) = (t.constant(q.clone()), t.constant(k.clone()));
        let o = params.forward_tape(&mut t, qv, kv, 1, false);
        let w = t.constant(probe.clone());
        let m = t.mul(o, w);
        let s = t.sum_all(m);
        t.scalar(s)
    };
    let mut t = Tape::new();
    let (qv, kvv) = (t.input(query.clone()), t.input(kv.clone()));
    let o = params.forward_tape(&mut t, qv, kvv, 1, false);
    let w = t.constant(probe.clone());
    let m = t.mul(o, w);
    let s = t.sum_all(m);
    let g = t.backward(s);
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for (which, var) in [(0, qv), (1, kvv)] {
        let analytic = g.var(var).cloned().unwrap_or_else(|| Array2::zeros((4, 8)));
        let mut numeric = Array2::<f64>::zeros((4, 8));
        for ((i, j), slot) in numeric.indexed_iter_mut() {
            let (mut qu, mut ku, mut qd, mut kd) = (query.clone(), kv.clone(), query.clone(), kv.clone());
            if which == 0 {
                qu[[i, j]] += eps;
                qd[[i, j]] -= eps;
            } else {
                ku[[i, j]] += eps;
                kd[[i, j]] -= eps;
            }
            *slot = (loss(&qu, &ku) - loss(&qd, &kd)) / (2.0 * eps);
        }
        let err = (&analytic - &numeric).mapv(|d| d * d).sum().sqrt();
        let scale = numeric.mapv(|d| d * d).sum().sqrt().max(1e-12);
        worst = worst.max(err / scale);
    }
    CheckResult {
        name: "csa_input_gradients",
        passed: worst < 1e-3,
        detail: format!("max relative error {worst:.1e}"),
    }
}

fn aggregation_scale() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..16);
        let a: Vec<PatchAssessment<f64>> = (0..n)
            .map(|_| PatchAssessment {
                score: rng.gen_range(-5.0..5.0),
                weight: rng.gen_range(0.01..3.0),
            })
            .collect();
        let base = aggregate(&a).map(|d| d.q_dist).unwrap_or(f64::NAN);
        for c in [1e-3, 1e3] {
            let b: Vec<_> = a
                .iter()
                .map(|p| PatchAssessment {
                    score: p.score,
                    weight: p.weight * c,
                })
                .collect();
            let q = aggregate(&b).map(|d| d.q_dist).unwrap_or(f64::NAN);
            worst = worst.max((q - base).abs());
        }
    }
    CheckResult {
        name: "aggregation_scale_invariance",
        passed: worst <= 1e-9,
        detail: format!("max deviation {worst:.1e}"),
    }
}

/// Runs every check; all must pass for a healthy build.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        attention_normalization(),
        search_oracle(),
        csa_gradients(),
        aggregation_scale(),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for r in super::run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
