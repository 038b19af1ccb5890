use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trim_core::saliency::{
    aggregate_row_saliency, aggregated_saliency, column_saliency, row_saliency,
};
use trim_core::synth::{generate, SynthSpec};
use trim_core::{SaliencyConfig, ValidationRecord};

const EPS: f64 = 1e-8;

fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n)
        .map(|_| {
            // Mix of sparse and dense rows.
            if rng.random::<f64>() < 0.3 {
                0.0
            } else {
                rng.random::<f64>().powi(rng.random_range(1..6))
            }
        })
        .collect();
    if row.iter().all(|&x| x == 0.0) {
        row[rng.random_range(0..n)] = 1.0;
    }
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= s);
    row
}

#[test]
fn row_saliency_bounds_over_random_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20_000 {
        let n = rng.random_range(1..64);
        let row = random_row(&mut rng, n);
        let q = row_saliency(&row, n, EPS).unwrap();
        assert!((0.0..=1.0).contains(&q), "q={q} for {row:?}");
    }
}

#[test]
fn extremes() {
    for n in 1..200 {
        for hot in [0, n / 2, n - 1] {
            let mut row = vec![0.0f64; n];
            row[hot] = 1.0;
            assert!(row_saliency(&row, n, EPS).unwrap() >= 1.0 - 1e-6);
        }
        if n >= 2 {
            let row = vec![1.0 / n as f64; n];
            assert!(row_saliency(&row, n, EPS).unwrap() <= 1e-6, "n={n}");
            // Uniform over a causal prefix with trailing zeros.
            let mut row = vec![0.0; n + 3];
            row[..n].iter_mut().for_each(|x| *x = 1.0 / n as f64);
            assert!(row_saliency(&row, n + 3, EPS).unwrap() <= 1e-6);
        }
    }
}

#[test]
fn sharper_rows_score_higher() {
    let mut prev = -1.0;
    for k in 0..50 {
        let p = 0.5 + 0.01 * k as f64;
        let row = [p, 1.0 - p];
        let q = row_saliency(&row, 2, EPS).unwrap();
        assert!(q > prev);
        prev = q;
    }
}

/// Straightforward recomputation of Q, K and alpha.
fn reference(rec: &ValidationRecord, cfg: &SaliencyConfig) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let t = rec.len();
    let used = cfg.layers.min(rec.layers);
    let slices = (used * rec.heads) as f64;
    let mut q = vec![0.0; t];
    let mut k_raw = vec![0.0; t];
    let mut received = vec![false; t];
    for l in rec.layers - used..rec.layers {
        for h in 0..rec.heads {
            let a = rec.attention_matrix(l, h);
            for i in 0..t {
                let row: Vec<f64> = a[i * t..(i + 1) * t].iter().map(|&x| x as f64).collect();
                let support = row.iter().filter(|&&x| x > 0.0).count();
                let qi = if support == 1 {
                    1.0
                } else {
                    let ent: f64 = row.iter().map(|&x| -x * (x + EPS).ln()).sum();
                    (1.0 - ent / (support as f64).ln()).clamp(0.0, 1.0)
                };
                q[i] += qi / slices;
            }
            for j in 0..t {
                let col: Vec<f64> = (0..t)
                    .map(|i| a[i * t + j] as f64)
                    .filter(|&x| x > 0.0)
                    .collect();
                if !col.is_empty() {
                    received[j] = true;
                    k_raw[j] += col.iter().sum::<f64>() / col.len() as f64 / slices;
                }
            }
        }
    }
    let live: Vec<f64> = (0..t).filter(|&j| received[j]).map(|j| k_raw[j]).collect();
    let lo = live.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let k: Vec<f64> = (0..t)
        .map(|j| {
            if received[j] {
                (k_raw[j] - lo) / (hi - lo + EPS)
            } else {
                0.0
            }
        })
        .collect();
    let alpha = (0..t).map(|i| cfg.w_q * q[i] + cfg.w_k * k[i]).collect();
    (q, k, alpha)
}

fn corpus(seed: u64, layers: usize, heads: usize) -> Vec<ValidationRecord> {
    generate(&SynthSpec {
        seed,
        layers,
        heads,
        validation_samples: 6,
        validation_len: (1, 24),
        candidates: 0,
        ..SynthSpec::default()
    })
    .validation
}

#[test]
fn matches_reference_and_stays_in_range() {
    for seed in 0..30 {
        let layers = 1 + seed as usize % 3;
        for rec in corpus(seed, layers, 2) {
            for cfg in [
                SaliencyConfig::default(),
                SaliencyConfig {
                    layers: 1,
                    w_q: 0.8,
                    w_k: 0.2,
                    ..Default::default()
                },
            ] {
                let map = aggregated_saliency(&rec, &cfg).unwrap();
                let (q, k, alpha) = reference(&rec, &cfg);
                for i in 0..rec.len() {
                    assert!((map.q[i] - q[i]).abs() < 1e-12);
                    assert!((map.k[i] - k[i]).abs() < 1e-12);
                    assert!((map.alpha[i] - alpha[i]).abs() < 1e-12);
                    for v in [map.q[i], map.k[i], map.alpha[i]] {
                        assert!((0.0..=1.0).contains(&v));
                    }
                }
            }
        }
    }
}

#[test]
fn layer_budget_is_capped() {
    for rec in corpus(3, 2, 2) {
        let six = aggregated_saliency(&rec, &SaliencyConfig::default()).unwrap();
        let two = aggregated_saliency(
            &rec,
            &SaliencyConfig {
                layers: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(six, two);
    }
}

#[test]
fn only_final_layers_count() {
    for rec in corpus(4, 3, 2) {
        let t = rec.len();
        let per_layer = rec.heads * t * t;
        let mut last = rec.clone();
        last.layers = 1;
        last.attention = rec.attention[2 * per_layer..].to_vec();
        let cfg = SaliencyConfig {
            layers: 1,
            ..Default::default()
        };
        assert_eq!(
            aggregated_saliency(&rec, &cfg).unwrap(),
            aggregated_saliency(&last, &cfg).unwrap()
        );
    }
}

proptest! {
    #[test]
    fn head_order_does_not_matter(seed in any::<u64>(), rot in 1usize..3) {
        for rec in corpus(seed, 2, 3) {
            let t = rec.len();
            let m = t * t;
            let mut perm = rec.clone();
            for l in 0..rec.layers {
                for h in 0..rec.heads {
                    let src = (h + rot) % rec.heads;
                    let dst = (l * rec.heads + h) * m;
                    let from = (l * rec.heads + src) * m;
                    perm.attention[dst..dst + m].copy_from_slice(&rec.attention[from..from + m]);
                }
            }
            let cfg = SaliencyConfig::default();
            let a = aggregated_saliency(&rec, &cfg).unwrap();
            let b = aggregated_saliency(&perm, &cfg).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn column_scaling_spans_unit_interval(seed in any::<u64>()) {
        for rec in corpus(seed, 1, 1).into_iter().filter(|r| r.len() >= 3) {
            let k = column_saliency(&rec, &SaliencyConfig::default()).unwrap();
            let max = k.iter().cloned().fold(0.0, f64::max);
            let min = k.iter().cloned().fold(1.0, f64::min);
            prop_assert!(max > 0.99 && max <= 1.0);
            prop_assert_eq!(min, 0.0);
            let q = aggregate_row_saliency(&rec, &SaliencyConfig::default()).unwrap();
            // The first query sees one key only.
            prop_assert_eq!(q[0], 1.0);
        }
    }
}
