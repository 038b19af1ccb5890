//! Mean-max pooling of token scores.
//!
//! The mean is taken over an exact fixed-point sum so it depends only on the
//! multiset of token scores: reordering tokens or repeating the whole multiset
//! k times reproduces the same bits.

/// Token scores are quantized to multiples of 2^-96 before summing.
const SCALE: f64 = 79_228_162_514_264_337_593_543_950_336.0; // 2^96

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Running accumulator over the scored-token set of one candidate.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScorePool {
    sum: i128,
    count: u64,
    max: Option<f64>,
}

impl ScorePool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one token score. Scores must lie in `[-1, 1]`.
    #[inline]
    pub fn push(&mut self, score: f64) {
        debug_assert!(
            (-1.0..=1.0).contains(&score),
            "token score {score} out of range"
        );
        self.sum += (score * SCALE) as i128;
        self.count += 1;
        self.max = Some(match self.max {
            Some(m) if m >= score => m,
            _ => score,
        });
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn max(&self) -> Option<f64> {
        self.max
    }

    /// Mean of the pushed scores, a function of the reduced fraction
    /// `sum / count` only.
    pub fn mean(&self) -> Option<f64> {
        if self.count == 0 {
            return None;
        }
        let g = gcd(self.sum.unsigned_abs(), self.count as u128).max(1);
        let num = self.sum / g as i128;
        let den = self.count as u128 / g;
        Some(num as f64 / den as f64 / SCALE)
    }
}

impl Extend<f64> for ScorePool {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for s in iter {
            self.push(s);
        }
    }
}

/// Pooled components of one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pooled {
    /// `w_mu·mu + w_m·m + eta·kappa`, or `-inf` when nothing was scored.
    pub score: f64,
    pub mu: Option<f64>,
    pub max: Option<f64>,
    pub kappa: Option<f64>,
}

/// Pools a scored-token set into the sample score. `total_tokens` is the
/// candidate's full length, SPECIAL positions included.
pub fn pool(pool: &ScorePool, total_tokens: u64, w_mu: f64, w_m: f64, eta: f64) -> Pooled {
    match (pool.mean(), pool.max()) {
        (Some(mu), Some(m)) if total_tokens > 0 => {
            let kappa = pool.count() as f64 / total_tokens as f64;
            Pooled {
                score: w_mu * mu + w_m * m + eta * kappa,
                mu: Some(mu),
                max: Some(m),
                kappa: Some(kappa),
            }
        }
        _ => Pooled {
            score: f64::NEG_INFINITY,
            mu: None,
            max: None,
            kappa: None,
        },
    }
}

/// Convenience wrapper over a slice of token scores.
pub fn pool_scores(scores: &[f64], total_tokens: u64, w_mu: f64, w_m: f64, eta: f64) -> Pooled {
    let mut p = ScorePool::new();
    p.extend(scores.iter().copied());
    pool(&p, total_tokens, w_mu, w_m, eta)
}
