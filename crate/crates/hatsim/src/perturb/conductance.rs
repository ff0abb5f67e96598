//! Conductance-domain operators: read noise, programming variability,
//! drift, and stuck-at faults.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::crossbar::CrossbarConfig;
use crate::error::Result;
use crate::perturb::StuckPolicy;
use crate::tensor::TensorValue;

/// Zero-mean Gaussian read noise, drawn fresh per forward pass. No clipping:
/// a read may transiently leave the programmable range.
pub fn apply_read_noise(g: &TensorValue, sigma_r: f64, rng: &mut impl Rng) -> TensorValue {
    if sigma_r == 0.0 {
        return g.clone();
    }
    let noise = draw_read_noise(g.shape(), sigma_r, rng);
    g.zip_map(&noise, |v, e| v + e).expect("same shape")
}

pub fn draw_read_noise(shape: &[usize], sigma_r: f64, rng: &mut impl Rng) -> TensorValue {
    TensorValue::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        sigma_r * z
    })
}

/// Multiplicative programming variability, sampled once per programming
/// event: `G̃ = clip(G ⊙ (1 + N(0, σ_v²)), G_min, G_max)`.
pub fn apply_variability(
    g: &TensorValue,
    sigma_v: f64,
    cfg: &CrossbarConfig,
    rng: &mut impl Rng,
) -> TensorValue {
    if sigma_v == 0.0 {
        return g.clone();
    }
    let factor = draw_variability_factor(g.shape(), sigma_v, rng);
    g.zip_map(&factor, |v, f| (v * f).clamp(cfg.g_min, cfg.g_max))
        .expect("same shape")
}

pub fn draw_variability_factor(shape: &[usize], sigma_v: f64, rng: &mut impl Rng) -> TensorValue {
    TensorValue::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        1.0 + sigma_v * z
    })
}

/// Deterministic drift attenuation factor `1 − α ln(1 + t/τ)`.
///
/// The returned flag is set when the factor is non-positive, i.e. the whole
/// matrix collapses onto G_min; run reports surface it.
pub fn drift_factor(alpha: f64, tau: f64, t: f64) -> (f64, bool) {
    let factor = 1.0 - alpha * (1.0 + t / tau).ln();
    (factor, factor <= 0.0)
}

/// `G_t = max(G_0 · (1 − α ln(1 + t/τ)), G_min)`.
pub fn apply_drift(g0: &TensorValue, alpha: f64, tau: f64, t: f64, g_min: f64) -> (TensorValue, bool) {
    let (factor, collapsed) = drift_factor(alpha, tau, t);
    (g0.map(|v| (v * factor).max(g_min)), collapsed)
}

/// Sampled stuck realization at weight-coordinate granularity: when a
/// coordinate is stuck, both devices of its differential pair freeze.
#[derive(Debug, Clone)]
pub struct StuckMask {
    /// 1.0 on live coordinates, 0.0 on stuck ones.
    pub active: TensorValue,
    pub policy: StuckPolicy,
    /// Stuck conductances for the positive array. For `HoldProgrammed` this
    /// is filled from the initial programming event; for `PinToBound` it is
    /// drawn here.
    pub pinned_p: TensorValue,
    pub pinned_n: TensorValue,
}

impl StuckMask {
    pub fn stuck_fraction(&self) -> f64 {
        let n = self.active.len() as f64;
        self.active.data().iter().filter(|&&v| v == 0.0).count() as f64 / n
    }

    pub fn frozen(&self) -> Vec<bool> {
        self.active.data().iter().map(|&v| v == 0.0).collect()
    }
}

/// Sample the stuck mask and stuck values.
///
/// `initial` supplies the programmed pair captured at the first programming
/// event; `HoldProgrammed` freezes those values, `PinToBound` draws each
/// device uniformly from `{G_min, G_max}`.
pub fn sample_stuck_mask(
    shape: &[usize],
    rho: f64,
    policy: StuckPolicy,
    cfg: &CrossbarConfig,
    initial: Option<(&TensorValue, &TensorValue)>,
    rng: &mut impl Rng,
) -> StuckMask {
    let active = TensorValue::from_fn(shape, |_| if rng.gen::<f64>() < rho { 0.0 } else { 1.0 });
    let (pinned_p, pinned_n) = match policy {
        StuckPolicy::HoldProgrammed => match initial {
            Some((gp, gn)) => (gp.clone(), gn.clone()),
            None => (
                TensorValue::full(shape, cfg.g_min),
                TensorValue::full(shape, cfg.g_min),
            ),
        },
        StuckPolicy::PinToBound => {
            let draw = |rng: &mut dyn rand::RngCore| {
                if rng.gen::<bool>() {
                    cfg.g_max
                } else {
                    cfg.g_min
                }
            };
            let p = TensorValue::from_fn(shape, |_| draw(rng));
            let n = TensorValue::from_fn(shape, |_| draw(rng));
            (p, n)
        }
    };
    StuckMask {
        active,
        policy,
        pinned_p,
        pinned_n,
    }
}

/// `S ⊙ G + (1 − S) ⊙ C`.
pub fn apply_stuck(g: &TensorValue, active: &TensorValue, c: &TensorValue) -> Result<TensorValue> {
    let kept = g.zip_map(active, |v, s| v * s)?;
    let pinned = c.zip_map(active, |cv, s| cv * (1.0 - s))?;
    kept.zip_map(&pinned, |a, b| a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn cfg() -> CrossbarConfig {
        CrossbarConfig::default()
    }

    #[test]
    fn read_noise_zero_sigma_exact() {
        let g = TensorValue::full(&[3, 3], 5e-5);
        let mut rng = RngStream::new(1, "t").rng();
        let out = apply_read_noise(&g, 0.0, &mut rng);
        assert_eq!(out.data(), g.data());
    }

    #[test]
    fn read_noise_moments() {
        let n = 1_000_000usize;
        let g = TensorValue::zeros(&[1, n]);
        let sigma = 1e-7;
        let mut rng = RngStream::new(2, "t").rng();
        let out = apply_read_noise(&g, sigma, &mut rng);
        let mean: f64 = out.data().iter().sum::<f64>() / n as f64;
        let var: f64 = out.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt());
        assert!((var - sigma * sigma).abs() / (sigma * sigma) < 0.01);
    }

    #[test]
    fn variability_zero_sigma_identity() {
        let g = TensorValue::full(&[2, 2], 3e-5);
        let mut rng = RngStream::new(3, "t").rng();
        let out = apply_variability(&g, 0.0, &cfg(), &mut rng);
        assert_eq!(out.data(), g.data());
    }

    #[test]
    fn variability_mean_preserved_before_clip() {
        let n = 1_000_000usize;
        let sigma_v = 0.1;
        let mut rng = RngStream::new(4, "t").rng();
        let f = draw_variability_factor(&[n], sigma_v, &mut rng);
        let mean: f64 = f.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 3.0 * sigma_v / (n as f64).sqrt());
    }

    #[test]
    fn variability_clips_at_bounds() {
        // A huge positive draw cannot push G above G_max.
        let g = TensorValue::full(&[1, 1000], 1e-4);
        let mut rng = RngStream::new(5, "t").rng();
        let out = apply_variability(&g, 2.0, &cfg(), &mut rng);
        assert!(out.data().iter().all(|&v| (1e-6..=1e-4).contains(&v)));
    }

    #[test]
    fn drift_t0_identity() {
        let g = TensorValue::full(&[2, 2], 7e-5);
        let (out, flag) = apply_drift(&g, 1e-4, 1.0, 0.0, 1e-6);
        assert_eq!(out.data(), g.data());
        assert!(!flag);
    }

    #[test]
    fn drift_hand_value() {
        // G0=1e-4, α=1e-4, τ=1, t=e−1 → 1e-4·(1−1e-4) = 9.999e-5
        let g = TensorValue::full(&[1], 1e-4);
        let (out, _) = apply_drift(&g, 1e-4, 1.0, std::f64::consts::E - 1.0, 1e-6);
        assert!((out.data()[0] - 9.999e-5).abs() / 9.999e-5 < 1e-12);
    }

    #[test]
    fn drift_monotone_and_collapse_flag() {
        let g = TensorValue::full(&[1], 1e-4);
        let mut prev = f64::INFINITY;
        for t in [0.0, 1.0, 10.0, 100.0] {
            let (out, _) = apply_drift(&g, 0.05, 1.0, t, 1e-6);
            assert!(out.data()[0] <= prev);
            prev = out.data()[0];
        }
        // α·ln(1+t/τ) ≥ 1 collapses to G_min and flags.
        let (out, flag) = apply_drift(&g, 1.0, 1.0, 10.0, 1e-6);
        assert!(flag);
        assert!(out.data().iter().all(|&v| v == 1e-6));
    }

    #[test]
    fn stuck_mask_extremes() {
        let mut rng = RngStream::new(6, "t").rng();
        let m0 = sample_stuck_mask(&[4, 4], 0.0, StuckPolicy::PinToBound, &cfg(), None, &mut rng);
        assert_eq!(m0.stuck_fraction(), 0.0);
        let m1 = sample_stuck_mask(&[4, 4], 1.0, StuckPolicy::PinToBound, &cfg(), None, &mut rng);
        assert_eq!(m1.stuck_fraction(), 1.0);
    }

    #[test]
    fn stuck_fraction_binomial() {
        let n = 1_000_000usize;
        let rho = 0.1;
        let mut rng = RngStream::new(7, "t").rng();
        let m = sample_stuck_mask(&[n], rho, StuckPolicy::PinToBound, &cfg(), None, &mut rng);
        let bound = 3.0 * (rho * (1.0 - rho) / n as f64).sqrt();
        assert!((m.stuck_fraction() - rho).abs() < bound);
    }

    #[test]
    fn apply_stuck_select() {
        let g = TensorValue::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = TensorValue::new(vec![2, 2], vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        let all_live = TensorValue::full(&[2, 2], 1.0);
        assert_eq!(apply_stuck(&g, &all_live, &c).unwrap().data(), g.data());
        let all_stuck = TensorValue::full(&[2, 2], 0.0);
        assert_eq!(apply_stuck(&g, &all_stuck, &c).unwrap().data(), c.data());
        let mixed = TensorValue::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            apply_stuck(&g, &mixed, &c).unwrap().data(),
            &[1.0, 9.0, 9.0, 4.0]
        );
    }
}
