//! IR-drop models: diagonal input scaling and the coupled fixed-point model.
//!
//! Both act on the pre-activation path of one layer. The simplified model
//! attenuates each input coordinate by its wire depth times a low-order input
//! statistic. The coupled model iterates effective line voltages against the
//! current drawn through the programmed conductances, so the distortion is
//! jointly coupled to weights and inputs; an optional heavy-tailed parasitic
//! term models per-read crosstalk on the wire resistance.

use crate::crossbar::{column_depths, CrossbarConfig};
use crate::error::{HatError, Result};
use crate::tensor::TensorValue;

/// Numerical guard in the input statistic `m(x) = mean|x| / (max|x| + EPS)`.
pub const STAT_EPS: f64 = 1e-12;

/// Numeric ceiling on the lognormal parasitic multiplier. Heavy-tail draws
/// beyond the stability margin are the point of the model — the fixed-point
/// divergence they trigger is the instability symptom — so the cap is only
/// hygiene against absurd exponents.
pub const PARASITIC_CAP: f64 = 50.0;

// ---------------------------------------------------------------------------
// Simplified model: z̃ = W (D(x) x)
// ---------------------------------------------------------------------------

/// Per-sample diagonal scaling state for the simplified model.
#[derive(Debug, Clone)]
pub struct SimplifiedState {
    /// Scaling factors, `[batch, n]`, already floored at zero.
    pub d: TensorValue,
    /// Input statistic m(x) per sample.
    pub m_stat: Vec<f64>,
    /// Mean of |x| per sample.
    pub mean_abs: Vec<f64>,
    /// Max of |x| per sample.
    pub max_abs: Vec<f64>,
    /// Index of the max-|x| entry per sample (first occurrence).
    pub argmax: Vec<usize>,
    /// Column depth / array_size per input coordinate.
    pub depth_ratio: Vec<f64>,
}

/// Build the diagonal `D` for every sample of `x`.
///
/// `D_jj = max(1 − β·(depth_j / array_size)·m(x), 0)` where `depth_j` is the
/// 0-indexed position of column `j` inside its physical block.
pub fn simplified_scaling(
    x: &TensorValue,
    beta: f64,
    array_size: usize,
    eps: f64,
) -> SimplifiedState {
    let b = x.rows();
    let n = x.cols();
    let depth_ratio: Vec<f64> = column_depths(n, array_size)
        .into_iter()
        .map(|d| d as f64 / array_size as f64)
        .collect();

    let mut d = TensorValue::zeros(&[b, n]);
    let mut m_stat = vec![0.0; b];
    let mut mean_abs = vec![0.0; b];
    let mut max_abs = vec![0.0; b];
    let mut argmax = vec![0usize; b];
    for r in 0..b {
        let row = &x.data()[r * n..(r + 1) * n];
        let mut sum = 0.0;
        let mut mx = f64::NEG_INFINITY;
        let mut arg = 0usize;
        for (j, &v) in row.iter().enumerate() {
            sum += v.abs();
            if v.abs() > mx {
                mx = v.abs();
                arg = j;
            }
        }
        let mean = sum / n as f64;
        let m = mean / (mx + eps);
        m_stat[r] = m;
        mean_abs[r] = mean;
        max_abs[r] = mx;
        argmax[r] = arg;
        for j in 0..n {
            d.set(r, j, (1.0 - beta * depth_ratio[j] * m).max(0.0));
        }
    }
    SimplifiedState {
        d,
        m_stat,
        mean_abs,
        max_abs,
        argmax,
        depth_ratio,
    }
}

/// Pre-activation under the simplified model: `z̃ = W_eff (D x)`.
pub fn ir_drop_simplified(
    w_eff: &TensorValue,
    x: &TensorValue,
    beta: f64,
    array_size: usize,
) -> Result<TensorValue> {
    let state = simplified_scaling(x, beta, array_size, STAT_EPS);
    let xs = x.zip_map(&state.d, |v, d| v * d)?;
    crate::tensor::matmul_nt(&xs, w_eff)
}

// ---------------------------------------------------------------------------
// Coupled model: fixed-point line voltages
// ---------------------------------------------------------------------------

/// Parameters of the coupled model (mirrors the `IrDropCoupled` spec variant).
#[derive(Debug, Clone, Copy)]
pub struct CoupledParams {
    pub strength: f64,
    pub r_wire: f64,
    pub max_iters: usize,
    pub tol: f64,
}

/// Converged attenuation state of the coupled fixed point.
///
/// Per sample and input line, the iteration
/// `v⁽ᵏ⁺¹⁾_j = x_j − s·r_wire·pos_j·I_j(v⁽ᵏ⁾)` with
/// `I_j(v) = v_j·Σ_i (G_p + G_n)_{ij}` reduces to an attenuation recursion
/// `φ ← 1 − a·φ` with `a_j = s·r_wire·pos_j·Σ_i(G_p+G_n)_{ij}` (times the
/// parasitic multiplier when present), truncated by the shared stopping rule
/// on the voltage change. Because the stopping rule sees `|Δφ|·|x_j|`, the
/// iteration count — and with it the truncated attenuation — depends on the
/// input magnitude, which is what makes Δ nonlinear in x.
#[derive(Debug, Clone)]
pub struct CoupledState {
    /// Attenuation per sample and line, `[batch, n]`.
    pub phi: TensorValue,
    /// d(phi)/d(a) of the truncated recursion, `[batch, n]`.
    pub dphi_da: TensorValue,
    /// `a = lambda · colsum`: the factor multiplying the column sum, `[batch, n]`.
    pub lambda: TensorValue,
    /// Column sums of `G_p + G_n`, length n.
    pub colsum: Vec<f64>,
    /// Iterations used per sample.
    pub iters: Vec<usize>,
}

/// Run the fixed-point iteration for every sample of `x`.
///
/// `parasitic` is an optional `[batch, n]` multiplier on the wire resistance
/// (1.0 when absent). Divergence — the max voltage change growing for three
/// consecutive iterations — is an error carrying the last iterate.
pub fn coupled_attenuation(
    gsum: &TensorValue,
    x: &TensorValue,
    params: &CoupledParams,
    array_size: usize,
    parasitic: Option<&TensorValue>,
) -> Result<CoupledState> {
    if params.max_iters < 1 {
        return Err(HatError::InvalidSpec("max_iters must be >= 1".into()));
    }
    let (m, n) = (gsum.rows(), gsum.cols());
    let b = x.rows();
    if x.cols() != n {
        return Err(HatError::ShapeMismatch {
            op: "coupled_attenuation",
            lhs: gsum.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let mut colsum = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            colsum[j] += gsum.at(i, j);
        }
    }
    let positions: Vec<f64> = column_depths(n, array_size)
        .into_iter()
        .map(|d| (d + 1) as f64)
        .collect();

    let mut phi = TensorValue::zeros(&[b, n]);
    let mut dphi = TensorValue::zeros(&[b, n]);
    let mut lambda = TensorValue::zeros(&[b, n]);
    let mut iters = vec![0usize; b];

    for r in 0..b {
        let mut a = vec![0.0; n];
        for j in 0..n {
            let par = parasitic.map_or(1.0, |p| p.at(r, j));
            let lam = params.strength * params.r_wire * positions[j] * par;
            lambda.set(r, j, lam);
            a[j] = lam * colsum[j];
        }
        let mut f = vec![1.0; n]; // phi^(0): v = x
        let mut fd = vec![0.0; n];
        let mut prev_change = f64::INFINITY;
        let mut grow = 0usize;
        let mut used = 0usize;
        for _ in 0..params.max_iters {
            used += 1;
            let mut change: f64 = 0.0;
            for j in 0..n {
                let f_new = 1.0 - a[j] * f[j];
                let fd_new = -f[j] - a[j] * fd[j];
                change = change.max((f_new - f[j]).abs() * x.at(r, j).abs());
                f[j] = f_new;
                fd[j] = fd_new;
            }
            if change < params.tol {
                break;
            }
            if change > prev_change {
                grow += 1;
                if grow >= 3 {
                    let last: Vec<f64> = (0..n).map(|j| f[j] * x.at(r, j)).collect();
                    return Err(HatError::CoupledDiverged {
                        iterations: used,
                        last_change: change,
                        last_iterate: last,
                    });
                }
            } else {
                grow = 0;
            }
            prev_change = change;
        }
        iters[r] = used;
        for j in 0..n {
            phi.set(r, j, f[j]);
            dphi.set(r, j, fd[j]);
        }
    }

    Ok(CoupledState {
        phi,
        dphi_da: dphi,
        lambda,
        colsum,
        iters,
    })
}

/// Draw the per-read parasitic multiplier matrix: a capped lognormal
/// `min(exp(σ·ζ), PARASITIC_CAP)` per (sample, line). Returns `None` when
/// `sigma == 0`, which recovers the deterministic model exactly.
pub fn draw_parasitic(
    sigma: f64,
    batch: usize,
    n: usize,
    rng: &mut impl rand::Rng,
) -> Option<TensorValue> {
    if sigma == 0.0 {
        return None;
    }
    use rand_distr::{Distribution, StandardNormal};
    Some(TensorValue::from_fn(&[batch, n], |_| {
        let z: f64 = StandardNormal.sample(rng);
        (sigma * z).exp().min(PARASITIC_CAP)
    }))
}

/// Pre-activation and distortion of the coupled model on plain matrices:
/// returns `(z̃, Δ)` where `Δ = z̃ − W_eff·x`.
pub fn ir_drop_coupled(
    g_p: &TensorValue,
    g_n: &TensorValue,
    scale: f64,
    cfg: &CrossbarConfig,
    x: &TensorValue,
    params: &CoupledParams,
    parasitic: Option<&TensorValue>,
) -> Result<(TensorValue, TensorValue)> {
    let gsum = g_p.zip_map(g_n, |p, n| p + n)?;
    let k = scale / cfg.g_range();
    let w_eff = g_p.zip_map(g_n, |p, n| (p - n) * k)?;
    let state = coupled_attenuation(&gsum, x, params, cfg.array_size, parasitic)?;
    let v = x.zip_map(&state.phi, |xv, f| xv * f)?;
    let z = crate::tensor::matmul_nt(&v, &w_eff)?;
    let z_clean = crate::tensor::matmul_nt(x, &w_eff)?;
    let delta = z.zip_map(&z_clean, |a, b| a - b)?;
    Ok((z, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossbar::program_weights;

    fn cfg() -> CrossbarConfig {
        CrossbarConfig::default()
    }

    #[test]
    fn simplified_zero_beta_identity() {
        let w = TensorValue::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
        let x = TensorValue::new(vec![1, 3], vec![1.0, 2.0, -1.0]).unwrap();
        let z = ir_drop_simplified(&w, &x, 0.0, 128).unwrap();
        let direct = crate::tensor::matmul_nt(&x, &w).unwrap();
        assert_eq!(z.data(), direct.data());
    }

    #[test]
    fn simplified_single_column_identity() {
        // depth 0 → D = 1 regardless of beta.
        let w = TensorValue::new(vec![2, 1], vec![0.5, -0.5]).unwrap();
        let x = TensorValue::new(vec![1, 1], vec![3.0]).unwrap();
        let z = ir_drop_simplified(&w, &x, 5.0, 128).unwrap();
        assert_eq!(z.data(), &[1.5, -1.5]);
    }

    #[test]
    fn simplified_equal_entries_hand_d() {
        // All-equal |x| → m(x) ≈ 1; block of 2 → depths {0, 1}.
        let x = TensorValue::new(vec![1, 2], vec![2.0, 2.0]).unwrap();
        let array_size = 16usize;
        let st = simplified_scaling(&x, 0.5, array_size, STAT_EPS);
        assert!((st.m_stat[0] - 1.0).abs() < 1e-9);
        assert!((st.d.at(0, 0) - 1.0).abs() < 1e-12);
        let expect = 1.0 - 0.5 * (1.0 / array_size as f64);
        assert!((st.d.at(0, 1) - expect).abs() < 1e-9);
    }

    #[test]
    fn coupled_zero_strength_identity() {
        let w = TensorValue::new(vec![2, 2], vec![0.5, -0.25, 0.1, 0.9]).unwrap();
        let pair = program_weights(&w, &cfg());
        let x = TensorValue::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let params = CoupledParams {
            strength: 0.0,
            r_wire: 50.0,
            max_iters: 20,
            tol: 1e-9,
        };
        let (z, delta) = ir_drop_coupled(
            &pair.g_p, &pair.g_n, pair.scale, &cfg(), &x, &params, None,
        )
        .unwrap();
        assert!(delta.data().iter().all(|&d| d == 0.0));
        let w_eff = crate::crossbar::reconstruct_effective(&pair, &cfg()).unwrap();
        let direct = crate::tensor::matmul_nt(&x, &w_eff).unwrap();
        assert_eq!(z.data(), direct.data());
    }

    #[test]
    fn coupled_zero_wire_identity() {
        let w = TensorValue::new(vec![1, 2], vec![0.7, -0.3]).unwrap();
        let pair = program_weights(&w, &cfg());
        let x = TensorValue::new(vec![1, 2], vec![0.4, 1.3]).unwrap();
        let params = CoupledParams {
            strength: 1.0,
            r_wire: 0.0,
            max_iters: 20,
            tol: 1e-9,
        };
        let (_, delta) = ir_drop_coupled(
            &pair.g_p, &pair.g_n, pair.scale, &cfg(), &x, &params, None,
        )
        .unwrap();
        assert!(delta.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn coupled_single_cell_one_iteration_closed_form() {
        // 1×1 array, one iteration: v¹ = x·(1 − s·r·1·(G_p+G_n)),
        // z̃ = W_eff·v¹.
        let w = TensorValue::new(vec![1, 1], vec![0.5]).unwrap();
        let c = cfg();
        let pair = program_weights(&w, &c);
        let gsum = pair.g_p.data()[0] + pair.g_n.data()[0];
        let x = TensorValue::new(vec![1, 1], vec![2.0]).unwrap();
        let (s, r_wire) = (0.8, 1000.0);
        let params = CoupledParams {
            strength: s,
            r_wire,
            max_iters: 1,
            tol: 1e-30,
        };
        let (z, _) =
            ir_drop_coupled(&pair.g_p, &pair.g_n, pair.scale, &c, &x, &params, None).unwrap();
        let w_eff = (pair.g_p.data()[0] - pair.g_n.data()[0]) * pair.scale / c.g_range();
        let v1 = 2.0 * (1.0 - s * r_wire * 1.0 * gsum);
        assert!((z.data()[0] - w_eff * v1).abs() < 1e-15);
    }

    #[test]
    fn coupled_divergence_errors_with_last_iterate() {
        let w = TensorValue::new(vec![1, 1], vec![1.0]).unwrap();
        let c = cfg();
        let pair = program_weights(&w, &c);
        let x = TensorValue::new(vec![1, 1], vec![1.0]).unwrap();
        // a = s·r·colsum must exceed 1 for the alternating iteration to grow.
        let params = CoupledParams {
            strength: 1.0,
            r_wire: 3.0e4,
            max_iters: 50,
            tol: 1e-12,
        };
        let err = ir_drop_coupled(&pair.g_p, &pair.g_n, pair.scale, &c, &x, &params, None)
            .unwrap_err();
        match err {
            HatError::CoupledDiverged { last_iterate, .. } => {
                assert_eq!(last_iterate.len(), 1);
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn coupled_delta_nonlinear_in_x() {
        // Truncation by the absolute tolerance makes the iteration count
        // depend on the input scale, so Δ(2x) ≠ 2Δ(x).
        let w = TensorValue::new(vec![2, 2], vec![0.9, -0.4, 0.3, 0.8]).unwrap();
        let c = cfg();
        let pair = program_weights(&w, &c);
        let x = TensorValue::new(vec![1, 2], vec![0.9, 1.1]).unwrap();
        let x2 = x.map(|v| 2.0 * v);
        // colsum ≈ 1e-4-scale; pick s·r so a ≈ 0.5 and tol loose enough to
        // truncate at different depths.
        let params = CoupledParams {
            strength: 1.0,
            r_wire: 2.4e3,
            max_iters: 200,
            tol: 1e-4,
        };
        let (_, d1) =
            ir_drop_coupled(&pair.g_p, &pair.g_n, pair.scale, &c, &x, &params, None).unwrap();
        let (_, d2) =
            ir_drop_coupled(&pair.g_p, &pair.g_n, pair.scale, &c, &x2, &params, None).unwrap();
        let diff: f64 = d2
            .data()
            .iter()
            .zip(d1.data())
            .map(|(a, b)| (a - 2.0 * b).abs())
            .sum();
        let norm: f64 = d2.data().iter().map(|v| v.abs()).sum();
        assert!(
            diff / norm.max(1e-300) > 1e-9,
            "delta scaled linearly: diff={diff:e} norm={norm:e}"
        );
    }

    #[test]
    fn parasitic_zero_sigma_is_none() {
        let mut rng = crate::rng::RngStream::new(1, "t").rng();
        assert!(draw_parasitic(0.0, 4, 4, &mut rng).is_none());
        let p = draw_parasitic(1.0, 4, 4, &mut rng).unwrap();
        assert!(p.data().iter().all(|&v| v > 0.0 && v <= PARASITIC_CAP));
    }
}
