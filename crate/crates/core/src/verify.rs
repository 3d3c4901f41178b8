//! Self-check suite: fast paths against loop oracles, analytic gradients
//! against finite differences, and the cost-model identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cac::{cac_backward, cac_forward_hard, cac_forward_soft, CacConvParams, PbarMode};
use crate::cost::{madds_cac, madds_standard, rho_upper_bound, LayerCostSpec};
use crate::error::Result;
use crate::nn::{forward_backward, objective_value, Model, ModelSpec};
use crate::oracle::{cac_forward_naive, conv2d_naive, conv2d_naive_bordered, finite_diff_grad, MaddsCounter, FD_EPS_F64};
use crate::tensor::{conv2d, conv2d_bordered, max_rel_diff, rel_norm_error, Tensor};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

fn check(name: &str, run: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let (passed, detail) = match run() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult { name: name.to_string(), passed, detail }
}

fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// im2col convolution against the direct loop, in both precisions.
pub fn conv_equivalence(cases: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f32);
    for _ in 0..cases {
        let k = [1, 3, 5][rng.random_range(0..3)];
        let n = rng.random_range(k.max(3)..=16);
        let (ci, co) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let x = uniform(&[1, ci, n, n], 1.0, &mut rng);
        let w = uniform(&[co, ci, k, k], 1.0, &mut rng);
        let a = conv2d(&x, &w, k / 2)?;
        let b = conv2d_naive(&x, &w, k / 2, None)?;
        worst64 = worst64.max(max_rel_diff(a.data(), b.data(), 1e-9));
        let (x32, w32) = (x.cast::<f32>(), w.cast::<f32>());
        let a = conv2d(&x32, &w32, k / 2)?;
        let b = conv2d_naive(&x32, &w32, k / 2, None)?;
        worst32 = worst32.max(max_rel_diff(a.data(), b.data(), 1e-6));
    }
    Ok((
        worst64 <= 1e-12 && worst32 <= 1e-5,
        format!("{cases} shapes, max rel diff f64 {worst64:.2e}, f32 {worst32:.2e}"),
    ))
}

/// Hard CAC against the per-window oracle, plus the saturated and constant cases.
pub fn cac_equivalence(cases: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let (mut sharp_err, mut const_err) = (0.0f64, 0.0f64);
    for i in 0..cases {
        let k = [3, 5][i % 2];
        let n = rng.random_range(k..=12);
        let (ci, co) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let x = uniform(&[2, ci, n, n], 1.0, &mut rng);
        let w = uniform(&[co, ci, k, k], 1.0, &mut rng);
        let pbar = if i % 3 == 0 { PbarMode::Mean } else { PbarMode::Center };
        let p = CacConvParams::new(w.clone())?
            .with_gate(rng.random_range(0.1..2.0), rng.random_range(-4.0..1.0))
            .with_pbar(pbar);
        let (fast, _) = cac_forward_hard(&x, &p)?;
        if fast.data() != cac_forward_naive(&x, &p, None)?.data() {
            mismatches += 1;
        }
        let open = p.clone().with_gate(1.0, 50.0);
        let (y, _) = cac_forward_hard(&x, &open)?;
        let dense = conv2d_bordered(&x, &w, k / 2, open.border)?;
        sharp_err = sharp_err.max(max_rel_diff(y.data(), dense.data(), 1e-9));
        let c = Tensor::from_fn(&[1, ci, n, n], |j| (j / (n * n)) as f64 * 0.7 - 0.3);
        let (y, _) = cac_forward_hard(&c, &p)?;
        let dense = conv2d_naive_bordered(&c, &w, k / 2, p.border, None)?;
        const_err = const_err.max(max_rel_diff(y.data(), dense.data(), 1e-9));
    }
    Ok((
        mismatches == 0 && sharp_err <= 1e-5 && const_err <= 1e-6,
        format!("{cases} instances, {mismatches} bit mismatches, saturated {sharp_err:.2e}, constant {const_err:.2e}"),
    ))
}

/// Soft CAC layer gradients against central differences (64-bit).
pub fn cac_gradients(cases: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (n, ci, co) = (rng.random_range(4..=6), rng.random_range(1..=3), rng.random_range(1..=3));
        let x = uniform(&[2, ci, n, n], 1.0, &mut rng);
        let p = CacConvParams::new(uniform(&[co, ci, 3, 3], 0.5, &mut rng))?
            .with_gate(rng.random_range(0.3..1.5), rng.random_range(-2.0..0.5));
        let r = uniform(&[2, co, n, n], 1.0, &mut rng);
        let loss = |x: &Tensor<f64>, p: &CacConvParams<f64>| -> f64 {
            let (y, _, _) = cac_forward_soft(x, p).expect("shapes fixed");
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (_, _, cache) = cac_forward_soft(&x, &p)?;
        let g = cac_backward(&cache, &r)?;
        let fw = finite_diff_grad(
            |th| {
                let mut q = p.clone();
                q.weight.data_mut().copy_from_slice(th);
                loss(&x, &q)
            },
            p.weight.data(),
            FD_EPS_F64,
        )?;
        let fx = finite_diff_grad(
            |th| loss(&Tensor::new(x.shape().to_vec(), th.to_vec()).expect("same shape"), &p),
            x.data(),
            FD_EPS_F64,
        )?;
        let fg = finite_diff_grad(|th| loss(&x, &p.clone().with_gate(th[0], th[1])), &[p.gamma, p.beta], FD_EPS_F64)?;
        worst = worst
            .max(rel_norm_error(g.dw.data(), &fw, 1e-10))
            .max(rel_norm_error(g.dx.data(), &fx, 1e-10))
            .max(rel_norm_error(&[g.dgamma, g.dbeta], &fg, 1e-10));
    }
    Ok((worst <= 1e-3, format!("{cases} instances, worst rel err {worst:.2e}")))
}

/// Full-objective gradients of a small network against central differences.
pub fn objective_gradients(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = ModelSpec::three_layer_cnn([2, 12, 12], 3, [3, 3, 3]);
    spec.gate_init.beta = -1.0;
    let model = Model::<f64>::new(&spec, seed)?;
    let x = uniform(&[3, 2, 12, 12], 1.0, &mut rng);
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
    let lambda = 0.5;
    let mut m = model.clone();
    forward_backward(&mut m, &x, &labels, lambda)?;
    let mut worst = (0.0f64, String::new());
    for (pi, p) in m.params().iter().enumerate() {
        let fd = finite_diff_grad(
            |th| {
                let mut q = model.clone();
                q.params_mut()[pi].value.data_mut().copy_from_slice(th);
                objective_value(&q, &x, &labels, lambda).unwrap_or(f64::NAN)
            },
            model.params()[pi].value.data(),
            FD_EPS_F64,
        )?;
        let e = rel_norm_error(p.grad.data(), &fd, 1e-10);
        if e > worst.0 {
            worst = (e, p.name.clone());
        }
    }
    Ok((worst.0 <= 1e-3, format!("worst rel err {:.2e} at {}", worst.0, worst.1)))
}

/// Analytic MAdds against instrumented loops, the ρ̄ value and the break-even sign.
pub fn cost_identities(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for i in 0..10 {
        let k = [3, 5][i % 2];
        let n = rng.random_range(k..=10);
        let (ci, co) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let spec = LayerCostSpec::new("l", n as u64, k as u64, ci as u64, co as u64, true)?;
        let x = uniform(&[1, ci, n, n], 1.0, &mut rng);
        let w = uniform(&[co, ci, k, k], 1.0, &mut rng);
        let mut dense = MaddsCounter::new();
        conv2d_naive(&x, &w, k / 2, Some(&mut dense))?;
        if dense.count != madds_standard(&spec)? {
            bad.push(format!("dense count case {i}"));
        }
        let p = CacConvParams::new(w)?.with_gate(1.0, rng.random_range(-3.0..0.0));
        let mut cac = MaddsCounter::new();
        cac_forward_naive(&x, &p, Some(&mut cac))?;
        let (_, parts) = cac_forward_hard(&x, &p)?;
        if cac.count as f64 != madds_cac(&spec, parts[0].rho_hard)?.conv_branches() {
            bad.push(format!("CAC count case {i}"));
        }
    }
    let rb = rho_upper_bound(&LayerCostSpec::new("l", 32, 3, 16, 16, true)?)?;
    if (rb - 0.99365).abs() > 1e-4 {
        bad.push(format!("rho_bar {rb}"));
    }
    for k in [3u64, 5, 7] {
        for c in 1..=64u64 {
            let spec = LayerCostSpec::new("l", 8, k, c, c, true)?;
            let omega = madds_standard(&spec)? as f64;
            let rb = rho_upper_bound(&spec)?;
            for rho in [0.0, rb * 0.5, rb - 1e-6, rb + 1e-6, 1.0].map(|r: f64| r.clamp(0.0, 1.0)) {
                let diff = madds_cac(&spec, rho)?.total() - omega;
                let want = (rho - rb).signum();
                if diff != 0.0 && diff.signum() != want {
                    bad.push(format!("break-even k={k} c={c} rho={rho}"));
                }
            }
        }
    }
    Ok((bad.is_empty(), if bad.is_empty() { format!("rho_bar(3,16,16) = {rb:.6}") } else { bad.join("; ") }))
}

/// Runs every check with fixed seeds.
pub fn run_all() -> VerifyReport {
    let checks = vec![
        check("conv2d matches direct loops", || conv_equivalence(100, 1)),
        check("hard CAC matches per-window oracle", || cac_equivalence(50, 2)),
        check("soft CAC gradients", || cac_gradients(20, 3)),
        check("full objective gradients", || objective_gradients(4)),
        check("cost model identities", || cost_identities(5)),
    ];
    VerifyReport { passed: checks.iter().all(|c| c.passed), checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_small_budgets() {
        assert!(conv_equivalence(10, 1).unwrap().0);
        assert!(cac_equivalence(6, 2).unwrap().0);
        assert!(cac_gradients(2, 3).unwrap().0);
        assert!(cost_identities(5).unwrap().0);
    }

    #[test]
    fn failures_are_listed() {
        let r = VerifyReport {
            passed: false,
            checks: vec![
                check("ok", || Ok((true, String::new()))),
                check("boom", || Err(crate::CacError::invalid("x"))),
            ],
        };
        assert_eq!(r.failures().len(), 1);
        assert!(r.failures()[0].detail.contains("error"));
    }
}
