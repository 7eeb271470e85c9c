//! Independent oracles for the integration tests.
//!
//! The reference right-hand side below is written as plain double loops over
//! the coefficient tables, and the integrator is classical RK4 with fixed
//! small steps; neither shares code with the production reaction evaluation
//! or the Lie-splitting stepper they are used to check.

// Each integration-test target compiles this module separately and uses a
// different subset of it.
#![allow(dead_code)]

use smolhom::kernels::KernelSet;

/// Reaction right-hand side `Q_i + F_i` evaluated by direct summation.
pub fn reaction_rhs_reference(k: &KernelSet, u: &[f64]) -> Vec<f64> {
    let n = k.n_max();
    let mut rhs = vec![0.0; n];
    for i in 1..=n {
        let mut gain_c = 0.0;
        for j in 1..i {
            gain_c += k.a(j, i - j) * u[j - 1] * u[i - j - 1];
        }
        let mut loss_c = 0.0;
        for j in 1..=n {
            loss_c += k.a(i, j) * u[j - 1];
        }
        let mut gain_f = 0.0;
        for j in (i + 1)..=n {
            gain_f += k.b_total(j) * k.beta(j, i) * u[j - 1];
        }
        rhs[i - 1] = 0.5 * gain_c - u[i - 1] * loss_c + gain_f - k.b_total(i) * u[i - 1];
    }
    rhs
}

/// Classical RK4 for the space-homogeneous system with an optional monomer
/// source rate `s(t)`.
pub fn rk4_reference(
    k: &KernelSet,
    initial: &[f64],
    source: impl Fn(f64) -> f64,
    t_end: f64,
    steps: usize,
) -> Vec<f64> {
    let n = k.n_max();
    let dt = t_end / steps as f64;
    let mut u = initial.to_vec();
    let eval = |t: f64, u: &[f64]| -> Vec<f64> {
        let mut rhs = reaction_rhs_reference(k, u);
        rhs[0] += source(t);
        rhs
    };
    for step in 0..steps {
        let t = step as f64 * dt;
        let k1 = eval(t, &u);
        let mut stage = vec![0.0; n];
        for i in 0..n {
            stage[i] = u[i] + 0.5 * dt * k1[i];
        }
        let k2 = eval(t + 0.5 * dt, &stage);
        for i in 0..n {
            stage[i] = u[i] + 0.5 * dt * k2[i];
        }
        let k3 = eval(t + 0.5 * dt, &stage);
        for i in 0..n {
            stage[i] = u[i] + dt * k3[i];
        }
        let k4 = eval(t + dt, &stage);
        for i in 0..n {
            u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    u
}
