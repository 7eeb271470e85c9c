//! Truncated coagulation and fragmentation operators at one spatial point.
//!
//! For a concentration vector `u_1..u_n` the truncated operators are
//!
//! ```text
//! Q_i = 1/2 sum_{j=1}^{i-1} a_{i-j,j} u_{i-j} u_j  -  sum_{j=1}^{n} a_{i,j} u_i u_j
//! F_i =     sum_{j=1}^{n-i} B_{i+j} beta_{i+j,i} u_{i+j}  -  B_i u_i
//! ```
//!
//! Fragmentation is mass neutral: `sum_i i*F_i = 0` follows from the daughter
//! mass partition and holds exactly for the truncated form. Coagulation pairs
//! with `i+j > n` leave the system entirely, so
//!
//! ```text
//! sum_i i*Q_i = -mass_loss,
//! mass_loss  = 1/2 sum_{i+j>n, i,j<=n} (i+j) a_{i,j} u_i u_j >= 0.
//! ```
//!
//! `mass_loss` is accumulated with compensated summation and cross-checked in
//! debug builds against the moment of `Q`; the conservation audits of the
//! time steppers rely on these identities at the 1e-12 level.

use crate::kernels::KernelSet;
use crate::numeric::KahanSum;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReactionError {
    #[error("concentration vector has length {got}, kernel set expects {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("negative concentration u_{species} = {value}")]
    NegativeConcentration { species: usize, value: f64 },
    #[error("test sequence has length {got}, kernel set expects {expected}")]
    TestSequenceLength { got: usize, expected: usize },
}

/// Coagulation and fragmentation rates for one concentration vector.
#[derive(Clone, Debug)]
pub struct ReactionRates {
    /// Coagulation rate `Q_i` per species.
    pub coagulation: Vec<f64>,
    /// Fragmentation rate `F_i` per species.
    pub fragmentation: Vec<f64>,
    /// Mass leaving the truncated system through pairs with `i+j > n`.
    pub mass_loss: f64,
}

/// Both sides of the discrete weak-form identities for test sequence `phi`.
#[derive(Clone, Copy, Debug)]
pub struct WeakFormSides {
    /// `sum_i phi_i Q_i`.
    pub coagulation_lhs: f64,
    /// `1/2 sum_{i+j<=n} a u_i u_j (phi_{i+j} - phi_i - phi_j) - remainder`.
    pub coagulation_rhs: f64,
    /// `1/2 sum_{i+j>n, i,j<=n} a u_i u_j (phi_i + phi_j)`.
    pub truncation_remainder: f64,
    /// `sum_i phi_i F_i`.
    pub fragmentation_lhs: f64,
    /// `-sum_{i>=2} B_i u_i (phi_i - sum_{j<i} beta_{i,j} phi_j)`.
    pub fragmentation_rhs: f64,
}

fn check_state(k: &KernelSet, u: &[f64]) -> Result<(), ReactionError> {
    if u.len() != k.n_max() {
        return Err(ReactionError::LengthMismatch {
            got: u.len(),
            expected: k.n_max(),
        });
    }
    for (idx, &v) in u.iter().enumerate() {
        if v < 0.0 {
            return Err(ReactionError::NegativeConcentration {
                species: idx + 1,
                value: v,
            });
        }
    }
    Ok(())
}

/// Evaluates the truncated coagulation operator and the truncation mass loss.
pub fn eval_coagulation(k: &KernelSet, u: &[f64]) -> Result<(Vec<f64>, f64), ReactionError> {
    check_state(k, u)?;
    let n = k.n_max();
    let mut q = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mass_loss = coagulation_into(k, u, &mut q, &mut scratch);
    Ok((q, mass_loss))
}

/// Evaluates the truncated fragmentation operator.
pub fn eval_fragmentation(k: &KernelSet, u: &[f64]) -> Result<Vec<f64>, ReactionError> {
    check_state(k, u)?;
    let mut f = vec![0.0; k.n_max()];
    fragmentation_into(k, u, &mut f);
    Ok(f)
}

/// Evaluates both operators at once.
pub fn eval_rates(k: &KernelSet, u: &[f64]) -> Result<ReactionRates, ReactionError> {
    check_state(k, u)?;
    let n = k.n_max();
    let mut rates = ReactionRates {
        coagulation: vec![0.0; n],
        fragmentation: vec![0.0; n],
        mass_loss: 0.0,
    };
    let mut scratch = vec![0.0; n];
    rates.mass_loss = coagulation_into(k, u, &mut rates.coagulation, &mut scratch);
    fragmentation_into(k, u, &mut rates.fragmentation);
    Ok(rates)
}

/// Allocation-free kernel for the per-voxel reaction loop.
///
/// `scratch` receives the loss factors `sum_j a_{i,j} u_j`; the caller may
/// reuse it for the explicit positivity bound. Inputs are assumed already
/// checked. Returns the truncation mass loss.
pub fn eval_rates_into(
    k: &KernelSet,
    u: &[f64],
    coagulation: &mut [f64],
    fragmentation: &mut [f64],
    scratch: &mut [f64],
) -> f64 {
    let ml = coagulation_into(k, u, coagulation, scratch);
    fragmentation_into(k, u, fragmentation);
    ml
}

fn coagulation_into(k: &KernelSet, u: &[f64], q: &mut [f64], loss_factor: &mut [f64]) -> f64 {
    let n = k.n_max();
    // Loss factors sum_j a_{i,j} u_j.
    for i in 1..=n {
        let row = k.a_row(i);
        let mut s = 0.0;
        for j in 0..n {
            s += row[j] * u[j];
        }
        loss_factor[i - 1] = s;
    }
    // Gains from pairs j + (i-j) = i.
    for i in 1..=n {
        let mut gain = 0.0;
        for j in 1..i {
            gain += k.a(i - j, j) * u[i - j - 1] * u[j - 1];
        }
        q[i - 1] = 0.5 * gain - u[i - 1] * loss_factor[i - 1];
    }
    // Mass escaping past the truncation, summed directly over lost pairs.
    let mut lost = KahanSum::new();
    for i in 1..=n {
        let ui = u[i - 1];
        if ui == 0.0 {
            continue;
        }
        let row = k.a_row(i);
        for j in (n - i + 1)..=n {
            lost.add(0.5 * (i + j) as f64 * row[j - 1] * ui * u[j - 1]);
        }
    }
    let mass_loss = lost.value();

    #[cfg(debug_assertions)]
    {
        // Independent route: -sum_i i*Q_i must reproduce the direct sum.
        let mut moment = KahanSum::new();
        let mut scale = KahanSum::new();
        for i in 1..=n {
            moment.add(i as f64 * q[i - 1]);
            scale.add(
                i as f64
                    * (0.5 * (q[i - 1] + u[i - 1] * loss_factor[i - 1]).abs()
                        + u[i - 1] * loss_factor[i - 1]),
            );
        }
        let tol = 1e-12 * scale.value().max(1e-300);
        debug_assert!(
            (moment.value() + mass_loss).abs() <= tol.max(1e-300) * 10.0,
            "coagulation moment {} vs mass loss {}",
            moment.value(),
            mass_loss
        );
    }

    mass_loss
}

fn fragmentation_into(k: &KernelSet, u: &[f64], f: &mut [f64]) {
    let n = k.n_max();
    for i in 1..=n {
        let mut gain = 0.0;
        for j in 1..=(n - i) {
            gain += k.b_total(i + j) * k.beta(i + j, i) * u[i + j - 1];
        }
        f[i - 1] = gain - k.b_total(i) * u[i - 1];
    }
}

/// Evaluates both sides of the truncated weak-form identities.
///
/// The right-hand sides are computed by independent double loops over pairs;
/// the caller asserts equality with the moment of the operators. Choosing
/// `phi_i = i` reduces the coagulation identity to `-mass_loss` and the
/// fragmentation identity to zero.
pub fn weak_form_check(
    k: &KernelSet,
    u: &[f64],
    phi: &[f64],
) -> Result<WeakFormSides, ReactionError> {
    check_state(k, u)?;
    let n = k.n_max();
    if phi.len() != n {
        return Err(ReactionError::TestSequenceLength {
            got: phi.len(),
            expected: n,
        });
    }

    let rates = eval_rates(k, u)?;
    let mut coag_lhs = KahanSum::new();
    let mut frag_lhs = KahanSum::new();
    for i in 0..n {
        coag_lhs.add(phi[i] * rates.coagulation[i]);
        frag_lhs.add(phi[i] * rates.fragmentation[i]);
    }

    let mut interior = KahanSum::new();
    let mut remainder = KahanSum::new();
    for i in 1..=n {
        let ui = u[i - 1];
        if ui == 0.0 {
            continue;
        }
        let row = k.a_row(i);
        for j in 1..=n {
            let w = row[j - 1] * ui * u[j - 1];
            if i + j <= n {
                interior.add(0.5 * w * (phi[i + j - 1] - phi[i - 1] - phi[j - 1]));
            } else {
                remainder.add(0.5 * w * (phi[i - 1] + phi[j - 1]));
            }
        }
    }

    let mut frag_rhs = KahanSum::new();
    for i in 2..=n {
        let bi = k.b_total(i);
        if bi == 0.0 || u[i - 1] == 0.0 {
            continue;
        }
        let mut inner = phi[i - 1];
        for j in 1..i {
            inner -= k.beta(i, j) * phi[j - 1];
        }
        frag_rhs.add(-bi * u[i - 1] * inner);
    }

    Ok(WeakFormSides {
        coagulation_lhs: coag_lhs.value(),
        coagulation_rhs: interior.value() - remainder.value(),
        truncation_remainder: remainder.value(),
        fragmentation_lhs: frag_lhs.value(),
        fragmentation_rhs: frag_rhs.value(),
    })
}

/// Weighted first moment `sum_i i * v_i` with compensated summation.
pub fn mass_moment(v: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for (idx, &x) in v.iter().enumerate() {
        acc.add((idx + 1) as f64 * x);
    }
    acc.value()
}
