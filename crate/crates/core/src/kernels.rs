//! Coagulation, fragmentation, and diffusion coefficient tables.
//!
//! A [`KernelSet`] tabulates, densely up to the truncation size `n_max`:
//!
//! * symmetric nonnegative coagulation rates `a_{i,j}`,
//! * total fragmentation rates `B_i` with `B_1 = 0` (monomers do not break),
//! * daughter counts `beta_{i,j}` obeying the mass partition
//!   `sum_{j=1}^{i-1} j * beta_{i,j} = i`,
//! * a sublinear growth bound `a_{i,j} <= C * (i+j)^(1-zeta)`, `zeta in (0,1]`,
//! * compatibility constants `gamma_m` with
//!   `B_j * beta_{j,m} <= gamma_m * a_{m,j}` for `j > m`,
//! * diffusion constants `d_i` confined to `[D0, D1]` with `D0 > 0`.
//!
//! Tables are filled once at construction; the reaction loops that dominate
//! the run time then only do branch-free lookups. All indices in the public
//! API are 1-based species sizes, matching the physics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense coefficient tables for the truncated system of size `n_max`.
#[derive(Clone, Debug)]
pub struct KernelSet {
    n_max: usize,
    /// `a[(i-1)*n_max + (j-1)] = a_{i,j}`.
    a: Vec<f64>,
    /// `b_total[i-1] = B_i`.
    b_total: Vec<f64>,
    /// `beta[(i-1)*n_max + (j-1)] = beta_{i,j}` for `j < i`, zero otherwise.
    beta: Vec<f64>,
    zeta: f64,
    c_growth: f64,
    /// `gamma[m-1] = gamma_m`.
    gamma: Vec<f64>,
    /// `d[i-1] = d_i`.
    d: Vec<f64>,
    d_lower: f64,
    d_upper: f64,
}

/// Coagulation rate families. Both satisfy the sublinear growth bound.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoagulationFamily {
    /// `a_{i,j} = a0` (growth exponent `zeta = 1`, constant `C = a0`).
    Constant { a0: f64 },
    /// `a_{i,j} = (i+j)^(1-zeta)` with `zeta in (0,1]` (constant `C = 1`).
    SumPower { zeta: f64 },
}

/// Fragmentation rate families.
///
/// Both store the uniform binary daughter table `beta_{i,j} = 2/(i-1)`,
/// which satisfies the mass partition identity exactly; `None` simply sets
/// every total rate `B_i` to zero so the table is never exercised.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FragmentationFamily {
    None,
    /// `B_i = b * (i-1)`, `beta_{i,j} = 2/(i-1)`.
    BinaryUniform {
        b: f64,
    },
}

/// Diffusion constant profiles.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionProfile {
    Uniform { d0: f64 },
    List { values: Vec<f64> },
}

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("n_max must be at least 1, got {0}")]
    TruncationTooSmall(usize),
    #[error("rate parameter {name} must be positive, got {value}")]
    NonpositiveRate { name: &'static str, value: f64 },
    #[error("growth exponent zeta must lie in (0, 1], got {0}")]
    ZetaOutOfRange(f64),
    #[error("diffusion list has {got} entries, expected n_max = {expected}")]
    DiffusionListLength { got: usize, expected: usize },
}

/// Constraint families checked by [`validate_kernels`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// `a_{i,j} = a_{j,i}` bit-exactly.
    CoagulationSymmetry,
    /// `a_{i,j} >= 0` and `beta_{i,j} >= 0`.
    NonnegativeRates,
    /// `B_1 = 0` and `B_i >= 0`.
    MonomerNoBreakup,
    /// `sum_j j * beta_{i,j} = i` to 1e-12 relative.
    DaughterMassPartition,
    /// `a_{i,j} <= C * (i+j)^(1-zeta)`.
    GrowthBound,
    /// `B_j * beta_{j,m} <= gamma_m * a_{m,j}`.
    FragmentationCompatibility,
    /// `0 < D0 <= d_i <= D1`.
    DiffusionBounds,
}

/// One violated constraint with the offending indices.
#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    pub constraint: Constraint,
    /// Species indices involved; `0` marks an unused slot.
    pub i: usize,
    pub j: usize,
    pub detail: String,
}

/// Outcome of [`validate_kernels`]; empty means every invariant holds.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, constraint: Constraint, i: usize, j: usize, detail: String) {
        self.violations.push(Violation {
            constraint,
            i,
            j,
            detail,
        });
    }
}

impl KernelSet {
    /// Assembles a kernel set from raw tables without validation.
    ///
    /// Callers are expected to run [`validate_kernels`] afterwards; the
    /// built-in families in [`build_builtin_kernels`] always pass.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        n_max: usize,
        a: Vec<f64>,
        b_total: Vec<f64>,
        beta: Vec<f64>,
        zeta: f64,
        c_growth: f64,
        gamma: Vec<f64>,
        d: Vec<f64>,
        d_lower: f64,
        d_upper: f64,
    ) -> Self {
        assert_eq!(a.len(), n_max * n_max);
        assert_eq!(beta.len(), n_max * n_max);
        assert_eq!(b_total.len(), n_max);
        assert_eq!(gamma.len(), n_max);
        assert_eq!(d.len(), n_max);
        Self {
            n_max,
            a,
            b_total,
            beta,
            zeta,
            c_growth,
            gamma,
            d,
            d_lower,
            d_upper,
        }
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Coagulation rate `a_{i,j}`, `1 <= i, j <= n_max`.
    #[inline]
    pub fn a(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i >= 1 && i <= self.n_max && j >= 1 && j <= self.n_max);
        self.a[(i - 1) * self.n_max + (j - 1)]
    }

    /// Total fragmentation rate `B_i`.
    #[inline]
    pub fn b_total(&self, i: usize) -> f64 {
        debug_assert!(i >= 1 && i <= self.n_max);
        self.b_total[i - 1]
    }

    /// Daughter count `beta_{i,j}` (zero unless `1 <= j < i`).
    #[inline]
    pub fn beta(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i >= 1 && i <= self.n_max && j >= 1 && j <= self.n_max);
        self.beta[(i - 1) * self.n_max + (j - 1)]
    }

    /// Compatibility constant `gamma_m`.
    #[inline]
    pub fn gamma(&self, m: usize) -> f64 {
        debug_assert!(m >= 1 && m <= self.n_max);
        self.gamma[m - 1]
    }

    /// Diffusion constant `d_i`.
    #[inline]
    pub fn d(&self, i: usize) -> f64 {
        debug_assert!(i >= 1 && i <= self.n_max);
        self.d[i - 1]
    }

    pub fn diffusion_bounds(&self) -> (f64, f64) {
        (self.d_lower, self.d_upper)
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn c_growth(&self) -> f64 {
        self.c_growth
    }

    /// Row `i` of the coagulation table as a slice (`a_{i,1} .. a_{i,n}`).
    #[inline]
    pub fn a_row(&self, i: usize) -> &[f64] {
        &self.a[(i - 1) * self.n_max..i * self.n_max]
    }

    /// Row `i` of the daughter table as a slice.
    #[inline]
    pub fn beta_row(&self, i: usize) -> &[f64] {
        &self.beta[(i - 1) * self.n_max..i * self.n_max]
    }
}

/// Builds one of the built-in coefficient families.
///
/// The returned set always passes [`validate_kernels`]: the daughter table is
/// uniform binary (mass partition exact by construction), and `gamma_m` is
/// the smallest constant closing the compatibility inequality over the
/// stored indices (`0/0` counts as `0`).
pub fn build_builtin_kernels(
    coagulation: CoagulationFamily,
    fragmentation: FragmentationFamily,
    n_max: usize,
    diffusion: DiffusionProfile,
) -> Result<KernelSet, KernelError> {
    if n_max < 1 {
        return Err(KernelError::TruncationTooSmall(n_max));
    }

    let (zeta, c_growth) = match coagulation {
        CoagulationFamily::Constant { a0 } => {
            if a0 <= 0.0 {
                return Err(KernelError::NonpositiveRate {
                    name: "a0",
                    value: a0,
                });
            }
            (1.0, a0)
        }
        CoagulationFamily::SumPower { zeta } => {
            if !(zeta > 0.0 && zeta <= 1.0) {
                return Err(KernelError::ZetaOutOfRange(zeta));
            }
            (zeta, 1.0)
        }
    };

    let mut a = vec![0.0; n_max * n_max];
    for i in 1..=n_max {
        for j in 1..=n_max {
            let v = match coagulation {
                CoagulationFamily::Constant { a0 } => a0,
                CoagulationFamily::SumPower { zeta } => ((i + j) as f64).powf(1.0 - zeta),
            };
            a[(i - 1) * n_max + (j - 1)] = v;
        }
    }

    let b_rate = match fragmentation {
        FragmentationFamily::None => 0.0,
        FragmentationFamily::BinaryUniform { b } => {
            if b <= 0.0 {
                return Err(KernelError::NonpositiveRate {
                    name: "b",
                    value: b,
                });
            }
            b
        }
    };

    let mut b_total = vec![0.0; n_max];
    let mut beta = vec![0.0; n_max * n_max];
    for i in 2..=n_max {
        b_total[i - 1] = b_rate * (i as f64 - 1.0);
        let count = 2.0 / (i as f64 - 1.0);
        for j in 1..i {
            beta[(i - 1) * n_max + (j - 1)] = count;
        }
    }

    let d = match diffusion {
        DiffusionProfile::Uniform { d0 } => {
            if d0 <= 0.0 {
                return Err(KernelError::NonpositiveRate {
                    name: "d0",
                    value: d0,
                });
            }
            vec![d0; n_max]
        }
        DiffusionProfile::List { values } => {
            if values.len() != n_max {
                return Err(KernelError::DiffusionListLength {
                    got: values.len(),
                    expected: n_max,
                });
            }
            for &v in &values {
                if v <= 0.0 {
                    return Err(KernelError::NonpositiveRate {
                        name: "d",
                        value: v,
                    });
                }
            }
            values
        }
    };
    let d_lower = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let d_upper = d.iter().cloned().fold(0.0, f64::max);

    let mut set = KernelSet::from_parts(
        n_max,
        a,
        b_total,
        beta,
        zeta,
        c_growth,
        vec![0.0; n_max],
        d,
        d_lower,
        d_upper,
    );
    set.gamma = compatibility_constants(&set);
    Ok(set)
}

/// Smallest `gamma_m` closing `B_j * beta_{j,m} <= gamma_m * a_{m,j}` over
/// the stored indices, with `0/0 -> 0`.
fn compatibility_constants(k: &KernelSet) -> Vec<f64> {
    let n = k.n_max();
    let mut gamma = vec![0.0; n];
    for m in 1..=n {
        let mut worst: f64 = 0.0;
        for j in (m + 1)..=n {
            let numer = k.b_total(j) * k.beta(j, m);
            if numer == 0.0 {
                continue;
            }
            let denom = k.a(m, j);
            worst = worst.max(if denom > 0.0 {
                numer / denom
            } else {
                f64::INFINITY
            });
        }
        gamma[m - 1] = worst;
    }
    gamma
}

/// Checks every stored invariant and reports the violations; never fails.
pub fn validate_kernels(k: &KernelSet) -> ValidationReport {
    let n = k.n_max();
    let mut report = ValidationReport::default();

    for i in 1..=n {
        for j in 1..=n {
            let aij = k.a(i, j);
            if aij < 0.0 {
                report.push(
                    Constraint::NonnegativeRates,
                    i,
                    j,
                    format!("a({i},{j}) = {aij} is negative"),
                );
            }
            if j > i && aij.to_bits() != k.a(j, i).to_bits() {
                report.push(
                    Constraint::CoagulationSymmetry,
                    i,
                    j,
                    format!("a({i},{j}) = {aij} differs from a({j},{i}) = {}", k.a(j, i)),
                );
            }
            if k.beta(i, j) < 0.0 {
                report.push(
                    Constraint::NonnegativeRates,
                    i,
                    j,
                    format!("beta({i},{j}) = {} is negative", k.beta(i, j)),
                );
            }
        }
    }

    if k.b_total(1) != 0.0 {
        report.push(
            Constraint::MonomerNoBreakup,
            1,
            0,
            format!("B(1) = {} must be exactly zero", k.b_total(1)),
        );
    }
    for i in 2..=n {
        if k.b_total(i) < 0.0 {
            report.push(
                Constraint::MonomerNoBreakup,
                i,
                0,
                format!("B({i}) = {} is negative", k.b_total(i)),
            );
        }
    }

    for i in 2..=n {
        let sum = crate::numeric::kahan_sum((1..i).map(|j| j as f64 * k.beta(i, j)));
        let target = i as f64;
        if (sum - target).abs() > 1e-12 * target {
            report.push(
                Constraint::DaughterMassPartition,
                i,
                0,
                format!("sum_j j*beta({i},j) = {sum}, expected {target}"),
            );
        }
    }

    for i in 1..=n {
        for j in i..=n {
            let bound = k.c_growth() * ((i + j) as f64).powf(1.0 - k.zeta());
            let aij = k.a(i, j);
            if aij > bound * (1.0 + 1e-12) {
                report.push(
                    Constraint::GrowthBound,
                    i,
                    j,
                    format!("a({i},{j}) = {aij} exceeds C*(i+j)^(1-zeta) = {bound}"),
                );
            }
        }
    }

    for m in 1..=n {
        for j in (m + 1)..=n {
            let lhs = k.b_total(j) * k.beta(j, m);
            let rhs = k.gamma(m) * k.a(m, j);
            if lhs > rhs * (1.0 + 1e-12) + f64::MIN_POSITIVE {
                report.push(
                    Constraint::FragmentationCompatibility,
                    m,
                    j,
                    format!("B({j})*beta({j},{m}) = {lhs} exceeds gamma({m})*a({m},{j}) = {rhs}"),
                );
            }
        }
    }

    let (d0, d1) = k.diffusion_bounds();
    if !(d0 > 0.0) {
        report.push(
            Constraint::DiffusionBounds,
            0,
            0,
            format!("lower diffusion bound D0 = {d0} must be positive"),
        );
    }
    for i in 1..=n {
        let di = k.d(i);
        if !(di >= d0 && di <= d1) {
            report.push(
                Constraint::DiffusionBounds,
                i,
                0,
                format!("d({i}) = {di} outside [{d0}, {d1}]"),
            );
        }
    }

    report
}
