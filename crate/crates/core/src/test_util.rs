//! Shared fixtures for the unit tests.

use crate::kernels::{
    build_builtin_kernels, validate_kernels, CoagulationFamily, DiffusionProfile,
    FragmentationFamily, KernelSet,
};

/// Constant coagulation with uniform binary fragmentation.
pub(crate) fn constant_binary_kernel(a0: f64, b: f64, n: usize) -> KernelSet {
    build_builtin_kernels(
        CoagulationFamily::Constant { a0 },
        FragmentationFamily::BinaryUniform { b },
        n,
        DiffusionProfile::Uniform { d0: 1.0 },
    )
    .unwrap()
}

/// All reaction rates zero (pure diffusion); still a valid table.
pub(crate) fn inert_kernel(n: usize) -> KernelSet {
    let beta = (1..=n)
        .flat_map(|i| {
            (1..=n).map(move |j| {
                if i >= 2 && j < i {
                    2.0 / (i as f64 - 1.0)
                } else {
                    0.0
                }
            })
        })
        .collect();
    let k = KernelSet::from_parts(
        n,
        vec![0.0; n * n],
        vec![0.0; n],
        beta,
        1.0,
        1.0,
        vec![0.0; n],
        vec![1.0; n],
        1.0,
        1.0,
    );
    assert!(validate_kernels(&k).is_empty());
    k
}
