//! Small built-in designs used by the diagnostics, the CLI `check` command and tests.

use crate::design::Design;
use crate::estimators::{CovariateBlock, CovariateLayout};

/// Four units, two arms, two units per arm (six equiprobable assignments).
pub fn toy_cr4() -> Design {
    Design::complete(vec![2, 2]).expect("valid fixture")
}

/// Two pairs of clusters with sizes 2,1 and 1,2 (six units, four assignments).
pub fn two_pair_toy() -> Design {
    Design::paired_cluster(vec![0, 0, 1, 2, 3, 3], vec![0, 0, 1, 1]).expect("valid fixture")
}

/// A pooled covariate for [`two_pair_toy`].
pub fn two_pair_covariate() -> CovariateBlock {
    CovariateBlock {
        layout: CovariateLayout::Pooled,
        columns: vec![vec![0.4, -1.2, 0.9, 2.1, -0.3, 1.5]],
    }
}

/// Independent fair coin per unit.
pub fn bernoulli_toy(n: usize) -> Design {
    Design::bernoulli(n, vec![0.5, 0.5]).expect("valid fixture")
}

/// Every built-in design paired with a short name.
pub fn builtin_designs() -> Vec<(&'static str, Design)> {
    vec![("toy-cr4", toy_cr4()), ("two-pair", two_pair_toy())]
}
