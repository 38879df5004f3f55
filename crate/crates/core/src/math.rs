//! Scalar helpers shared across modules.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Lower bound applied to softplus outputs and inner products fed to
/// log/inverse links.
pub const POSITIVE_FLOOR: f64 = 1e-10;

/// Lower bound on gamma draws. Far below [`POSITIVE_FLOOR`] so that the
/// tail mass at the floor has a one-term closed form for any rate in use.
pub const GAMMA_SAMPLE_FLOOR: f64 = 1e-300;

/// `ln(GAMMA_SAMPLE_FLOOR)`.
pub const LN_GAMMA_SAMPLE_FLOOR: f64 = -690.7755278982137;

/// A gamma draw on the floor stands for the whole interval `(0, floor]`,
/// so densities and scores there use the log tail mass
/// `ln P(Z <= floor)`. With `floor * rate` tiny, the incomplete gamma
/// series reduces to its first term: `shape * ln(floor * rate) - ln Γ(shape + 1)`.
pub fn gamma_floor_log_mass(shape: f64, ln_rate: f64) -> f64 {
    shape * (LN_GAMMA_SAMPLE_FLOOR + ln_rate) - ln_gamma(shape + 1.0)
}

/// Gradient of [`gamma_floor_log_mass`] in (shape, ln rate).
pub fn gamma_floor_log_mass_grad(shape: f64, ln_rate: f64) -> (f64, f64) {
    (
        LN_GAMMA_SAMPLE_FLOOR + ln_rate - digamma(shape + 1.0),
        shape,
    )
}

/// `log(1 + exp(x))` without overflow or loss of precision in either tail.
pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp()
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`: `log(exp(y) - 1)`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 35.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn ln_factorial(k: f64) -> f64 {
    // exact for the small counts that dominate text data
    const TABLE: [f64; 8] = [
        0.0,
        0.0,
        std::f64::consts::LN_2,
        1.791_759_469_228_055,
        3.178_053_830_347_945_7,
        4.787_491_742_782_046,
        6.579_251_212_010_101,
        8.525_161_361_065_415,
    ];
    if k < 8.0 {
        TABLE[k as usize]
    } else {
        ln_gamma(k + 1.0)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
