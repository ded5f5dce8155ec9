//! Scalar helpers shared by the model and the objective.

pub use statrs::function::gamma::{digamma, gamma, ln_gamma};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(x!)` for a nonnegative count.
pub fn ln_factorial(x: f64) -> f64 {
    ln_gamma(x + 1.0)
}
