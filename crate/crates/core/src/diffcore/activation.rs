//! Scalar activation functions shared by the tape and the plain forward pass.

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Above this, `tanh(softplus(x))` is 1 to double precision.
const MISH_SATURATION: f64 = 20.0;

/// `tanh(softplus(x))` from a single exponential: with `n = e^x`,
/// `tanh(ln(1 + n)) = n (n + 2) / (n (n + 2) + 2)`.
fn mish_gate(n: f64) -> f64 {
    let q = n * (n + 2.0);
    q / (q + 2.0)
}

/// `x * tanh(softplus(x))`.
pub fn mish(x: f64) -> f64 {
    if x > MISH_SATURATION {
        return x;
    }
    x * mish_gate(x.exp())
}

pub fn mish_grad(x: f64) -> f64 {
    if x > MISH_SATURATION {
        return 1.0;
    }
    let n = x.exp();
    let t = mish_gate(n);
    t + x * (1.0 - t * t) * n / (1.0 + n)
}
