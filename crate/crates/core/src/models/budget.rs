use crate::error::{Error, Result};

/// Weights plus biases of a dense stack with the given layer widths
/// (input first, output last).
pub fn dense_param_count(widths: &[usize]) -> u64 {
    widths
        .windows(2)
        .map(|w| (w[0] as u64 + 1) * w[1] as u64)
        .sum()
}

/// Closed-form size of a type-M model whose `m` subnets each have `layers`
/// hidden layers of width `width`, reading `d` inputs in total and emitting
/// `c` classes: `M(L−1)n² + (ML + MC + d)n + MC`.
pub fn type_m_param_count(m: u64, layers: u64, width: u64, d: u64, c: u64) -> u64 {
    m * (layers - 1) * width * width + (m * layers + m * c + d) * width + m * c
}

/// Largest equal hidden width whose type-M parameter count fits `budget`.
pub fn solve_width(budget: u64, m: usize, layers: usize, d: usize, c: usize) -> Result<usize> {
    if m == 0 || layers == 0 || d == 0 || c == 0 || m > d {
        return Err(Error::invalid(format!(
            "width problem needs 1 <= M <= d and positive L, C (M={m}, L={layers}, d={d}, C={c})"
        )));
    }
    let (m, l, d, c) = (m as u64, layers as u64, d as u64, c as u64);
    let count = |n: u64| type_m_param_count(m, l, n, d, c);
    if count(1) > budget {
        return Err(Error::invalid(format!(
            "budget {budget} is below the {} parameters of a width-1 model",
            count(1)
        )));
    }
    // Positive root of a n² + b n + (mc − budget) = 0, then fix up the
    // rounding with exact integer counts.
    let a = (m * (l - 1)) as f64;
    let b = (m * l + m * c + d) as f64;
    let k = (m * c) as f64 - budget as f64;
    let root = if a == 0.0 {
        -k / b
    } else {
        (-b + (b * b - 4.0 * a * k).sqrt()) / (2.0 * a)
    };
    let mut n = (root.floor() as u64).max(1);
    while n > 1 && count(n) > budget {
        n -= 1;
    }
    while count(n + 1) <= budget {
        n += 1;
    }
    Ok(n as usize)
}
