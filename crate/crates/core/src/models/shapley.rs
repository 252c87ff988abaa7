use crate::error::{Error, Result};

/// Largest game the brute-force Shapley enumeration accepts.
pub const MAX_SHAPLEY_PLAYERS: usize = 12;

/// Value of a coalition (a set of group indices) for one class:
/// the sum of its members' log explanations minus `(M−1)` log priors.
pub fn value_function(
    coalition: &[usize],
    explanation_logs: &[f64],
    log_prior: f64,
) -> Result<f64> {
    let m = explanation_logs.len();
    let mut seen = vec![false; m];
    let mut total = 0.0;
    for &i in coalition {
        if i >= m {
            return Err(Error::invalid(format!(
                "player {i} out of range for M = {m}"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid(format!("player {i} listed twice")));
        }
        total += explanation_logs[i];
    }
    Ok(total - (m as f64 - 1.0) * log_prior)
}

/// Shapley values by enumerating every coalition without each player.
pub fn shapley_values_bruteforce(explanation_logs: &[f64], log_prior: f64) -> Result<Vec<f64>> {
    let m = explanation_logs.len();
    if m == 0 || m > MAX_SHAPLEY_PLAYERS {
        return Err(Error::invalid(format!(
            "brute-force Shapley needs 1..={MAX_SHAPLEY_PLAYERS} players, got {m}"
        )));
    }
    // |S|! (M − |S| − 1)! / M!
    let fact: Vec<f64> = (0..=m)
        .scan(1.0, |acc, k| {
            if k > 0 {
                *acc *= k as f64;
            }
            Some(*acc)
        })
        .collect();
    let members = |mask: usize| (0..m).filter(move |i| mask >> i & 1 == 1);
    let mut out = vec![0.0; m];
    for (player, q) in out.iter_mut().enumerate() {
        for mask in 0..1usize << m {
            if mask >> player & 1 == 1 {
                continue;
            }
            let without: Vec<usize> = members(mask).collect();
            let mut with = without.clone();
            with.push(player);
            let s = without.len();
            let weight = fact[s] * fact[m - s - 1] / fact[m];
            *q += weight
                * (value_function(&with, explanation_logs, log_prior)?
                    - value_function(&without, explanation_logs, log_prior)?);
        }
    }
    Ok(out)
}
