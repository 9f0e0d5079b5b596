//! Task losses, the closed-form Gaussian KL term, and the weighted broadcast
//! information-bottleneck objective
//! `sum_i [ w_i * L_i + beta * gamma_i * KL_i ]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// Weight on cross entropy relative to L1 in the recovery + classification objective.
pub const RECOVERY_CE_WEIGHT: f64 = 1e-3;

/// `-log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    if logits.len() < 2 {
        return Err(Error::shape(format!("need at least two logits, got {}", logits.len())));
    }
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            n_label: logits.len(),
        });
    }
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    Ok(lse - logits[label])
}

/// `KL(N(mu, diag(sigma^2)) || N(0, I))` for one sample.
pub fn kl_to_standard_normal<T: Scalar>(mu: &[T], sigma: &[T]) -> Result<T> {
    if mu.len() != sigma.len() {
        return Err(Error::shape(format!("mu has {} entries, sigma {}", mu.len(), sigma.len())));
    }
    if let Some(s) = sigma.iter().find(|&&s| !(s > T::zero())) {
        return Err(Error::Domain(format!("sigma must be strictly positive, got {s}")));
    }
    let half = T::lit(0.5);
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| (m * m + s * s - T::one()) * half - s.ln())
        .sum())
}

/// Mean absolute deviation.
pub fn l1_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "l1 loss: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(&a, &b)| (a - b).abs()).sum::<T>() / T::lit(pred.len() as f64))
}

/// Recovery + classification objective: `l1 + 1e-3 * ce`.
pub fn case1_loss(l1: f64, ce: f64) -> f64 {
    l1 + RECOVERY_CE_WEIGHT * ce
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Per-user task weight `w_i`.
    pub task: Vec<f64>,
    /// Rate/accuracy trade-off multiplier.
    pub beta: f64,
    /// Per-user KL share `gamma_i`; must sum to one.
    pub gamma: Vec<f64>,
}

impl LossWeights {
    /// Equal KL shares `gamma_i = 1 / N`.
    pub fn new(task: Vec<f64>, beta: f64) -> Self {
        let n = task.len();
        LossWeights {
            task,
            beta,
            gamma: vec![1.0 / n as f64; n],
        }
    }

    pub fn n_users(&self) -> usize {
        self.task.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.task.len();
        if n == 0 {
            return Err(Error::config("loss.task", "need at least one task weight"));
        }
        if self.gamma.len() != n {
            return Err(Error::config(
                "loss.gamma",
                format!("expected {n} entries, got {}", self.gamma.len()),
            ));
        }
        if let Some(w) = self.task.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::config("loss.task", format!("weights must be nonnegative, got {w}")));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("loss.beta", format!("must be nonnegative, got {}", self.beta)));
        }
        if let Some(g) = self.gamma.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            return Err(Error::config("loss.gamma", format!("entries must be nonnegative, got {g}")));
        }
        let sum: f64 = self.gamma.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("loss.gamma", format!("entries must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// Coefficient multiplying user `i`'s KL term.
    pub fn kl_coefficient(&self, user: usize) -> f64 {
        self.beta * self.gamma[user]
    }
}

/// Parts of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_losses: Vec<f64>,
    pub kls: Vec<f64>,
    pub total: f64,
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "total={:.6} tasks={:?} kl={:?}", self.total, self.task_losses, self.kls)
    }
}

/// `sum_i [ w_i * L_i + beta * gamma_i * KL_i ]`.
pub fn broadcast_ib_loss(task_losses: &[f64], kls: &[f64], weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let n = weights.n_users();
    if task_losses.len() != n || kls.len() != n {
        return Err(Error::shape(format!(
            "expected {n} task losses and KLs, got {} and {}",
            task_losses.len(),
            kls.len()
        )));
    }
    let total = (0..n)
        .map(|i| weights.task[i] * task_losses[i] + weights.kl_coefficient(i) * kls[i])
        .sum();
    Ok(LossBreakdown {
        task_losses: task_losses.to_vec(),
        kls: kls.to_vec(),
        total,
    })
}

/// Differentiable form of [`broadcast_ib_loss`]; users without a KL term contribute 0.
pub fn broadcast_ib_graph<T: Scalar>(
    g: &mut Graph<T>,
    task_losses: &[Var],
    kls: &[Option<Var>],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let n = weights.n_users();
    if task_losses.len() != n || kls.len() != n {
        return Err(Error::shape(format!(
            "expected {n} task losses and KLs, got {} and {}",
            task_losses.len(),
            kls.len()
        )));
    }
    let mut terms = Vec::with_capacity(2 * n);
    let mut task_values = Vec::with_capacity(n);
    let mut kl_values = Vec::with_capacity(n);
    for i in 0..n {
        terms.push((task_losses[i], T::lit(weights.task[i])));
        task_values.push(g.value(task_losses[i]).item().as_f64());
        match kls[i] {
            Some(kl) => {
                terms.push((kl, T::lit(weights.kl_coefficient(i))));
                kl_values.push(g.value(kl).item().as_f64());
            }
            None => kl_values.push(0.0),
        }
    }
    let total = g.weighted_sum(&terms);
    let mut breakdown = broadcast_ib_loss(&task_values, &kl_values, weights)?;
    breakdown.total = g.value(total).item().as_f64();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&[0.0f64; 10], 3).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        let ce = cross_entropy(&[0.0f64, 0.0], 0).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        let ce = cross_entropy(&[800.0f64, 0.0, -3.0], 0).unwrap();
        assert!(ce.abs() < 1e-12);
        assert!(matches!(cross_entropy(&[0.0f64, 0.0], 2), Err(Error::LabelOutOfRange { .. })));
        assert!(cross_entropy(&[0.0f64], 0).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_standard_normal(&[0.0f64; 4], &[1.0; 4]).unwrap(), 0.0);
        assert_eq!(kl_to_standard_normal(&[1.0f64], &[1.0]).unwrap(), 0.5);
        assert!(matches!(kl_to_standard_normal(&[0.0f64], &[0.0]), Err(Error::Domain(_))));
        assert!(matches!(kl_to_standard_normal(&[0.0f64], &[-1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss(&[0.2f64, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        let off = l1_loss(&[0.6f64, 0.1, 0.3], &[0.5, 0.0, 0.2]).unwrap();
        assert!((off - 0.1).abs() < 1e-12);
        assert_eq!(l1_loss(&[0.0f64, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(l1_loss(&[0.0f64], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn case1_examples() {
        assert_eq!(case1_loss(0.0, 0.0), 0.0);
        assert!((case1_loss(0.5, 2.0) - 0.502).abs() < 1e-15);
    }

    #[test]
    fn single_user_reduces_to_one_to_one_form() {
        let w = LossWeights::new(vec![1.0], 0.3);
        let b = broadcast_ib_loss(&[1.7], &[2.0], &w).unwrap();
        assert!((b.total - (1.7 + 0.3 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn experiment_instantiations() {
        // two users: 0.5 CE1 + 0.5 CE2 + 1e-4 * (gamma-weighted KL)
        let w = LossWeights::new(vec![0.5, 0.5], 1e-4);
        let b = broadcast_ib_loss(&[0.4, 0.8], &[100.0, 300.0], &w).unwrap();
        let expected = 0.5 * 0.4 + 0.5 * 0.8 + 1e-4 * (0.5 * 100.0 + 0.5 * 300.0);
        assert!((b.total - expected).abs() < 1e-15);
        // three users: 0.15 (CE1 + CE2) + 0.7 CE3 + 1e-4 * KL
        let w = LossWeights::new(vec![0.15, 0.15, 0.7], 1e-4);
        let b = broadcast_ib_loss(&[1.0, 2.0, 3.0], &[30.0, 60.0, 90.0], &w).unwrap();
        let expected = 0.15 * 3.0 + 0.7 * 3.0 + 1e-4 * 60.0;
        assert!((b.total - expected).abs() < 1e-12);
    }

    #[test]
    fn gamma_constraint_enforced() {
        let w = LossWeights {
            task: vec![1.0, 1.0],
            beta: 1.0,
            gamma: vec![0.5, 0.6],
        };
        assert!(matches!(broadcast_ib_loss(&[0.0, 0.0], &[0.0, 0.0], &w), Err(Error::Config { .. })));
    }

    #[test]
    fn graph_objective_matches_scalar_form() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(crate::tensor::Tensor::scalar(0.7));
        let b = g.variable(crate::tensor::Tensor::scalar(1.3));
        let k = g.variable(crate::tensor::Tensor::scalar(40.0));
        let w = LossWeights::new(vec![0.25, 0.75], 0.01);
        let (total, bd) = broadcast_ib_graph(&mut g, &[a, b], &[Some(k), None], &w).unwrap();
        let direct = broadcast_ib_loss(&[0.7, 1.3], &[40.0, 0.0], &w).unwrap();
        assert!((bd.total - direct.total).abs() < 1e-15);
        let grads = g.backward(total);
        assert_eq!(grads.wrt(a).unwrap(), &[0.25]);
        assert_eq!(grads.wrt(b).unwrap(), &[0.75]);
        assert!((grads.wrt(k).unwrap()[0] - 0.005).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn kl_nonnegative(mu in proptest::collection::vec(-5.0f64..5.0, 1..16), seed in 0.05f64..4.0) {
            let sigma: Vec<f64> = mu.iter().enumerate().map(|(i, _)| seed * (1.0 + 0.1 * i as f64)).collect();
            prop_assert!(kl_to_standard_normal(&mu, &sigma).unwrap() >= 0.0);
        }

        #[test]
        fn breakdown_recomposes(
            l in proptest::collection::vec(0.0f64..10.0, 3),
            k in proptest::collection::vec(0.0f64..1e3, 3),
            w in proptest::collection::vec(0.0f64..1.0, 3),
            beta in 0.0f64..1.0,
        ) {
            let weights = LossWeights::new(w.clone(), beta);
            let b = broadcast_ib_loss(&l, &k, &weights).unwrap();
            let manual: f64 = (0..3).map(|i| w[i] * b.task_losses[i] + beta * weights.gamma[i] * b.kls[i]).sum();
            prop_assert!((b.total - manual).abs() <= 1e-12 * (1.0 + manual.abs()));
        }

        #[test]
        fn objective_is_linear_in_each_term(
            l in proptest::collection::vec(0.0f64..10.0, 2),
            k in proptest::collection::vec(0.0f64..100.0, 2),
            i in 0usize..2,
        ) {
            let weights = LossWeights::new(vec![0.3, 0.7], 0.02);
            let f = |l: &[f64], k: &[f64]| broadcast_ib_loss(l, k, &weights).unwrap().total;
            let h = 0.5;
            let mut lp = l.clone();
            lp[i] += h;
            let mut kp = k.clone();
            kp[i] += h;
            prop_assert!(((f(&lp, &k) - f(&l, &k)) / h - weights.task[i]).abs() < 1e-9);
            prop_assert!(((f(&l, &kp) - f(&l, &k)) / h - weights.kl_coefficient(i)).abs() < 1e-9);
        }
    }
}
