//! Label-smoothed cross entropy and the joint / iterated objectives.

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Target rows: `1 − ε` on the label, `ε / (V′ − 1)` elsewhere.
pub fn smoothed_targets(labels: &[usize], classes: usize, epsilon: f64) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::NoTokens);
    }
    if classes < 2 {
        return Err(Error::Usage(format!("label smoothing needs at least 2 classes, got {classes}")));
    }
    let off = epsilon / (classes - 1) as f64;
    let mut data = vec![off; labels.len() * classes];
    for (u, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Usage(format!("label {y} out of range for {classes} classes")));
        }
        data[u * classes + y] = 1.0 - epsilon;
    }
    Tensor::new([labels.len(), classes], data)
}

/// Mean over rows of the cross entropy between smoothed targets and the
/// log-normalized rows of `log_probs` (`U × V′`).
pub fn smoothed_ce(tape: &mut Tape, log_probs: Var, labels: &[usize], epsilon: f64) -> Result<Var> {
    let (rows, classes) = tape.value(log_probs).expect_matrix("smoothed_ce")?;
    if rows != labels.len() {
        return Err(Error::dim("smoothed_ce", format!("{rows} prediction rows for {} labels", labels.len())));
    }
    let q = tape.constant(smoothed_targets(labels, classes, epsilon)?);
    let prod = tape.mul(log_probs, q)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / rows as f64)
}

/// `λ·ctc + (1 − λ)·ce`.
pub fn joint_loss(tape: &mut Tape, ctc: Var, ce: Var, lambda: f64) -> Result<Var> {
    tape.combine(&[(ctc, lambda), (ce, 1.0 - lambda)])
}

/// The four sub-losses of the iterated objective; middle terms are absent
/// when the model has no middle heads.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<T> {
    pub ctc_final: T,
    pub ctc_mid: Option<T>,
    pub ce_final: T,
    pub ce_mid: Option<T>,
}

impl LossTerms<f64> {
    /// Scalar evaluation of the iterated objective.
    pub fn iterated(&self, cfg: &LossConfig) -> Result<f64> {
        let w = iterated_weights(self.ctc_mid.is_some(), self.ce_mid.is_some(), cfg)?;
        Ok(w[0] * self.ctc_final + w[1] * self.ctc_mid.unwrap_or(0.0) + w[2] * self.ce_final + w[3] * self.ce_mid.unwrap_or(0.0))
    }
}

/// Coefficients of (ctc_final, ctc_mid, ce_final, ce_mid).
pub fn iterated_weights(has_ctc_mid: bool, has_ce_mid: bool, cfg: &LossConfig) -> Result<[f64; 4]> {
    let g = cfg.global_ctc_weight;
    let w = [
        g * cfg.lambda_ctc,
        g * (1.0 - cfg.lambda_ctc),
        (1.0 - g) * cfg.lambda_ce,
        (1.0 - g) * (1.0 - cfg.lambda_ce),
    ];
    if (w[1] != 0.0 && !has_ctc_mid) || (w[3] != 0.0 && !has_ce_mid) {
        return Err(Error::Config("iterated loss weights a middle output the model did not produce".into()));
    }
    Ok(w)
}

pub fn iterated_loss(tape: &mut Tape, terms: &LossTerms<Var>, cfg: &LossConfig) -> Result<Var> {
    let w = iterated_weights(terms.ctc_mid.is_some(), terms.ce_mid.is_some(), cfg)?;
    let mut parts = vec![(terms.ctc_final, w[0]), (terms.ce_final, w[2])];
    if let Some(v) = terms.ctc_mid {
        parts.push((v, w[1]));
    }
    if let Some(v) = terms.ce_mid {
        parts.push((v, w[3]));
    }
    tape.combine(&parts)
}

/// Per-term values recorded in the loss log.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ctc_final: f64,
    pub ctc_mid: f64,
    pub ce_final: f64,
    pub ce_mid: f64,
}

impl LossBreakdown {
    pub fn read(tape: &Tape, total: Var, terms: &LossTerms<Var>) -> Self {
        let v = |x: Var| tape.value(x).item();
        Self {
            total: v(total),
            ctc_final: v(terms.ctc_final),
            ctc_mid: terms.ctc_mid.map(v).unwrap_or(0.0),
            ce_final: v(terms.ce_final),
            ce_mid: terms.ce_mid.map(v).unwrap_or(0.0),
        }
    }

    pub fn add(&mut self, o: &Self) {
        self.total += o.total;
        self.ctc_final += o.ctc_final;
        self.ctc_mid += o.ctc_mid;
        self.ce_final += o.ce_final;
        self.ce_mid += o.ce_mid;
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            total: self.total * c,
            ctc_final: self.ctc_final * c,
            ctc_mid: self.ctc_mid * c,
            ce_final: self.ce_final * c,
            ce_mid: self.ce_mid * c,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([rows, cols], (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap()
            .log_softmax_lastdim()
            .unwrap()
    }

    fn ce(lp: &Tensor, labels: &[usize], eps: f64) -> f64 {
        let mut t = Tape::new();
        let v = t.constant(lp.clone());
        let l = smoothed_ce(&mut t, v, labels, eps).unwrap();
        t.value(l).item()
    }

    #[test]
    fn zero_smoothing_is_nll() {
        let lp = log_rows(3, 4, 1);
        let labels = [2, 0, 3];
        let nll = -(lp.at(0, 2) + lp.at(1, 0) + lp.at(2, 3)) / 3.0;
        assert!((ce(&lp, &labels, 0.0) - nll).abs() < 1e-14);
    }

    #[test]
    fn uniform_prediction_gives_log_classes() {
        let lp = Tensor::full([2, 5], -(5f64.ln()));
        for labels in [[0, 4], [3, 3]] {
            assert!((ce(&lp, &labels, 0.1) - 5f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_direct_sum() {
        let lp = log_rows(4, 6, 2);
        let labels = [5, 1, 1, 0];
        let eps = 0.1;
        let mut total = 0.0;
        for (u, &y) in labels.iter().enumerate() {
            for k in 0..6 {
                let q = if k == y { 1.0 - eps } else { eps / 5.0 };
                total -= q * lp.at(u, k);
            }
        }
        assert!((ce(&lp, &labels, eps) - total / 4.0).abs() < 1e-13);
    }

    #[test]
    fn out_of_range_label() {
        let lp = log_rows(1, 3, 3);
        let mut t = Tape::new();
        let v = t.constant(lp);
        assert!(matches!(smoothed_ce(&mut t, v, &[3], 0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn smoothed_ce_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::new([3, 5], (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let r = grad_check(
            |t, v| {
                let lp = t.log_softmax(v)?;
                smoothed_ce(t, lp, &[1, 4, 0], 0.1)
            },
            &x,
            1e-5,
            1e-4,
            50,
            0,
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
    }

    #[test]
    fn joint_loss_endpoints_and_mix() {
        let mut t = Tape::new();
        let (a, b) = (t.constant(Tensor::scalar(1.7)), t.constant(Tensor::scalar(0.4)));
        for (lambda, want) in [(1.0, 1.7), (0.0, 0.4), (0.5, 0.5 * 1.7 + 0.5 * 0.4)] {
            let j = joint_loss(&mut t, a, b, lambda).unwrap();
            assert!((t.value(j).item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn iterated_arithmetic() {
        let cfg = LossConfig { global_ctc_weight: 0.0, ..LossConfig::default() };
        let terms = LossTerms { ctc_final: 5.0, ctc_mid: Some(7.0), ce_final: 1.0, ce_mid: Some(2.0) };
        assert!((terms.iterated(&cfg).unwrap() - 1.1).abs() < 1e-15);
    }

    #[test]
    fn iterated_reduces_to_joint() {
        let cfg = LossConfig::default().final_only();
        let terms = LossTerms { ctc_final: 2.5, ctc_mid: Some(9.0), ce_final: 0.75, ce_mid: Some(4.0) };
        let g = cfg.global_ctc_weight;
        assert!((terms.iterated(&cfg).unwrap() - (g * 2.5 + (1.0 - g) * 0.75)).abs() < 1e-12);
        let no_mid = LossTerms { ctc_mid: None, ce_mid: None, ..terms };
        assert!(no_mid.iterated(&cfg).is_ok());
        assert!(matches!(no_mid.iterated(&LossConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn iterated_is_linear_in_each_term() {
        let cfg = LossConfig::default();
        let base = LossTerms { ctc_final: 1.0, ctc_mid: Some(2.0), ce_final: 3.0, ce_mid: Some(4.0) };
        let w = iterated_weights(true, true, &cfg).unwrap();
        let f0 = base.iterated(&cfg).unwrap();
        let bumps = [
            LossTerms { ctc_final: 2.0, ..base },
            LossTerms { ctc_mid: Some(3.0), ..base },
            LossTerms { ce_final: 4.0, ..base },
            LossTerms { ce_mid: Some(5.0), ..base },
        ];
        for (i, b) in bumps.iter().enumerate() {
            assert!((b.iterated(&cfg).unwrap() - f0 - w[i]).abs() < 1e-14);
        }
        for (a, b) in w.iter().zip([0.25, 0.25, 0.45, 0.05]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tape_and_scalar_versions_agree() {
        let cfg = LossConfig::default();
        let mut t = Tape::new();
        let vals = [0.3, 1.1, 2.2, 0.9];
        let v: Vec<_> = vals.iter().map(|&x| t.constant(Tensor::scalar(x))).collect();
        let terms = LossTerms { ctc_final: v[0], ctc_mid: Some(v[1]), ce_final: v[2], ce_mid: Some(v[3]) };
        let l = iterated_loss(&mut t, &terms, &cfg).unwrap();
        let scalar = LossTerms { ctc_final: vals[0], ctc_mid: Some(vals[1]), ce_final: vals[2], ce_mid: Some(vals[3]) };
        assert!((t.value(l).item() - scalar.iterated(&cfg).unwrap()).abs() < 1e-15);
    }
}
