//! Training objective: cross-entropy plus a supervised contrastive term
//! whose positives are all same-label pairs, whatever domain or view they
//! came from.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows passed to [`supcon_loss`] must have unit norm within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupConConfig {
    pub temperature: f64,
    /// Weight of the contrastive term in the combined loss.
    pub lambda: f64,
}

impl Default for SupConConfig {
    fn default() -> Self {
        SupConConfig {
            temperature: 0.1,
            lambda: 1.0,
        }
    }
}

impl SupConConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::contract(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.value(logits).dims2()?;
    if labels.len() != n {
        return Err(Error::contract(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    let mut pick = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Index { index: y, len: c });
        }
        pick[i * c + y] = -1.0 / n as f64;
    }
    let lsm = tape.log_softmax(logits)?;
    let w = tape.constant(Tensor::new(&[n, c], pick)?);
    let nll = tape.mul(lsm, w)?;
    Ok(tape.sum(nll))
}

/// Supervised contrastive loss over unit-norm rows `z`.
///
/// For each anchor `i` the candidates are all other rows and the positives
/// are the other rows with the same label. Anchors without positives are
/// left out of both the sum and the averaging count; if no anchor has a
/// positive the loss is 0.
pub fn supcon_loss(tape: &mut Tape, z: Var, labels: &[usize], temperature: f64) -> Result<Var> {
    let (n, _) = tape.value(z).dims2()?;
    if n < 2 {
        return Err(Error::contract(format!(
            "supcon needs at least 2 rows, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::contract(format!(
            "{n} embeddings but {} labels",
            labels.len()
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    for i in 0..n {
        let norm = tape
            .value(z)
            .row(i)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::contract(format!(
                "embedding row {i} has norm {norm}, expected 1"
            )));
        }
    }

    let positives: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).count())
        .collect();
    let anchors = positives.iter().filter(|&&p| p > 0).count();
    if anchors == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }

    let mut weights = vec![0.0; n * n];
    let mut mask = vec![true; n * n];
    for i in 0..n {
        mask[i * n + i] = false;
        if positives[i] == 0 {
            continue;
        }
        let w = -1.0 / (positives[i] * anchors) as f64;
        for j in (0..n).filter(|&j| j != i && labels[j] == labels[i]) {
            weights[i * n + j] = w;
        }
    }

    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let logits = tape.scale(sim, 1.0 / temperature);
    let log_prob = tape.masked_log_softmax(logits, &mask)?;
    let w = tape.constant(Tensor::new(&[n, n], weights)?);
    let terms = tape.mul(log_prob, w)?;
    Ok(tape.sum(terms))
}

/// Handles to the pieces of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cross_entropy: Var,
    pub supcon: Var,
}

/// `cross_entropy + λ·supcon`. With λ = 0 the total is the cross-entropy
/// node itself.
pub fn combined_loss(
    tape: &mut Tape,
    logits: Var,
    z: Var,
    labels: &[usize],
    cfg: &SupConConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let ce = cross_entropy(tape, logits, labels)?;
    let sc = supcon_loss(tape, z, labels, cfg.temperature)?;
    let total = if cfg.lambda == 0.0 {
        ce
    } else {
        let weighted = tape.scale(sc, cfg.lambda);
        tape.add(ce, weighted)?
    };
    Ok(LossTerms {
        total,
        cross_entropy: ce,
        supcon: sc,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, MAX_REL_ERR};
    use crate::rng::{self, derive_seed};
    use rand::Rng as _;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let t = Tensor::randn(&[n, d], seed, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let r = t.row(i);
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / norm).collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
    }

    fn supcon_value(z: &Tensor, labels: &[usize], tau: f64) -> f64 {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let l = supcon_loss(&mut tape, zv, labels, tau).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn ce_uniform_and_saturated() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::filled(&[3, 4], 0.25).unwrap());
        let l = cross_entropy(&mut tape, u, &[0, 3, 1]).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::zeros(&[2, 3]).unwrap();
        logits.data_mut()[1] = 30.0;
        logits.data_mut()[5] = 30.0;
        let s = tape.constant(logits);
        let l = cross_entropy(&mut tape, s, &[1, 2]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-9);
    }

    #[test]
    fn ce_rejects_bad_label() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        assert!(matches!(
            cross_entropy(&mut tape, u, &[0, 3]),
            Err(Error::Index { index: 3, len: 3 })
        ));
    }

    #[test]
    fn ce_matches_scalar_oracle() {
        for s in 0..10 {
            let x = Tensor::randn(&[4, 3], derive_seed(40, &[s]), 2.0).unwrap();
            let labels = [0, 2, 1, 2];
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let l = cross_entropy(&mut tape, xv, &labels).unwrap();
            let expect = oracle::cross_entropy(&rows(&x), &labels);
            assert!((tape.value(l).item().unwrap() - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn supcon_forced_cases() {
        let z = unit_rows(2, 3, 1);
        assert_eq!(supcon_value(&z, &[4, 4], 0.1), 0.0);
        assert_eq!(supcon_value(&z, &[0, 1], 0.1), 0.0);
    }

    #[test]
    fn supcon_contract_errors() {
        let mut tape = Tape::new();
        let one = tape.constant(unit_rows(1, 3, 1));
        assert!(supcon_loss(&mut tape, one, &[0], 0.1).is_err());
        let raw = tape.constant(Tensor::randn(&[3, 3], 2, 3.0).unwrap());
        assert!(matches!(
            supcon_loss(&mut tape, raw, &[0, 0, 1], 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn supcon_matches_double_loop() {
        let z = unit_rows(6, 4, 12);
        let labels = [0, 0, 1, 1, 2, 2];
        let got = supcon_value(&z, &labels, 0.5);
        let expect = oracle::supcon(&rows(&z), &labels, 0.5);
        assert!((got - expect).abs() < 1e-8, "{got} vs {expect}");
    }

    #[test]
    fn supcon_gradients() {
        let mut r = rng::rng(77);
        for s in 0..10u64 {
            let n = r.random_range(3..=8);
            let d = r.random_range(2..=6);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
            // Differentiate through normalisation so perturbed inputs stay valid.
            let x = Tensor::randn(&[n, d], derive_seed(41, &[s]), 1.0).unwrap();
            let err = check_gradients(&[x], |tape, v| {
                let z = tape.l2_normalize_rows(v[0], 1e-12)?;
                supcon_loss(tape, z, &labels, 0.5)
            })
            .unwrap();
            assert!(err < MAX_REL_ERR, "rel err {err}");
        }
    }

    #[test]
    fn combined_reduces_to_ce() {
        let logits = Tensor::randn(&[2, 3], 5, 1.0).unwrap();
        let z = unit_rows(2, 3, 6);
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let zv = tape.constant(z.clone());
        let cfg0 = SupConConfig {
            temperature: 0.1,
            lambda: 0.0,
        };
        let t0 = combined_loss(&mut tape, lv, zv, &[1, 2], &cfg0).unwrap();
        assert_eq!(t0.total, t0.cross_entropy);

        let cfg1 = SupConConfig {
            temperature: 0.1,
            lambda: 1.0,
        };
        let t1 = combined_loss(&mut tape, lv, zv, &[1, 1], &cfg1).unwrap();
        assert_eq!(
            tape.value(t1.total).item().unwrap(),
            tape.value(t1.cross_entropy).item().unwrap()
        );
    }

    #[test]
    fn combined_equals_sum_of_oracles() {
        let logits = Tensor::randn(&[6, 3], 8, 1.0).unwrap();
        let z = unit_rows(6, 4, 9);
        let labels = [0, 1, 2, 0, 1, 1];
        let cfg = SupConConfig {
            temperature: 0.3,
            lambda: 0.7,
        };
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let zv = tape.constant(z.clone());
        let t = combined_loss(&mut tape, lv, zv, &labels, &cfg).unwrap();
        let expect = oracle::cross_entropy(&rows(&logits), &labels)
            + 0.7 * oracle::supcon(&rows(&z), &labels, 0.3);
        assert!((tape.value(t.total).item().unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn temperature_changes_value() {
        let z = unit_rows(5, 3, 10);
        let labels = [0, 0, 1, 1, 2];
        let a = supcon_value(&z, &labels, 0.5);
        let b = supcon_value(&z, &labels, 0.1);
        assert!((a - b).abs() > 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(SupConConfig::default().validate().is_ok());
        assert!(SupConConfig {
            temperature: 0.0,
            lambda: 1.0
        }
        .validate()
        .is_err());
        assert!(SupConConfig {
            temperature: 0.1,
            lambda: -1.0
        }
        .validate()
        .is_err());
    }
}
