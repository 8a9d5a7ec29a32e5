//! Triplet ranking, global/local alignment and the weighted joint objective.
//!
//! Each loss has a plain `f64` form and a tape form used during training.

use crate::error::{Error, Result};
use crate::tape::{cosine_value, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the global triplet loss.
    pub alpha: f64,
    /// Weight of the local triplet loss.
    pub beta: f64,
    /// Weight of the alignment loss.
    pub gamma: f64,
    /// Triplet margin.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            margin: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::Config(format!(
                "loss weights must be non-negative: {self:?}"
            )));
        }
        if !self.margin.is_finite() {
            return Err(Error::Config("margin must be finite".into()));
        }
        Ok(())
    }
}

/// Cosine similarity with norms floored at `1e-12`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::shape(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(cosine_value(u, v))
}

/// `max(0, m − s_pos + s_neg)`.
pub fn triplet_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    let z = s_neg - s_pos + margin;
    if z.is_nan() {
        z
    } else {
        z.max(0.0)
    }
}

/// `Σ (1 − cos(f_g, f_l))` over the anchor, positive and negative images.
pub fn alignment_loss(pairs: &[(&[f64], &[f64]); 3]) -> Result<f64> {
    pairs
        .iter()
        .map(|(g, l)| cosine_similarity(g, l).map(|c| 1.0 - c))
        .sum()
}

/// `α·L_g + β·L_l + γ·L_a`.
pub fn joint_loss(l_g: f64, l_l: f64, l_a: f64, w: &LossWeights) -> f64 {
    w.alpha * l_g + w.beta * l_l + w.gamma * l_a
}

/// Tape form of [`triplet_loss`] on embeddings of anchor, positive and negative.
pub fn triplet_term(tape: &mut Tape, anchor: Var, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let s_pos = tape.cosine(anchor, pos)?;
    let s_neg = tape.cosine(anchor, neg)?;
    let gap = tape.sub(s_neg, s_pos)?;
    let m = tape.constant(Tensor::scalar(margin));
    let shifted = tape.add(gap, m)?;
    Ok(tape.relu(shifted))
}

/// Tape form of one `d_gl` term: `1 − cos(f_g, f_l)`.
pub fn alignment_term(tape: &mut Tape, f_g: Var, f_l: Var) -> Result<Var> {
    let c = tape.cosine(f_g, f_l)?;
    let one = tape.constant(Tensor::scalar(1.0));
    tape.sub(one, c)
}

/// Tape form of [`joint_loss`].
pub fn joint_term(tape: &mut Tape, l_g: Var, l_l: Var, l_a: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(l_g, w.alpha);
    let b = tape.scale(l_l, w.beta);
    let c = tape.scale(l_a, w.gamma);
    tape.add_all(&[a, b, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_anchors() {
        let u = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn triplet_anchors() {
        assert_eq!(triplet_loss(1.0, -1.0, 0.2), 0.0);
        assert_eq!(triplet_loss(0.4, 0.4, 0.2), 0.2);
        assert_eq!(triplet_loss(0.9, 0.2, 0.2), 0.0);
    }

    #[test]
    fn alignment_anchors() {
        let g = [1.0, 2.0, -0.5];
        let minus: Vec<f64> = g.iter().map(|v| -v).collect();
        let ortho = [2.0, -1.0, 0.0];
        assert_eq!(
            alignment_loss(&[(&g, &g), (&g, &g), (&g, &g)]).unwrap(),
            0.0
        );
        assert!(
            (alignment_loss(&[(&g, &minus), (&g, &minus), (&g, &minus)]).unwrap() - 6.0).abs()
                < 1e-15
        );
        assert_eq!(
            alignment_loss(&[(&g, &ortho), (&g, &ortho), (&g, &ortho)]).unwrap(),
            3.0
        );
    }

    #[test]
    fn joint_anchors() {
        let w = LossWeights::default();
        assert!((joint_loss(1.0, 2.0, 3.0, &w) - 1.5).abs() < 1e-12);
        assert_eq!(joint_loss(0.0, 0.0, 0.0, &w), 0.0);
        let stage1 = LossWeights {
            beta: 0.0,
            gamma: 0.0,
            ..w
        };
        assert_eq!(joint_loss(0.7, 5.0, 2.0, &stage1), 0.7);
    }

    #[test]
    fn tape_forms_match_plain_forms() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 0.5, -0.2]));
        let p = tape.param(Tensor::vector(vec![0.9, 0.4, 0.1]));
        let n = tape.param(Tensor::vector(vec![-0.3, 1.0, 0.2]));
        let t = triplet_term(&mut tape, a, p, n, 0.2).unwrap();
        let expected = triplet_loss(
            cosine_value(tape.value(a).data(), tape.value(p).data()),
            cosine_value(tape.value(a).data(), tape.value(n).data()),
            0.2,
        );
        assert!((tape.value(t).data()[0] - expected).abs() < 1e-15);
        let al = alignment_term(&mut tape, a, n).unwrap();
        let al_plain = 1.0 - cosine_value(tape.value(a).data(), tape.value(n).data());
        assert!((tape.value(al).data()[0] - al_plain).abs() < 1e-15);
    }
}
