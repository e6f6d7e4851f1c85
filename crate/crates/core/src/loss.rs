//! Segmentation losses over per-point class probabilities.
//!
//! Both losses take probabilities (rows of a softmax) and integer labels;
//! points labelled `ignore` contribute nothing. Each op saves its gradient
//! with respect to the probabilities during the forward pass.

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to this before taking logs.
const MIN_PROB: f64 = 1e-300;

fn check_labels(probs: &Tensor, labels: &[u32], ignore: u32) -> Result<()> {
    if labels.len() != probs.rows() {
        return Err(Error::Contract(format!(
            "{} labels for {} probability rows",
            labels.len(),
            probs.rows()
        )));
    }
    let k = probs.cols();
    if let Some((i, &l)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l != ignore && l as usize >= k)
    {
        return Err(Error::Data(format!(
            "label {l} at point {i} out of range for {k} classes"
        )));
    }
    Ok(())
}

struct SavedGrad(Tensor);

impl Backward for SavedGrad {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(self.0.scaled(ctx.grad.data()[0]))]
    }
}

/// Mean of `−ln p[label]` over non-ignored points.
pub fn cross_entropy(tape: &mut Tape, probs: &Var, labels: &[u32], ignore: u32) -> Result<Var> {
    let p = probs.value();
    check_labels(p, labels, ignore)?;
    let n = labels.iter().filter(|&&l| l != ignore).count();
    let mut grad = Tensor::zeros(p.rows(), p.cols());
    let mut total = 0.0;
    if n > 0 {
        let inv = 1.0 / n as f64;
        for (i, &l) in labels.iter().enumerate() {
            if l == ignore {
                continue;
            }
            let pl = p.get(i, l as usize).max(MIN_PROB);
            total -= pl.ln();
            grad.set(i, l as usize, -inv / pl);
        }
        total *= inv;
    }
    tape.record(
        "cross_entropy",
        Tensor::scalar(total),
        &[probs],
        SavedGrad(grad),
    )
}

/// Lovász-softmax averaged over the classes present in `labels`.
///
/// Per class `c`, errors `e_i = |[y_i = c] − p_ic|` are sorted in
/// decreasing order and dotted with the discrete derivative of the Jaccard
/// loss along that order.
pub fn lovasz_softmax(tape: &mut Tape, probs: &Var, labels: &[u32], ignore: u32) -> Result<Var> {
    let p = probs.value();
    check_labels(p, labels, ignore)?;
    let valid: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != ignore).collect();
    let mut grad = Tensor::zeros(p.rows(), p.cols());
    let mut total = 0.0;
    let mut present = 0usize;
    let mut order = valid.clone();
    let mut errors = vec![0.0; p.rows()];
    for c in 0..p.cols() {
        let gts = valid.iter().filter(|&&i| labels[i] as usize == c).count();
        if gts == 0 {
            continue;
        }
        present += 1;
        for &i in &valid {
            let fg = if labels[i] as usize == c { 1.0 } else { 0.0 };
            errors[i] = (fg - p.get(i, c)).abs();
        }
        order.copy_from_slice(&valid);
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));

        let gts = gts as f64;
        let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
        let mut prev_jaccard = 0.0;
        for &i in &order {
            let is_fg = labels[i] as usize == c;
            if is_fg {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
            let step = jaccard - prev_jaccard;
            prev_jaccard = jaccard;
            total += errors[i] * step;
            // d e_i / d p_ic is −1 on the foreground, +1 elsewhere.
            grad.set(i, c, if is_fg { -step } else { step });
        }
    }
    if present > 0 {
        let inv = 1.0 / present as f64;
        total *= inv;
        grad.data_mut().iter_mut().for_each(|g| *g *= inv);
    }
    tape.record(
        "lovasz_softmax",
        Tensor::scalar(total),
        &[probs],
        SavedGrad(grad),
    )
}

/// `ce_weight · CE + lovasz_weight · Lovász`.
pub fn segmentation_loss(
    tape: &mut Tape,
    probs: &Var,
    labels: &[u32],
    ignore: u32,
    ce_weight: f64,
    lovasz_weight: f64,
) -> Result<Var> {
    let ce = cross_entropy(tape, probs, labels, ignore)?;
    let lz = lovasz_softmax(tape, probs, labels, ignore)?;
    let ce = tape.scale(&ce, ce_weight)?;
    let lz = tape.scale(&lz, lovasz_weight)?;
    tape.add(&ce, &lz)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    fn probs(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn eval(f: fn(&mut Tape, &Var, &[u32], u32) -> Result<Var>, p: &Tensor, labels: &[u32]) -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(p.clone());
        f(&mut tape, &v, labels, 255)
            .unwrap()
            .value()
            .item()
            .unwrap()
    }

    /// Jaccard loss of class `c` with `wrong` treated as the mispredicted set,
    /// evaluated directly from set sizes.
    fn jaccard_loss(labels: &[u32], c: u32, wrong: &BTreeSet<usize>) -> f64 {
        let fg: BTreeSet<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let kept = fg.difference(wrong).count() as f64;
        let union = fg.union(wrong).count() as f64;
        1.0 - kept / union
    }

    /// Lovász extension by definition: sort errors, sum e_(k)·(Δ(S_k) − Δ(S_{k−1})).
    fn lovasz_oracle(p: &Tensor, labels: &[u32]) -> f64 {
        let mut total = 0.0;
        let mut present = 0;
        for c in 0..p.cols() as u32 {
            if !labels.contains(&c) {
                continue;
            }
            present += 1;
            let err: Vec<f64> = (0..labels.len())
                .map(|i| ((labels[i] == c) as u8 as f64 - p.get(i, c as usize)).abs())
                .collect();
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            idx.sort_by(|&a, &b| err[b].partial_cmp(&err[a]).unwrap());
            let mut set = BTreeSet::new();
            let mut prev = 0.0;
            for &i in &idx {
                set.insert(i);
                let now = jaccard_loss(labels, c, &set);
                total += err[i] * (now - prev);
                prev = now;
            }
        }
        total / present as f64
    }

    #[test]
    fn cross_entropy_hand_cases() {
        let one_hot = probs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(eval(cross_entropy, &one_hot, &[0, 1]), 0.0);
        let uniform = Tensor::filled(3, 4, 0.25);
        let ce = eval(cross_entropy, &uniform, &[0, 3, 2]);
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        let ignored = probs(&[&[0.5, 0.5], &[1e-3, 0.999]]);
        assert!((eval(cross_entropy, &ignored, &[0, 255]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::filled(1, 2, 0.5));
        assert!(matches!(
            cross_entropy(&mut tape, &p, &[2], 255),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            lovasz_softmax(&mut tape, &p, &[7], 255),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn lovasz_perfect_is_zero() {
        let p = probs(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]);
        assert_eq!(eval(lovasz_softmax, &p, &[0, 2, 0]), 0.0);
    }

    #[test]
    fn lovasz_single_point_two_classes() {
        // Only class 0 is present: error 0.4 against Jaccard step 1.
        let p = probs(&[&[0.6, 0.4]]);
        assert!((eval(lovasz_softmax, &p, &[0]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn lovasz_matches_set_function_oracle() {
        let p = probs(&[
            &[0.7, 0.2, 0.1],
            &[0.1, 0.3, 0.6],
            &[0.25, 0.5, 0.25],
            &[0.05, 0.05, 0.9],
            &[0.4, 0.35, 0.25],
            &[0.2, 0.2, 0.6],
        ]);
        let labels = [0, 2, 1, 2, 1, 0];
        let got = eval(lovasz_softmax, &p, &labels);
        assert!((got - lovasz_oracle(&p, &labels)).abs() < 1e-12);
    }

    #[test]
    fn ignored_points_do_not_change_lovasz() {
        let p = probs(&[&[0.7, 0.3], &[0.1, 0.9], &[0.5, 0.5]]);
        let full = eval(lovasz_softmax, &p, &[0, 1, 255]);
        let sub = probs(&[&[0.7, 0.3], &[0.1, 0.9]]);
        assert_eq!(full, eval(lovasz_softmax, &sub, &[0, 1]));
    }

    fn random_probs(raw: &[f64], k: usize) -> Tensor {
        let n = raw.len() / k;
        let mut t = Tensor::from_vec(n, k, raw[..n * k].to_vec()).unwrap();
        for r in 0..n {
            let s: f64 = t.row(r).iter().sum();
            t.row_mut(r).iter_mut().for_each(|v| *v /= s);
        }
        t
    }

    proptest! {
        #[test]
        fn lovasz_agrees_with_oracle(
            raw in proptest::collection::vec(0.01f64..1.0, 12..60),
            labels_raw in proptest::collection::vec(0u32..3, 20),
        ) {
            let p = random_probs(&raw, 3);
            let labels = &labels_raw[..p.rows()];
            let got = eval(lovasz_softmax, &p, labels);
            prop_assert!(got >= 0.0);
            prop_assert!((got - lovasz_oracle(&p, labels)).abs() < 1e-12);
        }

        #[test]
        fn raising_the_correct_probability_never_hurts(
            raw in proptest::collection::vec(0.01f64..1.0, 12..45),
            labels_raw in proptest::collection::vec(0u32..3, 15),
            pick in 0usize..15,
            bump in 0.0f64..1.0,
        ) {
            let p = random_probs(&raw, 3);
            let labels = &labels_raw[..p.rows()];
            let i = pick % p.rows();
            let l = labels[i] as usize;
            let before = eval(lovasz_softmax, &p, labels);
            // Move mass onto the correct class; the others shrink proportionally.
            let mut q = p.clone();
            let new = p.get(i, l) + bump * (1.0 - p.get(i, l));
            let rest = 1.0 - p.get(i, l);
            for c in 0..3 {
                let v = if c == l { new } else if rest > 0.0 { p.get(i, c) * (1.0 - new) / rest } else { 0.0 };
                q.set(i, c, v);
            }
            let after = eval(lovasz_softmax, &q, labels);
            prop_assert!(after <= before + 1e-12, "{before} -> {after}");
        }

        #[test]
        fn losses_are_permutation_invariant(
            raw in proptest::collection::vec(0.01f64..1.0, 30..60),
            labels_raw in proptest::collection::vec(0u32..3, 20),
            seed in 0u64..1000,
        ) {
            let p = random_probs(&raw, 3);
            let labels = &labels_raw[..p.rows()];
            let n = p.rows();
            let order: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % n).collect();
            if order.iter().collect::<BTreeSet<_>>().len() == n {
                let perm_labels: Vec<u32> = order.iter().map(|&i| labels[i]).collect();
                let pp = p.select_rows(&order);
                let total = |t: &Tensor, l: &[u32]| {
                    let mut tape = Tape::new();
                    let v = tape.leaf(t.clone());
                    segmentation_loss(&mut tape, &v, l, 255, 1.0, 1.0).unwrap().value().item().unwrap()
                };
                prop_assert!((total(&p, labels) - total(&pp, &perm_labels)).abs() < 1e-12);
            }
        }
    }
}
