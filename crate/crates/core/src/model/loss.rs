//! Grouping loss and joint objective.
//!
//! With `t_j = K_j - 1 + R_j = K_j - sum_{k<K_j} alpha_j^k` the grouping loss
//! of one verse is
//!
//! `|sum_j t_j - N| + sum_j w_j |t_j - Delta_j|`
//!
//! with `w_j = w_multi` for multi-note tokens and 1 otherwise. `K_j` is a
//! constant; gradients reach the halting probabilities through `R_j`. When a
//! token halted too early on a single confident probability
//! (`K_j < Delta_j` and `alpha_j^{K_j} >= 1 - epsilon`), its own term uses
//! `K_j - sum_{k<=K_j} alpha_j^k` instead so the last probability is pushed
//! down; the verse-level term keeps `t_j`.

use candle_core::{DType, Tensor};

use super::grouping::GroupingOutcome;
use crate::error::{Error, Result};

/// Whether a token's own term takes the stuck-halt form.
pub fn uses_rare_branch(outcome: &GroupingOutcome, gold: u32, epsilon: f64) -> bool {
    (outcome.k as u64) < gold as u64 && outcome.alphas[outcome.k - 1] >= 1.0 - epsilon
}

fn token_weight(gold: u32, w_multi: f64) -> f64 {
    if gold > 1 {
        w_multi
    } else {
        1.0
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_lengths(outcomes: &[GroupingOutcome], gold: &[u32]) -> Result<()> {
    if outcomes.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} grouping outcomes for {} gold counts",
            outcomes.len(),
            gold.len()
        )));
    }
    for (j, o) in outcomes.iter().enumerate() {
        if o.k == 0 || o.alphas.len() < o.k {
            return Err(Error::Shape(format!(
                "outcome {j} has K={} but {} probabilities",
                o.k,
                o.alphas.len()
            )));
        }
    }
    Ok(())
}

/// Grouping loss of one verse over its content tokens.
pub fn grouping_loss(
    outcomes: &[GroupingOutcome],
    gold: &[u32],
    n_notes: usize,
    w_multi: f64,
    epsilon: f64,
) -> Result<f64> {
    Ok(grouping_loss_with_grad(outcomes, gold, n_notes, w_multi, epsilon)?.0)
}

/// Grouping loss and its gradient with respect to every halting
/// probability in `outcomes` (same layout as `outcome.alphas`).
pub fn grouping_loss_with_grad(
    outcomes: &[GroupingOutcome],
    gold: &[u32],
    n_notes: usize,
    w_multi: f64,
    epsilon: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_lengths(outcomes, gold)?;
    let mut grads: Vec<Vec<f64>> = outcomes.iter().map(|o| vec![0.0; o.alphas.len()]).collect();
    let mut total = 0.0;
    let mut token_loss = 0.0;
    for (j, (o, &g)) in outcomes.iter().zip(gold).enumerate() {
        let surrogate = o.k as f64 - o.alphas[..o.k - 1].iter().sum::<f64>();
        total += surrogate;
        let rare = uses_rare_branch(o, g, epsilon);
        let used = if rare { o.k } else { o.k - 1 };
        let t = o.k as f64 - o.alphas[..used].iter().sum::<f64>();
        let w = token_weight(g, w_multi);
        let diff = t - g as f64;
        token_loss += w * diff.abs();
        for d in &mut grads[j][..used] {
            *d -= w * sign(diff);
        }
    }
    let global = total - n_notes as f64;
    for (o, grad) in outcomes.iter().zip(&mut grads) {
        for d in &mut grad[..o.k - 1] {
            *d -= sign(global);
        }
    }
    Ok((global.abs() + token_loss, grads))
}

/// Tokens of a batch, each tied to a verse, for the tensor form of the loss.
pub struct GroupingTargets<'a> {
    pub outcomes: &'a [GroupingOutcome],
    pub gold: &'a [u32],
    /// Verse index of each token.
    pub verse_of: &'a [usize],
    /// Melody length per verse.
    pub n_notes: &'a [usize],
}

/// Summed grouping loss over every verse of a batch, differentiable with
/// respect to `alphas` (`(P, iterations)`, as produced by the grouping
/// network).
pub fn grouping_loss_tensor(
    alphas: &Tensor,
    targets: &GroupingTargets,
    w_multi: f64,
    epsilon: f64,
) -> Result<Tensor> {
    check_lengths(targets.outcomes, targets.gold)?;
    let p = targets.outcomes.len();
    let dtype = alphas.dtype();
    let device = alphas.device();
    if p == 0 {
        return Ok(Tensor::zeros((), dtype, device)?);
    }
    let (rows, iters) = alphas.dims2()?;
    if rows != p || targets.verse_of.len() != p {
        return Err(Error::Shape(format!("{rows} probability rows for {p} tokens")));
    }
    let v = targets.n_notes.len();
    let mut mask_std = vec![0f64; p * iters];
    let mut mask_tok = vec![0f64; p * iters];
    let mut ks = vec![0f64; p];
    let mut golds = vec![0f64; p];
    let mut weights = vec![0f64; p];
    let mut membership = vec![0f64; v * p];
    for (j, (o, &g)) in targets.outcomes.iter().zip(targets.gold).enumerate() {
        if o.k > iters {
            return Err(Error::Shape(format!("token {j} halted at {} of {iters} iterations", o.k)));
        }
        let rare = uses_rare_branch(o, g, epsilon);
        for k in 0..o.k - 1 {
            mask_std[j * iters + k] = 1.0;
            mask_tok[j * iters + k] = 1.0;
        }
        if rare {
            mask_tok[j * iters + o.k - 1] = 1.0;
        }
        ks[j] = o.k as f64;
        golds[j] = g as f64;
        weights[j] = token_weight(g, w_multi);
        let verse = targets.verse_of[j];
        if verse >= v {
            return Err(Error::Shape(format!("token {j} refers to verse {verse} of {v}")));
        }
        membership[verse * p + j] = 1.0;
    }
    let t = |data: Vec<f64>, shape: (usize, usize)| -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
    };
    let mask_std = t(mask_std, (p, iters))?;
    let mask_tok = t(mask_tok, (p, iters))?;
    let ks = t(ks, (p, 1))?;
    let golds = t(golds, (p, 1))?;
    let weights = t(weights, (p, 1))?;
    let membership = t(membership, (v, p))?;
    let notes = t(targets.n_notes.iter().map(|&n| n as f64).collect(), (v, 1))?;

    let t_std = ks.sub(&(alphas * &mask_std)?.sum_keepdim(1)?)?;
    let t_tok = ks.sub(&(alphas * &mask_tok)?.sum_keepdim(1)?)?;
    let global = membership.matmul(&t_std)?.sub(&notes)?.abs()?.sum_all()?;
    let per_token = (t_tok.sub(&golds)?.abs()? * weights)?.sum_all()?;
    Ok((global + per_token)?)
}

/// `nll + beta * grouping`.
pub fn joint_loss(nll: f64, grouping: f64, beta: f64) -> f64 {
    nll + beta * grouping
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::grouping::halt;
    use candle_core::{Device, Var};

    fn outcome(alphas: &[f64], k: usize) -> GroupingOutcome {
        let remainder = 1.0 - alphas[..k - 1].iter().sum::<f64>();
        GroupingOutcome { alphas: alphas.to_vec(), k, remainder }
    }

    #[test]
    fn perfect_one_to_one_is_zero() {
        let outs: Vec<_> = (0..4).map(|_| outcome(&[0.99], 1)).collect();
        assert_eq!(grouping_loss(&outs, &[1, 1, 1, 1], 4, 5.0, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn two_note_group_for_single_note_token() {
        let o = halt(&[0.7, 0.5], 0.05, 30).unwrap();
        assert_eq!(o.k, 2);
        assert!((o.remainder - 0.3).abs() < 1e-12);
        let l = grouping_loss(&[o], &[1], 2, 5.0, 0.05).unwrap();
        assert!((l - 1.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn stuck_halt_uses_rare_branch() {
        let o = halt(&[0.97], 0.05, 30).unwrap();
        assert!(uses_rare_branch(&o, 2, 0.05));
        let l = grouping_loss(&[o], &[2], 2, 5.0, 0.05).unwrap();
        assert!((l - 10.85).abs() < 1e-12, "{l}");
    }

    #[test]
    fn zero_when_counts_match() {
        // K = Delta and R = 1 for every token, counts summing to N.
        let outs = vec![outcome(&[0.0, 0.0, 0.99], 3), outcome(&[0.98], 1), outcome(&[0.0, 0.96], 2)];
        assert_eq!(grouping_loss(&outs, &[3, 1, 2], 6, 5.0, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        assert!(matches!(
            grouping_loss(&[outcome(&[0.99], 1)], &[1, 1], 2, 5.0, 0.05),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn tensor_form_matches_reference() {
        let dev = Device::Cpu;
        let rows = [
            (vec![0.2, 0.3, 0.6, 0.1], 3usize, 2u32, 0usize),
            (vec![0.97, 0.0, 0.0, 0.0], 1, 3, 0),
            (vec![0.1, 0.1, 0.1, 0.1], 4, 1, 1),
            (vec![0.5, 0.6, 0.0, 0.0], 2, 2, 1),
        ];
        let outs: Vec<_> = rows.iter().map(|(a, k, _, _)| outcome(&a[..*k], *k)).collect();
        let gold: Vec<u32> = rows.iter().map(|r| r.2).collect();
        let verse_of: Vec<usize> = rows.iter().map(|r| r.3).collect();
        let n_notes = [6usize, 3];
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.0.clone()).collect();
        let var = Var::from_tensor(&Tensor::from_vec(flat, (4, 4), &dev).unwrap()).unwrap();
        let targets = GroupingTargets { outcomes: &outs, gold: &gold, verse_of: &verse_of, n_notes: &n_notes };
        let loss = grouping_loss_tensor(var.as_tensor(), &targets, 5.0, 0.05).unwrap();

        let (l0, g0) = grouping_loss_with_grad(&outs[..2], &gold[..2], 6, 5.0, 0.05).unwrap();
        let (l1, g1) = grouping_loss_with_grad(&outs[2..], &gold[2..], 3, 5.0, 0.05).unwrap();
        assert!((scalar(&loss).unwrap() - (l0 + l1)).abs() < 1e-12);

        let grads = loss.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        for (j, expected) in g0.iter().chain(g1.iter()).enumerate() {
            for (k, e) in expected.iter().enumerate() {
                assert!((g[j][k] - e).abs() < 1e-12, "row {j} col {k}");
            }
            for k in expected.len()..4 {
                assert_eq!(g[j][k], 0.0);
            }
        }
    }

    #[test]
    fn joint_examples() {
        assert!((joint_loss(2.0, 1.0, 0.8) - 2.8).abs() < 1e-12);
        assert_eq!(joint_loss(1.7, 0.0, 0.8), 1.7);
        assert_eq!(joint_loss(1.7, 9.0, 0.0), 1.7);
    }
}
