//! The training loss: summed pre/post-postnet spectrum MSE, weighted
//! stop-token cross-entropy, prosody MSE, combined as
//! total = l_spec + alpha * l_stop + beta * l_prosody.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Scalar loss components; `total` always recombines from the parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_spec: f32,
    pub l_stop: f32,
    pub l_prosody: f32,
    pub total: f32,
}

/// Tape handles of the loss terms; `total` is the backward root.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_spec: Var,
    pub l_stop: Var,
    pub l_prosody: Var,
    pub total: Var,
}

/// Accumulates per-utterance loss terms over a batch with pooled
/// normalization: squared errors are summed and divided by the total element
/// count, so padding is never materialized and padded positions can never
/// contribute.
pub struct LossAccum {
    spec_sse: Option<Var>,
    spec_elems: usize,
    stop_weighted: Option<Var>,
    stop_wsum: f64,
    pros_sse: Option<Var>,
    pros_elems: usize,
}

impl Default for LossAccum {
    fn default() -> Self {
        Self::new()
    }
}

impl LossAccum {
    pub fn new() -> Self {
        LossAccum {
            spec_sse: None,
            spec_elems: 0,
            stop_weighted: None,
            stop_wsum: 0.0,
            pros_sse: None,
            pros_elems: 0,
        }
    }

    fn fold<S: Scalar>(tape: &mut Tape<S>, slot: &mut Option<Var>, v: Var) -> Result<()> {
        *slot = Some(match slot.take() {
            Some(acc) => tape.add(acc, v)?,
            None => v,
        });
        Ok(())
    }

    fn sse<S: Scalar>(tape: &mut Tape<S>, pred: Var, target: Var) -> Result<Var> {
        let d = tape.sub(pred, target)?;
        let sq = tape.mul(d, d)?;
        tape.sum_all(sq)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn add_utterance<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        mel_before: Var,
        mel_after: Var,
        mel_target: Var,
        stop_logits: Var,
        stop_targets: &[S],
        stop_weights: &[S],
        pred_prosody: Var,
        target_prosody: Var,
    ) -> Result<()> {
        let tshape = tape.value(mel_target).shape().to_vec();
        for head in [mel_before, mel_after] {
            if tape.value(head).shape() != tshape.as_slice() {
                return Err(Error::Input(format!(
                    "mel prediction shape {:?} does not match target {:?}",
                    tape.value(head).shape(),
                    tshape
                )));
            }
        }
        if tape.value(stop_logits).len() != stop_targets.len()
            || stop_targets.len() != stop_weights.len()
        {
            return Err(Error::Input(format!(
                "stop track lengths disagree: {} logits, {} targets, {} weights",
                tape.value(stop_logits).len(),
                stop_targets.len(),
                stop_weights.len()
            )));
        }
        if tape.value(pred_prosody).shape() != tape.value(target_prosody).shape() {
            return Err(Error::Input(format!(
                "prosody prediction shape {:?} does not match target {:?}",
                tape.value(pred_prosody).shape(),
                tape.value(target_prosody).shape()
            )));
        }

        let sse_b = Self::sse(tape, mel_before, mel_target)?;
        let sse_a = Self::sse(tape, mel_after, mel_target)?;
        let sse = tape.add(sse_b, sse_a)?;
        Self::fold(tape, &mut self.spec_sse, sse)?;
        self.spec_elems += tape.value(mel_target).len();

        let bce = tape.bce_with_logits(stop_logits, stop_targets, stop_weights)?;
        let wsum: f64 = stop_weights.iter().map(|w| w.to_f64()).sum();
        let weighted = tape.scale(bce, S::from_f64(wsum))?;
        Self::fold(tape, &mut self.stop_weighted, weighted)?;
        self.stop_wsum += wsum;

        let psse = Self::sse(tape, pred_prosody, target_prosody)?;
        Self::fold(tape, &mut self.pros_sse, psse)?;
        self.pros_elems += tape.value(target_prosody).len();
        Ok(())
    }

    pub fn finish<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        alpha: f32,
        beta: f32,
    ) -> Result<(LossVars, LossBreakdown)> {
        let (spec_sse, stop_weighted, pros_sse) =
            match (self.spec_sse, self.stop_weighted, self.pros_sse) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(Error::Contract("loss accumulator is empty".into())),
            };
        let l_spec = tape.scale(spec_sse, S::from_f64(1.0 / self.spec_elems as f64))?;
        let l_stop = tape.scale(stop_weighted, S::from_f64(1.0 / self.stop_wsum))?;
        let l_prosody = tape.scale(pros_sse, S::from_f64(1.0 / self.pros_elems as f64))?;
        let stop_term = tape.scale(l_stop, S::from_f32(alpha))?;
        let pros_term = tape.scale(l_prosody, S::from_f32(beta))?;
        let partial = tape.add(l_spec, stop_term)?;
        let total = tape.add(partial, pros_term)?;
        let value = |v: Var, tape: &Tape<S>| tape.value(v).data()[0].to_f32();
        let breakdown = LossBreakdown {
            l_spec: value(l_spec, tape),
            l_stop: value(l_stop, tape),
            l_prosody: value(l_prosody, tape),
            total: value(total, tape),
        };
        Ok((
            LossVars {
                l_spec,
                l_stop,
                l_prosody,
                total,
            },
            breakdown,
        ))
    }
}

/// Standalone loss computation on plain tensors (no gradients). Stop weights
/// follow the training convention: 1 on negative frames, max(T-1, 1) on the
/// positive frame.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    mel_before: &Tensor<f32>,
    mel_after: &Tensor<f32>,
    mel_target: &Tensor<f32>,
    stop_logits: &[f32],
    stop_labels: &[f32],
    pred_prosody: &Tensor<f32>,
    target_prosody: &Tensor<f32>,
    alpha: f32,
    beta: f32,
) -> Result<LossBreakdown> {
    let mut tape: Tape<f32> = Tape::new();
    let b = tape.leaf(mel_before.clone());
    let a = tape.leaf(mel_after.clone());
    let t = tape.leaf(mel_target.clone());
    let logits = tape.leaf(Tensor::new(vec![stop_logits.len(), 1], stop_logits.to_vec())?);
    let weights: Vec<f32> = stop_labels
        .iter()
        .map(|&l| {
            if l >= 0.5 {
                ((stop_labels.len() - 1).max(1)) as f32
            } else {
                1.0
            }
        })
        .collect();
    let pp = tape.leaf(pred_prosody.clone());
    let tp = tape.leaf(target_prosody.clone());
    let mut accum = LossAccum::new();
    accum.add_utterance(&mut tape, b, a, t, logits, stop_labels, &weights, pp, tp)?;
    let (_, breakdown) = accum.finish(&mut tape, alpha, beta)?;
    Ok(breakdown)
}
