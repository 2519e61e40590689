//! One forward session: a tape, the parameters registered on it, and the
//! pipeline stages from phoneme ids to mel frames.

use super::params::{AttnP, ConvP, LayerNormP, LinearP, ModelParams, SeP};
use super::{EncoderState, MelSpectrogram, ModelConfig, ProsodyFeed, Stage, StopKind};
use crate::error::{Error, Result};
use crate::prosody::PhoneId;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::train::loss::{LossAccum, LossBreakdown, LossVars};

/// Hard cap on input phoneme count.
pub const MAX_PHONES: usize = 512;

pub type ProsodyPrediction = Tensor<f32>;

/// Layer primitives shared by the pipeline, the trainer, and the speaker
/// classifier.
pub mod layers {
    use super::*;

    pub const LN_EPS: f64 = 1e-5;

    pub fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &LinearP<Var>) -> Result<Var> {
        let y = tape.matmul(x, p.w)?;
        tape.add_row(y, p.b)
    }

    pub fn linear_relu<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &LinearP<Var>) -> Result<Var> {
        let y = linear(tape, x, p)?;
        tape.relu(y)
    }

    pub fn layer_norm<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &LayerNormP<Var>) -> Result<Var> {
        tape.layer_norm(x, p.gamma, p.beta, S::from_f64(LN_EPS))
    }

    pub fn conv<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &ConvP<Var>, stride: usize) -> Result<Var> {
        tape.conv1d(x, p.w, p.b, stride)
    }

    /// Squeeze-and-excitation over [P, C]: mean over rows, two-layer gate,
    /// sigmoid channel scales.
    pub fn se_block<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &SeP<Var>, r: usize) -> Result<Var> {
        let c = tape.value(x).cols();
        if c % r != 0 {
            return Err(Error::Config(format!(
                "se_block: {c} channels not divisible by reduction {r}"
            )));
        }
        let squeeze = tape.mean_rows(x)?;
        let h = linear_relu(tape, squeeze, &p.fc1)?;
        let gate = linear(tape, h, &p.fc2)?;
        let scales = tape.sigmoid(gate)?;
        tape.mul_row(x, scales)
    }

    /// Standard sinusoidal position encoding [rows, d].
    pub fn sinusoidal_pe<S: Scalar>(rows: usize, d: usize) -> Tensor<S> {
        let mut data = Vec::with_capacity(rows * d);
        for pos in 0..rows {
            for i in 0..d {
                let pair = (i / 2 * 2) as f64;
                let angle = pos as f64 / 10_000f64.powf(pair / d as f64);
                data.push(S::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
            }
        }
        Tensor::new(vec![rows, d], data).expect("pe shape")
    }

    /// Lower-triangular self-attention mask: query i may not see key j > i.
    pub fn causal_mask(t: usize) -> Vec<bool> {
        let mut m = vec![false; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                m[i * t + j] = true;
            }
        }
        m
    }

    pub fn multi_head_attention<S: Scalar>(
        tape: &mut Tape<S>,
        q_in: Var,
        kv_in: Var,
        p: &AttnP<Var>,
        n_heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let d = tape.value(q_in).cols();
        let dh = d / n_heads;
        let q = linear(tape, q_in, &p.q)?;
        let k = linear(tape, kv_in, &p.k)?;
        let v = linear(tape, kv_in, &p.v)?;
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let (out, _) = tape.scaled_dot_attention(qh, kh, vh, mask.map(|m| m.to_vec()))?;
            heads.push(out);
        }
        let cat = tape.concat_cols(&heads)?;
        linear(tape, cat, &p.o)
    }
}

pub struct DecodeOut {
    /// Mel head output before the postnet residual.
    pub mel_before: Var,
    /// Final mel after the postnet residual.
    pub mel_after: Var,
    pub stop_logits: Var,
    pub frames: usize,
    pub truncated: bool,
}

pub struct ForwardTargets<'a> {
    pub mel: &'a Tensor<f32>,
    pub prosody: &'a Tensor<f32>,
}

/// A forward session over one tape.
pub struct Forward<'a, S: Scalar> {
    pub tape: Tape<S>,
    pub params: ModelParams<Var>,
    pub cfg: &'a ModelConfig,
    /// Instrumentation: transfer must reuse the text encoding, not recompute.
    pub encode_text_calls: u32,
}

impl<'a, S: Scalar> Forward<'a, S> {
    pub fn new(cfg: &'a ModelConfig, params: &ModelParams<Tensor<S>>) -> Self {
        let mut tape = Tape::new();
        let vars = params.map(&mut |t: &Tensor<S>| tape.param(t.clone()));
        Forward {
            tape,
            params: vars,
            cfg,
            encode_text_calls: 0,
        }
    }

    /// Phone embedding + position encoding, encoder pre-net, then the
    /// encoder block stack. [P] -> [P, d_model].
    pub fn encode_text(&mut self, phones: &[PhoneId]) -> Result<EncoderState> {
        if phones.is_empty() || phones.len() > MAX_PHONES {
            return Err(Error::Input(format!(
                "phoneme count {} outside [1, {MAX_PHONES}]",
                phones.len()
            )));
        }
        for (i, &p) in phones.iter().enumerate() {
            if (p as usize) >= self.cfg.n_phones {
                return Err(Error::Input(format!(
                    "phone id {p} at position {i} out of vocabulary ({} phones)",
                    self.cfg.n_phones
                )));
            }
        }
        self.encode_text_calls += 1;
        let p = phones.len();
        let d = self.cfg.d_model;
        let indices: Vec<usize> = phones.iter().map(|&x| x as usize).collect();
        let emb = self.tape.gather(self.params.phone_embed, &indices)?;
        let pe = self.tape.leaf(layers::sinusoidal_pe::<S>(p, d));
        let mut x = self.tape.add(emb, pe)?;
        x = layers::linear_relu(&mut self.tape, x, &self.params.enc_prenet)?;
        let blocks = self.params.enc_blocks.clone();
        for b in &blocks {
            let attn = layers::multi_head_attention(
                &mut self.tape,
                x,
                x,
                &b.attn,
                self.cfg.n_heads,
                None,
            )?;
            let res = self.tape.add(x, attn)?;
            x = layers::layer_norm(&mut self.tape, res, &b.ln1)?;
            let h = layers::linear_relu(&mut self.tape, x, &b.ff1)?;
            let h = layers::linear(&mut self.tape, h, &b.ff2)?;
            let res = self.tape.add(x, h)?;
            x = layers::layer_norm(&mut self.tape, res, &b.ln2)?;
        }
        Ok(EncoderState {
            stage: Stage::TextOnly,
            hidden: x,
            phones: p,
        })
    }

    /// tanh-projected style embedding [1, d_model].
    pub fn style_vector(&mut self, sty: usize) -> Result<Var> {
        if sty >= self.cfg.n_styles {
            return Err(Error::Input(format!(
                "style id {sty} out of range ({} styles)",
                self.cfg.n_styles
            )));
        }
        let e = self.tape.gather(self.params.style_embed, &[sty])?;
        let proj = layers::linear(&mut self.tape, e, &self.params.style_proj)?;
        self.tape.tanh(proj)
    }

    /// Speaker conditioning with an already-computed style vector; transfer
    /// reuses the style vector across its two combine passes.
    pub fn combine_with_style(
        &mut self,
        enc: &EncoderState,
        spk: usize,
        style_vec: Var,
    ) -> Result<EncoderState> {
        enc.expect_stage(Stage::TextOnly, "combine_speaker_style")?;
        if spk >= self.cfg.n_speakers {
            return Err(Error::Input(format!(
                "speaker id {spk} out of range ({} speakers)",
                self.cfg.n_speakers
            )));
        }
        let spk_e = self.tape.gather(self.params.speaker_embed, &[spk])?;
        let rep = self.tape.repeat_row(spk_e, enc.phones)?;
        let cat = self.tape.concat_cols(&[enc.hidden, rep])?;
        let proj = layers::linear(&mut self.tape, cat, &self.params.spk_proj)?;
        let out = self.tape.add_row(proj, style_vec)?;
        Ok(EncoderState {
            stage: Stage::SpeakerStyleCombined,
            hidden: out,
            phones: enc.phones,
        })
    }

    /// The conditioning order: broadcast-concat the speaker embedding and
    /// project back to d_model, then add the tanh-projected style embedding.
    pub fn combine_speaker_style(
        &mut self,
        enc: &EncoderState,
        spk: usize,
        sty: usize,
    ) -> Result<EncoderState> {
        let sv = self.style_vector(sty)?;
        self.combine_with_style(enc, spk, sv)
    }

    /// Two k=3 convolutions, SE recalibration, then a linear head down to
    /// the 4 prosody features. No output squashing.
    pub fn prosody_bottleneck(&mut self, st: &EncoderState) -> Result<Var> {
        st.expect_stage(Stage::SpeakerStyleCombined, "prosody_bottleneck")?;
        let p = self.params.clone_refs();
        let h = layers::conv(&mut self.tape, st.hidden, &p.bn_conv1, 1)?;
        let h = self.tape.relu(h)?;
        let h = layers::conv(&mut self.tape, h, &p.bn_conv2, 1)?;
        let h = self.tape.relu(h)?;
        let h = layers::se_block(&mut self.tape, h, &p.bn_se, self.cfg.se_reduction)?;
        layers::linear(&mut self.tape, h, &p.bn_out)
    }

    /// The 2-layer aggregation CNN over prosody rows [P, 4] -> [P, d_model].
    pub fn aggregation_features(&mut self, prosody: Var) -> Result<Var> {
        if self.tape.value(prosody).cols() != self.cfg.d_prosody {
            return Err(Error::Contract(format!(
                "aggregation expects {} prosody columns, got {}",
                self.cfg.d_prosody,
                self.tape.value(prosody).cols()
            )));
        }
        let p = self.params.clone_refs();
        let h = layers::conv(&mut self.tape, prosody, &p.agg_conv1, 1)?;
        let h = self.tape.relu(h)?;
        layers::conv(&mut self.tape, h, &p.agg_conv2, 1)
    }

    /// Add aggregation-CNN features to the combined encoder state.
    pub fn fuse_aggregated(
        &mut self,
        combined: &EncoderState,
        agg_features: Var,
    ) -> Result<EncoderState> {
        combined.expect_stage(Stage::SpeakerStyleCombined, "aggregate_prosody")?;
        if self.tape.value(agg_features).rows() != combined.phones {
            return Err(Error::Contract(format!(
                "aggregated features have {} rows for {} phones",
                self.tape.value(agg_features).rows(),
                combined.phones
            )));
        }
        let out = self.tape.add(combined.hidden, agg_features)?;
        Ok(EncoderState {
            stage: Stage::FullyAggregated,
            hidden: out,
            phones: combined.phones,
        })
    }

    pub fn aggregate_prosody(
        &mut self,
        combined: &EncoderState,
        prosody: Var,
    ) -> Result<EncoderState> {
        combined.expect_stage(Stage::SpeakerStyleCombined, "aggregate_prosody")?;
        if self.tape.value(prosody).rows() != combined.phones {
            return Err(Error::Contract(format!(
                "prosody has {} rows for {} phones",
                self.tape.value(prosody).rows(),
                combined.phones
            )));
        }
        let feats = self.aggregation_features(prosody)?;
        self.fuse_aggregated(combined, feats)
    }

    /// Decoder stack on a given (already shifted) input sequence. Returns
    /// (mel_before, stop_logits).
    fn decoder_core(&mut self, dec_input: Var, enc_hidden: Var) -> Result<(Var, Var)> {
        let t = self.tape.value(dec_input).rows();
        let d = self.cfg.d_model;
        let p = self.params.clone_refs();
        let mut x = layers::linear_relu(&mut self.tape, dec_input, &p.dec_prenet1)?;
        x = layers::linear_relu(&mut self.tape, x, &p.dec_prenet2)?;
        let pe = self.tape.leaf(layers::sinusoidal_pe::<S>(t, d));
        x = self.tape.add(x, pe)?;
        let causal = layers::causal_mask(t);
        for b in &p.dec_blocks {
            let attn = layers::multi_head_attention(
                &mut self.tape,
                x,
                x,
                &b.self_attn,
                self.cfg.n_heads,
                Some(&causal),
            )?;
            let res = self.tape.add(x, attn)?;
            x = layers::layer_norm(&mut self.tape, res, &b.ln1)?;
            let cross = layers::multi_head_attention(
                &mut self.tape,
                x,
                enc_hidden,
                &b.cross_attn,
                self.cfg.n_heads,
                None,
            )?;
            let res = self.tape.add(x, cross)?;
            x = layers::layer_norm(&mut self.tape, res, &b.ln2)?;
            let h = layers::linear_relu(&mut self.tape, x, &b.ff1)?;
            let h = layers::linear(&mut self.tape, h, &b.ff2)?;
            let res = self.tape.add(x, h)?;
            x = layers::layer_norm(&mut self.tape, res, &b.ln3)?;
        }
        let mel_before = layers::linear(&mut self.tape, x, &p.mel_head)?;
        let stop_logits = layers::linear(&mut self.tape, x, &p.stop_head)?;
        Ok((mel_before, stop_logits))
    }

    /// Residual postnet: two k=5 convolutions over time.
    fn postnet(&mut self, mel_before: Var) -> Result<Var> {
        let p = self.params.clone_refs();
        let h = layers::conv(&mut self.tape, mel_before, &p.postnet1, 1)?;
        let h = self.tape.tanh(h)?;
        let h = layers::conv(&mut self.tape, h, &p.postnet2, 1)?;
        self.tape.add(mel_before, h)
    }

    /// Teacher-forced decoding on a ground-truth mel; the decoder input is
    /// the target shifted right by one frame behind a zero "go" frame.
    pub fn decode_teacher_forced(
        &mut self,
        st: &EncoderState,
        target_mel: &Tensor<f32>,
    ) -> Result<DecodeOut> {
        st.expect_stage(Stage::FullyAggregated, "decode")?;
        let t = target_mel.rows();
        let nm = self.cfg.n_mels;
        if t < 1 || target_mel.cols() != nm {
            return Err(Error::Input(format!(
                "teacher-forced target must be [T>=1, {nm}], got {:?}",
                target_mel.shape()
            )));
        }
        let mut shifted = vec![S::zero(); t * nm];
        for r in 1..t {
            for c in 0..nm {
                shifted[r * nm + c] = S::from_f32(target_mel.at2(r - 1, c));
            }
        }
        let input = self.tape.leaf(Tensor::new(vec![t, nm], shifted)?);
        let (mel_before, stop_logits) = self.decoder_core(input, st.hidden)?;
        let mel_after = self.postnet(mel_before)?;
        Ok(DecodeOut {
            mel_before,
            mel_after,
            stop_logits,
            frames: t,
            truncated: false,
        })
    }

    /// Autoregressive decoding: emit frames until the stop probability
    /// crosses 0.5 or the frame cap is reached (flagged, not an error).
    /// The postnet runs once over the finished sequence.
    pub fn decode_autoregressive(&mut self, st: &EncoderState) -> Result<DecodeOut> {
        st.expect_stage(Stage::FullyAggregated, "decode")?;
        let nm = self.cfg.n_mels;
        let max = self.cfg.max_decoder_frames;
        let mut generated: Vec<S> = Vec::new();
        let mut truncated = true;
        let mut last: Option<(Var, Var)> = None;
        for t in 0..max {
            let mut input = vec![S::zero(); (t + 1) * nm];
            input[nm..].copy_from_slice(&generated);
            let input = self.tape.leaf(Tensor::new(vec![t + 1, nm], input)?);
            let (mel_before, stop_logits) = self.decoder_core(input, st.hidden)?;
            let frame = self.tape.value(mel_before).row_slice(t).to_vec();
            generated.extend_from_slice(&frame);
            let logit = self.tape.value(stop_logits).at2(t, 0).to_f64();
            last = Some((mel_before, stop_logits));
            if 1.0 / (1.0 + (-logit).exp()) > 0.5 {
                truncated = false;
                break;
            }
        }
        let (mel_before, stop_logits) = last.expect("max_decoder_frames >= 1");
        let frames = generated.len() / nm;
        let mel_after = self.postnet(mel_before)?;
        Ok(DecodeOut {
            mel_before,
            mel_after,
            stop_logits,
            frames,
            truncated,
        })
    }

    /// Copy a finished decode out of the tape as an f32 spectrogram with
    /// per-frame stop probabilities.
    pub fn to_spectrogram(&self, out: &DecodeOut) -> MelSpectrogram {
        let frames = self.tape.value(out.mel_after).convert::<f32>();
        let stop = self
            .tape
            .value(out.stop_logits)
            .data()
            .iter()
            .map(|&x| (1.0 / (1.0 + (-x.to_f64()).exp())) as f32)
            .collect();
        MelSpectrogram {
            frames,
            stop,
            stop_kind: StopKind::Probs,
            truncated: out.truncated,
        }
    }
}

impl ModelParams<Var> {
    /// Vars are Copy; cloning the tree is cheap and keeps borrows simple.
    fn clone_refs(&self) -> ModelParams<Var> {
        self.clone()
    }
}

/// Stop-token targets and weights for a T-frame utterance: label 1 on the
/// final frame only, weighted by (T-1) against the T-1 negative frames.
pub fn stop_targets_weights<S: Scalar>(t: usize) -> (Vec<S>, Vec<S>) {
    let mut targets = vec![S::zero(); t];
    let mut weights = vec![S::one(); t];
    targets[t - 1] = S::one();
    weights[t - 1] = S::from_usize((t - 1).max(1));
    (targets, weights)
}

/// Run the full training-mode pipeline for one utterance and fold its terms
/// into the loss accumulator. Returns the prosody prediction.
pub fn forward_utterance<S: Scalar>(
    fwd: &mut Forward<S>,
    phones: &[PhoneId],
    spk: usize,
    sty: usize,
    targets: &ForwardTargets,
    accum: &mut LossAccum,
) -> Result<Tensor<f32>> {
    if targets.prosody.rows() != phones.len() || targets.prosody.cols() != fwd.cfg.d_prosody {
        return Err(Error::Input(format!(
            "prosody target shape {:?} does not match {} phones x {}",
            targets.prosody.shape(),
            phones.len(),
            fwd.cfg.d_prosody
        )));
    }
    let enc = fwd.encode_text(phones)?;
    let combined = fwd.combine_speaker_style(&enc, spk, sty)?;
    let pred = fwd.prosody_bottleneck(&combined)?;
    let fed = match fwd.cfg.prosody_feed {
        ProsodyFeed::Predicted => pred,
        // Ground-truth feed: the prediction is detached from the decoder
        // path and only drives the prosody loss.
        ProsodyFeed::GroundTruth => fwd.tape.leaf(targets.prosody.convert::<S>()),
    };
    let agg = fwd.aggregate_prosody(&combined, fed)?;
    let dec = fwd.decode_teacher_forced(&agg, targets.mel)?;

    let t = targets.mel.rows();
    let (stop_t, stop_w) = stop_targets_weights::<S>(t);
    let mel_target = fwd.tape.leaf(targets.mel.convert::<S>());
    let pros_target = fwd.tape.leaf(targets.prosody.convert::<S>());
    accum.add_utterance(
        &mut fwd.tape,
        dec.mel_before,
        dec.mel_after,
        mel_target,
        dec.stop_logits,
        &stop_t,
        &stop_w,
        pred,
        pros_target,
    )?;
    Ok(fwd.tape.value(pred).convert::<f32>())
}

/// Single-utterance training forward: pipeline, Eq.-1 loss terms, and the
/// prosody prediction. The returned vars drive `backward`.
pub fn forward_train<S: Scalar>(
    fwd: &mut Forward<S>,
    phones: &[PhoneId],
    spk: usize,
    sty: usize,
    targets: &ForwardTargets,
    alpha: f32,
    beta: f32,
) -> Result<(LossBreakdown, LossVars, ProsodyPrediction)> {
    let mut accum = LossAccum::new();
    let pred = forward_utterance(fwd, phones, spk, sty, targets, &mut accum)?;
    let (vars, breakdown) = accum.finish(&mut fwd.tape, alpha, beta)?;
    Ok((breakdown, vars, pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamGroup;

    fn tiny_setup() -> (ModelConfig, ModelParams<Tensor<f32>>) {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 11);
        (cfg, params)
    }

    fn ramp_mel(t: usize, nm: usize) -> Tensor<f32> {
        let data: Vec<f32> = (0..t * nm).map(|i| ((i % 7) as f32) * 0.1 - 0.3).collect();
        Tensor::new(vec![t, nm], data).unwrap()
    }

    fn ramp_pros(p: usize) -> Tensor<f32> {
        let data: Vec<f32> = (0..p * 4).map(|i| ((i % 5) as f32) * 0.25 - 0.5).collect();
        Tensor::new(vec![p, 4], data).unwrap()
    }

    #[test]
    fn encode_shapes_and_errors() {
        let (cfg, params) = tiny_setup();
        let mut fwd = Forward::<f32>::new(&cfg, &params);
        let st = fwd.encode_text(&[3]).unwrap();
        assert_eq!(fwd.tape.value(st.hidden).shape(), &[1, cfg.d_model]);
        assert_eq!(st.stage, Stage::TextOnly);
        assert_eq!(fwd.encode_text_calls, 1);

        match fwd.encode_text(&[1, 99]) {
            Err(Error::Input(msg)) => {
                assert!(msg.contains("99") && msg.contains("position 1"), "{msg}");
            }
            other => panic!("expected input error, got {other:?}"),
        }
        assert!(fwd.encode_text(&[]).is_err());
    }

    #[test]
    fn encode_is_position_sensitive_and_deterministic() {
        let (cfg, params) = tiny_setup();
        let run = |phones: &[PhoneId]| {
            let mut fwd = Forward::<f32>::new(&cfg, &params);
            let st = fwd.encode_text(phones).unwrap();
            fwd.tape.value(st.hidden).data().to_vec()
        };
        let a = run(&[1, 2, 3, 4]);
        let a2 = run(&[1, 2, 3, 4]);
        assert!(a.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));

        let b = run(&[4, 3, 2, 1]);
        let diff: f32 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(diff.sqrt() > 1e-6, "permutation left encoding unchanged");
    }

    #[test]
    fn combine_shape_and_style_ablation() {
        let (cfg, mut params) = tiny_setup();
        {
            let mut fwd = Forward::<f32>::new(&cfg, &params);
            let st = fwd.encode_text(&[0, 1, 2]).unwrap();
            let c = fwd.combine_speaker_style(&st, 1, 1).unwrap();
            assert_eq!(fwd.tape.value(c.hidden).shape(), &[3, cfg.d_model]);
            assert_eq!(c.stage, Stage::SpeakerStyleCombined);
            assert!(fwd.combine_speaker_style(&st, 9, 0).is_err());
            assert!(fwd.combine_speaker_style(&st, 0, 9).is_err());
        }

        // Zero style projection: output independent of the style id.
        params.style_proj.w = Tensor::zeros(params.style_proj.w.shape());
        params.style_proj.b = Tensor::zeros(params.style_proj.b.shape());
        let run = |sty: usize| {
            let mut fwd = Forward::<f32>::new(&cfg, &params);
            let st = fwd.encode_text(&[0, 1, 2]).unwrap();
            let c = fwd.combine_speaker_style(&st, 0, sty).unwrap();
            fwd.tape.value(c.hidden).data().to_vec()
        };
        let s0 = run(0);
        let s1 = run(1);
        assert!(s0.iter().zip(&s1).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn combine_hand_case() {
        // 1 phone, d_model=2, d_embed=1, hand-set weights; both projections
        // computed by hand below.
        let mut cfg = ModelConfig::tiny();
        cfg.d_model = 2;
        cfg.n_heads = 1;
        cfg.d_spk_sty_embed = 1;
        let mut params = ModelParams::<Tensor<f32>>::init(&cfg, 0);
        params.speaker_embed = Tensor::from_rows(&[vec![2.0], vec![-1.0]]);
        params.style_embed = Tensor::from_rows(&[vec![0.5], vec![3.0]]);
        // spk_proj: [d+1=3, 2]
        params.spk_proj.w =
            Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, -0.5]).unwrap();
        params.spk_proj.b = Tensor::new(vec![2], vec![0.1, -0.1]).unwrap();
        params.style_proj.w = Tensor::new(vec![1, 2], vec![0.2, -0.4]).unwrap();
        params.style_proj.b = Tensor::new(vec![2], vec![0.0, 0.3]).unwrap();

        let mut fwd = Forward::<f32>::new(&cfg, &params);
        let st = fwd.encode_text(&[0]).unwrap();
        let h = fwd.tape.value(st.hidden).data().to_vec(); // [h0, h1]
        let c = fwd.combine_speaker_style(&st, 0, 1).unwrap();
        let got = fwd.tape.value(c.hidden).data().to_vec();

        // Step 1 by hand: concat [h0, h1, 2.0] then project.
        let p0 = h[0] * 1.0 + h[1] * 0.0 + 2.0 * 0.5 + 0.1;
        let p1 = h[0] * 0.0 + h[1] * 1.0 + 2.0 * (-0.5) - 0.1;
        // Step 2 by hand: style 1 -> 3.0; tanh(3*0.2+0) and tanh were applied
        // to the projection, then added.
        let s0 = (3.0f32 * 0.2 + 0.0).tanh();
        let s1 = (3.0f32 * (-0.4) + 0.3).tanh();
        assert!((got[0] - (p0 + s0)).abs() < 1e-5, "{} vs {}", got[0], p0 + s0);
        assert!((got[1] - (p1 + s1)).abs() < 1e-5, "{} vs {}", got[1], p1 + s1);
    }

    #[test]
    fn se_block_closed_form_and_hand_case() {
        // Zero excitation weights: every channel scale is sigmoid(0) = 0.5.
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]));
        let p = SeP {
            fc1: LinearP {
                w: tape.leaf(Tensor::zeros(&[2, 1])),
                b: tape.leaf(Tensor::zeros(&[1])),
            },
            fc2: LinearP {
                w: tape.leaf(Tensor::zeros(&[1, 2])),
                b: tape.leaf(Tensor::zeros(&[2])),
            },
        };
        let y = layers::se_block(&mut tape, x, &p, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2]);
        let want = [0.5, -1.0, 1.5, 0.25];
        for (g, w) in tape.value(y).data().iter().zip(want) {
            assert!((g - w).abs() < 1e-6);
        }

        // P=2, C=2, r=2 with hand-set weights; five stages evaluated by hand.
        let mut tape: Tape<f32> = Tape::new();
        let xv = [[1.0f32, 2.0], [3.0, -4.0]];
        let x = tape.leaf(Tensor::from_rows(&[xv[0].to_vec(), xv[1].to_vec()]));
        let p = SeP {
            fc1: LinearP {
                w: tape.leaf(Tensor::new(vec![2, 1], vec![0.5, -0.25]).unwrap()),
                b: tape.leaf(Tensor::new(vec![1], vec![0.1]).unwrap()),
            },
            fc2: LinearP {
                w: tape.leaf(Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap()),
                b: tape.leaf(Tensor::new(vec![2], vec![0.0, 0.2]).unwrap()),
            },
        };
        let y = layers::se_block(&mut tape, x, &p, 2).unwrap();
        // squeeze: means per channel
        let m = [(1.0 + 3.0) / 2.0, (2.0 - 4.0) / 2.0];
        // excitation: relu(m·w1 + b1) -> w2 + b2 -> sigmoid
        let hidden = (m[0] * 0.5 + m[1] * (-0.25) + 0.1).max(0.0);
        let gate = [hidden * 1.0 + 0.0, hidden * (-2.0) + 0.2];
        let s = [
            1.0 / (1.0 + (-gate[0]).exp()),
            1.0 / (1.0 + (-gate[1]).exp()),
        ];
        for r in 0..2 {
            for c in 0..2 {
                let want = xv[r][c] * s[c];
                let got = tape.value(y).at2(r, c);
                assert!((got - want).abs() < 1e-6, "[{r},{c}]: {got} vs {want}");
            }
        }

        // Reduction mismatch is a configuration error.
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let p = SeP {
            fc1: LinearP {
                w: tape.leaf(Tensor::zeros(&[3, 1])),
                b: tape.leaf(Tensor::zeros(&[1])),
            },
            fc2: LinearP {
                w: tape.leaf(Tensor::zeros(&[1, 3])),
                b: tape.leaf(Tensor::zeros(&[3])),
            },
        };
        assert!(matches!(
            layers::se_block(&mut tape, x, &p, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bottleneck_shape_stage_and_zero_params() {
        let (cfg, params) = tiny_setup();
        let mut fwd = Forward::<f32>::new(&cfg, &params);
        let st = fwd.encode_text(&[0, 1, 2, 3, 4]).unwrap();
        // Wrong stage is a contract error.
        assert!(matches!(
            fwd.prosody_bottleneck(&st),
            Err(Error::Contract(_))
        ));
        let c = fwd.combine_speaker_style(&st, 0, 0).unwrap();
        let pred = fwd.prosody_bottleneck(&c).unwrap();
        assert_eq!(fwd.tape.value(pred).shape(), &[5, 4]);

        // All bottleneck parameters zero -> all-zero prediction.
        let mut zeroed = params.clone();
        for t in [
            &mut zeroed.bn_conv1.w,
            &mut zeroed.bn_conv1.b,
            &mut zeroed.bn_conv2.w,
            &mut zeroed.bn_conv2.b,
            &mut zeroed.bn_se.fc1.w,
            &mut zeroed.bn_se.fc1.b,
            &mut zeroed.bn_se.fc2.w,
            &mut zeroed.bn_se.fc2.b,
            &mut zeroed.bn_out.w,
            &mut zeroed.bn_out.b,
        ] {
            *t = Tensor::zeros(t.shape());
        }
        let mut fwd = Forward::<f32>::new(&cfg, &zeroed);
        let st = fwd.encode_text(&[0, 1, 2]).unwrap();
        let c = fwd.combine_speaker_style(&st, 0, 0).unwrap();
        let pred = fwd.prosody_bottleneck(&c).unwrap();
        assert!(fwd.tape.value(pred).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_identity_and_locality() {
        let (cfg, params) = tiny_setup();

        // Zero prosody + zero aggregation biases: output == combined exactly.
        let mut zb = params.clone();
        zb.agg_conv1.b = Tensor::zeros(zb.agg_conv1.b.shape());
        zb.agg_conv2.b = Tensor::zeros(zb.agg_conv2.b.shape());
        let mut fwd = Forward::<f32>::new(&cfg, &zb);
        let st = fwd.encode_text(&[0, 1, 2, 3]).unwrap();
        let c = fwd.combine_speaker_style(&st, 0, 0).unwrap();
        let zeros = fwd.tape.leaf(Tensor::zeros(&[4, 4]));
        let agg = fwd.aggregate_prosody(&c, zeros).unwrap();
        assert_eq!(agg.stage, Stage::FullyAggregated);
        let before = fwd.tape.value(c.hidden).data().to_vec();
        let after = fwd.tape.value(agg.hidden).data().to_vec();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));

        // Row mismatch is a contract error.
        let bad = fwd.tape.leaf(Tensor::zeros(&[3, 4]));
        assert!(matches!(
            fwd.aggregate_prosody(&c, bad),
            Err(Error::Contract(_))
        ));

        // Locality: perturbing phone i's prosody may change only rows within
        // the two stacked k=3 convolutions' receptive field (distance <= 2).
        let p = 8usize;
        let base_pros = ramp_pros(p);
        let run = |pros: &Tensor<f32>| {
            let mut fwd = Forward::<f32>::new(&cfg, &params);
            let st = fwd.encode_text(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
            let c = fwd.combine_speaker_style(&st, 0, 0).unwrap();
            let pv = fwd.tape.leaf(pros.clone());
            let agg = fwd.aggregate_prosody(&c, pv).unwrap();
            fwd.tape.value(agg.hidden).clone()
        };
        let out0 = run(&base_pros);
        let perturb_at = 4usize;
        let mut pert = base_pros.clone();
        pert.data_mut()[perturb_at * 4] += 1.0;
        let out1 = run(&pert);
        let mut changed = vec![false; p];
        for r in 0..p {
            let a = out0.row_slice(r);
            let b = out1.row_slice(r);
            changed[r] = a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-7);
        }
        assert!(changed[perturb_at], "perturbed phone row unchanged");
        for (r, &ch) in changed.iter().enumerate() {
            let dist = r.abs_diff(perturb_at);
            if dist > 2 {
                assert!(!ch, "row {r} changed at distance {dist}");
            }
        }
    }

    #[test]
    fn teacher_forced_shape_and_causality() {
        let (cfg, params) = tiny_setup();
        let t = 6usize;
        let target = ramp_mel(t, cfg.n_mels);
        let run = |mel: &Tensor<f32>| {
            let mut fwd = Forward::<f32>::new(&cfg, &params);
            let st = fwd.encode_text(&[0, 1, 2]).unwrap();
            let c = fwd.combine_speaker_style(&st, 0, 0).unwrap();
            let pred = fwd.prosody_bottleneck(&c).unwrap();
            let agg = fwd.aggregate_prosody(&c, pred).unwrap();
            let dec = fwd.decode_teacher_forced(&agg, mel).unwrap();
            assert_eq!(dec.frames, mel.rows());
            fwd.tape.value(dec.mel_after).clone()
        };
        let base = run(&target);
        assert_eq!(base.shape(), &[t, cfg.n_mels]);

        // Causal property: changing target frame k leaves predictions at
        // positions <= k untouched (prediction at k consumes frames < k).
        // The postnet mixes across time, so check mel_before.
        let run_before = |mel: &Tensor<f32>| {
            let mut fwd = Forward::<f32>::new(&cfg, &params);
            let st = fwd.encode_text(&[0, 1, 2]).unwrap();
            let c = fwd.combine_speaker_style(&st, 0, 0).unwrap();
            let pred = fwd.prosody_bottleneck(&c).unwrap();
            let agg = fwd.aggregate_prosody(&c, pred).unwrap();
            let dec = fwd.decode_teacher_forced(&agg, mel).unwrap();
            fwd.tape.value(dec.mel_before).clone()
        };
        let before0 = run_before(&target);
        let k = 3usize;
        let mut bumped = target.clone();
        bumped.data_mut()[k * cfg.n_mels + 1] += 2.0;
        let before1 = run_before(&bumped);
        for r in 0..=k {
            let a = before0.row_slice(r);
            let b = before1.row_slice(r);
            assert!(
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "prediction at position {r} depends on target frame {k}"
            );
        }
        let tail_changed = (k + 1..t).any(|r| {
            before0
                .row_slice(r)
                .iter()
                .zip(before1.row_slice(r))
                .any(|(x, y)| x != y)
        });
        assert!(tail_changed, "perturbation never reached later frames");
    }

    #[test]
    fn autoregressive_respects_frame_cap() {
        let (mut cfg, _) = tiny_setup();
        cfg.max_decoder_frames = 5;
        let params = ModelParams::init(&cfg, 3);
        let mut fwd = Forward::<f32>::new(&cfg, &params);
        let st = fwd.encode_text(&[0, 1]).unwrap();
        let c = fwd.combine_speaker_style(&st, 0, 0).unwrap();
        let pred = fwd.prosody_bottleneck(&c).unwrap();
        let agg = fwd.aggregate_prosody(&c, pred).unwrap();
        let dec = fwd.decode_autoregressive(&agg).unwrap();
        assert!(dec.frames <= 5);
        if dec.frames == 5 {
            // An untrained stop head near 0.5 may or may not fire; if it
            // never did, the result must carry the truncation flag.
            let mel = fwd.to_spectrogram(&dec);
            assert_eq!(mel.truncated, dec.truncated);
        }
        assert_eq!(
            fwd.tape.value(dec.mel_after).shape(),
            &[dec.frames, cfg.n_mels]
        );
    }

    #[test]
    fn forward_train_components_and_determinism() {
        let (cfg, params) = tiny_setup();
        let phones: Vec<PhoneId> = vec![0, 1, 2, 3];
        let mel = ramp_mel(7, cfg.n_mels);
        let pros = ramp_pros(4);
        let targets = ForwardTargets {
            mel: &mel,
            prosody: &pros,
        };
        let run = || {
            let mut fwd = Forward::<f32>::new(&cfg, &params);
            let (bd, _, pred) = forward_train(&mut fwd, &phones, 0, 1, &targets, 1.0, 1.0).unwrap();
            (bd, pred)
        };
        let (bd, pred) = run();
        assert!(bd.l_spec.is_finite() && bd.l_spec >= 0.0);
        assert!(bd.l_stop.is_finite() && bd.l_stop >= 0.0);
        assert!(bd.l_prosody.is_finite() && bd.l_prosody >= 0.0);
        let recombined = bd.l_spec + bd.l_stop + bd.l_prosody;
        assert!((bd.total - recombined).abs() <= 1e-6 * recombined.abs().max(1.0));

        let (bd2, pred2) = run();
        assert_eq!(bd.total.to_bits(), bd2.total.to_bits());
        assert!(pred
            .data()
            .iter()
            .zip(pred2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        // Misaligned targets are an input error.
        let bad = ForwardTargets {
            mel: &mel,
            prosody: &ramp_pros(3),
        };
        let mut fwd = Forward::<f32>::new(&cfg, &params);
        assert!(matches!(
            forward_train(&mut fwd, &phones, 0, 0, &bad, 1.0, 1.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn ground_truth_feed_detaches_bottleneck_from_spec_loss() {
        let (mut cfg, _) = tiny_setup();
        cfg.prosody_feed = ProsodyFeed::GroundTruth;
        let params = ModelParams::init(&cfg, 5);
        let phones: Vec<PhoneId> = vec![0, 1, 2];
        let mel = ramp_mel(5, cfg.n_mels);
        let pros = ramp_pros(3);
        let targets = ForwardTargets {
            mel: &mel,
            prosody: &pros,
        };

        let grads_for_beta = |beta: f32| {
            let mut fwd = Forward::<f32>::new(&cfg, &params);
            let (_, vars, _) = forward_train(&mut fwd, &phones, 0, 0, &targets, 1.0, beta).unwrap();
            fwd.tape.backward(vars.total).unwrap();
            let mut norms = std::collections::BTreeMap::new();
            let leaves = fwd.params.clone();
            let mut collect = |name: String, g: ParamGroup, v: &Var| {
                let n: f64 = fwd
                    .tape
                    .grad(*v)
                    .unwrap()
                    .iter()
                    .map(|&x| (x as f64) * (x as f64))
                    .sum();
                norms.insert(name, (g, n));
            };
            leaves.visit(&mut collect);
            norms
        };

        // beta = 0: with the ground-truth feed the bottleneck gets nothing
        // from L_spec or L_stop.
        for (name, (g, n)) in grads_for_beta(0.0) {
            if g == ParamGroup::Bottleneck {
                assert_eq!(n, 0.0, "{name} received spec-loss gradient");
            }
        }
        // beta > 0: the prosody loss reaches it.
        let with_pros = grads_for_beta(1.0);
        let total: f64 = with_pros
            .iter()
            .filter(|(_, (g, _))| *g == ParamGroup::Bottleneck)
            .map(|(_, (_, n))| *n)
            .sum();
        assert!(total > 0.0, "prosody loss never reached the bottleneck");
    }

    #[test]
    fn speaker_change_leaves_encoding_untouched() {
        let (cfg, params) = tiny_setup();
        let mut fwd = Forward::<f32>::new(&cfg, &params);
        let st = fwd.encode_text(&[0, 1, 2]).unwrap();
        let enc_a = fwd.tape.value(st.hidden).data().to_vec();
        let _c0 = fwd.combine_speaker_style(&st, 0, 0).unwrap();
        let _c1 = fwd.combine_speaker_style(&st, 1, 0).unwrap();
        let enc_b = fwd.tape.value(st.hidden).data().to_vec();
        assert!(enc_a.iter().zip(&enc_b).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
