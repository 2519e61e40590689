//! Named, grouped parameter tree. Generic over the leaf type so the same
//! structure holds value tensors (f32 or f64) or tape vars.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::tensor::{Scalar, Tensor};

/// Freezing and checkpoint grouping. Every parameter belongs to exactly one
/// group; decoder cross-attention is split out so the refinement strategies
/// can unfreeze it independently of the rest of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Encoder,
    SpeakerEmbed,
    StyleEmbed,
    Projections,
    Bottleneck,
    AggCnn,
    Decoder,
    DecoderCrossAttn,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Encoder,
        ParamGroup::SpeakerEmbed,
        ParamGroup::StyleEmbed,
        ParamGroup::Projections,
        ParamGroup::Bottleneck,
        ParamGroup::AggCnn,
        ParamGroup::Decoder,
        ParamGroup::DecoderCrossAttn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::SpeakerEmbed => "speaker_embed",
            ParamGroup::StyleEmbed => "style_embed",
            ParamGroup::Projections => "projections",
            ParamGroup::Bottleneck => "bottleneck",
            ParamGroup::AggCnn => "agg_cnn",
            ParamGroup::Decoder => "decoder",
            ParamGroup::DecoderCrossAttn => "decoder_cross_attn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|g| g.name() == s)
    }

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|g| g == self).unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct LinearP<T> {
    pub w: T,
    pub b: T,
}

#[derive(Debug, Clone)]
pub struct LayerNormP<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Debug, Clone)]
pub struct ConvP<T> {
    pub w: T,
    pub b: T,
}

#[derive(Debug, Clone)]
pub struct AttnP<T> {
    pub q: LinearP<T>,
    pub k: LinearP<T>,
    pub v: LinearP<T>,
    pub o: LinearP<T>,
}

#[derive(Debug, Clone)]
pub struct SeP<T> {
    pub fc1: LinearP<T>,
    pub fc2: LinearP<T>,
}

#[derive(Debug, Clone)]
pub struct EncBlockP<T> {
    pub attn: AttnP<T>,
    pub ln1: LayerNormP<T>,
    pub ff1: LinearP<T>,
    pub ff2: LinearP<T>,
    pub ln2: LayerNormP<T>,
}

#[derive(Debug, Clone)]
pub struct DecBlockP<T> {
    pub self_attn: AttnP<T>,
    pub ln1: LayerNormP<T>,
    pub cross_attn: AttnP<T>,
    pub ln2: LayerNormP<T>,
    pub ff1: LinearP<T>,
    pub ff2: LinearP<T>,
    pub ln3: LayerNormP<T>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub phone_embed: T,
    pub enc_prenet: LinearP<T>,
    pub enc_blocks: Vec<EncBlockP<T>>,
    pub speaker_embed: T,
    pub style_embed: T,
    /// Projects [d_model + d_embed] back to d_model after the broadcast
    /// concat of the speaker embedding.
    pub spk_proj: LinearP<T>,
    /// Projects the style embedding to d_model; applied with tanh.
    pub style_proj: LinearP<T>,
    pub bn_conv1: ConvP<T>,
    pub bn_conv2: ConvP<T>,
    pub bn_se: SeP<T>,
    pub bn_out: LinearP<T>,
    pub agg_conv1: ConvP<T>,
    pub agg_conv2: ConvP<T>,
    pub dec_prenet1: LinearP<T>,
    pub dec_prenet2: LinearP<T>,
    pub dec_blocks: Vec<DecBlockP<T>>,
    pub mel_head: LinearP<T>,
    pub postnet1: ConvP<T>,
    pub postnet2: ConvP<T>,
    pub stop_head: LinearP<T>,
}

// Visitors walk leaves in a fixed structural order; checkpointing, the
// optimizer, and tape registration all rely on that order being identical.
macro_rules! impl_pair_visit {
    ($ty:ident, $fa:ident, $fb:ident, $na:literal, $nb:literal) => {
        impl<T> $ty<T> {
            fn visit<'a, F: FnMut(String, ParamGroup, &'a T)>(
                &'a self,
                prefix: &str,
                g: ParamGroup,
                f: &mut F,
            ) {
                f(format!("{prefix}.{}", $na), g, &self.$fa);
                f(format!("{prefix}.{}", $nb), g, &self.$fb);
            }

            fn visit_mut<F: FnMut(&str, ParamGroup, &mut T)>(
                &mut self,
                prefix: &str,
                g: ParamGroup,
                f: &mut F,
            ) {
                f(&format!("{prefix}.{}", $na), g, &mut self.$fa);
                f(&format!("{prefix}.{}", $nb), g, &mut self.$fb);
            }

            fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> $ty<U> {
                $ty {
                    $fa: f(&self.$fa),
                    $fb: f(&self.$fb),
                }
            }
        }
    };
}

impl_pair_visit!(LinearP, w, b, "w", "b");
impl_pair_visit!(LayerNormP, gamma, beta, "gamma", "beta");
impl_pair_visit!(ConvP, w, b, "w", "b");

impl<T> AttnP<T> {
    fn visit<'a, F: FnMut(String, ParamGroup, &'a T)>(
        &'a self,
        prefix: &str,
        g: ParamGroup,
        f: &mut F,
    ) {
        self.q.visit(&format!("{prefix}.q"), g, f);
        self.k.visit(&format!("{prefix}.k"), g, f);
        self.v.visit(&format!("{prefix}.v"), g, f);
        self.o.visit(&format!("{prefix}.o"), g, f);
    }

    fn visit_mut<F: FnMut(&str, ParamGroup, &mut T)>(
        &mut self,
        prefix: &str,
        g: ParamGroup,
        f: &mut F,
    ) {
        self.q.visit_mut(&format!("{prefix}.q"), g, f);
        self.k.visit_mut(&format!("{prefix}.k"), g, f);
        self.v.visit_mut(&format!("{prefix}.v"), g, f);
        self.o.visit_mut(&format!("{prefix}.o"), g, f);
    }

    fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> AttnP<U> {
        AttnP {
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
        }
    }
}

impl<T> SeP<T> {
    fn visit<'a, F: FnMut(String, ParamGroup, &'a T)>(
        &'a self,
        prefix: &str,
        g: ParamGroup,
        f: &mut F,
    ) {
        self.fc1.visit(&format!("{prefix}.fc1"), g, f);
        self.fc2.visit(&format!("{prefix}.fc2"), g, f);
    }

    fn visit_mut<F: FnMut(&str, ParamGroup, &mut T)>(
        &mut self,
        prefix: &str,
        g: ParamGroup,
        f: &mut F,
    ) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), g, f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), g, f);
    }

    fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> SeP<U> {
        SeP {
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }
}

impl<T> EncBlockP<T> {
    fn visit<'a, F: FnMut(String, ParamGroup, &'a T)>(
        &'a self,
        prefix: &str,
        g: ParamGroup,
        f: &mut F,
    ) {
        self.attn.visit(&format!("{prefix}.attn"), g, f);
        self.ln1.visit(&format!("{prefix}.ln1"), g, f);
        self.ff1.visit(&format!("{prefix}.ff1"), g, f);
        self.ff2.visit(&format!("{prefix}.ff2"), g, f);
        self.ln2.visit(&format!("{prefix}.ln2"), g, f);
    }

    fn visit_mut<F: FnMut(&str, ParamGroup, &mut T)>(
        &mut self,
        prefix: &str,
        g: ParamGroup,
        f: &mut F,
    ) {
        self.attn.visit_mut(&format!("{prefix}.attn"), g, f);
        self.ln1.visit_mut(&format!("{prefix}.ln1"), g, f);
        self.ff1.visit_mut(&format!("{prefix}.ff1"), g, f);
        self.ff2.visit_mut(&format!("{prefix}.ff2"), g, f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), g, f);
    }

    fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> EncBlockP<U> {
        EncBlockP {
            attn: self.attn.map(f),
            ln1: self.ln1.map(f),
            ff1: self.ff1.map(f),
            ff2: self.ff2.map(f),
            ln2: self.ln2.map(f),
        }
    }
}

impl<T> DecBlockP<T> {
    fn visit<'a, F: FnMut(String, ParamGroup, &'a T)>(&'a self, prefix: &str, f: &mut F) {
        self.self_attn
            .visit(&format!("{prefix}.self_attn"), ParamGroup::Decoder, f);
        self.ln1.visit(&format!("{prefix}.ln1"), ParamGroup::Decoder, f);
        self.cross_attn
            .visit(&format!("{prefix}.cross_attn"), ParamGroup::DecoderCrossAttn, f);
        self.ln2.visit(&format!("{prefix}.ln2"), ParamGroup::Decoder, f);
        self.ff1.visit(&format!("{prefix}.ff1"), ParamGroup::Decoder, f);
        self.ff2.visit(&format!("{prefix}.ff2"), ParamGroup::Decoder, f);
        self.ln3.visit(&format!("{prefix}.ln3"), ParamGroup::Decoder, f);
    }

    fn visit_mut<F: FnMut(&str, ParamGroup, &mut T)>(&mut self, prefix: &str, f: &mut F) {
        self.self_attn
            .visit_mut(&format!("{prefix}.self_attn"), ParamGroup::Decoder, f);
        self.ln1.visit_mut(&format!("{prefix}.ln1"), ParamGroup::Decoder, f);
        self.cross_attn
            .visit_mut(&format!("{prefix}.cross_attn"), ParamGroup::DecoderCrossAttn, f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), ParamGroup::Decoder, f);
        self.ff1.visit_mut(&format!("{prefix}.ff1"), ParamGroup::Decoder, f);
        self.ff2.visit_mut(&format!("{prefix}.ff2"), ParamGroup::Decoder, f);
        self.ln3.visit_mut(&format!("{prefix}.ln3"), ParamGroup::Decoder, f);
    }

    fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> DecBlockP<U> {
        DecBlockP {
            self_attn: self.self_attn.map(f),
            ln1: self.ln1.map(f),
            cross_attn: self.cross_attn.map(f),
            ln2: self.ln2.map(f),
            ff1: self.ff1.map(f),
            ff2: self.ff2.map(f),
            ln3: self.ln3.map(f),
        }
    }
}

impl<T> ModelParams<T> {
    pub fn visit<'a, F: FnMut(String, ParamGroup, &'a T)>(&'a self, f: &mut F) {
        use ParamGroup::*;
        f("phone_embed".into(), Encoder, &self.phone_embed);
        self.enc_prenet.visit("enc_prenet", Encoder, f);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            b.visit(&format!("enc.block{i}"), Encoder, f);
        }
        f("speaker_embed".into(), SpeakerEmbed, &self.speaker_embed);
        f("style_embed".into(), StyleEmbed, &self.style_embed);
        self.spk_proj.visit("spk_proj", Projections, f);
        self.style_proj.visit("style_proj", Projections, f);
        self.bn_conv1.visit("bn.conv1", Bottleneck, f);
        self.bn_conv2.visit("bn.conv2", Bottleneck, f);
        self.bn_se.visit("bn.se", Bottleneck, f);
        self.bn_out.visit("bn.out", Bottleneck, f);
        self.agg_conv1.visit("agg.conv1", AggCnn, f);
        self.agg_conv2.visit("agg.conv2", AggCnn, f);
        self.dec_prenet1.visit("dec_prenet1", Decoder, f);
        self.dec_prenet2.visit("dec_prenet2", Decoder, f);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            b.visit(&format!("dec.block{i}"), f);
        }
        self.mel_head.visit("mel_head", Decoder, f);
        self.postnet1.visit("postnet1", Decoder, f);
        self.postnet2.visit("postnet2", Decoder, f);
        self.stop_head.visit("stop_head", Decoder, f);
    }

    pub fn visit_mut<F: FnMut(&str, ParamGroup, &mut T)>(&mut self, f: &mut F) {
        use ParamGroup::*;
        f("phone_embed", Encoder, &mut self.phone_embed);
        self.enc_prenet.visit_mut("enc_prenet", Encoder, f);
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("enc.block{i}"), Encoder, f);
        }
        f("speaker_embed", SpeakerEmbed, &mut self.speaker_embed);
        f("style_embed", StyleEmbed, &mut self.style_embed);
        self.spk_proj.visit_mut("spk_proj", Projections, f);
        self.style_proj.visit_mut("style_proj", Projections, f);
        self.bn_conv1.visit_mut("bn.conv1", Bottleneck, f);
        self.bn_conv2.visit_mut("bn.conv2", Bottleneck, f);
        self.bn_se.visit_mut("bn.se", Bottleneck, f);
        self.bn_out.visit_mut("bn.out", Bottleneck, f);
        self.agg_conv1.visit_mut("agg.conv1", AggCnn, f);
        self.agg_conv2.visit_mut("agg.conv2", AggCnn, f);
        self.dec_prenet1.visit_mut("dec_prenet1", Decoder, f);
        self.dec_prenet2.visit_mut("dec_prenet2", Decoder, f);
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("dec.block{i}"), f);
        }
        self.mel_head.visit_mut("mel_head", Decoder, f);
        self.postnet1.visit_mut("postnet1", Decoder, f);
        self.postnet2.visit_mut("postnet2", Decoder, f);
        self.stop_head.visit_mut("stop_head", Decoder, f);
    }

    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> ModelParams<U> {
        ModelParams {
            phone_embed: f(&self.phone_embed),
            enc_prenet: self.enc_prenet.map(f),
            enc_blocks: self.enc_blocks.iter().map(|b| b.map(f)).collect(),
            speaker_embed: f(&self.speaker_embed),
            style_embed: f(&self.style_embed),
            spk_proj: self.spk_proj.map(f),
            style_proj: self.style_proj.map(f),
            bn_conv1: self.bn_conv1.map(f),
            bn_conv2: self.bn_conv2.map(f),
            bn_se: self.bn_se.map(f),
            bn_out: self.bn_out.map(f),
            agg_conv1: self.agg_conv1.map(f),
            agg_conv2: self.agg_conv2.map(f),
            dec_prenet1: self.dec_prenet1.map(f),
            dec_prenet2: self.dec_prenet2.map(f),
            dec_blocks: self.dec_blocks.iter().map(|b| b.map(f)).collect(),
            mel_head: self.mel_head.map(f),
            postnet1: self.postnet1.map(f),
            postnet2: self.postnet2.map(f),
            stop_head: self.stop_head.map(f),
        }
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, _| n += 1);
        n
    }
}

impl<S: Scalar> ModelParams<Tensor<S>> {
    /// Deterministic initialization: Xavier-uniform weights, zero biases,
    /// unit layer-norm gains, uniform(±0.5) embedding tables.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let de = cfg.d_spk_sty_embed;
        let dff = cfg.d_ff();
        let cb = cfg.bottleneck_cnn_channels;
        let ca = cfg.agg_cnn_channels;
        let nm = cfg.n_mels;

        let xavier = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: &[usize]| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::<S>::rand_uniform(shape, a, rng)
        };
        let linear = |rng: &mut ChaCha8Rng, fi: usize, fo: usize| LinearP {
            w: xavier(rng, fi, fo, &[fi, fo]),
            b: Tensor::zeros(&[fo]),
        };
        let conv = |rng: &mut ChaCha8Rng, k: usize, ci: usize, co: usize| ConvP {
            w: xavier(rng, k * ci, k * co, &[k, ci, co]),
            b: Tensor::zeros(&[co]),
        };
        let ln = |dim: usize| LayerNormP {
            gamma: Tensor::full(&[dim], S::one()),
            beta: Tensor::zeros(&[dim]),
        };
        let attn = |rng: &mut ChaCha8Rng| AttnP {
            q: linear(rng, d, d),
            k: linear(rng, d, d),
            v: linear(rng, d, d),
            o: linear(rng, d, d),
        };

        ModelParams {
            phone_embed: Tensor::rand_uniform(&[cfg.n_phones, d], 0.5, &mut rng),
            enc_prenet: linear(&mut rng, d, d),
            enc_blocks: (0..cfg.n_enc_blocks)
                .map(|_| EncBlockP {
                    attn: attn(&mut rng),
                    ln1: ln(d),
                    ff1: linear(&mut rng, d, dff),
                    ff2: linear(&mut rng, dff, d),
                    ln2: ln(d),
                })
                .collect(),
            speaker_embed: Tensor::rand_uniform(&[cfg.n_speakers, de], 0.5, &mut rng),
            style_embed: Tensor::rand_uniform(&[cfg.n_styles, de], 0.5, &mut rng),
            spk_proj: linear(&mut rng, d + de, d),
            style_proj: linear(&mut rng, de, d),
            bn_conv1: conv(&mut rng, 3, d, cb),
            bn_conv2: conv(&mut rng, 3, cb, cb),
            bn_se: SeP {
                fc1: linear(&mut rng, cb, cb / cfg.se_reduction),
                fc2: linear(&mut rng, cb / cfg.se_reduction, cb),
            },
            bn_out: linear(&mut rng, cb, cfg.d_prosody),
            agg_conv1: conv(&mut rng, 3, cfg.d_prosody, ca),
            agg_conv2: conv(&mut rng, 3, ca, d),
            dec_prenet1: linear(&mut rng, nm, d),
            dec_prenet2: linear(&mut rng, d, d),
            dec_blocks: (0..cfg.n_dec_blocks)
                .map(|_| DecBlockP {
                    self_attn: attn(&mut rng),
                    ln1: ln(d),
                    cross_attn: attn(&mut rng),
                    ln2: ln(d),
                    ff1: linear(&mut rng, d, dff),
                    ff2: linear(&mut rng, dff, d),
                    ln3: ln(d),
                })
                .collect(),
            mel_head: linear(&mut rng, d, nm),
            postnet1: conv(&mut rng, 5, nm, nm),
            postnet2: conv(&mut rng, 5, nm, nm),
            stop_head: linear(&mut rng, d, 1),
        }
    }

    pub fn convert<T: Scalar>(&self) -> ModelParams<Tensor<T>> {
        self.map(&mut |t: &Tensor<S>| t.convert::<T>())
    }

    /// Leaves in visit order as (name, group, tensor) for checkpointing and
    /// gradient checking.
    pub fn named_leaves(&self) -> Vec<(String, ParamGroup, &Tensor<S>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, g, t| out.push((name, g, t)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visit_order_matches_map_and_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::<Tensor<f32>>::init(&cfg, 7);
        let names1: Vec<String> = p.named_leaves().into_iter().map(|(n, _, _)| n).collect();
        let names2: Vec<String> = p.named_leaves().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names1, names2);
        assert!(names1.len() > 40, "unexpectedly few leaves: {}", names1.len());

        // map() must traverse in exactly the same order as visit().
        let mut seen = Vec::new();
        let _mapped: ModelParams<usize> = p.map(&mut |t| {
            seen.push(t.len());
            t.len()
        });
        let lens: Vec<usize> = p.named_leaves().iter().map(|(_, _, t)| t.len()).collect();
        assert_eq!(seen, lens);

        // Unique names, each parameter in exactly one group.
        let mut sorted = names1.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names1.len());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = ModelParams::<Tensor<f32>>::init(&cfg, 42);
        let b = ModelParams::<Tensor<f32>>::init(&cfg, 42);
        for ((_, _, ta), (_, _, tb)) in a.named_leaves().iter().zip(b.named_leaves().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        let c = ModelParams::<Tensor<f32>>::init(&cfg, 43);
        let differs = a
            .named_leaves()
            .iter()
            .zip(c.named_leaves().iter())
            .any(|((_, _, ta), (_, _, tc))| ta.data() != tc.data());
        assert!(differs);
    }

    #[test]
    fn every_group_is_populated() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::<Tensor<f32>>::init(&cfg, 1);
        let mut counts = [0usize; 8];
        p.visit(&mut |_, g, _| counts[g.index()] += 1);
        for (g, &c) in ParamGroup::ALL.iter().zip(&counts) {
            assert!(c > 0, "group {} has no parameters", g.name());
        }
    }

    #[test]
    fn group_names_roundtrip() {
        for g in ParamGroup::ALL {
            assert_eq!(ParamGroup::parse(g.name()), Some(g));
        }
        assert_eq!(ParamGroup::parse("nope"), None);
    }
}
