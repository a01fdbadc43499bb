//! Image-text matching model: an image encoder `f`, a caption encoder `g`,
//! the symmetric contrastive loss and the score gradient `∇ₓ f(x)·g(y)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{CAPTION_SLOT, VOCAB_WORDS};
use crate::error::{Error, Result};
use crate::nn::{init_rng, Bound, Conv2d, GroupNorm, Linear, ParamBuilder, ParamId, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::{TokenBatch, TransformerConfig, TransformerEncoder};

pub const MATCHER_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageEncoderKind {
    Cnn,
    /// `f(x) = Wx + b` on the flattened image.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    pub resolution: usize,
    pub image_encoder: ImageEncoderKind,
    /// Channels per CNN stage; every stage after the first halves the resolution.
    pub widths: Vec<usize>,
    pub groups: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub learn_temperature: bool,
    pub normalize: bool,
    pub text: TransformerConfig,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            image_encoder: ImageEncoderKind::Cnn,
            widths: vec![16, 32, 64, 64],
            groups: 8,
            embed_dim: 64,
            temperature: 0.07,
            learn_temperature: true,
            normalize: true,
            text: TransformerConfig {
                vocab_size: VOCAB_WORDS.len(),
                max_tokens: CAPTION_SLOT,
                dim: 64,
                heads: 4,
                layers: 2,
                ff_mult: 2,
            },
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::param(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.embed_dim == 0 || self.resolution == 0 {
            return Err(Error::param("matcher needs positive resolution and embedding size"));
        }
        if self.image_encoder == ImageEncoderKind::Cnn {
            if self.widths.is_empty() || self.widths.contains(&0) {
                return Err(Error::param("matcher CNN needs at least one stage"));
            }
            if !self.resolution.is_multiple_of(1 << (self.widths.len() - 1)) {
                return Err(Error::param("matcher resolution not divisible by the CNN stride"));
            }
        }
        if self.text.heads == 0 || !self.text.dim.is_multiple_of(self.text.heads) {
            return Err(Error::param("caption encoder heads must divide its width"));
        }
        Ok(())
    }
}

struct Stage {
    conv: Conv2d,
    norm: GroupNorm,
}

enum ImageNet {
    Cnn { stages: Vec<Stage>, proj: Linear },
    Linear(Linear),
}

struct Net {
    image: ImageNet,
    text: TransformerEncoder,
    text_proj: Linear,
    log_temperature: ParamId,
}

pub struct Matcher<T: Scalar> {
    config: MatcherConfig,
    net: Net,
    params: Params<T>,
}

/// Symmetric cross-entropy over an `[N, N]` logit matrix whose diagonal
/// holds the matching pairs.
pub fn symmetric_contrastive<'t, T: Scalar>(logits: &Var<'t, T>) -> Var<'t, T> {
    let n = logits.shape()[0];
    let targets: Vec<usize> = (0..n).collect();
    let rows = logits.cross_entropy_rows(&targets);
    let cols = logits.permute(&[1, 0]).cross_entropy_rows(&targets);
    rows.add(&cols).scale(0.5)
}

impl<T: Scalar> Matcher<T> {
    pub fn new(config: MatcherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let mut rng = init_rng(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let image = b.scope("image", |b| match config.image_encoder {
            ImageEncoderKind::Cnn => {
                let mut prev = 3;
                let stages = config
                    .widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let stride = if i == 0 { 1 } else { 2 };
                        let st = b.scope(&format!("stage{i}"), |b| Stage {
                            conv: Conv2d::new(b, "conv", prev, w, 3, stride),
                            norm: GroupNorm::new(b, "norm", w, config.groups),
                        });
                        prev = w;
                        st
                    })
                    .collect();
                let proj = Linear::new(b, "proj", prev, config.embed_dim, true);
                ImageNet::Cnn { stages, proj }
            }
            ImageEncoderKind::Linear => {
                let d = 3 * config.resolution * config.resolution;
                ImageNet::Linear(Linear::new(b, "linear", d, config.embed_dim, true))
            }
        });
        let text = b.scope("text", |b| TransformerEncoder::new(b, &config.text));
        let text_proj = Linear::new(&mut b, "text_proj", config.text.dim, config.embed_dim, true);
        let log_temperature = b.constant("log_temperature", &[1], config.temperature.ln());
        Ok(Self {
            config,
            net: Net {
                image,
                text,
                text_proj,
                log_temperature,
            },
            params,
        })
    }

    pub fn from_params(config: MatcherConfig, params: Params<T>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &MatcherConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Matcher<U> {
        Matcher::from_params(self.config.clone(), self.params.cast()).expect("same config")
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(self.net.log_temperature).data()[0].to_f64_lossy().exp()
    }

    /// Id of the log-temperature parameter, so trainers can freeze or clamp it.
    pub fn log_temperature_id(&self) -> ParamId {
        self.net.log_temperature
    }

    /// Penultimate image features: pooled CNN activations, or the flattened
    /// pixels for the linear encoder.
    pub fn image_features_on<'t>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Var<'t, T> {
        match &self.net.image {
            ImageNet::Cnn { stages, .. } => {
                let mut h = *x;
                for st in stages {
                    h = st.norm.forward(p, &st.conv.forward(p, &h)).silu();
                }
                h.mean_spatial()
            }
            ImageNet::Linear(_) => {
                let n = x.shape()[0];
                x.reshape(&[n, x.value().len() / n])
            }
        }
    }

    fn finish<'t>(&self, e: Var<'t, T>) -> Var<'t, T> {
        if self.config.normalize {
            e.l2_normalize_rows()
        } else {
            e
        }
    }

    /// `f(x)` for a `[N, 3, R, R]` batch on the tape, `[N, E]`.
    pub fn embed_images_on<'t>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Var<'t, T> {
        let feats = self.image_features_on(p, x);
        let e = match &self.net.image {
            ImageNet::Cnn { proj, .. } => proj.forward(p, &feats),
            ImageNet::Linear(lin) => lin.forward(p, &feats),
        };
        self.finish(e)
    }

    /// `g(y)` for a token batch on the tape, `[N, E]`.
    pub fn embed_captions_on<'t>(&self, p: &Bound<'t, T>, tokens: &TokenBatch) -> Var<'t, T> {
        let (_, pooled) = self.net.text.forward(p, tokens);
        self.finish(self.net.text_proj.forward(p, &pooled))
    }

    /// `f(x_i)·g_i` per row against fixed caption embeddings `[N, E]`.
    pub fn score_on<'t>(&self, p: &Bound<'t, T>, x: &Var<'t, T>, captions: &Tensor<T>) -> Var<'t, T> {
        let g = x.tape().constant(captions.clone());
        self.embed_images_on(p, x).rows_dot(&g)
    }

    /// Contrastive loss of aligned image and caption batches on the tape.
    pub fn contrastive_loss_on<'t>(&self, p: &Bound<'t, T>, x: &Var<'t, T>, tokens: &TokenBatch) -> Var<'t, T> {
        let f = self.embed_images_on(p, x);
        let g = self.embed_captions_on(p, tokens);
        let log_t = p.var(self.net.log_temperature);
        let log_t = if self.config.learn_temperature {
            log_t
        } else {
            x.tape().constant((*log_t.value()).clone())
        };
        let scale = log_t.scale(-1.0).exp();
        let logits = f.matmul_nt(&g).mul_scalar_var(&scale);
        symmetric_contrastive(&logits)
    }

    pub fn tokens(&self, seqs: &[&[u16]]) -> Result<TokenBatch> {
        TokenBatch::new(seqs, &self.config.text)
    }

    fn check_images(&self, x: &Tensor<T>) -> Result<usize> {
        let r = self.config.resolution;
        let s = x.shape();
        if s.len() != 4 || s[1..] != [3, r, r] || s[0] == 0 {
            return Err(Error::Shape {
                expected: vec![s.first().copied().unwrap_or(1).max(1), 3, r, r],
                actual: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    fn eval<R>(&self, f: impl for<'t> FnOnce(&'t Tape<T>, &Bound<'t, T>) -> R) -> R {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        f(&tape, &p)
    }

    pub fn embed_image(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(x)?;
        Ok(self.eval(|tape, p| (*self.embed_images_on(p, &tape.constant(x.clone())).value()).clone()))
    }

    pub fn image_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(x)?;
        Ok(self.eval(|tape, p| (*self.image_features_on(p, &tape.constant(x.clone())).value()).clone()))
    }

    pub fn embed_captions(&self, captions: &[&[u16]]) -> Result<Tensor<T>> {
        let tokens = self.tokens(captions)?;
        Ok(self.eval(|_, p| (*self.embed_captions_on(p, &tokens).value()).clone()))
    }

    /// `g(y)`, `[E]`.
    pub fn embed_caption(&self, caption: &[u16]) -> Result<Tensor<T>> {
        self.embed_captions(&[caption])?.reshape(&[self.config.embed_dim])
    }

    /// `f(x)·g(y)` for a single image `[1, 3, R, R]`.
    pub fn match_score(&self, x: &Tensor<T>, caption: &[u16]) -> Result<T> {
        if self.check_images(x)? != 1 {
            return Err(Error::param("match_score takes a single image"));
        }
        let g = self.embed_caption(caption)?;
        Ok(self.embed_image(x)?.dot(&g))
    }

    /// Row-wise scores of images `[N, 3, R, R]` against caption embeddings `[N, E]`.
    pub fn match_scores(&self, x: &Tensor<T>, captions: &Tensor<T>) -> Result<Vec<T>> {
        let n = self.check_images(x)?;
        captions.ensure_shape(&[n, self.config.embed_dim])?;
        Ok(self.eval(|tape, p| self.score_on(p, &tape.constant(x.clone()), captions).value().data().to_vec()))
    }

    pub fn contrastive_loss(&self, images: &Tensor<T>, captions: &[&[u16]]) -> Result<T> {
        let n = self.check_images(images)?;
        if captions.len() != n {
            return Err(Error::param(format!("{n} images but {} captions", captions.len())));
        }
        let tokens = self.tokens(captions)?;
        Ok(self.eval(|tape, p| self.contrastive_loss_on(p, &tape.constant(images.clone()), &tokens).item()))
    }

    /// `∇ₓ f(x)·g(y)` for a single image.
    pub fn score_gradient(&self, x: &Tensor<T>, caption: &[u16]) -> Result<Tensor<T>> {
        if self.check_images(x)? != 1 {
            return Err(Error::param("score_gradient takes a single image"));
        }
        let g = self.embed_captions(&[caption])?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.leaf(x.clone());
        let score = self.score_on(&p, &xv, &g).sum_all();
        Ok(tape.gradients(score).wrt(xv))
    }
}

/// Matchers whose score gradients are averaged during guidance.
pub struct MatcherEnsemble<T: Scalar> {
    members: Vec<(String, Matcher<T>)>,
}

impl<T: Scalar> MatcherEnsemble<T> {
    pub fn new(members: Vec<(String, Matcher<T>)>) -> Result<Self> {
        let Some((_, first)) = members.first() else {
            return Err(Error::param("matcher ensemble must not be empty"));
        };
        let r = first.config.resolution;
        if let Some((id, _)) = members.iter().find(|(_, m)| m.config.resolution != r) {
            return Err(Error::param(format!("ensemble member {id} has a different resolution")));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[(String, Matcher<T>)] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.members[0].1.config.resolution
    }

    /// A new ensemble of the named members, in the given order.
    pub fn subset(&self, names: &[&str]) -> Result<Self> {
        let members = names
            .iter()
            .map(|&n| {
                let (id, m) = self
                    .members
                    .iter()
                    .find(|(id, _)| id == n)
                    .ok_or_else(|| Error::param(format!("no ensemble member named {n:?}")))?;
                Ok((id.clone(), Matcher::from_params(m.config.clone(), m.params.clone())?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }
}

#[cfg(test)]
pub(crate) mod tests;
