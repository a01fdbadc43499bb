//! Text-conditional noise predictor: a transformer text encoder, a learned
//! null condition and a U-Net with cross-attention over the text tokens.

mod unet;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{CAPTION_SLOT, VOCAB_WORDS};
use crate::error::{Error, Result};
use crate::nn::{init_rng, Bound, ParamBuilder, ParamId, Params};
use crate::scalar::{lit, Scalar};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::transformer::{TokenBatch, TransformerConfig, TransformerEncoder};

use unet::UNet;

pub const DENOISER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub resolution: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    /// Number of lowest-resolution levels that carry cross-attention.
    pub attention_levels: usize,
    pub groups: usize,
    pub attn_heads: usize,
    pub num_timesteps: usize,
    /// Data standard deviation for the noise-level scaling applied once a
    /// schedule is attached; 0 disables the scaling.
    pub data_std: f64,
    pub text: TransformerConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            base_width: 64,
            channel_mults: vec![1, 2, 2],
            attention_levels: 2,
            groups: 8,
            attn_heads: 4,
            num_timesteps: 1000,
            data_std: 0.5,
            text: TransformerConfig {
                vocab_size: VOCAB_WORDS.len(),
                max_tokens: CAPTION_SLOT,
                dim: 128,
                heads: 4,
                layers: 2,
                ff_mult: 4,
            },
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mults.len();
        if levels == 0 || self.base_width == 0 || self.channel_mults.contains(&0) {
            return Err(Error::param("denoiser needs a positive width and at least one level"));
        }
        if !self.resolution.is_multiple_of(1 << (levels - 1)) {
            return Err(Error::param(format!(
                "resolution {} not divisible by 2^{}",
                self.resolution,
                levels - 1
            )));
        }
        if !self.base_width.is_multiple_of(2) {
            return Err(Error::param("base width must be even for timestep features"));
        }
        if self.attn_heads == 0 || self.text.heads == 0 || !self.text.dim.is_multiple_of(self.text.heads) {
            return Err(Error::param("attention heads must divide the width"));
        }
        if !(self.data_std >= 0.0 && self.data_std.is_finite()) {
            return Err(Error::param(format!("data_std must be >= 0, got {}", self.data_std)));
        }
        if self.num_timesteps == 0 || self.text.vocab_size == 0 || self.text.max_tokens == 0 {
            return Err(Error::param("empty timestep range or vocabulary"));
        }
        Ok(())
    }
}

/// Text conditioning: per-token embeddings and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T> {
    /// `[num_tokens, dim]`
    pub sequence: Tensor<T>,
    /// `[dim]`
    pub pooled: Tensor<T>,
    pub is_null: bool,
}

/// Conditioning for a batch, as tape variables.
pub struct CondVars<'t, T: Scalar> {
    /// `[B, L, D]`
    pub sequence: Var<'t, T>,
    /// `[B, L]`, false at padding.
    pub valid: Vec<bool>,
    /// `[B, D]`
    pub pooled: Var<'t, T>,
}

impl<'t, T: Scalar> CondVars<'t, T> {
    /// Constant conditioning from precomputed embeddings, padded to the longest.
    pub fn from_embeddings(tape: &'t Tape<T>, conds: &[&TextEmbedding<T>]) -> Self {
        let d = conds[0].pooled.len();
        let len = conds.iter().map(|c| c.sequence.shape()[0]).max().unwrap_or(1);
        let mut seq = Vec::with_capacity(conds.len() * len * d);
        let mut valid = Vec::with_capacity(conds.len() * len);
        let mut pooled = Vec::with_capacity(conds.len() * d);
        for c in conds {
            let n = c.sequence.shape()[0];
            seq.extend_from_slice(c.sequence.data());
            seq.resize(seq.len() + (len - n) * d, T::zero());
            valid.extend((0..len).map(|i| i < n));
            pooled.extend_from_slice(c.pooled.data());
        }
        let b = conds.len();
        Self {
            sequence: tape.constant(Tensor::from_vec(&[b, len, d], seq).unwrap()),
            valid,
            pooled: tape.constant(Tensor::from_vec(&[b, d], pooled).unwrap()),
        }
    }
}

struct Net {
    text: TransformerEncoder,
    null: ParamId,
    unet: UNet,
}

pub struct Denoiser<T: Scalar> {
    config: DenoiserConfig,
    net: Net,
    params: Params<T>,
    alpha_bars: Option<Vec<f64>>,
}

impl<T: Scalar> Denoiser<T> {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let mut rng = init_rng(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let text = b.scope("text", |b| TransformerEncoder::new(b, &config.text));
        let null = b.normal("null_embedding", &[config.text.dim], 1.0);
        let unet = b.scope("unet", |b| UNet::new(b, &config));
        Ok(Self {
            config,
            net: Net { text, null, unet },
            params,
            alpha_bars: None,
        })
    }

    /// Rebuilds the network for `config` and installs `params`, which must
    /// match its shape manifest.
    pub fn from_params(config: DenoiserConfig, params: Params<T>) -> Result<Self> {
        let mut d = Self::new(config, 0)?;
        d.params.load_from(params)?;
        Ok(d)
    }

    /// Attaches the noise schedule. With `data_std > 0` the U-Net `F` then
    /// sees `c_in·x_t` and the prediction becomes `c_skip·x_t + c_out·F`,
    /// which keeps input and target at unit variance for every noise level.
    pub fn with_schedule(mut self, sched: &NoiseSchedule) -> Result<Self> {
        if sched.num_steps() != self.config.num_timesteps {
            return Err(Error::Compatibility(format!(
                "schedule has {} steps but the denoiser was built for {}",
                sched.num_steps(),
                self.config.num_timesteps
            )));
        }
        self.alpha_bars = Some(sched.alpha_bars().to_vec());
        Ok(self)
    }

    /// The attached schedule's `ᾱ_1..ᾱ_T`.
    pub fn alpha_bars(&self) -> Option<&[f64]> {
        self.alpha_bars.as_deref()
    }

    /// `(c_in, c_skip, c_out)` at timestep `t`, or `None` when no scaling is
    /// applied.
    pub fn preconditioning(&self, t: usize) -> Option<(f64, f64, f64)> {
        let s = self.config.data_std;
        if s == 0.0 {
            return None;
        }
        let ab = *self.alpha_bars.as_ref()?.get(t.checked_sub(1)?)?;
        let v = ab * s * s + 1.0 - ab;
        Some((1.0 / v.sqrt(), (1.0 - ab).sqrt() / v, ab.sqrt() * s / v.sqrt()))
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        let mut d = Denoiser::from_params(self.config.clone(), self.params.cast()).expect("same config");
        d.alpha_bars = self.alpha_bars.clone();
        d
    }

    pub fn tokens(&self, seqs: &[&[u16]]) -> Result<TokenBatch> {
        TokenBatch::new(seqs, &self.config.text)
    }

    /// Encodes a token batch on the tape; samples flagged in `drop` get the
    /// null condition instead.
    pub fn encode_on<'t>(&self, p: &Bound<'t, T>, tokens: &TokenBatch, drop: &[bool]) -> CondVars<'t, T> {
        let (seq, pooled) = self.net.text.forward(p, tokens);
        let mut valid = tokens.valid.clone();
        if !drop.iter().any(|&d| d) {
            return CondVars { sequence: seq, valid, pooled };
        }
        let (b, l, d) = (tokens.batch, tokens.len, self.config.text.dim);
        let null = p.var(self.net.null);
        let dropped: Vec<usize> = (0..b).filter(|&i| drop[i]).collect();
        let mut zero = Vec::new();
        for &i in &dropped {
            for j in 1..l {
                zero.push(i * l + j);
                valid[i * l + j] = false;
            }
            valid[i * l] = true;
        }
        let firsts: Vec<usize> = dropped.iter().map(|i| i * l).collect();
        let sequence = seq
            .reshape(&[b * l, d])
            .override_rows(&null, &firsts, &zero)
            .reshape(&[b, l, d]);
        let pooled = pooled.override_rows(&null, &dropped, &[]);
        CondVars { sequence, valid, pooled }
    }

    /// Noise prediction on the tape for `x` (`[B, 3, R, R]`) at timesteps `t`.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: &Var<'t, T>, t: &[usize], c: &CondVars<'t, T>) -> Var<'t, T> {
        let coef: Option<Vec<(f64, f64, f64)>> = t.iter().map(|&t| self.preconditioning(t)).collect();
        let Some(coef) = coef else {
            return self.net.unet.forward(p, x, t, c);
        };
        let pick = |f: fn(&(f64, f64, f64)) -> f64| -> Vec<T> { coef.iter().map(|c| lit(f(c))).collect() };
        let h = self.net.unet.forward(p, &x.scale_items(&pick(|c| c.0)), t, c);
        x.scale_items(&pick(|c| c.1)).add(&h.scale_items(&pick(|c| c.2)))
    }

    pub fn encode_text(&self, tokens: &[u16]) -> Result<TextEmbedding<T>> {
        let batch = self.tokens(&[tokens])?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let (seq, pooled) = self.net.text.forward(&p, &batch);
        let d = self.config.text.dim;
        Ok(TextEmbedding {
            sequence: (*seq.value()).clone().reshape(&[batch.len, d])?,
            pooled: (*pooled.value()).clone().reshape(&[d])?,
            is_null: false,
        })
    }

    pub fn null_condition(&self) -> TextEmbedding<T> {
        let null = self.params.get(self.net.null);
        TextEmbedding {
            sequence: null.clone().reshape(&[1, null.len()]).unwrap(),
            pooled: null.clone(),
            is_null: true,
        }
    }

    fn check_input(&self, x: &Tensor<T>, t: &[usize]) -> Result<usize> {
        let r = self.config.resolution;
        let s = x.shape();
        if s.len() != 4 || s[1..] != [3, r, r] || s[0] == 0 {
            return Err(Error::Shape {
                expected: vec![s.first().copied().unwrap_or(1).max(1), 3, r, r],
                actual: s.to_vec(),
            });
        }
        if t.len() != s[0] {
            return Err(Error::param(format!("{} timesteps for a batch of {}", t.len(), s[0])));
        }
        if let Some(&bad) = t.iter().find(|&&t| t == 0 || t > self.config.num_timesteps) {
            return Err(Error::param(format!(
                "timestep {bad} outside 1..={}",
                self.config.num_timesteps
            )));
        }
        Ok(s[0])
    }

    /// ε prediction for a `[N, 3, R, R]` batch sharing timestep and condition.
    pub fn predict_eps(&self, x_t: &Tensor<T>, t: usize, cond: &TextEmbedding<T>) -> Result<Tensor<T>> {
        let n = x_t.shape().first().copied().unwrap_or(0);
        let conds = vec![cond; n.max(1)];
        self.predict_eps_batch(x_t, &vec![t; n], &conds)
    }

    /// ε prediction with a timestep and condition per sample.
    pub fn predict_eps_batch(&self, x_t: &Tensor<T>, t: &[usize], conds: &[&TextEmbedding<T>]) -> Result<Tensor<T>> {
        let n = self.check_input(x_t, t)?;
        if conds.len() != n {
            return Err(Error::param(format!("{} conditions for a batch of {n}", conds.len())));
        }
        let d = self.config.text.dim;
        if let Some(c) = conds.iter().find(|c| c.pooled.shape() != [d] || c.sequence.shape().get(1) != Some(&d)) {
            return Err(Error::Shape {
                expected: vec![d],
                actual: c.pooled.shape().to_vec(),
            });
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(x_t.clone());
        let c = CondVars::from_embeddings(&tape, conds);
        let out = self.forward(&p, &x, t, &c).value();
        Ok((*out).clone())
    }
}
