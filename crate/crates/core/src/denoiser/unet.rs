use crate::autograd::Var;
use crate::nn::{attention, timestep_features, Bound, Conv2d, GroupNorm, Linear, ParamBuilder};
use crate::scalar::Scalar;

use super::{CondVars, DenoiserConfig};

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, emb: usize, groups: usize) -> Self {
        b.scope(name, |b| ResBlock {
            norm1: GroupNorm::new(b, "norm1", cin, groups),
            conv1: Conv2d::new(b, "conv1", cin, cout, 3, 1),
            temb: Linear::new(b, "temb", emb, cout, true),
            norm2: GroupNorm::new(b, "norm2", cout, groups),
            conv2: Conv2d::new(b, "conv2", cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(b, "skip", cin, cout, 1, 1)),
        })
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>, emb: &Var<'t, T>) -> Var<'t, T> {
        let h = self.conv1.forward(p, &self.norm1.forward(p, x).silu());
        let h = h.add_channels(&self.temb.forward(p, emb));
        let h = self.conv2.forward(p, &self.norm2.forward(p, &h).silu());
        match &self.skip {
            Some(s) => s.forward(p, x).add(&h),
            None => x.add(&h),
        }
    }
}

/// Image features attend over the text token sequence.
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, ch: usize, text_dim: usize, cfg: &DenoiserConfig) -> Self {
        let heads = if ch.is_multiple_of(cfg.attn_heads) { cfg.attn_heads } else { 1 };
        b.scope(name, |b| CrossAttention {
            norm: GroupNorm::new(b, "norm", ch, cfg.groups),
            q: Linear::new(b, "q", ch, ch, false),
            k: Linear::new(b, "k", text_dim, ch, false),
            v: Linear::new(b, "v", text_dim, ch, false),
            out: Linear::new(b, "out", ch, ch, true),
            heads,
        })
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>, c: &CondVars<'t, T>) -> Var<'t, T> {
        let s = x.shape();
        let (b, ch, hw) = (s[0], s[1], s[2] * s[3]);
        let h = self
            .norm
            .forward(p, x)
            .reshape(&[b, ch, hw])
            .permute(&[0, 2, 1]);
        let q = self.q.forward(p, &h);
        let k = self.k.forward(p, &c.sequence);
        let v = self.v.forward(p, &c.sequence);
        let a = attention(&q, &k, &v, self.heads, Some(&c.valid));
        let o = self.out.forward(p, &a).permute(&[0, 2, 1]).reshape(&s);
        x.add(&o)
    }
}

struct Level {
    res: ResBlock,
    attn: Option<CrossAttention>,
}

impl Level {
    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>, emb: &Var<'t, T>, c: &CondVars<'t, T>) -> Var<'t, T> {
        let h = self.res.forward(p, x, emb);
        match &self.attn {
            Some(a) => a.forward(p, &h, c),
            None => h,
        }
    }
}

pub(super) struct UNet {
    base: usize,
    time1: Linear,
    time2: Linear,
    text_proj: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    mid: Level,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub(super) fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &DenoiserConfig) -> Self {
        let chans: Vec<usize> = cfg.channel_mults.iter().map(|m| m * cfg.base_width).collect();
        let levels = chans.len();
        let emb = 4 * cfg.base_width;
        let text_dim = cfg.text.dim;
        let attn_from = levels.saturating_sub(cfg.attention_levels);
        let g = cfg.groups;
        let time1 = Linear::new(b, "time1", cfg.base_width, emb, true);
        let time2 = Linear::new(b, "time2", emb, emb, true);
        let text_proj = Linear::new(b, "text_proj", text_dim, emb, true);
        let conv_in = Conv2d::new(b, "conv_in", 3, chans[0], 3, 1);
        let mut prev = chans[0];
        let mut down = Vec::with_capacity(levels);
        for (i, &ch) in chans.iter().enumerate() {
            down.push(b.scope(&format!("down{i}"), |b| Level {
                res: ResBlock::new(b, "res", prev, ch, emb, g),
                attn: (i >= attn_from).then(|| CrossAttention::new(b, "attn", ch, text_dim, cfg)),
            }));
            prev = ch;
        }
        let mid = b.scope("mid", |b| Level {
            res: ResBlock::new(b, "res", prev, prev, emb, g),
            attn: (cfg.attention_levels > 0).then(|| CrossAttention::new(b, "attn", prev, text_dim, cfg)),
        });
        let mut up = Vec::with_capacity(levels);
        for (i, &ch) in chans.iter().enumerate().rev() {
            up.push(b.scope(&format!("up{i}"), |b| Level {
                res: ResBlock::new(b, "res", prev + ch, ch, emb, g),
                attn: (i >= attn_from).then(|| CrossAttention::new(b, "attn", ch, text_dim, cfg)),
            }));
            prev = ch;
        }
        UNet {
            base: cfg.base_width,
            time1,
            time2,
            text_proj,
            conv_in,
            down,
            mid,
            up,
            norm_out: GroupNorm::new(b, "norm_out", prev, g),
            conv_out: Conv2d::new(b, "conv_out", prev, 3, 3, 1),
        }
    }

    pub(super) fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        x: &Var<'t, T>,
        t: &[usize],
        c: &CondVars<'t, T>,
    ) -> Var<'t, T> {
        let tape = x.tape();
        let feats = tape.constant(timestep_features(t, self.base));
        let temb = self.time2.forward(p, &self.time1.forward(p, &feats).silu());
        let emb = temb.add(&self.text_proj.forward(p, &c.pooled)).silu();

        let mut h = self.conv_in.forward(p, x);
        let mut skips = Vec::with_capacity(self.down.len());
        let last = self.down.len() - 1;
        for (i, level) in self.down.iter().enumerate() {
            h = level.forward(p, &h, &emb, c);
            skips.push(h);
            if i < last {
                h = h.avg_pool2();
            }
        }
        h = self.mid.forward(p, &h, &emb, c);
        for (j, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = level.forward(p, &h.concat_channels(&skip), &emb, c);
            if j < last {
                h = h.upsample2();
            }
        }
        self.conv_out.forward(p, &self.norm_out.forward(p, &h).silu())
    }
}
