//! Gradient-check cases for every tape op and layer.

use rand::Rng;

use crate::error::Result;
use crate::layers::*;
use crate::tensor::{Tape, Tensor, Var};

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Named inputs and a loss builder over them.
pub type Case = (&'static str, Vec<Tensor>, Build);

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Hands out recorded leaves in order and groups them into layer params.
pub struct Cursor<'a> {
    vars: &'a [Var],
    i: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Cursor { vars, i: 0 }
    }
    pub fn take(&mut self) -> Var {
        self.i += 1;
        self.vars[self.i - 1]
    }
    pub fn linear(&mut self) -> Linear {
        Linear {
            weight: self.take(),
            bias: self.take(),
        }
    }
    pub fn norm(&mut self) -> Norm {
        Norm {
            gain: self.take(),
            bias: self.take(),
        }
    }
    pub fn attention(&mut self) -> Attention {
        Attention {
            q: self.linear(),
            k: self.linear(),
            v: self.linear(),
            out: self.linear(),
        }
    }
    pub fn ffn(&mut self) -> FeedForward {
        FeedForward {
            fc1: self.linear(),
            fc2: self.linear(),
        }
    }
    pub fn block(&mut self) -> TransformerBlock {
        TransformerBlock {
            self_attn: self.attention(),
            norm1: self.norm(),
            ffn: self.ffn(),
            norm2: self.norm(),
        }
    }
    pub fn dec_block(&mut self) -> DecoderBlock {
        DecoderBlock {
            self_attn: self.attention(),
            norm1: self.norm(),
            enc_attn: self.attention(),
            norm2: self.norm(),
            ffn: self.ffn(),
            norm3: self.norm(),
        }
    }
    pub fn conv_layer(&mut self) -> ConvLayer {
        ConvLayer {
            weight: self.take(),
            bias: self.take(),
            norm: self.norm(),
        }
    }
}

pub fn linear_shapes(din: usize, dout: usize) -> Vec<Vec<usize>> {
    vec![vec![din, dout], vec![dout]]
}
pub fn norm_shapes(d: usize) -> Vec<Vec<usize>> {
    vec![vec![d], vec![d]]
}
pub fn attention_shapes(cfg: &AttentionConfig) -> Vec<Vec<usize>> {
    let mut s = linear_shapes(cfg.d_input, cfg.heads * cfg.d_k);
    s.extend(linear_shapes(cfg.d_input, cfg.heads * cfg.d_k));
    s.extend(linear_shapes(cfg.d_input, cfg.heads * cfg.d_v));
    s.extend(linear_shapes(cfg.heads * cfg.d_v, cfg.d_out));
    s
}
pub fn ffn_shapes(d: usize, width: usize) -> Vec<Vec<usize>> {
    let mut s = linear_shapes(d, width);
    s.extend(linear_shapes(width, d));
    s
}
pub fn block_shapes(cfg: &AttentionConfig, width: usize) -> Vec<Vec<usize>> {
    let mut s = attention_shapes(cfg);
    s.extend(norm_shapes(cfg.d_out));
    s.extend(ffn_shapes(cfg.d_out, width));
    s.extend(norm_shapes(cfg.d_out));
    s
}
pub fn dec_block_shapes(cfg: &AttentionConfig, width: usize) -> Vec<Vec<usize>> {
    let mut s = attention_shapes(cfg);
    s.extend(norm_shapes(cfg.d_out));
    s.extend(attention_shapes(cfg));
    s.extend(norm_shapes(cfg.d_out));
    s.extend(ffn_shapes(cfg.d_out, width));
    s.extend(norm_shapes(cfg.d_out));
    s
}
pub fn conv2d_layer_shapes(cin: usize, cout: usize, k: usize) -> Vec<Vec<usize>> {
    let mut s = vec![vec![cout, cin, k, k], vec![cout]];
    s.extend(norm_shapes(cout));
    s
}
pub fn conv1d_layer_shapes(din: usize, dout: usize, k: usize) -> Vec<Vec<usize>> {
    let mut s = vec![vec![dout, din, k], vec![dout]];
    s.extend(norm_shapes(dout));
    s
}

pub fn rand_all(shapes: &[Vec<usize>], rng: &mut impl Rng) -> Vec<Tensor> {
    shapes.iter().map(|s| rand_tensor(s, rng)).collect()
}

/// One case per differentiable tape op.
pub fn primitive_cases(rng: &mut impl Rng) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let w = super::projection(&[2, 3, 4], rng);
    let w2 = w.clone();
    cases.push((
        "matmul",
        vec![rand_tensor(&[2, 3, 5], rng), rand_tensor(&[2, 5, 4], rng)],
        Box::new(move |t, v| {
            let m = t.matmul(v[0], v[1])?;
            super::project(t, m, &w2)
        }),
    ));
    let w2 = w.clone();
    cases.push((
        "matmul_shared",
        vec![rand_tensor(&[2, 3, 5], rng), rand_tensor(&[5, 4], rng)],
        Box::new(move |t, v| {
            let m = t.matmul(v[0], v[1])?;
            super::project(t, m, &w2)
        }),
    ));
    let w2 = w.clone();
    cases.push((
        "add_mul_trailing",
        vec![
            rand_tensor(&[2, 3, 4], rng),
            rand_tensor(&[4], rng),
            rand_tensor(&[3, 4], rng),
            rand_tensor(&[2, 3, 4], rng),
        ],
        Box::new(move |t, v| {
            let a = t.add_trailing(v[0], v[1])?;
            let b = t.mul_trailing(a, v[2])?;
            let c = t.mul(b, v[3])?;
            let d = t.add(c, v[0])?;
            let e = t.scale(d, 0.7);
            super::project(t, e, &w2)
        }),
    ));
    let w2 = super::projection(&[4, 2, 3], rng);
    cases.push((
        "permute_reshape",
        vec![rand_tensor(&[2, 3, 4], rng)],
        Box::new(move |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let r = t.reshape(p, &[4, 6])?;
            let r = t.reshape(r, &[4, 2, 3])?;
            super::project(t, r, &w2)
        }),
    ));
    let w2 = super::projection(&[3, 7], rng);
    cases.push((
        "concat_slice",
        vec![rand_tensor(&[3, 4], rng), rand_tensor(&[3, 5], rng)],
        Box::new(move |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let s = t.slice(c, 1, 1, 7)?;
            super::project(t, s, &w2)
        }),
    ));
    let w2 = super::projection(&[3, 5], rng);
    cases.push((
        "relu",
        vec![rand_tensor(&[3, 5], rng)],
        Box::new(move |t, v| {
            let r = t.relu(v[0]);
            super::project(t, r, &w2)
        }),
    ));
    let w2 = super::projection(&[3, 5], rng);
    let mask = Tensor::from_fn([3, 5], |i| {
        if i % 5 > i / 5 + 2 {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    });
    cases.push((
        "softmax_masked",
        vec![rand_tensor(&[3, 5], rng)],
        Box::new(move |t, v| {
            let m = t.constant(mask.clone());
            let x = t.add(v[0], m)?;
            let s = t.softmax(x, 1)?;
            super::project(t, s, &w2)
        }),
    ));
    let w2 = super::projection(&[3, 5], rng);
    cases.push((
        "log_softmax",
        vec![rand_tensor(&[3, 5], rng)],
        Box::new(move |t, v| {
            let s = t.log_softmax(v[0], 0)?;
            super::project(t, s, &w2)
        }),
    ));
    let w2 = super::projection(&[3, 6], rng);
    cases.push((
        "layer_norm",
        vec![
            rand_tensor(&[3, 6], rng),
            rand_tensor(&[6], rng),
            rand_tensor(&[6], rng),
        ],
        Box::new(move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            super::project(t, y, &w2)
        }),
    ));
    let w2 = super::projection(&[3, 5, 4], rng);
    cases.push((
        "conv2d",
        vec![
            rand_tensor(&[2, 5, 4], rng),
            rand_tensor(&[3, 2, 3, 3], rng),
            rand_tensor(&[3], rng),
        ],
        Box::new(move |t, v| {
            let y = t.conv2d_same(v[0], v[1], v[2])?;
            super::project(t, y, &w2)
        }),
    ));
    let w2 = super::projection(&[6, 3], rng);
    cases.push((
        "causal_conv1d",
        vec![
            rand_tensor(&[6, 2], rng),
            rand_tensor(&[3, 2, 3], rng),
            rand_tensor(&[3], rng),
        ],
        Box::new(move |t, v| {
            let y = t.causal_conv1d(v[0], v[1], v[2])?;
            super::project(t, y, &w2)
        }),
    ));
    let w2 = super::projection(&[2, 3, 2], rng);
    cases.push((
        "max_pool2d",
        vec![rand_tensor(&[2, 5, 4], rng)],
        Box::new(move |t, v| {
            let y = t.max_pool2d(v[0], 2)?;
            super::project(t, y, &w2)
        }),
    ));
    let w2 = super::projection(&[4, 3], rng);
    cases.push((
        "gather_pick",
        vec![rand_tensor(&[5, 3], rng)],
        Box::new(move |t, v| {
            let g = t.gather_rows(v[0], &[4, 0, 4, 2])?;
            let ls = t.log_softmax(g, 1)?;
            let p = t.pick(ls, &[0, 2, 1, 1])?;
            let s = t.mean(p);
            let y = t.scale(g, 1.0);
            let q = super::project(t, y, &w2)?;
            t.add(s, q)
        }),
    ));
    cases
}

/// Layers and blocks built from the primitives, each reduced to a scalar
/// through a random projection.
pub fn layer_cases(rng: &mut impl Rng) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();

    let cfg = AttentionConfig::even(4, 2);
    let mut inputs = vec![rand_tensor(&[3, 4], rng), rand_tensor(&[5, 4], rng)];
    inputs.extend(rand_all(&attention_shapes(&cfg), rng));
    let w = super::projection(&[3, 4], rng);
    cases.push((
        "multi_head_attention",
        inputs,
        Box::new(move |t, v| {
            let p = Cursor::new(&v[2..]).attention();
            let mask = AttentionMask::from_fn(3, 5, |q, k| k <= q + 2);
            let o = multi_head_attention(t, v[0], v[1], &cfg, &p, &mask)?;
            super::project(t, o.output, &w)
        }),
    ));

    let mut inputs = vec![rand_tensor(&[3, 5], rng)];
    inputs.extend(rand_all(&norm_shapes(5), rng));
    let w = super::projection(&[3, 5], rng);
    cases.push((
        "layer_norm",
        inputs,
        Box::new(move |t, v| {
            let p = Cursor::new(&v[1..]).norm();
            let y = layer_norm(t, v[0], &p)?;
            super::project(t, y, &w)
        }),
    ));

    let mut inputs = vec![rand_tensor(&[4, 4], rng)];
    inputs.extend(rand_all(&ffn_shapes(4, 6), rng));
    let w = super::projection(&[4, 4], rng);
    cases.push((
        "feed_forward",
        inputs,
        Box::new(move |t, v| {
            let p = Cursor::new(&v[1..]).ffn();
            let y = p.forward(t, v[0])?;
            super::project(t, y, &w)
        }),
    ));

    let mut inputs = vec![rand_tensor(&[4, 4], rng)];
    inputs.extend(rand_all(&block_shapes(&cfg, 6), rng));
    let w = super::projection(&[4, 4], rng);
    cases.push((
        "transformer_block",
        inputs,
        Box::new(move |t, v| {
            let p = Cursor::new(&v[1..]).block();
            let y = transformer_block(
                t,
                v[0],
                &cfg,
                &p,
                &AttentionMask::causal(4),
                &mut Dropout::disabled(),
            )?;
            super::project(t, y, &w)
        }),
    ));

    let mut inputs = vec![rand_tensor(&[4, 4], rng), rand_tensor(&[3, 4], rng)];
    inputs.extend(rand_all(&dec_block_shapes(&cfg, 6), rng));
    let w = super::projection(&[4, 4], rng);
    cases.push((
        "decoder_block",
        inputs,
        Box::new(move |t, v| {
            let p = Cursor::new(&v[2..]).dec_block();
            let y = decoder_block(
                t,
                v[0],
                v[1],
                &cfg,
                &p,
                &AttentionMask::causal(4),
                &AttentionMask::full(4, 3),
                &mut Dropout::disabled(),
            )?;
            super::project(t, y, &w)
        }),
    ));

    let ecfg = ConvBlockConfig::uniform(2, 3, 3, Some(2));
    let mut inputs = vec![rand_tensor(&[2, 5, 6], rng)];
    inputs.extend(rand_all(&conv2d_layer_shapes(2, 3, 3), rng));
    inputs.extend(rand_all(&conv2d_layer_shapes(3, 3, 3), rng));
    let w = super::projection(&[3, 3, 3], rng);
    cases.push((
        "encoder_conv_block",
        inputs,
        Box::new(move |t, v| {
            let mut c = Cursor::new(&v[1..]);
            let layers = [c.conv_layer(), c.conv_layer()];
            let y = encoder_conv_block(t, v[0], &ecfg, &layers)?;
            super::project(t, y, &w)
        }),
    ));

    let dcfg = ConvBlockConfig {
        kernels: vec![3, 2],
        channels: 4,
        pool: None,
    };
    let mut inputs = vec![rand_tensor(&[5, 3], rng)];
    inputs.extend(rand_all(&conv1d_layer_shapes(3, 4, 3), rng));
    inputs.extend(rand_all(&conv1d_layer_shapes(4, 4, 2), rng));
    let w = super::projection(&[5, 4], rng);
    cases.push((
        "decoder_conv_block",
        inputs,
        Box::new(move |t, v| {
            let mut c = Cursor::new(&v[1..]);
            let layers = [c.conv_layer(), c.conv_layer()];
            let y = decoder_conv_block(t, v[0], &dcfg, &layers)?;
            super::project(t, y, &w)
        }),
    ));
    cases
}
