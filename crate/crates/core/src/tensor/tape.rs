use super::{round_to_mode, split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// `b` has the shape of the trailing axes of `a` and is repeated over the rest.
    AddTrailing(Var, Var),
    Mul(Var, Var),
    MulTrailing(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Relu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    CausalConv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so every node's inputs precede it and a reverse sweep is a valid
/// topological replay.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(op, format!("incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if !matches!(op, Op::Leaf) {
            round_to_mode(&mut value.data);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("add", &ta.shape, &tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    fn check_trailing(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    /// `a + b` where `b` matches the trailing axes of `a`.
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_trailing("add_trailing", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = tb.data.len();
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data[i % n])
            .collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddTrailing(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("mul", &ta.shape, &tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a * b` where `b` matches the trailing axes of `a`.
    pub fn mul_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_trailing("mul_trailing", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = tb.data.len();
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * tb.data[i % n])
            .collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MulTrailing(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * c).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Batched matrix product `[.., M, K] x [.., K, N]`. A rank-2 `b` is
    /// shared across all leading batch axes of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_b = sb.len() == 2 && sa.len() > 2;
        if k != k2 || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (ta, tb) = (&self.value(a).data, &self.value(b).data);
            for bi in 0..batch {
                let boff = if shared_b { 0 } else { bi * k * n };
                gemm(
                    &ta[bi * m * k..(bi + 1) * m * k],
                    &tb[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let (data, out_shape) = permute_data(&self.value(x).data, &shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Permute(x, perm.to_vec()),
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", format!("rank {r} < 2")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| Error::dim("concat", "no inputs"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat(inputs.to_vec(), axis),
            rg,
        ))
    }

    /// Entries `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t
                .data
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect(),
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax along `axis`. Entries equal to `-inf` are masked and come out
    /// as exactly zero; a slice with every entry masked is rejected.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax_along(self.value(x), axis, false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax_along(self.value(x), axis, true)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x, axis), rg))
    }

    /// Normalizes each slice along the last axis to zero mean and unit
    /// variance (biased estimate, `eps` added to the variance), then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::dim("layer_norm", "rank 0 input"))?;
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {shape:?} with gain {:?} and bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let rows = shape.iter().product::<usize>() / d;
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &tx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// 2-D convolution with zero "same" padding.
    /// `x: [C_in, T, F]`, `w: [C_out, C_in, KT, KF]` (odd extents), `b: [C_out]`.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sb != [sw[0]] {
            return Err(Error::dim(
                "conv2d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("same padding needs odd kernel extents, got {sw:?}"),
            ));
        }
        if sx[1] < sw[2] || sx[2] < sw[3] {
            return Err(Error::dim(
                "conv2d",
                format!("input {sx:?} smaller than kernel {:?}", &sw[2..]),
            ));
        }
        let g = Conv2dGeom::new(&sx, &sw);
        let mut out = vec![0.0; g.cout * g.t * g.f];
        {
            let (tx, tw, tb) = (
                &self.value(x).data,
                &self.value(w).data,
                &self.value(b).data,
            );
            for o in 0..g.cout {
                out[o * g.t * g.f..(o + 1) * g.t * g.f].fill(tb[o]);
            }
            g.for_each_tap(|o, c, i, j, t, ti, f0, f1, fi0| {
                let wv = tw[((o * g.cin + c) * g.kt + i) * g.kf + j];
                let orow = (o * g.t + t) * g.f;
                let irow = (c * g.t + ti) * g.f;
                for (off, f) in (f0..f1).enumerate() {
                    out[orow + f] += wv * tx[irow + fi0 + off];
                }
            });
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![g.cout, g.t, g.f],
                data: out,
            },
            Op::Conv2d { x, w, b },
            rg,
        ))
    }

    /// Causal 1-D convolution along time: output step `t` reads inputs
    /// `t-k+1..=t`, with zeros before the start.
    /// `x: [T, D_in]`, `w: [D_out, D_in, K]`, `b: [D_out]`. Kernel tap `K-1`
    /// multiplies the current step.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] || sb != [sw[0]] || sw[2] == 0 {
            return Err(Error::dim(
                "causal_conv1d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let (t_len, din) = (sx[0], sx[1]);
        let (dout, k) = (sw[0], sw[2]);
        let mut out = vec![0.0; t_len * dout];
        {
            let (tx, tw, tb) = (
                &self.value(x).data,
                &self.value(w).data,
                &self.value(b).data,
            );
            for t in 0..t_len {
                let orow = &mut out[t * dout..(t + 1) * dout];
                orow.copy_from_slice(tb);
                for j in 0..k {
                    let Some(s) = (t + j).checked_sub(k - 1) else {
                        continue;
                    };
                    let irow = &tx[s * din..(s + 1) * din];
                    for (o, acc) in orow.iter_mut().enumerate() {
                        let wbase = o * din * k + j;
                        let mut sum = 0.0;
                        for (c, xv) in irow.iter().enumerate() {
                            sum += tw[wbase + c * k] * xv;
                        }
                        *acc += sum;
                    }
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![t_len, dout],
                data: out,
            },
            Op::CausalConv1d { x, w, b },
            rg,
        ))
    }

    /// Non-overlapping max pooling over both trailing axes of `[C, T, F]`.
    /// Partial windows at the end are kept (ceil mode).
    pub fn max_pool2d(&mut self, x: Var, pool: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || pool == 0 {
            return Err(Error::dim(
                "max_pool2d",
                format!("input {s:?}, pool {pool}"),
            ));
        }
        let (c, t, f) = (s[0], s[1], s[2]);
        let (to, fo) = (t.div_ceil(pool), f.div_ceil(pool));
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(c * to * fo);
        let mut argmax = Vec::with_capacity(c * to * fo);
        for ci in 0..c {
            for a in 0..to {
                for bcol in 0..fo {
                    let mut best = usize::MAX;
                    for ti in a * pool..((a + 1) * pool).min(t) {
                        for fi in bcol * pool..((bcol + 1) * pool).min(f) {
                            let idx = (ci * t + ti) * f + fi;
                            if best == usize::MAX || src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    data.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![c, to, fo],
                data,
            },
            Op::MaxPool2d { x, argmax },
            rg,
        ))
    }

    /// Row lookup `table[ids[i]]` from a `[V, D]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", format!("table shape {s:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Input(format!(
                "token id {bad} >= table size {}",
                s[0]
            )));
        }
        let d = s[1];
        let src = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i] = x[i, ids[i]]` for a `[N, V]` input.
    pub fn pick(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != ids.len() {
            return Err(Error::dim(
                "pick",
                format!("input {s:?} with {} indices", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[1]) {
            return Err(Error::Input(format!("index {bad} >= width {}", s[1])));
        }
        let src = &self.value(x).data;
        let data = ids
            .iter()
            .enumerate()
            .map(|(r, &i)| src[r * s[1] + i])
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len()],
                data,
            },
            Op::Pick {
                x,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Populates gradients of the scalar `loss` for every node that requires
    /// one and is reachable from it. Earlier gradients are discarded, so
    /// calling this twice yields identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Inputs always have smaller indices than `i`, so splitting lets us
        // read the node while writing input gradients.
        let (before, rest) = self.nodes.split_at(i);
        let node = &rest[0];
        let grads = &mut self.grads;
        let val = |v: Var| &before[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot(before, grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::AddTrailing(a, b) => {
                if let Some(d) = slot(before, grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = slot(before, grads, *b) {
                    let n = d.len();
                    for (k, gv) in g.iter().enumerate() {
                        d[k % n] += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data.clone(), val(*b).data.clone());
                if let Some(d) = slot(before, grads, *a) {
                    for k in 0..g.len() {
                        d[k] += g[k] * tb[k];
                    }
                }
                if let Some(d) = slot(before, grads, *b) {
                    for k in 0..g.len() {
                        d[k] += g[k] * ta[k];
                    }
                }
            }
            Op::MulTrailing(a, b) => {
                let (ta, tb) = (val(*a).data.clone(), val(*b).data.clone());
                let n = tb.len();
                if let Some(d) = slot(before, grads, *a) {
                    for k in 0..g.len() {
                        d[k] += g[k] * tb[k % n];
                    }
                }
                if let Some(d) = slot(before, grads, *b) {
                    for k in 0..g.len() {
                        d[k % n] += g[k] * ta[k];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = slot(before, grads, *x) {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv * c;
                    }
                }
            }
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (ta, tb) = (&val(a).data, &val(b).data);
                let (ta, tb) = (ta.clone(), tb.clone());
                if let Some(d) = slot(before, grads, a) {
                    for bi in 0..batch {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &tb[boff..boff + k * n],
                            &mut d[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(d) = slot(before, grads, b) {
                    for bi in 0..batch {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        gemm_tn(
                            &ta[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut d[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Permute(x, perm) => {
                let out_shape = &node.value.shape;
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute_data(g, out_shape, &inv);
                if let Some(d) = slot(before, grads, *x) {
                    add_into(d, &back);
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = slot(before, grads, *x) {
                    add_into(d, g);
                }
            }
            Op::Concat(inputs, axis) => {
                let (outer, total, inner) = split_axis(&node.value.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).shape[*axis];
                    if let Some(d) = slot(before, grads, v) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            add_into(&mut d[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let in_shape = val(x).shape.clone();
                let (outer, n, inner) = split_axis(&in_shape, axis);
                let len = node.value.shape[axis];
                if let Some(d) = slot(before, grads, x) {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        add_into(&mut d[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                }
            }
            Op::Relu(x) => {
                let out = &node.value.data;
                if let Some(d) = slot(before, grads, *x) {
                    for k in 0..g.len() {
                        if out[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                }
            }
            &Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(&y.shape, axis);
                if let Some(d) = slot(before, grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * y.data[idx(k)]).sum();
                            for k in 0..n {
                                d[idx(k)] += y.data[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            &Op::LogSoftmax(x, axis) => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(&y.shape, axis);
                if let Some(d) = slot(before, grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let total: f64 = (0..n).map(|k| g[idx(k)]).sum();
                            for k in 0..n {
                                let p = y.data[idx(k)].exp();
                                d[idx(k)] += g[idx(k)] - p * total;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let dim = val(*gain).data.len();
                let rows = rstd.len();
                let gamma = val(*gain).data.clone();
                if let Some(d) = slot(before, grads, *gain) {
                    for r in 0..rows {
                        for j in 0..dim {
                            d[j] += g[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                }
                if let Some(d) = slot(before, grads, *bias) {
                    for r in 0..rows {
                        add_into(d, &g[r * dim..(r + 1) * dim]);
                    }
                }
                if let Some(d) = slot(before, grads, *x) {
                    for r in 0..rows {
                        let row = r * dim..(r + 1) * dim;
                        let gh: Vec<f64> = g[row.clone()]
                            .iter()
                            .zip(&gamma)
                            .map(|(a, b)| a * b)
                            .collect();
                        let h = &xhat[row.clone()];
                        let mean_g = gh.iter().sum::<f64>() / dim as f64;
                        let mean_gh =
                            gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                        for j in 0..dim {
                            d[r * dim + j] += rstd[r] * (gh[j] - mean_g - h[j] * mean_gh);
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, b } => {
                let geom = Conv2dGeom::new(&val(x).shape, &val(w).shape);
                let tx = val(x).data.clone();
                let tw = val(w).data.clone();
                if let Some(d) = slot(before, grads, b) {
                    let plane = geom.t * geom.f;
                    for o in 0..geom.cout {
                        d[o] += g[o * plane..(o + 1) * plane].iter().sum::<f64>();
                    }
                }
                if let Some(d) = slot(before, grads, w) {
                    geom.for_each_tap(|o, c, i, j, t, ti, f0, f1, fi0| {
                        let orow = (o * geom.t + t) * geom.f;
                        let irow = (c * geom.t + ti) * geom.f;
                        let mut s = 0.0;
                        for (off, f) in (f0..f1).enumerate() {
                            s += g[orow + f] * tx[irow + fi0 + off];
                        }
                        d[((o * geom.cin + c) * geom.kt + i) * geom.kf + j] += s;
                    });
                }
                if let Some(d) = slot(before, grads, x) {
                    geom.for_each_tap(|o, c, i, j, t, ti, f0, f1, fi0| {
                        let wv = tw[((o * geom.cin + c) * geom.kt + i) * geom.kf + j];
                        let orow = (o * geom.t + t) * geom.f;
                        let irow = (c * geom.t + ti) * geom.f;
                        for (off, f) in (f0..f1).enumerate() {
                            d[irow + fi0 + off] += wv * g[orow + f];
                        }
                    });
                }
            }
            &Op::CausalConv1d { x, w, b } => {
                let (sx, sw) = (val(x).shape.clone(), val(w).shape.clone());
                let (t_len, din, dout, k) = (sx[0], sx[1], sw[0], sw[2]);
                let tx = val(x).data.clone();
                let tw = val(w).data.clone();
                if let Some(d) = slot(before, grads, b) {
                    for t in 0..t_len {
                        add_into(d, &g[t * dout..(t + 1) * dout]);
                    }
                }
                if let Some(d) = slot(before, grads, w) {
                    for t in 0..t_len {
                        for j in 0..k {
                            let Some(s) = (t + j).checked_sub(k - 1) else {
                                continue;
                            };
                            for o in 0..dout {
                                let gv = g[t * dout + o];
                                for c in 0..din {
                                    d[(o * din + c) * k + j] += gv * tx[s * din + c];
                                }
                            }
                        }
                    }
                }
                if let Some(d) = slot(before, grads, x) {
                    for t in 0..t_len {
                        for j in 0..k {
                            let Some(s) = (t + j).checked_sub(k - 1) else {
                                continue;
                            };
                            for o in 0..dout {
                                let gv = g[t * dout + o];
                                for c in 0..din {
                                    d[s * din + c] += gv * tw[(o * din + c) * k + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(d) = slot(before, grads, *x) {
                    for (gv, &src) in g.iter().zip(argmax) {
                        d[src] += gv;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let dim = node.value.shape[1];
                if let Some(d) = slot(before, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
            Op::Pick { x, ids } => {
                let width = val(*x).shape[1];
                if let Some(d) = slot(before, grads, *x) {
                    for (r, &id) in ids.iter().enumerate() {
                        d[r * width + id] += g[r];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = slot(before, grads, *x) {
                    for dv in d.iter_mut() {
                        *dv += g[0];
                    }
                }
            }
        }
    }
}

fn slot<'a>(
    before: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let n = &before[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c += a · b` for row-major `a: [m, k]`, `b: [k, n]`.
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: [m, n]`, `b: [k, n]`, `c: [m, k]`.
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += aᵀ · b` for `a: [m, k]`, `b: [m, n]`, `c: [k, n]`.
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0; rank];
    let mut offset = 0;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn softmax_along(x: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(Error::dim(
            "softmax",
            format!("axis {axis} for shape {:?}", x.shape),
        ));
    }
    let (outer, n, inner) = split_axis(&x.shape, axis);
    let mut out = vec![0.0; x.data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n)
                .map(|k| x.data[idx(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(
                    "softmax slice is fully masked; every row needs at least one open entry".into(),
                ));
            }
            let mut z = 0.0;
            for k in 0..n {
                let e = (x.data[idx(k)] - max).exp();
                out[idx(k)] = e;
                z += e;
            }
            if log {
                let lz = z.ln();
                for k in 0..n {
                    out[idx(k)] = x.data[idx(k)] - max - lz;
                }
            } else {
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

struct Conv2dGeom {
    cin: usize,
    cout: usize,
    t: usize,
    f: usize,
    kt: usize,
    kf: usize,
}

impl Conv2dGeom {
    fn new(sx: &[usize], sw: &[usize]) -> Self {
        Conv2dGeom {
            cin: sx[0],
            t: sx[1],
            f: sx[2],
            cout: sw[0],
            kt: sw[2],
            kf: sw[3],
        }
    }

    /// Visits every (out channel, in channel, tap, output row) with the valid
    /// frequency range `f0..f1` and the matching input start column `fi0`.
    #[allow(clippy::too_many_arguments)]
    fn for_each_tap(
        &self,
        mut visit: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize, usize),
    ) {
        let (pt, pf) = (self.kt / 2, self.kf / 2);
        for o in 0..self.cout {
            for c in 0..self.cin {
                for i in 0..self.kt {
                    for j in 0..self.kf {
                        // output f reads input f + j - pf
                        let f0 = pf.saturating_sub(j);
                        let f1 = (self.f + pf).saturating_sub(j).min(self.f);
                        if f0 >= f1 {
                            continue;
                        }
                        let fi0 = f0 + j - pf;
                        for t in 0..self.t {
                            let Some(ti) = (t + i).checked_sub(pt) else {
                                continue;
                            };
                            if ti >= self.t {
                                continue;
                            }
                            visit(o, c, i, j, t, ti, f0, f1, fi0);
                        }
                    }
                }
            }
        }
    }
}
