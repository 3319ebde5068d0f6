//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! Everything runs in f64. Feature maps are row-major `[C, D, W, H]` with the
//! H axis contiguous, so a channel slice aliases a volume's flat data layout.
//! Token matrices are `[C, T]` (channels outer). Ops are fused at the
//! granularity this model needs: full convolutions, the selective-scan
//! recurrence, and the attention core each get one hand-derived backward.

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("non-finite state at scan step {step}")]
    NonFiniteState { step: usize },
}

/// Dense f64 tensor with a row-major shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    /// 3x3x3 convolution, stride 1, zero padding 1. Inputs: x, w, b.
    Conv3Same,
    /// 2x2x2 convolution, stride 2 (downsampling). Inputs: x, w, b.
    Conv2Down,
    /// Nearest-neighbour doubling of all three spatial dims.
    Upsample2,
    /// Channel concatenation of two feature maps.
    ConcatChannels,
    /// Pointwise linear across channels. Inputs: x, w, b.
    Conv1x1,
    /// Per-position normalization across channels. Inputs: x, gamma, beta.
    LayerNormChannels,
    Silu,
    Sigmoid,
    Add,
    Scale { c: f64 },
    /// out[i] = x[perm[i]].
    Gather { perm: Arc<Vec<usize>> },
    /// Selective-scan recurrence over tokens. Inputs: u, a, wd, bd, wb, bb, wc, bc.
    SsmScan { state_dim: usize },
    /// Multi-head attention core on projected q, k, v. Inputs: q, k, v.
    AttentionCore { heads: usize },
    /// Soft Dice loss. Inputs: probs, target.
    DiceLoss,
    /// Mean binary cross-entropy with probability clamping. Inputs: probs, target.
    BceLoss,
    /// Mean squared error over the voxels selected by the mask. Inputs: pred, target.
    MaskedMse { mask: Arc<Vec<u8>>, count: usize },
}

struct Node {
    op: Op,
    inputs: Vec<TensorId>,
    value: Tensor,
    aux: Vec<f64>,
    needs_grad: bool,
}

/// Gradients of one backward pass, addressed by tensor id.
pub struct Gradients {
    by_id: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. this tensor; zeros if it never received one.
    pub fn get(&self, id: TensorId, tape: &Tape) -> Tensor {
        match &self.by_id[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape.clone()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow.
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<TensorId>, value: Tensor, aux: Vec<f64>) -> TensorId {
        let needs_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|&i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            aux,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, needs_grad: bool) -> TensorId {
        let id = self.push(Op::Leaf, vec![], t, vec![]);
        self.nodes[id.0].needs_grad = needs_grad;
        id
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn spatial(&self, id: TensorId) -> (usize, usize, usize, usize) {
        let s = &self.nodes[id.0].value.shape;
        assert_eq!(s.len(), 4, "expected [C, D, W, H], got {s:?}");
        (s[0], s[1], s[2], s[3])
    }

    pub fn conv3_same(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let (cin, d, wd, h) = self.spatial(x);
        let ws = &self.nodes[w.0].value.shape;
        assert_eq!(&ws[1..], &[cin, 3, 3, 3], "kernel shape {ws:?}");
        let cout = ws[0];
        assert_eq!(self.nodes[b.0].value.shape, vec![cout]);
        let xs = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let plane = d * wd * h;
        let mut out = vec![0.0f64; cout * plane];
        let vox = |z: usize, y: usize, xx: usize| (z * wd + y) * h + xx;
        for co in 0..cout {
            let wbase = co * cin * 27;
            for z in 0..d {
                for y in 0..wd {
                    for xx in 0..h {
                        let mut acc = bv[co];
                        for ci in 0..cin {
                            let xbase = ci * plane;
                            let kbase = wbase + ci * 27;
                            for kz in 0..3usize {
                                let sz = z + kz;
                                if sz < 1 || sz > d {
                                    continue;
                                }
                                for ky in 0..3usize {
                                    let sy = y + ky;
                                    if sy < 1 || sy > wd {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let sx = xx + kx;
                                        if sx < 1 || sx > h {
                                            continue;
                                        }
                                        acc += wv[kbase + (kz * 3 + ky) * 3 + kx]
                                            * xs[xbase + vox(sz - 1, sy - 1, sx - 1)];
                                    }
                                }
                            }
                        }
                        out[co * plane + vox(z, y, xx)] = acc;
                    }
                }
            }
        }
        self.push(
            Op::Conv3Same,
            vec![x, w, b],
            Tensor::new(vec![cout, d, wd, h], out),
            vec![],
        )
    }

    pub fn conv2_down(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let (cin, d, wd, h) = self.spatial(x);
        assert!(
            d % 2 == 0 && wd % 2 == 0 && h % 2 == 0,
            "downsample needs even dims, got {:?}",
            (d, wd, h)
        );
        let ws = &self.nodes[w.0].value.shape;
        assert_eq!(&ws[1..], &[cin, 2, 2, 2], "kernel shape {ws:?}");
        let cout = ws[0];
        assert_eq!(self.nodes[b.0].value.shape, vec![cout]);
        let (od, ow, oh) = (d / 2, wd / 2, h / 2);
        let xs = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let iplane = d * wd * h;
        let oplane = od * ow * oh;
        let mut out = vec![0.0f64; cout * oplane];
        for co in 0..cout {
            for z in 0..od {
                for y in 0..ow {
                    for xx in 0..oh {
                        let mut acc = bv[co];
                        for ci in 0..cin {
                            let kbase = (co * cin + ci) * 8;
                            for kz in 0..2usize {
                                for ky in 0..2usize {
                                    for kx in 0..2usize {
                                        acc += wv[kbase + (kz * 2 + ky) * 2 + kx]
                                            * xs[ci * iplane
                                                + ((2 * z + kz) * wd + 2 * y + ky) * h
                                                + 2 * xx
                                                + kx];
                                    }
                                }
                            }
                        }
                        out[co * oplane + (z * ow + y) * oh + xx] = acc;
                    }
                }
            }
        }
        self.push(
            Op::Conv2Down,
            vec![x, w, b],
            Tensor::new(vec![cout, od, ow, oh], out),
            vec![],
        )
    }

    pub fn upsample2(&mut self, x: TensorId) -> TensorId {
        let (c, d, wd, h) = self.spatial(x);
        let (od, ow, oh) = (2 * d, 2 * wd, 2 * h);
        let xs = &self.nodes[x.0].value.data;
        let mut out = vec![0.0f64; c * od * ow * oh];
        let iplane = d * wd * h;
        let oplane = od * ow * oh;
        for ci in 0..c {
            for z in 0..od {
                for y in 0..ow {
                    for xx in 0..oh {
                        out[ci * oplane + (z * ow + y) * oh + xx] =
                            xs[ci * iplane + ((z / 2) * wd + y / 2) * h + xx / 2];
                    }
                }
            }
        }
        self.push(
            Op::Upsample2,
            vec![x],
            Tensor::new(vec![c, od, ow, oh], out),
            vec![],
        )
    }

    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ca, d, wd, h) = self.spatial(a);
        let (cb, d2, w2, h2) = self.spatial(b);
        assert_eq!((d, wd, h), (d2, w2, h2), "spatial dims must match");
        let mut out = self.nodes[a.0].value.data.clone();
        out.extend_from_slice(&self.nodes[b.0].value.data);
        self.push(
            Op::ConcatChannels,
            vec![a, b],
            Tensor::new(vec![ca + cb, d, wd, h], out),
            vec![],
        )
    }

    /// Pointwise linear over the leading (channel) axis; trailing axes are
    /// treated as one flattened position axis.
    pub fn conv1x1(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let xs = &self.nodes[x.0].value;
        let cin = xs.shape[0];
        let t: usize = xs.shape[1..].iter().product();
        let ws = &self.nodes[w.0].value.shape;
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1], cin, "weight {ws:?} vs input channels {cin}");
        let cout = ws[0];
        assert_eq!(self.nodes[b.0].value.shape, vec![cout]);
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![0.0f64; cout * t];
        for co in 0..cout {
            let row = &wv[co * cin..(co + 1) * cin];
            let o = &mut out[co * t..(co + 1) * t];
            o.fill(bv[co]);
            for ci in 0..cin {
                let wcoef = row[ci];
                if wcoef == 0.0 {
                    continue;
                }
                let xrow = &xv[ci * t..(ci + 1) * t];
                for (ov, &xvv) in o.iter_mut().zip(xrow) {
                    *ov += wcoef * xvv;
                }
            }
        }
        let mut shape = xs.shape.clone();
        shape[0] = cout;
        self.push(Op::Conv1x1, vec![x, w, b], Tensor::new(shape, out), vec![])
    }

    pub fn layer_norm_channels(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> TensorId {
        let xs = &self.nodes[x.0].value;
        let c = xs.shape[0];
        let t: usize = xs.shape[1..].iter().product();
        assert_eq!(self.nodes[gamma.0].value.shape, vec![c]);
        assert_eq!(self.nodes[beta.0].value.shape, vec![c]);
        let eps = 1e-5;
        let xv = &xs.data;
        let gv = &self.nodes[gamma.0].value.data;
        let bv = &self.nodes[beta.0].value.data;
        let mut out = vec![0.0f64; c * t];
        // aux: per-position mean and inverse stddev.
        let mut aux = vec![0.0f64; 2 * t];
        for v in 0..t {
            let mut mean = 0.0;
            for ci in 0..c {
                mean += xv[ci * t + v];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ci in 0..c {
                let dd = xv[ci * t + v] - mean;
                var += dd * dd;
            }
            var /= c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            aux[v] = mean;
            aux[t + v] = inv;
            for ci in 0..c {
                out[ci * t + v] = gv[ci] * (xv[ci * t + v] - mean) * inv + bv[ci];
            }
        }
        let shape = xs.shape.clone();
        self.push(
            Op::LayerNormChannels,
            vec![x, gamma, beta],
            Tensor::new(shape, out),
            aux,
        )
    }

    pub fn silu(&mut self, x: TensorId) -> TensorId {
        let xs = &self.nodes[x.0].value;
        let out: Vec<f64> = xs.data.iter().map(|&v| v * sigmoid(v)).collect();
        let shape = xs.shape.clone();
        self.push(Op::Silu, vec![x], Tensor::new(shape, out), vec![])
    }

    pub fn sigmoid_op(&mut self, x: TensorId) -> TensorId {
        let xs = &self.nodes[x.0].value;
        let out: Vec<f64> = xs.data.iter().map(|&v| sigmoid(v)).collect();
        let shape = xs.shape.clone();
        self.push(Op::Sigmoid, vec![x], Tensor::new(shape, out), vec![])
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape, bv.shape, "add shapes differ");
        let out: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        self.push(Op::Add, vec![a, b], Tensor::new(shape, out), vec![])
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let xs = &self.nodes[x.0].value;
        let out: Vec<f64> = xs.data.iter().map(|&v| c * v).collect();
        let shape = xs.shape.clone();
        self.push(Op::Scale { c }, vec![x], Tensor::new(shape, out), vec![])
    }

    pub fn gather(
        &mut self,
        x: TensorId,
        perm: Arc<Vec<usize>>,
        out_shape: Vec<usize>,
    ) -> TensorId {
        let xs = &self.nodes[x.0].value;
        assert_eq!(perm.len(), out_shape.iter().product::<usize>());
        let out: Vec<f64> = perm.iter().map(|&i| xs.data[i]).collect();
        self.push(Op::Gather { perm }, vec![x], Tensor::new(out_shape, out), vec![])
    }

    /// Selective scan over `u: [C, T]`. State recurrence per token t:
    /// delta = softplus(wd . u_t + bd), abar = exp(delta * a),
    /// x_{t+1} = abar (.) x_t + (wb u_t + bb), y_t = wc x_{t+1} + bc.
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_scan(
        &mut self,
        u: TensorId,
        a: TensorId,
        wd: TensorId,
        bd: TensorId,
        wb: TensorId,
        bb: TensorId,
        wc: TensorId,
        bc: TensorId,
    ) -> Result<TensorId, TapeError> {
        let us = &self.nodes[u.0].value;
        assert_eq!(us.shape.len(), 2, "tokens must be [C, T]");
        let (c, t) = (us.shape[0], us.shape[1]);
        let n = self.nodes[a.0].value.shape[0];
        assert_eq!(self.nodes[wd.0].value.shape, vec![c]);
        assert_eq!(self.nodes[bd.0].value.shape, vec![1]);
        assert_eq!(self.nodes[wb.0].value.shape, vec![n, c]);
        assert_eq!(self.nodes[bb.0].value.shape, vec![n]);
        assert_eq!(self.nodes[wc.0].value.shape, vec![c, n]);
        assert_eq!(self.nodes[bc.0].value.shape, vec![c]);
        let uv = &us.data;
        let av = &self.nodes[a.0].value.data;
        let wdv = &self.nodes[wd.0].value.data;
        let bdv = self.nodes[bd.0].value.data[0];
        let wbv = &self.nodes[wb.0].value.data;
        let bbv = &self.nodes[bb.0].value.data;
        let wcv = &self.nodes[wc.0].value.data;
        let bcv = &self.nodes[bc.0].value.data;

        // aux layout: x states (t+1)*n, then delta (t), then abar (t*n).
        let mut aux = vec![0.0f64; (t + 1) * n + t + t * n];
        let (xs_aux, rest) = aux.split_at_mut((t + 1) * n);
        let (delta_aux, abar_aux) = rest.split_at_mut(t);
        let mut out = vec![0.0f64; c * t];
        for step in 0..t {
            let mut pre = bdv;
            for ci in 0..c {
                pre += wdv[ci] * uv[ci * t + step];
            }
            let delta = softplus(pre);
            delta_aux[step] = delta;
            for ni in 0..n {
                let abar = (delta * av[ni]).exp();
                abar_aux[step * n + ni] = abar;
                let mut b = bbv[ni];
                for ci in 0..c {
                    b += wbv[ni * c + ci] * uv[ci * t + step];
                }
                let next = abar * xs_aux[step * n + ni] + b;
                if !next.is_finite() {
                    return Err(TapeError::NonFiniteState { step });
                }
                xs_aux[(step + 1) * n + ni] = next;
            }
            for ci in 0..c {
                let mut y = bcv[ci];
                for ni in 0..n {
                    y += wcv[ci * n + ni] * xs_aux[(step + 1) * n + ni];
                }
                out[ci * t + step] = y;
            }
        }
        Ok(self.push(
            Op::SsmScan { state_dim: n },
            vec![u, a, wd, bd, wb, bb, wc, bc],
            Tensor::new(vec![c, t], out),
            aux,
        ))
    }

    /// Scaled-dot-product attention over pre-projected q, k, v (each [C, T]),
    /// split into `heads` contiguous channel groups.
    pub fn attention_core(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
    ) -> TensorId {
        let qs = &self.nodes[q.0].value;
        let (c, t) = (qs.shape[0], qs.shape[1]);
        assert_eq!(self.nodes[k.0].value.shape, vec![c, t]);
        assert_eq!(self.nodes[v.0].value.shape, vec![c, t]);
        assert!(heads > 0 && c % heads == 0, "channels {c} not divisible by heads {heads}");
        let ch = c / heads;
        let scale = 1.0 / (ch as f64).sqrt();
        let qv = &self.nodes[q.0].value.data;
        let kv = &self.nodes[k.0].value.data;
        let vv = &self.nodes[v.0].value.data;
        let mut out = vec![0.0f64; c * t];
        // aux: softmax probabilities, heads * t * t.
        let mut aux = vec![0.0f64; heads * t * t];
        for hd in 0..heads {
            let base = hd * ch;
            let probs = &mut aux[hd * t * t..(hd + 1) * t * t];
            for ta in 0..t {
                let row = &mut probs[ta * t..(ta + 1) * t];
                let mut maxv = f64::NEG_INFINITY;
                for (tb, slot) in row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for j in 0..ch {
                        s += qv[(base + j) * t + ta] * kv[(base + j) * t + tb];
                    }
                    *slot = s * scale;
                    maxv = maxv.max(*slot);
                }
                let mut z = 0.0;
                for slot in row.iter_mut() {
                    *slot = (*slot - maxv).exp();
                    z += *slot;
                }
                for slot in row.iter_mut() {
                    *slot /= z;
                }
                for j in 0..ch {
                    let mut acc = 0.0;
                    for tb in 0..t {
                        acc += row[tb] * vv[(base + j) * t + tb];
                    }
                    out[(base + j) * t + ta] = acc;
                }
            }
        }
        self.push(
            Op::AttentionCore { heads },
            vec![q, k, v],
            Tensor::new(vec![c, t], out),
            aux,
        )
    }

    pub fn dice_loss(&mut self, probs: TensorId, target: TensorId, smooth: f64) -> TensorId {
        let p = &self.nodes[probs.0].value;
        let g = &self.nodes[target.0].value;
        assert_eq!(p.shape, g.shape);
        let inter: f64 = p.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let denom: f64 = p.data.iter().sum::<f64>() + g.data.iter().sum::<f64>();
        let value = 1.0 - (2.0 * inter + smooth) / (denom + smooth);
        self.push(
            Op::DiceLoss,
            vec![probs, target],
            Tensor::scalar(value),
            vec![2.0 * inter + smooth, denom + smooth],
        )
    }

    pub fn bce_loss(&mut self, probs: TensorId, target: TensorId) -> TensorId {
        let eps = 1e-7;
        let p = &self.nodes[probs.0].value;
        let g = &self.nodes[target.0].value;
        assert_eq!(p.shape, g.shape);
        let n = p.numel() as f64;
        let mut total = 0.0;
        for (&pv, &gv) in p.data.iter().zip(&g.data) {
            let pc = pv.clamp(eps, 1.0 - eps);
            total -= gv * pc.ln() + (1.0 - gv) * (1.0 - pc).ln();
        }
        self.push(
            Op::BceLoss,
            vec![probs, target],
            Tensor::scalar(total / n),
            vec![],
        )
    }

    /// Mean squared error over mask-selected entries; the mask must select at
    /// least one entry.
    pub fn masked_mse(&mut self, pred: TensorId, target: TensorId, mask: Arc<Vec<u8>>) -> TensorId {
        let p = &self.nodes[pred.0].value;
        let g = &self.nodes[target.0].value;
        assert_eq!(p.shape, g.shape);
        assert_eq!(mask.len(), p.numel());
        let count = mask.iter().filter(|&&m| m == 1).count();
        assert!(count > 0, "masked_mse needs a nonempty region");
        let mut total = 0.0;
        for i in 0..mask.len() {
            if mask[i] == 1 {
                let d = p.data[i] - g.data[i];
                total += d * d;
            }
        }
        self.push(
            Op::MaskedMse { mask, count },
            vec![pred, target],
            Tensor::scalar(total / count as f64),
            vec![],
        )
    }

    /// Reverse pass from a scalar root; returns per-tensor gradients.
    pub fn backward(&self, root: TensorId) -> Gradients {
        assert_eq!(self.nodes[root.0].value.numel(), 1, "root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let gout = grads[i].take().unwrap();
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients { by_id: grads }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        id: TensorId,
        shape: &[usize],
        add: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape.to_vec()));
        }
        add(&mut slot.as_mut().unwrap().data);
    }

    #[allow(clippy::too_many_lines)]
    fn backward_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Conv3Same => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let (cin, d, wd, h) = self.spatial(x);
                let cout = self.nodes[w.0].value.shape[0];
                let plane = d * wd * h;
                let xv = &self.nodes[x.0].value.data;
                let wv = &self.nodes[w.0].value.data;
                let vox = |z: usize, y: usize, xx: usize| (z * wd + y) * h + xx;
                let mut dx = vec![0.0f64; cin * plane];
                let mut dw = vec![0.0f64; cout * cin * 27];
                let mut db = vec![0.0f64; cout];
                let need_x = self.nodes[x.0].needs_grad;
                for co in 0..cout {
                    for z in 0..d {
                        for y in 0..wd {
                            for xx in 0..h {
                                let g = gout.data[co * plane + vox(z, y, xx)];
                                if g == 0.0 {
                                    continue;
                                }
                                db[co] += g;
                                for ci in 0..cin {
                                    let kbase = (co * cin + ci) * 27;
                                    for kz in 0..3usize {
                                        let sz = z + kz;
                                        if sz < 1 || sz > d {
                                            continue;
                                        }
                                        for ky in 0..3usize {
                                            let sy = y + ky;
                                            if sy < 1 || sy > wd {
                                                continue;
                                            }
                                            for kx in 0..3usize {
                                                let sx = xx + kx;
                                                if sx < 1 || sx > h {
                                                    continue;
                                                }
                                                let si =
                                                    ci * plane + vox(sz - 1, sy - 1, sx - 1);
                                                let ki = kbase + (kz * 3 + ky) * 3 + kx;
                                                dw[ki] += g * xv[si];
                                                if need_x {
                                                    dx[si] += g * wv[ki];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, x, &[cin, d, wd, h], |gd| {
                    gd.iter_mut().zip(&dx).for_each(|(a, b)| *a += b)
                });
                self.accumulate(grads, w, &self.nodes[w.0].value.shape, |gd| {
                    gd.iter_mut().zip(&dw).for_each(|(a, b)| *a += b)
                });
                self.accumulate(grads, b, &[cout], |gd| {
                    gd.iter_mut().zip(&db).for_each(|(a, b)| *a += b)
                });
            }
            Op::Conv2Down => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let (cin, d, wd, h) = self.spatial(x);
                let cout = self.nodes[w.0].value.shape[0];
                let (od, ow, oh) = (d / 2, wd / 2, h / 2);
                let iplane = d * wd * h;
                let oplane = od * ow * oh;
                let xv = &self.nodes[x.0].value.data;
                let wv = &self.nodes[w.0].value.data;
                let mut dx = vec![0.0f64; cin * iplane];
                let mut dw = vec![0.0f64; cout * cin * 8];
                let mut db = vec![0.0f64; cout];
                let need_x = self.nodes[x.0].needs_grad;
                for co in 0..cout {
                    for z in 0..od {
                        for y in 0..ow {
                            for xx in 0..oh {
                                let g = gout.data[co * oplane + (z * ow + y) * oh + xx];
                                if g == 0.0 {
                                    continue;
                                }
                                db[co] += g;
                                for ci in 0..cin {
                                    let kbase = (co * cin + ci) * 8;
                                    for kz in 0..2usize {
                                        for ky in 0..2usize {
                                            for kx in 0..2usize {
                                                let si = ci * iplane
                                                    + ((2 * z + kz) * wd + 2 * y + ky) * h
                                                    + 2 * xx
                                                    + kx;
                                                let ki = kbase + (kz * 2 + ky) * 2 + kx;
                                                dw[ki] += g * xv[si];
                                                if need_x {
                                                    dx[si] += g * wv[ki];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, x, &[cin, d, wd, h], |gd| {
                    gd.iter_mut().zip(&dx).for_each(|(a, b)| *a += b)
                });
                self.accumulate(grads, w, &self.nodes[w.0].value.shape, |gd| {
                    gd.iter_mut().zip(&dw).for_each(|(a, b)| *a += b)
                });
                self.accumulate(grads, b, &[cout], |gd| {
                    gd.iter_mut().zip(&db).for_each(|(a, b)| *a += b)
                });
            }
            Op::Upsample2 => {
                let x = ins[0];
                let (c, d, wd, h) = self.spatial(x);
                let (od, ow, oh) = (2 * d, 2 * wd, 2 * h);
                let iplane = d * wd * h;
                let oplane = od * ow * oh;
                self.accumulate(grads, x, &[c, d, wd, h], |gd| {
                    for ci in 0..c {
                        for z in 0..od {
                            for y in 0..ow {
                                for xx in 0..oh {
                                    gd[ci * iplane + ((z / 2) * wd + y / 2) * h + xx / 2] +=
                                        gout.data[ci * oplane + (z * ow + y) * oh + xx];
                                }
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels => {
                let (a, b) = (ins[0], ins[1]);
                let na = self.nodes[a.0].value.numel();
                self.accumulate(grads, a, &self.nodes[a.0].value.shape, |gd| {
                    gd.iter_mut().zip(&gout.data[..na]).for_each(|(x, y)| *x += y)
                });
                self.accumulate(grads, b, &self.nodes[b.0].value.shape, |gd| {
                    gd.iter_mut().zip(&gout.data[na..]).for_each(|(x, y)| *x += y)
                });
            }
            Op::Conv1x1 => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let xs = &self.nodes[x.0].value;
                let cin = xs.shape[0];
                let t: usize = xs.shape[1..].iter().product();
                let cout = self.nodes[w.0].value.shape[0];
                let wv = &self.nodes[w.0].value.data;
                self.accumulate(grads, x, &xs.shape, |gd| {
                    for co in 0..cout {
                        let grow = &gout.data[co * t..(co + 1) * t];
                        for ci in 0..cin {
                            let wcoef = wv[co * cin + ci];
                            if wcoef == 0.0 {
                                continue;
                            }
                            let xg = &mut gd[ci * t..(ci + 1) * t];
                            for (a, &g) in xg.iter_mut().zip(grow) {
                                *a += wcoef * g;
                            }
                        }
                    }
                });
                self.accumulate(grads, w, &[cout, cin], |gd| {
                    for co in 0..cout {
                        let grow = &gout.data[co * t..(co + 1) * t];
                        for ci in 0..cin {
                            let xrow = &xs.data[ci * t..(ci + 1) * t];
                            let mut acc = 0.0;
                            for (&g, &xvv) in grow.iter().zip(xrow) {
                                acc += g * xvv;
                            }
                            gd[co * cin + ci] += acc;
                        }
                    }
                });
                self.accumulate(grads, b, &[cout], |gd| {
                    for co in 0..cout {
                        gd[co] += gout.data[co * t..(co + 1) * t].iter().sum::<f64>();
                    }
                });
            }
            Op::LayerNormChannels => {
                let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
                let xs = &self.nodes[x.0].value;
                let c = xs.shape[0];
                let t: usize = xs.shape[1..].iter().product();
                let gv = &self.nodes[gamma.0].value.data;
                let aux = &node.aux;
                self.accumulate(grads, x, &xs.shape, |gd| {
                    for v in 0..t {
                        let mean = aux[v];
                        let inv = aux[t + v];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for ci in 0..c {
                            let dxh = gout.data[ci * t + v] * gv[ci];
                            let xh = (xs.data[ci * t + v] - mean) * inv;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let cf = c as f64;
                        for ci in 0..c {
                            let dxh = gout.data[ci * t + v] * gv[ci];
                            let xh = (xs.data[ci * t + v] - mean) * inv;
                            gd[ci * t + v] +=
                                inv * (dxh - sum_dxh / cf - xh * sum_dxh_xh / cf);
                        }
                    }
                });
                self.accumulate(grads, gamma, &[c], |gd| {
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for v in 0..t {
                            let xh = (xs.data[ci * t + v] - aux[v]) * aux[t + v];
                            acc += gout.data[ci * t + v] * xh;
                        }
                        gd[ci] += acc;
                    }
                });
                self.accumulate(grads, beta, &[c], |gd| {
                    for ci in 0..c {
                        gd[ci] += gout.data[ci * t..(ci + 1) * t].iter().sum::<f64>();
                    }
                });
            }
            Op::Silu => {
                let x = ins[0];
                let xs = &self.nodes[x.0].value;
                self.accumulate(grads, x, &xs.shape, |gd| {
                    for (j, &xv) in xs.data.iter().enumerate() {
                        let s = sigmoid(xv);
                        gd[j] += gout.data[j] * s * (1.0 + xv * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid => {
                let x = ins[0];
                let ys = &node.value;
                self.accumulate(grads, x, &ys.shape, |gd| {
                    for (j, &y) in ys.data.iter().enumerate() {
                        gd[j] += gout.data[j] * y * (1.0 - y);
                    }
                });
            }
            Op::Add => {
                for &inp in ins {
                    self.accumulate(grads, inp, &node.value.shape, |gd| {
                        gd.iter_mut().zip(&gout.data).for_each(|(a, b)| *a += b)
                    });
                }
            }
            Op::Scale { c } => {
                let cc = *c;
                self.accumulate(grads, ins[0], &node.value.shape, |gd| {
                    gd.iter_mut().zip(&gout.data).for_each(|(a, b)| *a += cc * b)
                });
            }
            Op::Gather { perm } => {
                let x = ins[0];
                self.accumulate(grads, x, &self.nodes[x.0].value.shape, |gd| {
                    for (j, &src) in perm.iter().enumerate() {
                        gd[src] += gout.data[j];
                    }
                });
            }
            Op::SsmScan { state_dim } => {
                self.backward_ssm(node, *state_dim, gout, grads);
            }
            Op::AttentionCore { heads } => {
                self.backward_attention(node, *heads, gout, grads);
            }
            Op::DiceLoss => {
                let (p, g) = (ins[0], ins[1]);
                let num = node.aux[0];
                let den = node.aux[1];
                let gv = &self.nodes[g.0].value.data;
                let groot = gout.data[0];
                self.accumulate(grads, p, &self.nodes[p.0].value.shape, |gd| {
                    for j in 0..gd.len() {
                        // d/dp of -(num/den): quotient rule.
                        gd[j] += groot * (-(2.0 * gv[j] * den - num) / (den * den));
                    }
                });
            }
            Op::BceLoss => {
                let (p, g) = (ins[0], ins[1]);
                let pv = &self.nodes[p.0].value.data;
                let gv = &self.nodes[g.0].value.data;
                let n = pv.len() as f64;
                let groot = gout.data[0];
                let e = 1e-7;
                self.accumulate(grads, p, &self.nodes[p.0].value.shape, |gd| {
                    for j in 0..gd.len() {
                        if pv[j] <= e || pv[j] >= 1.0 - e {
                            continue; // clamped: locally flat
                        }
                        gd[j] += groot * (pv[j] - gv[j]) / (pv[j] * (1.0 - pv[j])) / n;
                    }
                });
            }
            Op::MaskedMse { mask, count } => {
                let (p, g) = (ins[0], ins[1]);
                let pv = &self.nodes[p.0].value.data;
                let gv = &self.nodes[g.0].value.data;
                let groot = gout.data[0];
                let cf = *count as f64;
                self.accumulate(grads, p, &self.nodes[p.0].value.shape, |gd| {
                    for j in 0..gd.len() {
                        if mask[j] == 1 {
                            gd[j] += groot * 2.0 * (pv[j] - gv[j]) / cf;
                        }
                    }
                });
                self.accumulate(grads, g, &self.nodes[g.0].value.shape, |gd| {
                    for j in 0..gd.len() {
                        if mask[j] == 1 {
                            gd[j] -= groot * 2.0 * (pv[j] - gv[j]) / cf;
                        }
                    }
                });
            }
        }
    }

    /// Backpropagation through time for the scan. Gradients on x_{t+1} come
    /// from the readout at step t plus the transition into step t+1; the
    /// reverse recurrence carries the latter.
    fn backward_ssm(&self, node: &Node, n: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let ins = &node.inputs;
        let (u, a, wd, bd, wb, bb, wc, bc) = (
            ins[0], ins[1], ins[2], ins[3], ins[4], ins[5], ins[6], ins[7],
        );
        let us = &self.nodes[u.0].value;
        let (c, t) = (us.shape[0], us.shape[1]);
        let uv = &us.data;
        let av = &self.nodes[a.0].value.data;
        let wdv = &self.nodes[wd.0].value.data;
        let wbv = &self.nodes[wb.0].value.data;
        let wcv = &self.nodes[wc.0].value.data;
        let xs_aux = &node.aux[..(t + 1) * n];
        let delta_aux = &node.aux[(t + 1) * n..(t + 1) * n + t];
        let abar_aux = &node.aux[(t + 1) * n + t..];

        let mut du = vec![0.0f64; c * t];
        let mut da = vec![0.0f64; n];
        let mut dwd = vec![0.0f64; c];
        let mut dbd = 0.0f64;
        let mut dwb = vec![0.0f64; n * c];
        let mut dbb = vec![0.0f64; n];
        let mut dwc = vec![0.0f64; c * n];
        let mut dbc = vec![0.0f64; c];

        let mut carry = vec![0.0f64; n];
        for step in (0..t).rev() {
            let mut gx = carry.clone();
            for ci in 0..c {
                let gy = gout.data[ci * t + step];
                if gy == 0.0 {
                    continue;
                }
                dbc[ci] += gy;
                for ni in 0..n {
                    gx[ni] += gy * wcv[ci * n + ni];
                    dwc[ci * n + ni] += gy * xs_aux[(step + 1) * n + ni];
                }
            }
            let mut ddelta = 0.0f64;
            for ni in 0..n {
                let g = gx[ni];
                dbb[ni] += g;
                for ci in 0..c {
                    dwb[ni * c + ci] += g * uv[ci * t + step];
                    du[ci * t + step] += g * wbv[ni * c + ci];
                }
                let abar = abar_aux[step * n + ni];
                let dabar = g * xs_aux[step * n + ni];
                da[ni] += dabar * abar * delta_aux[step];
                ddelta += dabar * abar * av[ni];
                carry[ni] = g * abar;
            }
            // delta = softplus(pre), so d pre = d delta * sigmoid(pre) with
            // sigmoid(pre) = 1 - exp(-delta).
            let dpre = ddelta * (1.0 - (-delta_aux[step]).exp());
            if dpre != 0.0 {
                dbd += dpre;
                for ci in 0..c {
                    dwd[ci] += dpre * uv[ci * t + step];
                    du[ci * t + step] += dpre * wdv[ci];
                }
            }
        }
        self.accumulate(grads, u, &[c, t], |gd| {
            gd.iter_mut().zip(&du).for_each(|(x, y)| *x += y)
        });
        self.accumulate(grads, a, &[n], |gd| {
            gd.iter_mut().zip(&da).for_each(|(x, y)| *x += y)
        });
        self.accumulate(grads, wd, &[c], |gd| {
            gd.iter_mut().zip(&dwd).for_each(|(x, y)| *x += y)
        });
        self.accumulate(grads, bd, &[1], |gd| gd[0] += dbd);
        self.accumulate(grads, wb, &[n, c], |gd| {
            gd.iter_mut().zip(&dwb).for_each(|(x, y)| *x += y)
        });
        self.accumulate(grads, bb, &[n], |gd| {
            gd.iter_mut().zip(&dbb).for_each(|(x, y)| *x += y)
        });
        self.accumulate(grads, wc, &[c, n], |gd| {
            gd.iter_mut().zip(&dwc).for_each(|(x, y)| *x += y)
        });
        self.accumulate(grads, bc, &[c], |gd| {
            gd.iter_mut().zip(&dbc).for_each(|(x, y)| *x += y)
        });
    }

    fn backward_attention(
        &self,
        node: &Node,
        heads: usize,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let ins = &node.inputs;
        let (q, k, v) = (ins[0], ins[1], ins[2]);
        let qs = &self.nodes[q.0].value;
        let (c, t) = (qs.shape[0], qs.shape[1]);
        let ch = c / heads;
        let scale = 1.0 / (ch as f64).sqrt();
        let qv = &self.nodes[q.0].value.data;
        let kv = &self.nodes[k.0].value.data;
        let vv = &self.nodes[v.0].value.data;
        let mut dq = vec![0.0f64; c * t];
        let mut dk = vec![0.0f64; c * t];
        let mut dv = vec![0.0f64; c * t];
        for hd in 0..heads {
            let base = hd * ch;
            let probs = &node.aux[hd * t * t..(hd + 1) * t * t];
            for ta in 0..t {
                let row = &probs[ta * t..(ta + 1) * t];
                // dP[ta, tb] and the softmax Jacobian product.
                let mut dp = vec![0.0f64; t];
                for (tb, dpv) in dp.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for j in 0..ch {
                        acc += gout.data[(base + j) * t + ta] * vv[(base + j) * t + tb];
                    }
                    *dpv = acc;
                }
                let dot: f64 = dp.iter().zip(row).map(|(a, b)| a * b).sum();
                for tb in 0..t {
                    let ds = row[tb] * (dp[tb] - dot) * scale;
                    for j in 0..ch {
                        dq[(base + j) * t + ta] += ds * kv[(base + j) * t + tb];
                        dk[(base + j) * t + tb] += ds * qv[(base + j) * t + ta];
                    }
                }
                for j in 0..ch {
                    let g = gout.data[(base + j) * t + ta];
                    if g == 0.0 {
                        continue;
                    }
                    for tb in 0..t {
                        dv[(base + j) * t + tb] += g * row[tb];
                    }
                }
            }
        }
        self.accumulate(grads, q, &[c, t], |gd| {
            gd.iter_mut().zip(&dq).for_each(|(a, b)| *a += b)
        });
        self.accumulate(grads, k, &[c, t], |gd| {
            gd.iter_mut().zip(&dk).for_each(|(a, b)| *a += b)
        });
        self.accumulate(grads, v, &[c, t], |gd| {
            gd.iter_mut().zip(&dv).for_each(|(a, b)| *a += b)
        });
    }
}
