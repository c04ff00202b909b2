//! Layer library: linear, layer norm, multi-head attention, transformer
//! blocks, and the small pre-activation conv stack used by the Bongard
//! encoders. Layers hold parameter ids and apply themselves to a session.

use super::params::{Builder, ParamId, Session};
use crate::tape::Tx;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, din: usize, dout: usize) -> Self {
        Self {
            w: b.xavier(&format!("{name}.w"), &[din, dout], din, dout),
            b: b.constant(&format!("{name}.b"), &[dout], 0.0),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Tx) -> Tx {
        let w = s.param(self.w);
        let b = s.param(self.b);
        let y = s.tape.matmul(x, w, false, false);
        s.tape.add_broadcast(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        Self {
            gain: b.constant(&format!("{name}.g"), &[dim], 1.0),
            bias: b.constant(&format!("{name}.b"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Tx) -> Tx {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer ReLU MLP.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Self {
            l1: Linear::new(b, &format!("{name}.l1"), din, hidden),
            l2: Linear::new(b, &format!("{name}.l2"), hidden, dout),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Tx) -> Tx {
        let h = self.l1.forward(s, x);
        let h = s.tape.relu(h);
        self.l2.forward(s, h)
    }
}

/// (N, T, d) -> (N*h, T, d/h)
pub fn split_heads(s: &mut Session, x: Tx, heads: usize) -> Tx {
    let shape = s.tape.shape(x).to_vec();
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let r = s.tape.reshape(x, &[n, t, heads, dh]);
    let p = s.tape.permute(r, &[0, 2, 1, 3]);
    s.tape.reshape(p, &[n * heads, t, dh])
}

/// (N*h, T, d/h) -> (N, T, d)
pub fn merge_heads(s: &mut Session, x: Tx, heads: usize) -> Tx {
    let shape = s.tape.shape(x).to_vec();
    let (nh, t, dh) = (shape[0], shape[1], shape[2]);
    let n = nh / heads;
    let r = s.tape.reshape(x, &[n, heads, t, dh]);
    let p = s.tape.permute(r, &[0, 2, 1, 3]);
    s.tape.reshape(p, &[n, t, heads * dh])
}

/// Scaled dot-product attention over head-shaped tensors:
/// q (N*h, Tq, dh), k/v (N*h, Tk, dh) -> (N*h, Tq, dh).
pub fn attention(s: &mut Session, q: Tx, k: Tx, v: Tx) -> Tx {
    let dh = s.tape.shape(q)[2];
    let logits = s.tape.matmul(q, k, false, true);
    let scaled = s.tape.scale(logits, 1.0 / (dh as f64).sqrt());
    let weights = s.tape.softmax(scaled);
    s.tape.matmul(weights, v, false, false)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "embed dim must divide into heads");
        Self {
            heads,
            wq: Linear::new(b, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(b, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(b, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(b, &format!("{name}.wo"), dim, dim),
        }
    }

    pub fn self_attn(&self, s: &mut Session, x: Tx) -> Tx {
        let q = self.wq.forward(s, x);
        let k = self.wk.forward(s, x);
        let v = self.wv.forward(s, x);
        let qh = split_heads(s, q, self.heads);
        let kh = split_heads(s, k, self.heads);
        let vh = split_heads(s, v, self.heads);
        let out = attention(s, qh, kh, vh);
        let merged = merge_heads(s, out, self.heads);
        self.wo.forward(s, merged)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, ff: usize) -> Self {
        Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(b, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(b, &format!("{name}.mlp"), dim, ff, dim),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Tx) -> Tx {
        let n = self.ln1.forward(s, x);
        let a = self.attn.self_attn(s, n);
        let x = s.tape.add(x, a);
        let n = self.ln2.forward(s, x);
        let m = self.mlp.forward(s, n);
        s.tape.add(x, m)
    }
}

/// Pre-norm cross-attention block. Key/value heads are prepared once by the
/// caller and shared across the block stack.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, ff: usize) -> Self {
        Self {
            heads,
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim),
            wq: Linear::new(b, &format!("{name}.wq"), dim, dim),
            wo: Linear::new(b, &format!("{name}.wo"), dim, dim),
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(b, &format!("{name}.mlp"), dim, ff, dim),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Tx, k_heads: Tx, v_heads: Tx) -> Tx {
        let n = self.ln1.forward(s, x);
        let q = self.wq.forward(s, n);
        let qh = split_heads(s, q, self.heads);
        let out = attention(s, qh, k_heads, v_heads);
        let merged = merge_heads(s, out, self.heads);
        let a = self.wo.forward(s, merged);
        let x = s.tape.add(x, a);
        let n = self.ln2.forward(s, x);
        let m = self.mlp.forward(s, n);
        s.tape.add(x, m)
    }
}

/// Shared key/value projection for a cross-attention stack.
#[derive(Debug, Clone)]
pub struct KvProjection {
    pub heads: usize,
    pub wk: Linear,
    pub wv: Linear,
}

impl KvProjection {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            heads,
            wk: Linear::new(b, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(b, &format!("{name}.wv"), dim, dim),
        }
    }

    pub fn forward(&self, s: &mut Session, kv: Tx) -> (Tx, Tx) {
        let k = self.wk.forward(s, kv);
        let v = self.wv.forward(s, kv);
        (
            split_heads(s, k, self.heads),
            split_heads(s, v, self.heads),
        )
    }

    /// Projections without the head split, for callers that reassemble the
    /// key set before attention.
    pub fn forward_tokens(&self, s: &mut Session, kv: Tx) -> (Tx, Tx) {
        (self.wk.forward(s, kv), self.wv.forward(s, kv))
    }
}

/// Layer norm over the channel axis of an NCHW tensor.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub ln: LayerNorm,
}

impl ChannelNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        Self {
            ln: LayerNorm::new(b, name, channels),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Tx) -> Tx {
        let nhwc = s.tape.permute(x, &[0, 2, 3, 1]);
        let normed = self.ln.forward(s, nhwc);
        s.tape.permute(normed, &[0, 3, 1, 2])
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            w: b.xavier(
                &format!("{name}.w"),
                &[cout, cin, k, k],
                cin * k * k,
                cout * k * k,
            ),
            b: b.constant(&format!("{name}.b"), &[cout], 0.0),
            stride,
            pad,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Tx) -> Tx {
        let w = s.param(self.w);
        let b = s.param(self.b);
        s.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Pre-activation residual block: x + conv(relu(ln(conv(relu(ln(x)))))).
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub n1: ChannelNorm,
    pub c1: Conv,
    pub n2: ChannelNorm,
    pub c2: Conv,
}

impl ResBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        Self {
            n1: ChannelNorm::new(b, &format!("{name}.n1"), channels),
            c1: Conv::new(b, &format!("{name}.c1"), channels, channels, 3, 1, 1),
            n2: ChannelNorm::new(b, &format!("{name}.n2"), channels),
            c2: Conv::new(b, &format!("{name}.c2"), channels, channels, 3, 1, 1),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Tx) -> Tx {
        let h = self.n1.forward(s, x);
        let h = s.tape.relu(h);
        let h = self.c1.forward(s, h);
        let h = self.n2.forward(s, h);
        let h = s.tape.relu(h);
        let h = self.c2.forward(s, h);
        s.tape.add(x, h)
    }
}

/// Three-stage strided conv encoder: panel (N,1,H,W) -> tokens (N, (H/8)^2, d).
#[derive(Debug, Clone)]
pub struct ConvTokenEncoder {
    pub stem: Conv,
    pub stages: Vec<(Conv, ResBlock)>,
    pub proj: Conv,
}

impl ConvTokenEncoder {
    pub fn new(b: &mut Builder, name: &str, channels: &[usize; 3], dim: usize) -> Self {
        let stem = Conv::new(b, &format!("{name}.stem"), 1, channels[0], 3, 2, 1);
        let mut stages = Vec::new();
        let mut cin = channels[0];
        for (i, &c) in channels.iter().enumerate() {
            if i == 0 {
                stages.push((
                    // Stage 0 reuses the stem's stride; this extra conv keeps
                    // channel count, stride 1.
                    Conv::new(b, &format!("{name}.stage0.conv"), cin, c, 3, 1, 1),
                    ResBlock::new(b, &format!("{name}.stage0.block"), c),
                ));
            } else {
                stages.push((
                    Conv::new(b, &format!("{name}.stage{i}.down"), cin, c, 3, 2, 1),
                    ResBlock::new(b, &format!("{name}.stage{i}.block"), c),
                ));
            }
            cin = c;
        }
        let proj = Conv::new(b, &format!("{name}.proj"), cin, dim, 1, 1, 0);
        Self { stem, stages, proj }
    }

    /// Returns (N, T, d) feature tokens, T = (H/8)^2.
    pub fn forward(&self, s: &mut Session, x: Tx) -> Tx {
        let mut h = self.stem.forward(s, x);
        for (down, block) in &self.stages {
            h = down.forward(s, h);
            h = block.forward(s, h);
        }
        let h = self.proj.forward(s, h);
        let shape = s.tape.shape(h).to_vec();
        let (n, d, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
        let flat = s.tape.reshape(h, &[n, d, hh * ww]);
        s.tape.permute(flat, &[0, 2, 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use crate::rng::Stream;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn conv_token_encoder_shapes() {
        let mut store = ParamStore::new();
        let mut rng = Stream::seed_from_u64(0);
        let enc = {
            let mut b = Builder::new(&mut store, &mut rng);
            ConvTokenEncoder::new(&mut b, "enc", &[4, 8, 12], 32)
        };
        let mut s = Session::inference(&store);
        let x = s.input(ArrayD::from_elem(IxDyn(&[2, 1, 64, 64]), 0.5));
        let tokens = enc.forward(&mut s, x);
        assert_eq!(s.tape.shape(tokens), &[2, 64, 32]);

        let x32 = s.input(ArrayD::from_elem(IxDyn(&[2, 1, 32, 32]), 0.5));
        let tokens32 = enc.forward(&mut s, x32);
        assert_eq!(s.tape.shape(tokens32), &[2, 16, 32]);
    }

    #[test]
    fn encoder_block_keeps_shape_and_is_finite() {
        let mut store = ParamStore::new();
        let mut rng = Stream::seed_from_u64(1);
        let block = {
            let mut b = Builder::new(&mut store, &mut rng);
            EncoderBlock::new(&mut b, "b", 16, 4, 32)
        };
        let mut s = Session::inference(&store);
        let mut stream = Stream::seed_from_u64(2);
        let x = s.input(ArrayD::from_shape_simple_fn(IxDyn(&[3, 5, 16]), || {
            stream.normal() as f32
        }));
        let y = block.forward(&mut s, x);
        assert_eq!(s.tape.shape(y), &[3, 5, 16]);
        assert!(s.tape.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_block_key_permutation_invariance() {
        let mut store = ParamStore::new();
        let mut rng = Stream::seed_from_u64(3);
        let (kv, block) = {
            let mut b = Builder::new(&mut store, &mut rng);
            (
                KvProjection::new(&mut b, "kv", 16, 4),
                CrossBlock::new(&mut b, "cb", 16, 4, 32),
            )
        };
        let mut stream = Stream::seed_from_u64(4);
        let keys = ArrayD::from_shape_simple_fn(IxDyn(&[1, 6, 16]), || stream.normal() as f32);
        let queries = ArrayD::from_shape_simple_fn(IxDyn(&[1, 2, 16]), || stream.normal() as f32);

        let run = |keys: &ArrayD<f32>| -> ArrayD<f32> {
            let mut s = Session::inference(&store);
            let kv_in = s.input(keys.clone());
            let q_in = s.input(queries.clone());
            let (kh, vh) = kv.forward(&mut s, kv_in);
            let y = block.forward(&mut s, q_in, kh, vh);
            s.tape.value(y).clone()
        };
        let base = run(&keys);
        // Permute the key set.
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted = keys.select(ndarray::Axis(1), &perm).into_dyn();
        let out = run(&permuted.as_standard_layout().to_owned());
        for (a, b) in base.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
