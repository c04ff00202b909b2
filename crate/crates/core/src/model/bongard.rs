//! Bongard-side networks.
//!
//! The baseline is a single conv encoder pooled to one unit vector per
//! panel. The CFN family splits the panel into a concept query (pooled conv
//! encoder under `g_omega.`) and a set of feature tokens (the final conv
//! map's spatial positions under `g_theta.`), fused by a cross-attention
//! decoder (`g_eta.`) whose output is the panel representation.

use ndarray::{ArrayD, IxDyn};

use super::layers::{ConvTokenEncoder, CrossBlock, KvProjection, LayerNorm, Linear};
use super::params::{Builder, ParamId, Session};
use super::{ModelConfig, Variant};
use crate::datagen::{MiniBongardProblem, Panel};
use crate::rng::Stream;
use crate::tape::Tx;

const L2_EPS: f64 = 1e-12;

struct PooledEncoder {
    conv: ConvTokenEncoder,
    pool_ln: LayerNorm,
    proj: Linear,
}

impl PooledEncoder {
    fn new(b: &mut Builder, name: &str, channels: &[usize; 3], dim: usize) -> Self {
        Self {
            conv: ConvTokenEncoder::new(b, &format!("{name}.conv"), channels, dim),
            pool_ln: LayerNorm::new(b, &format!("{name}.pool_ln"), dim),
            proj: Linear::new(b, &format!("{name}.proj"), dim, dim),
        }
    }

    /// (N,1,H,W) -> (N, d)
    fn forward(&self, s: &mut Session, x: Tx) -> Tx {
        let tokens = self.conv.forward(s, x);
        let pooled = s.tape.mean_axis(tokens, 1);
        let normed = self.pool_ln.forward(s, pooled);
        self.proj.forward(s, normed)
    }
}

struct CrossDecoder {
    kv: KvProjection,
    blocks: Vec<CrossBlock>,
    out_ln: LayerNorm,
}

impl CrossDecoder {
    fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, ff: usize, depth: usize) -> Self {
        Self {
            kv: KvProjection::new(b, &format!("{name}.kv"), dim, heads),
            blocks: (0..depth)
                .map(|i| CrossBlock::new(b, &format!("{name}.block{i}"), dim, heads, ff))
                .collect(),
            out_ln: LayerNorm::new(b, &format!("{name}.out_ln"), dim),
        }
    }

    /// queries (N, Tq, d) attending over keys (N, Tk, d) -> (N, Tq, d).
    fn forward(&self, s: &mut Session, queries: Tx, keys: Tx) -> Tx {
        let (kh, vh) = self.kv.forward(s, keys);
        let mut x = queries;
        for block in &self.blocks {
            x = block.forward(s, x, kh, vh);
        }
        self.out_ln.forward(s, x)
    }
}

pub struct BongardModel {
    pub cfg: ModelConfig,
    baseline: Option<PooledEncoder>,
    g_omega: Option<PooledEncoder>,
    g_theta: Option<ConvTokenEncoder>,
    /// Unit-scale feature tokens; see the RPM model's feature norm.
    g_theta_ln: Option<LayerNorm>,
    g_eta: Option<CrossDecoder>,
    respace_basis: Option<ParamId>,
}

pub struct BongardForward {
    /// Unit-normalized panel representations, (B, 14, d).
    pub z: Tx,
    /// Feature tokens flattened for the decorrelation loss, (B*14*T, d);
    /// absent on the baseline variant.
    pub feature_tokens: Option<Tx>,
}

impl BongardModel {
    pub fn new(cfg: &ModelConfig, store: &mut super::ParamStore, rng: &mut Stream) -> Self {
        let mut b = Builder::new(store, rng);
        let d = cfg.embed_dim;
        match cfg.variant {
            Variant::Baseline => Self {
                cfg: cfg.clone(),
                baseline: Some(PooledEncoder::new(&mut b, "baseline", &cfg.conv_channels, d)),
                g_omega: None,
                g_theta: None,
                g_theta_ln: None,
                g_eta: None,
                respace_basis: None,
            },
            _ => {
                let g_omega = PooledEncoder::new(&mut b, "g_omega", &cfg.conv_channels, d);
                let g_theta = ConvTokenEncoder::new(&mut b, "g_theta.conv", &cfg.conv_channels, d);
                let g_theta_ln = LayerNorm::new(&mut b, "g_theta.token_ln", d);
                let g_eta = CrossDecoder::new(&mut b, "g_eta", d, cfg.heads, cfg.ff_dim(), cfg.depth);
                let respace_basis = cfg
                    .respace
                    .then(|| b.unit_rows("respace.basis", d, d));
                Self {
                    cfg: cfg.clone(),
                    baseline: None,
                    g_omega: Some(g_omega),
                    g_theta: Some(g_theta),
                    g_theta_ln: Some(g_theta_ln),
                    g_eta: Some(g_eta),
                    respace_basis,
                }
            }
        }
    }

    pub fn respace_basis(&self) -> Option<ParamId> {
        self.respace_basis
    }

    /// Cosine coordinates of each token against the basis; identity when the
    /// model has no re-space layer.
    pub fn respace_apply(&self, s: &mut Session, k: Tx) -> Tx {
        match self.respace_basis {
            None => k,
            Some(id) => {
                let basis = s.param(id);
                let k_hat = s.tape.l2_normalize(k, L2_EPS);
                let v_hat = s.tape.l2_normalize(basis, L2_EPS);
                s.tape.matmul(k_hat, v_hat, false, true)
            }
        }
    }

    /// Encodes panels to unit representations, (N, d), plus the feature
    /// tokens (N, T, d) for non-baseline variants.
    pub fn encode_panels(&self, s: &mut Session, panels: &[&Panel]) -> (Tx, Option<Tx>) {
        let x = s.input(panels_to_nchw(panels));
        if let Some(baseline) = &self.baseline {
            let z = baseline.forward(s, x);
            return (s.tape.l2_normalize(z, L2_EPS), None);
        }
        let g_omega = self.g_omega.as_ref().expect("cfn path");
        let g_theta = self.g_theta.as_ref().expect("cfn path");
        let g_eta = self.g_eta.as_ref().expect("cfn path");
        let q = g_omega.forward(s, x);
        let n = s.tape.shape(q)[0];
        let d = self.cfg.embed_dim;
        let q = s.tape.reshape(q, &[n, 1, d]);
        let k_raw = g_theta.forward(s, x);
        let k = self
            .g_theta_ln
            .as_ref()
            .expect("cfn path")
            .forward(s, k_raw);
        let k_used = self.respace_apply(s, k);
        let fused = g_eta.forward(s, q, k_used);
        let flat = s.tape.reshape(fused, &[n, d]);
        (s.tape.l2_normalize(flat, L2_EPS), Some(k))
    }

    /// Full problems: representations (B, 14, d) plus flattened feature
    /// tokens for the decorrelation term.
    pub fn forward(&self, s: &mut Session, problems: &[&MiniBongardProblem]) -> BongardForward {
        let panels: Vec<&Panel> = problems
            .iter()
            .flat_map(|p| p.panels.iter())
            .collect();
        let (z, k) = self.encode_panels(s, &panels);
        let d = self.cfg.embed_dim;
        let z = s.tape.reshape(z, &[problems.len(), 14, d]);
        let feature_tokens = k.map(|k| {
            let shape = s.tape.shape(k).to_vec();
            s.tape.reshape(k, &[shape[0] * shape[1], shape[2]])
        });
        BongardForward { z, feature_tokens }
    }
}

/// Panels to an (N, 1, H, W) float tensor.
pub fn panels_to_nchw(panels: &[&Panel]) -> ArrayD<f32> {
    let (h, w) = (panels[0].h, panels[0].w);
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[panels.len(), 1, h, w]));
    for (i, p) in panels.iter().enumerate() {
        assert_eq!((p.h, p.w), (h, w), "mixed panel sizes in one batch");
        for y in 0..h {
            for x in 0..w {
                out[[i, 0, y, x]] = p.get(y, x) as f32 / 255.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_bongard, ConceptFamily};
    use crate::model::ParamStore;

    fn small_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            embed_dim: 32,
            conv_channels: [4, 8, 12],
            depth: 2,
            heads: 4,
            ..ModelConfig::bongard_default()
        }
    }

    fn build(variant: Variant) -> (BongardModel, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = Stream::seed_from_u64(0);
        let model = BongardModel::new(&small_cfg(variant), &mut store, &mut rng);
        (model, store)
    }

    #[test]
    fn baseline_outputs_unit_vectors_in_order() {
        let (model, store) = build(Variant::Baseline);
        let problems = gen_bongard(0, ConceptFamily::Shape, 1, 32).unwrap();
        let panels: Vec<&Panel> = problems[0].panels.iter().collect();
        let mut s = Session::inference(&store);
        let (z, k) = model.encode_panels(&mut s, &panels);
        assert!(k.is_none());
        let z = s.tape.value(z);
        assert_eq!(z.shape(), &[14, 32]);
        for row in z.rows() {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
        }

        // Identical panels encode identically, and batching preserves order.
        let twice: Vec<&Panel> = panels.iter().copied().chain(panels.iter().copied()).collect();
        let mut s2 = Session::inference(&store);
        let (z2, _) = model.encode_panels(&mut s2, &twice);
        let z2 = s2.tape.value(z2);
        for j in 0..14 {
            for i in 0..32 {
                assert_eq!(z[[j, i]].to_bits(), z2[[j, i]].to_bits());
                assert_eq!(z[[j, i]].to_bits(), z2[[j + 14, i]].to_bits());
            }
        }
    }

    #[test]
    fn cfn_feature_tokens_have_expected_count() {
        let (model, store) = build(Variant::Cfn);
        let problems = gen_bongard(1, ConceptFamily::Count, 1, 64).unwrap();
        let mut s = Session::inference(&store);
        let fwd = model.forward(&mut s, &[&problems[0]]);
        // 64x64 panel, 8x8 final map: 64 tokens per panel.
        let k = fwd.feature_tokens.unwrap();
        assert_eq!(s.tape.shape(k), &[14 * 64, 32]);
        assert_eq!(s.tape.shape(fwd.z), &[1, 14, 32]);
    }

    #[test]
    fn gradients_reach_both_encoders() {
        let (model, mut store) = build(Variant::Cfn);
        let problems = gen_bongard(2, ConceptFamily::Shape, 1, 32).unwrap();
        let mut s = Session::new(&store, |_| true);
        let fwd = model.forward(&mut s, &[&problems[0]]);
        let seed = ArrayD::from_elem(IxDyn(&[1, 14, 32]), 1.0f32);
        let grads = s.param_grads(vec![(fwd.z, seed)]);
        let mut theta_norm = 0.0f64;
        let mut omega_norm = 0.0f64;
        for id in store.ids() {
            if let Some(g) = &grads[id] {
                let n: f64 = g.iter().map(|v| (*v as f64) * (*v as f64)).sum();
                if store.name(id).starts_with("g_theta.") {
                    theta_norm += n;
                }
                if store.name(id).starts_with("g_omega.") {
                    omega_norm += n;
                }
            }
        }
        assert!(theta_norm > 0.0, "no gradient reached g_theta");
        assert!(omega_norm > 0.0, "no gradient reached g_omega");
        // Touch the store mutably so the borrow checker sees it used.
        let _ = store.value_mut(0);
    }

    #[test]
    fn respace_outputs_are_bounded_coordinates() {
        let mut cfg = small_cfg(Variant::TripleCfn);
        cfg.respace = true;
        let mut store = ParamStore::new();
        let mut rng = Stream::seed_from_u64(3);
        let model = BongardModel::new(&cfg, &mut store, &mut rng);
        let problems = gen_bongard(3, ConceptFamily::Symmetry, 1, 32).unwrap();
        let panels: Vec<&Panel> = problems[0].panels.iter().collect();
        let mut s = Session::inference(&store);
        let x = s.input(panels_to_nchw(&panels));
        let k = model.g_theta.as_ref().unwrap().forward(&mut s, x);
        let coords = model.respace_apply(&mut s, k);
        for &v in s.tape.value(coords).iter() {
            assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&(v as f64)), "{v}");
        }
    }
}
