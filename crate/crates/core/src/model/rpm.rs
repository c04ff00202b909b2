//! The multi-viewpoint RPM scorer.
//!
//! Pipeline per problem: a small patch transformer turns every panel into L
//! viewpoint tokens (`g_theta.vit`); row and column bottleneck MLPs turn the
//! nine matrix cells into six feature vectors per viewpoint
//! (`g_theta.row_mlp` / `g_theta.col_mlp`), with a learned blank token
//! standing in for the missing cell when the statement is encoded; S
//! optimizable concept tokens appended to the statement features pass
//! through a transformer encoder and are read off as concept vectors
//! (`g_omega.`); a cross-attention decoder fuses concepts with each
//! completed matrix's features, and a small MLP scores every (viewpoint,
//! concept) output, averaged into one score per option (`g_eta.`, `head.`).
//!
//! With the re-space layer active, every feature vector is replaced by its
//! cosine coordinates against a learned basis before any downstream use.

use ndarray::{ArrayD, IxDyn};

use super::codebook::CodebookEncoder;
use super::layers::{EncoderBlock, LayerNorm, Linear, Mlp};
use super::params::{Builder, ParamId, ParamStore, Session};
use super::{ModelConfig, Variant};
use crate::datagen::{MiniRpmProblem, Panel, RPM_PANEL_SIDE};
use crate::rng::Stream;
use crate::tape::Tx;

const L2_EPS: f64 = 1e-12;

pub struct RpmModel {
    pub cfg: ModelConfig,
    // g_theta: patch transformer.
    patch_proj: Linear,
    patch_pos: ParamId,
    vit_blocks: Vec<EncoderBlock>,
    vit_ln: LayerNorm,
    /// Learned stand-in tokens for the missing ninth cell, (L, d).
    blank: ParamId,
    row_mlp: Mlp,
    col_mlp: Mlp,
    /// Keeps the feature vectors at unit scale, so the decorrelation
    /// pressure acts on directions instead of being satisfied by shrinkage.
    feature_ln: LayerNorm,
    // g_omega: concept extraction.
    concept_tokens: ParamId,
    concept_pos: ParamId,
    concept_blocks: Vec<EncoderBlock>,
    concept_ln: LayerNorm,
    // g_eta: cross-attention decoder with shared key/value projections.
    dec_kv: super::layers::KvProjection,
    dec_blocks: Vec<super::layers::CrossBlock>,
    dec_ln: LayerNorm,
    head: Mlp,
    respace_basis: Option<ParamId>,
    pub codebook_encoder: Option<CodebookEncoder>,
}

/// Tape handles produced by one forward pass over a chunk of problems.
pub struct RpmForward {
    /// Final option scores, (B, 8).
    pub scores: Tx,
    /// Per-(viewpoint, concept) head outputs before averaging, (B, 8, L*S).
    pub head_outputs: Tx,
    /// Viewpoint-averaged concepts, (B, S, d).
    pub qbar: Tx,
    /// Raw feature vectors flattened for the decorrelation loss,
    /// (B*L*22, d): 6 statement features plus 8 option rows and 8 option
    /// columns per viewpoint.
    pub features: Tx,
    /// Statement features after any re-space mapping, (B*L, 6, d).
    pub statement_features: Tx,
    /// Concept vectors per viewpoint, (B*L, S, d).
    pub concepts: Tx,
}

impl RpmModel {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Stream) -> Self {
        assert_ne!(cfg.variant, Variant::Baseline, "validated upstream");
        let d = cfg.embed_dim;
        let ff = cfg.ff_dim();
        let s_tokens = cfg.concept_tokens;
        let mut b = Builder::new(store, rng);
        let patch_dim = cfg.patch * cfg.patch;
        let tokens = cfg.patch_tokens();

        let patch_proj = Linear::new(&mut b, "g_theta.vit.patch", patch_dim, d);
        let patch_pos = b.sinusoidal("g_theta.vit.pos", tokens, d);
        let vit_blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(&mut b, &format!("g_theta.vit.block{i}"), d, cfg.heads, ff))
            .collect();
        let vit_ln = LayerNorm::new(&mut b, "g_theta.vit.out_ln", d);
        let blank = b.normal("g_theta.blank", &[cfg.viewpoints, d], 0.02);
        let row_mlp = Mlp::new(&mut b, "g_theta.row_mlp", 3 * d, cfg.bottleneck, d);
        let col_mlp = Mlp::new(&mut b, "g_theta.col_mlp", 3 * d, cfg.bottleneck, d);
        let feature_ln = LayerNorm::new(&mut b, "g_theta.feature_ln", d);

        let concept_tokens = b.normal("g_omega.tokens", &[s_tokens, d], 0.5);
        let concept_pos = b.sinusoidal("g_omega.pos", 6 + s_tokens, d);
        let concept_blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(&mut b, &format!("g_omega.enc.block{i}"), d, cfg.heads, ff))
            .collect();
        let concept_ln = LayerNorm::new(&mut b, "g_omega.enc.out_ln", d);

        let dec_kv = super::layers::KvProjection::new(&mut b, "g_eta.kv", d, cfg.heads);
        let dec_blocks = (0..cfg.depth)
            .map(|i| super::layers::CrossBlock::new(&mut b, &format!("g_eta.block{i}"), d, cfg.heads, ff))
            .collect();
        let dec_ln = LayerNorm::new(&mut b, "g_eta.out_ln", d);
        let head = Mlp::new(&mut b, "head", d, d / 2, 1);

        let respace_basis = cfg.respace.then(|| b.unit_rows("respace.basis", d, d));
        let codebook_encoder = cfg
            .variant
            .uses_metadata()
            .then(|| CodebookEncoder::new(&mut b, "codebook", d, cfg.heads, ff, cfg.depth));

        Self {
            cfg: cfg.clone(),
            patch_proj,
            patch_pos,
            vit_blocks,
            vit_ln,
            blank,
            row_mlp,
            col_mlp,
            feature_ln,
            concept_tokens,
            concept_pos,
            concept_blocks,
            concept_ln,
            dec_kv,
            dec_blocks,
            dec_ln,
            head,
            respace_basis,
            codebook_encoder,
        }
    }

    pub fn respace_basis(&self) -> Option<ParamId> {
        self.respace_basis
    }

    /// Multi-viewpoint extraction: panels to (N, L, d) tokens.
    pub fn viewpoints_extract(&self, s: &mut Session, panels: &[&Panel]) -> Tx {
        let patches = s.input(panel_patches(panels, self.cfg.patch));
        let mut x = self.patch_proj.forward(s, patches);
        let pos = s.param(self.patch_pos);
        x = s.tape.add_broadcast(x, pos);
        for block in &self.vit_blocks {
            x = block.forward(s, x);
        }
        let x = self.vit_ln.forward(s, x);
        let tokens = self.cfg.patch_tokens();
        let l = self.cfg.viewpoints;
        if l == tokens {
            return x;
        }
        // Pool contiguous token groups down to the configured L.
        let n = s.tape.shape(x)[0];
        let d = self.cfg.embed_dim;
        let grouped = s.tape.reshape(x, &[n, l, tokens / l, d]);
        s.tape.mean_axis(grouped, 2)
    }

    /// Cosine coordinates against the re-space basis; identity without one.
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

    /// Row and column features of a 3x3 cell-token matrix.
    ///
    /// `cells` is (B, 9, L, d) in row-major cell order (a blank or option
    /// token in slot 8 as the caller decides). Returns raw features
    /// (B*L, 6, d): rows 0..3, columns 3..6.
    pub fn matrix_features(&self, s: &mut Session, cells: Tx) -> Tx {
        let shape = s.tape.shape(cells).to_vec();
        let (bsz, l, d) = (shape[0], shape[2], shape[3]);
        assert_eq!(shape[1], 9, "nine cells per matrix");
        let rows = {
            let p = s.tape.permute(cells, &[0, 2, 1, 3]);
            let grouped = s.tape.reshape(p, &[bsz * l, 3, 3 * d]);
            self.row_mlp.forward(s, grouped)
        };
        let cols = {
            let gathered = s.tape.gather(cells, 1, &[0, 3, 6, 1, 4, 7, 2, 5, 8]);
            let p = s.tape.permute(gathered, &[0, 2, 1, 3]);
            let grouped = s.tape.reshape(p, &[bsz * l, 3, 3 * d]);
            self.col_mlp.forward(s, grouped)
        };
        let features = s.tape.concat(&[rows, cols], 1);
        self.feature_ln.forward(s, features)
    }

    /// Concept vectors from statement features: (B*L, 6, d) -> (B*L, S, d).
    pub fn concepts_from_features(&self, s: &mut Session, features: Tx) -> Tx {
        let shape = s.tape.shape(features).to_vec();
        let (bl, d) = (shape[0], shape[2]);
        let s_tokens = self.cfg.concept_tokens;
        let tokens_param = s.param(self.concept_tokens);
        let tiled = s.tape.broadcast(tokens_param, &[bl, s_tokens, d]);
        let mut x = s.tape.concat(&[features, tiled], 1);
        let pos = s.param(self.concept_pos);
        x = s.tape.add_broadcast(x, pos);
        for block in &self.concept_blocks {
            x = block.forward(s, x);
        }
        let x = self.concept_ln.forward(s, x);
        s.tape.slice_axis(x, 1, 6, s_tokens)
    }

    /// Full forward over a chunk of problems.
    pub fn forward(&self, s: &mut Session, problems: &[&MiniRpmProblem]) -> RpmForward {
        let bsz = problems.len();
        let l = self.cfg.viewpoints;
        let d = self.cfg.embed_dim;
        let s_tokens = self.cfg.concept_tokens;

        // Panel tokens for all 16 panels of each problem.
        let panels: Vec<&Panel> = problems
            .iter()
            .flat_map(|p| p.context.iter().chain(p.options.iter()))
            .collect();
        let tok = self.viewpoints_extract(s, &panels);
        let cells_all = s.tape.reshape(tok, &[bsz, 16, l, d]);

        // Statement: context cells plus the learned blank in slot 8.
        let context = s.tape.slice_axis(cells_all, 1, 0, 8);
        let blank = s.param(self.blank);
        let blank_tiled = s.tape.broadcast(blank, &[bsz, 1, l, d]);
        let statement_cells = s.tape.concat(&[context, blank_tiled], 1);
        let statement_raw = self.matrix_features(s, statement_cells);
        let statement_features = self.respace_apply(s, statement_raw);

        // Concepts come from the statement only.
        let concepts = self.concepts_from_features(s, statement_features);
        let q_by_problem = s.tape.reshape(concepts, &[bsz, l, s_tokens, d]);
        let qbar = s.tape.mean_axis(q_by_problem, 1);

        // Per-option third-row and third-column features.
        let mut row3_idx = Vec::with_capacity(24);
        let mut col3_idx = Vec::with_capacity(24);
        for o in 0..8 {
            row3_idx.extend_from_slice(&[6, 7, 8 + o]);
            col3_idx.extend_from_slice(&[2, 5, 8 + o]);
        }
        let opt_rows_raw = {
            let g = s.tape.gather(cells_all, 1, &row3_idx);
            let p = s.tape.permute(g, &[0, 2, 1, 3]);
            let grouped = s.tape.reshape(p, &[bsz * l, 8, 3 * d]);
            let f = self.row_mlp.forward(s, grouped);
            self.feature_ln.forward(s, f)
        };
        let opt_cols_raw = {
            let g = s.tape.gather(cells_all, 1, &col3_idx);
            let p = s.tape.permute(g, &[0, 2, 1, 3]);
            let grouped = s.tape.reshape(p, &[bsz * l, 8, 3 * d]);
            let f = self.col_mlp.forward(s, grouped);
            self.feature_ln.forward(s, f)
        };
        let opt_rows = self.respace_apply(s, opt_rows_raw);
        let opt_cols = self.respace_apply(s, opt_cols_raw);

        // Raw features feed the decorrelation loss.
        let features = {
            let cat = s.tape.concat(&[statement_raw, opt_rows_raw, opt_cols_raw], 1);
            s.tape.reshape(cat, &[bsz * l * 22, d])
        };

        // Key pool: statement rows 1-2 and columns 1-2 are shared by all
        // options; the option-specific row 3 and column 3 complete each set.
        // Key/value projections run on the 20-vector pool, then the
        // projected tokens are gathered into per-option key sets.
        let rows01 = s.tape.slice_axis(statement_features, 1, 0, 2);
        let cols01 = s.tape.slice_axis(statement_features, 1, 3, 2);
        let pool = s.tape.concat(&[rows01, cols01, opt_rows, opt_cols], 1);
        let mut key_idx = Vec::with_capacity(48);
        for o in 0..8 {
            key_idx.extend_from_slice(&[0, 1, 4 + o, 2, 3, 12 + o]);
        }
        let heads = self.cfg.heads;
        let dh = d / heads;
        let bl = bsz * l;
        let (k_pool, v_pool) = self.dec_kv.forward_tokens(s, pool);
        let mut assemble = |s: &mut Session, t: Tx| -> Tx {
            let r = s.tape.reshape(t, &[bl, 20, heads, dh]);
            let g = s.tape.gather(r, 1, &key_idx);
            let r2 = s.tape.reshape(g, &[bl, 8, 6, heads, dh]);
            let p = s.tape.permute(r2, &[0, 1, 3, 2, 4]);
            s.tape.reshape(p, &[bl * 8 * heads, 6, dh])
        };
        let kh = assemble(s, k_pool);
        let vh = assemble(s, v_pool);

        // Queries: the statement concepts, shared across the 8 options.
        let rep_idx: Vec<usize> = (0..bsz * l * 8).map(|j| j / 8).collect();
        let queries = s.tape.gather(concepts, 0, &rep_idx);

        let mut x = queries;
        for block in &self.dec_blocks {
            x = block.forward(s, x, kh, vh);
        }
        let fused = self.dec_ln.forward(s, x);

        let scored = self.head.forward(s, fused); // (B*L*8, S, 1)
        let by_problem = s.tape.reshape(scored, &[bsz, l, 8, s_tokens]);
        let per_option = s.tape.permute(by_problem, &[0, 2, 1, 3]);
        let head_outputs = s.tape.reshape(per_option, &[bsz, 8, l * s_tokens]);
        let scores = s.tape.mean_axis(head_outputs, 2);

        RpmForward {
            scores,
            head_outputs,
            qbar,
            features,
            statement_features,
            concepts,
        }
    }
}

/// Panels to (N, tokens, patch*patch) patch vectors, row-major patch grid,
/// row-major pixels within each patch.
pub fn panel_patches(panels: &[&Panel], patch: usize) -> ArrayD<f32> {
    let side = RPM_PANEL_SIDE;
    let grid = side / patch;
    let tokens = grid * grid;
    let pd = patch * patch;
    let mut out = vec![0f32; panels.len() * tokens * pd];
    for (i, p) in panels.iter().enumerate() {
        assert_eq!((p.h, p.w), (side, side), "RPM panels are {side}x{side}");
        for ty in 0..grid {
            for tx in 0..grid {
                let t = ty * grid + tx;
                let base = (i * tokens + t) * pd;
                for dy in 0..patch {
                    let row = (ty * patch + dy) * side + tx * patch;
                    for dx in 0..patch {
                        out[base + dy * patch + dx] = p.bytes[row + dx] as f32 / 255.0;
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[panels.len(), tokens, pd]), out).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_rpm, Regime, Split};

    fn build(cfg: &ModelConfig) -> (RpmModel, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = Stream::seed_from_u64(0);
        let model = RpmModel::new(cfg, &mut store, &mut rng);
        (model, store)
    }

    #[test]
    fn viewpoint_counts_follow_config() {
        let problems = gen_rpm(0, 1, Regime::Iid, Split::Train).unwrap();
        let panels: Vec<&Panel> = problems[0].context.iter().collect();

        let (model, store) = build(&ModelConfig::rpm_default());
        let mut s = Session::inference(&store);
        let tok = model.viewpoints_extract(&mut s, &panels);
        assert_eq!(s.tape.shape(tok), &[8, 16, 64]);

        // Same panel twice: identical tokens.
        let twice = [panels[0], panels[0]];
        let tok2 = model.viewpoints_extract(&mut s, &twice);
        let v = s.tape.value(tok2);
        for l in 0..16 {
            for i in 0..64 {
                assert_eq!(v[[0, l, i]].to_bits(), v[[1, l, i]].to_bits());
            }
        }

        // Pooled configuration.
        let mut cfg = ModelConfig::rpm_default();
        cfg.viewpoints = 4;
        let (model4, store4) = build(&cfg);
        let mut s4 = Session::inference(&store4);
        let tok4 = model4.viewpoints_extract(&mut s4, &panels);
        assert_eq!(s4.tape.shape(tok4), &[8, 4, 64]);
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let problems = gen_rpm(1, 3, Regime::Iid, Split::Train).unwrap();
        let refs: Vec<&MiniRpmProblem> = problems.iter().collect();
        let (model, store) = build(&ModelConfig::rpm_default());
        let mut s = Session::inference(&store);
        let fwd = model.forward(&mut s, &refs);
        assert_eq!(s.tape.shape(fwd.scores), &[3, 8]);
        assert_eq!(s.tape.shape(fwd.head_outputs), &[3, 8, 32]);
        assert_eq!(s.tape.shape(fwd.qbar), &[3, 2, 64]);
        assert_eq!(s.tape.shape(fwd.features), &[3 * 16 * 22, 64]);
        assert!(s.tape.value(fwd.scores).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn scores_average_the_head_outputs() {
        let problems = gen_rpm(2, 2, Regime::Iid, Split::Train).unwrap();
        let refs: Vec<&MiniRpmProblem> = problems.iter().collect();
        let (model, store) = build(&ModelConfig::rpm_default());
        let mut s = Session::inference(&store);
        let fwd = model.forward(&mut s, &refs);
        let heads = s.tape.value(fwd.head_outputs);
        let scores = s.tape.value(fwd.scores);
        for b in 0..2 {
            for o in 0..8 {
                let mean: f32 =
                    (0..32).map(|i| heads[[b, o, i]]).sum::<f32>() / 32.0;
                assert!((mean - scores[[b, o]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn concepts_depend_only_on_the_statement() {
        let problems = gen_rpm(3, 1, Regime::Iid, Split::Train).unwrap();
        let mut swapped = problems[0].clone();
        swapped.options.swap(0, 5);
        swapped.option_values.swap(0, 5);

        let (model, store) = build(&ModelConfig::rpm_default());
        let run = |p: &MiniRpmProblem| -> (ArrayD<f32>, ArrayD<f32>) {
            let mut s = Session::inference(&store);
            let fwd = model.forward(&mut s, &[p]);
            (
                s.tape.value(fwd.concepts).clone(),
                s.tape.value(fwd.scores).clone(),
            )
        };
        let (q_a, scores_a) = run(&problems[0]);
        let (q_b, scores_b) = run(&swapped);
        // Bit-identical concepts; permuted scores follow the options.
        for (a, b) in q_a.iter().zip(q_b.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(scores_a[[0, 0]].to_bits(), scores_b[[0, 5]].to_bits());
        assert_eq!(scores_a[[0, 5]].to_bits(), scores_b[[0, 0]].to_bits());
        for o in [1usize, 2, 3, 4, 6, 7] {
            assert_eq!(scores_a[[0, o]].to_bits(), scores_b[[0, o]].to_bits());
        }
    }

    #[test]
    fn row_feature_is_local_to_its_row() {
        let (model, store) = build(&ModelConfig::rpm_default());
        let mut s = Session::inference(&store);
        let l = 16;
        let d = 64;
        let mut cells = ArrayD::<f32>::zeros(IxDyn(&[1, 9, l, d]));
        let mut stream = Stream::seed_from_u64(7);
        cells.mapv_inplace(|_| stream.normal() as f32);
        let t1 = s.input(cells.clone());
        let f1 = model.matrix_features(&mut s, t1);
        // Change row 2 (cells 3..6) only; row 0's feature must not move.
        for c in 3..6 {
            for li in 0..l {
                for i in 0..d {
                    cells[[0, c, li, i]] += 1.0;
                }
            }
        }
        let t2 = s.input(cells);
        let f2 = model.matrix_features(&mut s, t2);
        let (v1, v2) = (s.tape.value(f1).clone(), s.tape.value(f2));
        for li in 0..l {
            for i in 0..d {
                // Feature 0 is row 0.
                assert_eq!(v1[[li, 0, i]].to_bits(), v2[[li, 0, i]].to_bits());
                // Feature 1 is row 1 and must differ somewhere; checked below.
            }
        }
        let mut row1_diff = false;
        for li in 0..l {
            for i in 0..d {
                if v1[[li, 1, i]] != v2[[li, 1, i]] {
                    row1_diff = true;
                }
            }
        }
        assert!(row1_diff);
    }

    #[test]
    fn meta_variant_has_three_concept_slots_for_two_rules() {
        let mut cfg = ModelConfig::rpm_default();
        cfg.variant = Variant::MetaTripleCfn;
        cfg.concept_tokens = 3;
        let (model, store) = build(&cfg);
        let problems = gen_rpm(4, 1, Regime::Iid, Split::Train).unwrap();
        let mut s = Session::inference(&store);
        let fwd = model.forward(&mut s, &[&problems[0]]);
        assert_eq!(s.tape.shape(fwd.qbar), &[1, 3, 64]);
        assert!(model.codebook_encoder.is_some());
    }

    #[test]
    fn respace_coordinates_and_scale_invariance() {
        let mut cfg = ModelConfig::rpm_default();
        cfg.respace = true;
        let (model, store) = build(&cfg);
        let mut s = Session::inference(&store);
        let mut stream = Stream::seed_from_u64(9);
        let k = ArrayD::from_shape_simple_fn(IxDyn(&[5, 64]), || stream.normal() as f32);
        let t1 = s.input(k.clone());
        let c1 = model.respace_apply(&mut s, t1);
        let t2 = s.input(k.mapv(|v| v * 3.7));
        let c2 = model.respace_apply(&mut s, t2);
        let (v1, v2) = (s.tape.value(c1).clone(), s.tape.value(c2));
        for (a, b) in v1.iter().zip(v2.iter()) {
            assert!((a - b).abs() < 1e-5, "scale variance {a} vs {b}");
            assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&(*a as f64)));
        }
    }
}
