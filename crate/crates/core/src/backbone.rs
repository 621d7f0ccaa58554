//! Feature extraction and spatial attention.
//!
//! A small convolutional stack downsamples the scene raster to a grid of
//! cells; each cell's channel vector is reduced to `feature_dim`, giving the
//! visual context vectors the generator and discriminator attend over.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub image_channels: usize,
    /// Cells per side of the output grid; M = grid * grid.
    pub grid: usize,
    /// Reduced per-cell feature dimension D.
    pub feature_dim: usize,
    pub conv_channels: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 64,
            image_channels: 3,
            grid: 8,
            feature_dim: 32,
            conv_channels: [8, 16, 32, 64],
        }
    }
}

impl BackboneConfig {
    pub fn cell_count(&self) -> usize {
        self.grid * self.grid
    }

    /// Stride per conv layer; the product of strides must take the image to
    /// the grid within four layers.
    fn strides(&self) -> Result<[usize; 4]> {
        if self.image_size % self.grid != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by grid {}",
                self.image_size, self.grid
            )));
        }
        let ratio = self.image_size / self.grid;
        if !ratio.is_power_of_two() || ratio > 16 {
            return Err(Error::Config(format!(
                "image/grid ratio {ratio} must be a power of two up to 16"
            )));
        }
        let halvings = ratio.trailing_zeros() as usize;
        let mut s = [1usize; 4];
        for slot in s.iter_mut().take(halvings) {
            *slot = 2;
        }
        Ok(s)
    }
}

/// Visual context vectors V: an `[m, d]` tape node plus its shape.
#[derive(Copy, Clone, Debug)]
pub struct VisualContext {
    pub features: Var,
    pub m: usize,
    pub dim: usize,
}

pub struct Backbone {
    pub config: BackboneConfig,
    conv_w: [ParamId; 4],
    conv_b: [ParamId; 4],
    reduce_w: ParamId,
    reduce_b: ParamId,
}

impl Backbone {
    /// Register backbone parameters under `prefix` (conv kernels He-style
    /// uniform, biases zero).
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: BackboneConfig,
        rng: &mut R,
    ) -> Result<Backbone> {
        config.strides()?;
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut c_in = config.image_channels;
        for (i, &c_out) in config.conv_channels.iter().enumerate() {
            let bound = (1.0 / (c_in as f64 * 9.0)).sqrt();
            conv_w.push(store.add(
                &format!("{prefix}/conv{i}/w"),
                Tensor::uniform(&[c_out, c_in, 3, 3], bound, rng),
            ));
            conv_b.push(store.add(&format!("{prefix}/conv{i}/b"), Tensor::zeros(&[1, c_out])));
            c_in = c_out;
        }
        let bound = (1.0 / c_in as f64).sqrt();
        let reduce_w = store.add(
            &format!("{prefix}/reduce/w"),
            Tensor::uniform(&[c_in, config.feature_dim], bound, rng),
        );
        let reduce_b = store.add(
            &format!("{prefix}/reduce/b"),
            Tensor::zeros(&[1, config.feature_dim]),
        );
        Ok(Backbone {
            config,
            conv_w: [conv_w[0], conv_w[1], conv_w[2], conv_w[3]],
            conv_b: [conv_b[0], conv_b[1], conv_b[2], conv_b[3]],
            reduce_w,
            reduce_b,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.conv_w.to_vec();
        ids.extend_from_slice(&self.conv_b);
        ids.push(self.reduce_w);
        ids.push(self.reduce_b);
        ids
    }

    /// Map an image `[c, h, w]` to M visual context vectors of length D.
    pub fn extract_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &Tensor,
    ) -> Result<VisualContext> {
        let want = [
            self.config.image_channels,
            self.config.image_size,
            self.config.image_size,
        ];
        if image.dims() != want {
            return Err(Error::shape(format!("{want:?}"), format!("{:?}", image.dims())));
        }
        let strides = self.config.strides()?;
        let mut x = tape.constant(image.clone());
        for i in 0..4 {
            let w = tape.param(store, self.conv_w[i]);
            let b = tape.param(store, self.conv_b[i]);
            let y = tape.conv2d(x, w, b, strides[i], 1);
            x = tape.relu(y);
        }
        let cells = tape.cells_from_chw(x);
        let rw = tape.param(store, self.reduce_w);
        let rb = tape.param(store, self.reduce_b);
        let features = tape.linear(cells, rw, rb);
        let m = tape.value(features).rows();
        debug_assert_eq!(m, self.config.cell_count());
        Ok(VisualContext { features, m, dim: self.config.feature_dim })
    }
}

/// Parameters of one additive attention head.
pub struct AttentionParams {
    pub proj_feat: ParamId,
    pub proj_query: ParamId,
    pub score: ParamId,
}

impl AttentionParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        feat_dim: usize,
        query_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> AttentionParams {
        let bf = (1.0 / feat_dim as f64).sqrt();
        let bq = (1.0 / query_dim as f64).sqrt();
        let bs = (1.0 / attn_dim as f64).sqrt();
        AttentionParams {
            proj_feat: store.add(&format!("{prefix}/att_v"), Tensor::uniform(&[feat_dim, attn_dim], bf, rng)),
            proj_query: store.add(&format!("{prefix}/att_h"), Tensor::uniform(&[query_dim, attn_dim], bq, rng)),
            score: store.add(&format!("{prefix}/att_w"), Tensor::uniform(&[1, attn_dim], bs, rng)),
        }
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.proj_feat, self.proj_query, self.score]
    }
}

/// Attention output: the context vectors and the weights that formed them.
#[derive(Copy, Clone, Debug)]
pub struct AttentionResult {
    /// `[k, d]` convex combinations of the feature vectors.
    pub context: Var,
    /// `[k, m]` softmax weights.
    pub weights: Var,
}

/// Pre-projected features for a fixed V, so per-step attention only projects
/// the query.
#[derive(Copy, Clone, Debug)]
pub struct ProjectedFeatures {
    pub raw: Var,
    pub projected: Var,
}

pub fn project_features(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    v: &VisualContext,
) -> ProjectedFeatures {
    let wv = tape.param(store, params.proj_feat);
    let projected = tape.matmul(v.features, wv);
    ProjectedFeatures { raw: v.features, projected }
}

/// Additive single-head attention: `score_m = w . tanh(Wv v_m + Wh query)`,
/// weights softmaxed over cells, context the weighted sum of raw features.
pub fn spatial_attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    query: Var,
    feats: &ProjectedFeatures,
) -> Result<AttentionResult> {
    let qdim = tape.value(query).cols();
    let want = store.tensor(params.proj_query).dims()[0];
    if qdim != want {
        return Err(Error::shape(format!("query dim {want}"), format!("{qdim}")));
    }
    let wh = tape.param(store, params.proj_query);
    let w = tape.param(store, params.score);
    let qproj = tape.matmul(query, wh);
    let scores = tape.attn_scores(feats.projected, qproj, w);
    let weights = tape.softmax_rows(scores);
    let context = tape.matmul(weights, feats.raw);
    Ok(AttentionResult { context, weights })
}

/// One-call convenience over a raw V (tests and single-step callers).
pub fn spatial_attention_over(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    query: Var,
    v: &VisualContext,
) -> Result<AttentionResult> {
    let feats = project_features(tape, store, params, v);
    spatial_attention(tape, store, params, query, &feats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            image_size: 32,
            image_channels: 3,
            grid: 4,
            feature_dim: 16,
            conv_channels: [4, 8, 8, 12],
        }
    }

    #[test]
    fn feature_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, "fen", small_config(), &mut rng).unwrap();
        let img = Tensor::randn(&[3, 32, 32], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = bb.extract_features(&mut tape, &store, &img).unwrap();
        assert_eq!(v.m, 16);
        assert_eq!(tape.value(v.features).dims(), &[16, 16]);
        assert!(tape.value(v.features).all_finite());
    }

    #[test]
    fn wrong_image_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, "fen", small_config(), &mut rng).unwrap();
        let img = Tensor::randn(&[3, 16, 16], 1.0, &mut rng);
        let mut tape = Tape::new();
        assert!(bb.extract_features(&mut tape, &store, &img).is_err());
    }

    #[test]
    fn zero_image_zero_biases_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, "fen", small_config(), &mut rng).unwrap();
        let img = Tensor::zeros(&[3, 32, 32]);
        let mut tape = Tape::new();
        let v = bb.extract_features(&mut tape, &store, &img).unwrap();
        assert!(tape.value(v.features).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn blob_translation_moves_max_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, "fen", small_config(), &mut rng).unwrap();
        // Cell size is 8 px; place a bright 4x4 blob at cell (1,1) center,
        // then shift one cell right.
        let blob_at = |cy: usize, cx: usize| -> Tensor {
            let mut img = Tensor::zeros(&[3, 32, 32]);
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        img.data_mut()[c * 32 * 32 + (cy * 8 + 2 + y) * 32 + (cx * 8 + 2 + x)] = 1.0;
                    }
                }
            }
            img
        };
        let max_cell = |img: &Tensor| -> usize {
            let mut tape = Tape::new();
            let v = bb.extract_features(&mut tape, &store, img).unwrap();
            let feats = tape.value(v.features);
            (0..v.m)
                .max_by(|&a, &b| {
                    let na: f64 = feats.row_slice(a).iter().map(|x| x * x).sum();
                    let nb: f64 = feats.row_slice(b).iter().map(|x| x * x).sum();
                    na.partial_cmp(&nb).unwrap()
                })
                .unwrap()
        };
        let c1 = max_cell(&blob_at(1, 1));
        let c2 = max_cell(&blob_at(1, 2));
        assert_eq!(c1, 4 + 1, "blob at (1,1) peaks at cell {c1}");
        assert_eq!(c2, 4 + 2, "shifted blob peaks at cell {c2}");
    }

    #[test]
    fn attention_singleton_returns_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let att = AttentionParams::register(&mut store, "att", 3, 5, 4, &mut rng);
        let mut tape = Tape::new();
        let vt = Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]);
        let features = tape.constant(vt.clone());
        let v = VisualContext { features, m: 1, dim: 3 };
        let q = tape.constant(Tensor::randn(&[1, 5], 1.0, &mut rng));
        let out = spatial_attention_over(&mut tape, &store, &att, q, &v).unwrap();
        assert_eq!(tape.value(out.weights).data(), &[1.0]);
        assert_eq!(tape.value(out.context).data(), vt.data());
    }

    #[test]
    fn attention_identical_features_returns_them() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let att = AttentionParams::register(&mut store, "att", 3, 4, 4, &mut rng);
        let mut tape = Tape::new();
        let features = tape.constant(Tensor::tile_row(&[0.5, 1.5, -0.25], 6));
        let v = VisualContext { features, m: 6, dim: 3 };
        let q = tape.constant(Tensor::randn(&[2, 4], 1.0, &mut rng));
        let out = spatial_attention_over(&mut tape, &store, &att, q, &v).unwrap();
        for k in 0..2 {
            let ctx = tape.value(out.context).row_slice(k);
            for (got, want) in ctx.iter().zip([0.5, 1.5, -0.25]) {
                assert!((got - want).abs() < 1e-12);
            }
            let wsum: f64 = tape.value(out.weights).row_slice(k).iter().sum();
            assert!((wsum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_two_by_two_hand_case() {
        // V = I2, Wv = 0.5*I2, Wh = [[0.1,0.2],[0.3,0.4]], w = [1,-1], q = [1,1].
        // scores = [tanh(.9)-tanh(.6), tanh(.4)-tanh(1.1)]; softmax frozen below.
        let mut store = ParamStore::new();
        let att = AttentionParams {
            proj_feat: store.add("att/att_v", Tensor::new(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5])),
            proj_query: store.add("att/att_h", Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4])),
            score: store.add("att/att_w", Tensor::new(vec![1, 2], vec![1.0, -1.0])),
        };
        let mut tape = Tape::new();
        let features = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let v = VisualContext { features, m: 2, dim: 2 };
        let q = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]));
        let out = spatial_attention_over(&mut tape, &store, &att, q, &v).unwrap();
        let w = tape.value(out.weights);
        assert!((w.at(0, 0) - 0.645610173435978).abs() < 1e-12, "w0 = {}", w.at(0, 0));
        assert!((w.at(0, 1) - 0.35438982656402185).abs() < 1e-12);
        let c = tape.value(out.context);
        assert!((c.at(0, 0) - 0.645610173435978).abs() < 1e-12);
        assert!((c.at(0, 1) - 0.35438982656402185).abs() < 1e-12);
    }

    #[test]
    fn attention_weights_form_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let att = AttentionParams::register(&mut store, "att", 6, 5, 4, &mut rng);
        for trial in 0..50 {
            let mut tape = Tape::new();
            let features = tape.constant(Tensor::randn(&[7, 6], 2.0, &mut rng));
            let v = VisualContext { features, m: 7, dim: 6 };
            let q = tape.constant(Tensor::randn(&[3, 5], 2.0, &mut rng));
            let out = spatial_attention_over(&mut tape, &store, &att, q, &v).unwrap();
            let w = tape.value(out.weights);
            for k in 0..3 {
                let row = w.row_slice(k);
                assert!(row.iter().all(|&x| x >= 0.0), "trial {trial}");
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn feature_and_attention_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            image_size: 8,
            image_channels: 2,
            grid: 2,
            feature_dim: 3,
            conv_channels: [2, 3, 3, 4],
        };
        let bb = Backbone::register(&mut store, "fen", cfg, &mut rng).unwrap();
        let att = AttentionParams::register(&mut store, "att", 3, 4, 3, &mut rng);
        let img = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
        let query = Tensor::randn(&[2, 4], 1.0, &mut rng);

        let build = |ps: &ParamStore, tape: &mut Tape| -> Var {
            let v = bb.extract_features(tape, ps, &img).unwrap();
            let q = tape.constant(query.clone());
            let out = spatial_attention_over(tape, ps, &att, q, &v).unwrap();
            let sq = tape.mul(out.context, out.context);
            tape.sum_all(sq)
        };

        let mut tape = Tape::new();
        let root = build(&store, &mut tape);
        let grads = tape.backward(root);
        let mut acc = store.zeros_like();
        grads.accumulate_params(&tape, &mut acc, 1.0);

        let ids: Vec<_> = store.ids().collect();
        let err = gradcheck::max_rel_error(&store, &acc, &ids, 1e-6, |ps| {
            let mut t = Tape::new();
            let r = build(ps, &mut t);
            t.value(r).scalar_value()
        });
        assert!(err < 1e-4, "rel err {err}");
    }
}
