//! Autoregressive path generation.
//!
//! Two coupled recurrences roll out a path position by position: one LSTM
//! tracks the positions, a second estimates the per-position local intention
//! feeding back into the first. Spatial attention over the visual context
//! vectors grounds every step in the scene. Four architecture variants cover
//! the ablation grid: no intention pathway at all, intentions read directly
//! off the context vector, a shared attention context for both recurrences,
//! and split attention contexts.

use crate::action::{Action, ACTION_COUNT};
use crate::backbone::{
    project_features, spatial_attention, AttentionParams, ProjectedFeatures, VisualContext,
};
use crate::error::{Error, Result};
use crate::nn::{LinearParams, LstmParams, LstmState};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum GeneratorVariant {
    /// No intention recurrence; the global intention feeds every step.
    NoLocalIntent,
    /// Local intentions read from the previous context vector by an FFN.
    DirectContext,
    /// One attention context shared by the position and intention pathways.
    SharedAttention,
    /// Separate attention contexts for positions and intentions.
    SplitAttention,
}

impl GeneratorVariant {
    pub fn has_intent_recurrence(self) -> bool {
        matches!(self, GeneratorVariant::SharedAttention | GeneratorVariant::SplitAttention)
    }

    pub fn has_intent_pathway(self) -> bool {
        self != GeneratorVariant::NoLocalIntent
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub variant: GeneratorVariant,
    pub hidden_dim: usize,
    pub noise_dim: usize,
    pub path_len: usize,
    pub feature_dim: usize,
    pub attn_dim: usize,
    pub embed_dim: usize,
    /// Ablation/debug switch: substitute the one-hot global intention for the
    /// estimated local intention when forming position inputs.
    pub force_intent_to_global: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            variant: GeneratorVariant::SharedAttention,
            hidden_dim: 64,
            noise_dim: 32,
            path_len: crate::geometry::DEFAULT_PATH_LEN,
            feature_dim: 32,
            attn_dim: 32,
            embed_dim: 64,
            force_intent_to_global: false,
        }
    }
}

struct IntentPathway {
    embed: LinearParams,
    lstm: LstmParams,
    out: LinearParams,
}

struct DirectPathway {
    hidden: LinearParams,
    out: LinearParams,
}

pub struct Generator {
    pub config: GeneratorConfig,
    init_intent: LinearParams,
    init_hidden: LinearParams,
    embed_pos: LinearParams,
    lstm_pos: LstmParams,
    att_pos: AttentionParams,
    out_hidden: LinearParams,
    out_pos: LinearParams,
    intent: Option<IntentPathway>,
    direct: Option<DirectPathway>,
    att_intent: Option<AttentionParams>,
}

/// Recurrent rollout state between steps.
pub struct GeneratorState {
    pub path_state: LstmState,
    pub intent_state: Option<LstmState>,
    /// `[k, 2]` previous position (p_0 = [s, s]).
    pub last_pos: Var,
    /// `[k, 9]` previous intention vector (one-hot at step 0, raw logits after).
    pub last_intent: Var,
    /// `[k, d]` previous position-attention context.
    pub last_context: Var,
    /// `[k, d]` previous intention-side context (equals `last_context` unless
    /// the split variant computes its own).
    pub last_intent_context: Var,
    pub z: Var,
    pub step: usize,
}

/// Values extracted from one rolled-out path.
#[derive(Clone, Debug)]
pub struct GeneratedPath {
    pub positions: Vec<[f64; 2]>,
    pub intent_logits: Vec<[f64; ACTION_COUNT]>,
    /// Attention weights per step (L rows of M cells).
    pub attention: Vec<Vec<f64>>,
}

/// Tape handles for a batch of K simultaneous rollouts.
pub struct Rollout {
    pub k: usize,
    /// L entries of `[k, 2]` positions.
    pub positions: Vec<Var>,
    /// L entries of `[k, 9]` intention logits (one-hot rows for variants
    /// without an intention pathway).
    pub intent_logits: Vec<Var>,
    /// L entries of `[k, m]` attention weights.
    pub attention: Vec<Var>,
}

impl Generator {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: GeneratorConfig,
        rng: &mut R,
    ) -> Generator {
        let h = config.hidden_dim;
        let e = config.embed_dim;
        let d = config.feature_dim;
        let init_intent = LinearParams::register(store, &format!("{prefix}/init_a"), ACTION_COUNT, e, rng);
        let init_hidden =
            LinearParams::register(store, &format!("{prefix}/init_h"), e + config.noise_dim, h, rng);
        let embed_pos = LinearParams::register(store, &format!("{prefix}/embed_p"), 2 + ACTION_COUNT, e, rng);
        let lstm_pos = LstmParams::register(store, &format!("{prefix}/lstm_p"), e, h, rng);
        let att_pos = AttentionParams::register(store, &format!("{prefix}/att_p"), d, h, config.attn_dim, rng);
        let out_hidden = LinearParams::register(store, &format!("{prefix}/out_h"), d + h, e, rng);
        let out_pos = LinearParams::register(store, &format!("{prefix}/out_p"), e, 2, rng);
        let intent = config.variant.has_intent_recurrence().then(|| IntentPathway {
            embed: LinearParams::register(
                store,
                &format!("{prefix}/embed_a"),
                ACTION_COUNT + 2 + h + d,
                e,
                rng,
            ),
            lstm: LstmParams::register(store, &format!("{prefix}/lstm_a"), e, h, rng),
            out: LinearParams::register(store, &format!("{prefix}/out_a"), h, ACTION_COUNT, rng),
        });
        let direct = (config.variant == GeneratorVariant::DirectContext).then(|| DirectPathway {
            hidden: LinearParams::register(store, &format!("{prefix}/direct_h"), d, e, rng),
            out: LinearParams::register(store, &format!("{prefix}/direct_a"), e, ACTION_COUNT, rng),
        });
        let att_intent = (config.variant == GeneratorVariant::SplitAttention).then(|| {
            AttentionParams::register(store, &format!("{prefix}/att_a"), d, h, config.attn_dim, rng)
        });
        Generator {
            config,
            init_intent,
            init_hidden,
            embed_pos,
            lstm_pos,
            att_pos,
            out_hidden,
            out_pos,
            intent,
            direct,
            att_intent,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for lin in [&self.init_intent, &self.init_hidden, &self.embed_pos, &self.out_hidden, &self.out_pos] {
            ids.extend_from_slice(&lin.ids());
        }
        ids.extend_from_slice(&self.lstm_pos.ids());
        ids.extend_from_slice(&self.att_pos.ids());
        if let Some(ip) = &self.intent {
            ids.extend_from_slice(&ip.embed.ids());
            ids.extend_from_slice(&ip.lstm.ids());
            ids.extend_from_slice(&ip.out.ids());
        }
        if let Some(dp) = &self.direct {
            ids.extend_from_slice(&dp.hidden.ids());
            ids.extend_from_slice(&dp.out.ids());
        }
        if let Some(att) = &self.att_intent {
            ids.extend_from_slice(&att.ids());
        }
        ids
    }

    /// Initialize the rollout state for K parallel samples: the path hidden
    /// state comes from the embedded intention and noise, p_0 = [s, s], the
    /// intention recurrence starts at zero, and c_0 is attention queried with
    /// the initial hidden state.
    #[allow(clippy::too_many_arguments)]
    pub fn init_state(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a: Action,
        speed: f64,
        z: Tensor,
        feats: &ProjectedFeatures,
        intent_feats: Option<&ProjectedFeatures>,
    ) -> Result<GeneratorState> {
        if !(speed.is_finite() && speed > 0.0) {
            return Err(Error::invalid(format!("speed must be positive, got {speed}")));
        }
        if z.dims().len() != 2 || z.dims()[1] != self.config.noise_dim {
            return Err(Error::shape(
                format!("[k, {}] noise", self.config.noise_dim),
                format!("{:?}", z.dims()),
            ));
        }
        if !z.all_finite() {
            return Err(Error::invalid("non-finite noise"));
        }
        let k = z.dims()[0];
        let one_hot = a.one_hot();
        let a_bar = tape.constant(Tensor::tile_row(&one_hot, k));
        let zv = tape.input(z);
        let emb = self.init_intent.apply_relu(tape, store, a_bar);
        let cat = tape.concat_cols(&[emb, zv]);
        let h0 = self.init_hidden.apply_relu(tape, store, cat);
        let path_state = self.lstm_pos.state_from_hidden(tape, h0);
        let intent_state = self
            .intent
            .as_ref()
            .map(|ip| ip.lstm.zero_state(tape, k));
        let last_pos = tape.constant(Tensor::tile_row(&[speed, speed], k));
        let att0 = spatial_attention(tape, store, &self.att_pos, h0, feats)?;
        let last_intent_context = match (&self.att_intent, intent_feats) {
            (Some(att), Some(feats_a)) => {
                spatial_attention(tape, store, att, h0, feats_a)?.context
            }
            _ => att0.context,
        };
        Ok(GeneratorState {
            path_state,
            intent_state,
            last_pos,
            last_intent: a_bar,
            last_context: att0.context,
            last_intent_context,
            z: zv,
            step: 0,
        })
    }

    /// Estimate the local intention for the upcoming position from the
    /// previous step's quantities. Errors for the variant without an
    /// intention pathway.
    pub fn intention_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: &mut GeneratorState,
    ) -> Result<Var> {
        match self.config.variant {
            GeneratorVariant::NoLocalIntent => Err(Error::Contract(
                "intention_step on a generator without an intention pathway".into(),
            )),
            GeneratorVariant::DirectContext => {
                let dp = self.direct.as_ref().expect("direct pathway");
                let hidden = dp.hidden.apply_relu(tape, store, state.last_intent_context);
                Ok(dp.out.apply(tape, store, hidden))
            }
            GeneratorVariant::SharedAttention | GeneratorVariant::SplitAttention => {
                let ip = self.intent.as_ref().expect("intent pathway");
                let cat = tape.concat_cols(&[
                    state.last_intent,
                    state.last_pos,
                    state.path_state.h,
                    state.last_intent_context,
                ]);
                let e = ip.embed.apply_relu(tape, store, cat);
                let st = ip.lstm.step(tape, store, e, state.intent_state.expect("state"));
                state.intent_state = Some(st);
                Ok(ip.out.apply(tape, store, st.h))
            }
        }
    }

    /// Advance the position recurrence one step using the intention vector,
    /// attend over the features, and emit the next position.
    pub fn position_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: &mut GeneratorState,
        intent_vec: Var,
        feats: &ProjectedFeatures,
        intent_feats: Option<&ProjectedFeatures>,
    ) -> Result<(Var, Var)> {
        let cat = tape.concat_cols(&[state.last_pos, intent_vec]);
        let e = self.embed_pos.apply_relu(tape, store, cat);
        let st = self.lstm_pos.step(tape, store, e, state.path_state);
        state.path_state = st;
        let att = spatial_attention(tape, store, &self.att_pos, st.h, feats)?;
        let head_in = tape.concat_cols(&[att.context, st.h]);
        let hidden = self.out_hidden.apply_relu(tape, store, head_in);
        let pos = self.out_pos.apply(tape, store, hidden);
        state.last_intent_context = match (&self.att_intent, intent_feats) {
            (Some(split), Some(feats_a)) => {
                spatial_attention(tape, store, split, st.h, feats_a)?.context
            }
            _ => att.context,
        };
        state.last_context = att.context;
        state.last_pos = pos;
        state.last_intent = intent_vec;
        state.step += 1;
        Ok((pos, att.weights))
    }

    /// Roll out K paths on the tape; `z` is `[k, noise_dim]`.
    pub fn rollout(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        v: &VisualContext,
        a: Action,
        speed: f64,
        z: Tensor,
    ) -> Result<Rollout> {
        let k = z.dims()[0];
        let feats = project_features(tape, store, &self.att_pos, v);
        let intent_feats = self
            .att_intent
            .as_ref()
            .map(|att| project_features(tape, store, att, v));
        let mut state =
            self.init_state(tape, store, a, speed, z, &feats, intent_feats.as_ref())?;
        let a_bar_row = Tensor::tile_row(&a.one_hot(), k);
        let mut positions = Vec::with_capacity(self.config.path_len);
        let mut logits = Vec::with_capacity(self.config.path_len);
        let mut attention = Vec::with_capacity(self.config.path_len);
        for _ in 0..self.config.path_len {
            let intent_vec = if !self.config.variant.has_intent_pathway()
                || self.config.force_intent_to_global
            {
                tape.constant(a_bar_row.clone())
            } else {
                self.intention_step(tape, store, &mut state)?
            };
            let (pos, attw) =
                self.position_step(tape, store, &mut state, intent_vec, &feats, intent_feats.as_ref())?;
            positions.push(pos);
            logits.push(intent_vec);
            attention.push(attw);
        }
        Ok(Rollout { k, positions, intent_logits: logits, attention })
    }

    /// Generate K paths for fixed visual context values, drawing K standard
    /// normal noise vectors from `rng`. Runs on a gradient-free tape.
    pub fn generate<R: Rng>(
        &self,
        store: &ParamStore,
        v_values: &Tensor,
        a: Action,
        speed: f64,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<GeneratedPath>> {
        if k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        let mut tape = Tape::no_grad();
        let features = tape.constant(v_values.clone());
        let v = VisualContext {
            features,
            m: v_values.rows(),
            dim: v_values.cols(),
        };
        let mut z = Tensor::zeros(&[k, self.config.noise_dim]);
        for x in z.data_mut() {
            *x = rng.sample::<f64, _>(StandardNormal);
        }
        let rollout = self.rollout(&mut tape, store, &v, a, speed, z)?;
        Ok(extract_paths(&tape, &rollout))
    }
}

/// Copy rollout values off the tape, one `GeneratedPath` per sample.
pub fn extract_paths(tape: &Tape, rollout: &Rollout) -> Vec<GeneratedPath> {
    let l = rollout.positions.len();
    (0..rollout.k)
        .map(|ki| {
            let mut positions = Vec::with_capacity(l);
            let mut logits = Vec::with_capacity(l);
            let mut attention = Vec::with_capacity(l);
            for s in 0..l {
                let p = tape.value(rollout.positions[s]);
                positions.push([p.at(ki, 0), p.at(ki, 1)]);
                let lg = tape.value(rollout.intent_logits[s]);
                let mut row = [0.0; ACTION_COUNT];
                row.copy_from_slice(lg.row_slice(ki));
                logits.push(row);
                attention.push(tape.value(rollout.attention[s]).row_slice(ki).to_vec());
            }
            GeneratedPath { positions, intent_logits: logits, attention }
        })
        .collect()
}

impl GeneratedPath {
    pub fn to_path(&self) -> crate::geometry::Path {
        crate::geometry::Path::new(self.positions.clone()).expect("finite generated positions")
    }
}
