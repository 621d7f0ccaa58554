//! Discrimination networks: path realism + intention classification over one
//! recurrence, and sequential local-intention realism over a second.
//!
//! Path realism is a function of the positions alone; the classification head
//! fuses the same hidden states with attention contexts over the visual
//! features, so only the class logits see the scene.

use crate::action::ACTION_COUNT;
use crate::backbone::{project_features, spatial_attention, AttentionParams, VisualContext};
use crate::error::{Error, Result};
use crate::nn::{LinearParams, LstmParams};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub path_hidden: usize,
    pub intent_hidden: usize,
    pub feature_dim: usize,
    pub attn_dim: usize,
    pub embed_dim: usize,
    pub path_len: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            path_hidden: 64,
            intent_hidden: 32,
            feature_dim: 32,
            attn_dim: 32,
            embed_dim: 64,
            path_len: crate::geometry::DEFAULT_PATH_LEN,
        }
    }
}

pub struct Discriminator {
    pub config: DiscriminatorConfig,
    embed_pos: LinearParams,
    lstm_path: LstmParams,
    att: AttentionParams,
    score_head: LinearParams,
    cls_embed: LinearParams,
    cls_head: LinearParams,
    embed_intent: LinearParams,
    lstm_intent: LstmParams,
    intent_head: LinearParams,
}

/// Path-stream outputs: realism score in [0,1] and intention class logits.
#[derive(Copy, Clone, Debug)]
pub struct DiscriminatorOutput {
    pub realism: Var,
    pub class_logits: Var,
}

/// Realism score of a local-intention sequence, in [0,1].
#[derive(Copy, Clone, Debug)]
pub struct SequenceScore {
    pub realism: Var,
}

impl Discriminator {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: DiscriminatorConfig,
        rng: &mut R,
    ) -> Discriminator {
        let e = config.embed_dim;
        Discriminator {
            config: config.clone(),
            embed_pos: LinearParams::register(store, &format!("{prefix}/embed_p"), 2, e, rng),
            lstm_path: LstmParams::register(store, &format!("{prefix}/lstm_d1"), e, config.path_hidden, rng),
            att: AttentionParams::register(
                store,
                &format!("{prefix}/att_d"),
                config.feature_dim,
                config.path_hidden,
                config.attn_dim,
                rng,
            ),
            score_head: LinearParams::register(store, &format!("{prefix}/scr1"), config.path_hidden, 1, rng),
            cls_embed: LinearParams::register(
                store,
                &format!("{prefix}/cls_embed"),
                config.path_hidden + config.feature_dim,
                e,
                rng,
            ),
            cls_head: LinearParams::register(store, &format!("{prefix}/cls"), e, ACTION_COUNT, rng),
            embed_intent: LinearParams::register(store, &format!("{prefix}/embed_a"), ACTION_COUNT, e, rng),
            lstm_intent: LstmParams::register(store, &format!("{prefix}/lstm_d2"), e, config.intent_hidden, rng),
            intent_head: LinearParams::register(store, &format!("{prefix}/scr2"), config.intent_hidden, 1, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for lin in [
            &self.embed_pos,
            &self.score_head,
            &self.cls_embed,
            &self.cls_head,
            &self.embed_intent,
            &self.intent_head,
        ] {
            ids.extend_from_slice(&lin.ids());
        }
        ids.extend_from_slice(&self.lstm_path.ids());
        ids.extend_from_slice(&self.lstm_intent.ids());
        ids.extend_from_slice(&self.att.ids());
        ids
    }

    /// Score a batch of paths given as L step vars of `[k, 2]`. The realism
    /// output is computed from positions only; the class logits additionally
    /// attend over `v`.
    pub fn score_path(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        positions: &[Var],
        v: &VisualContext,
    ) -> Result<DiscriminatorOutput> {
        if positions.len() != self.config.path_len {
            return Err(Error::shape(
                format!("{} steps", self.config.path_len),
                format!("{}", positions.len()),
            ));
        }
        let k = tape.value(positions[0]).rows();
        let feats = project_features(tape, store, &self.att, v);
        let mut state = self.lstm_path.zero_state(tape, k);
        let mut hidden_sum: Option<Var> = None;
        let mut fused_sum: Option<Var> = None;
        for &p in positions {
            let e = self.embed_pos.apply_relu(tape, store, p);
            state = self.lstm_path.step(tape, store, e, state);
            hidden_sum = Some(match hidden_sum {
                None => state.h,
                Some(acc) => tape.add(acc, state.h),
            });
            let att = spatial_attention(tape, store, &self.att, state.h, &feats)?;
            let cat = tape.concat_cols(&[state.h, att.context]);
            let fused = self.cls_embed.apply_relu(tape, store, cat);
            fused_sum = Some(match fused_sum {
                None => fused,
                Some(acc) => tape.add(acc, fused),
            });
        }
        let hsum = hidden_sum.expect("at least one step");
        let scr = self.score_head.apply(tape, store, hsum);
        let realism = tape.sigmoid(scr);
        let class_logits = self.cls_head.apply(tape, store, fused_sum.expect("steps"));
        Ok(DiscriminatorOutput { realism, class_logits })
    }

    /// Score a local-intention sequence (L step vars of `[k, 9]`); rows may be
    /// exact one-hots (real sequences) or soft vectors (generated ones).
    pub fn score_intentions(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        intents: &[Var],
    ) -> Result<SequenceScore> {
        if intents.len() != self.config.path_len {
            return Err(Error::shape(
                format!("{} steps", self.config.path_len),
                format!("{}", intents.len()),
            ));
        }
        let k = tape.value(intents[0]).rows();
        let mut state = self.lstm_intent.zero_state(tape, k);
        for &a in intents {
            if tape.value(a).cols() != ACTION_COUNT {
                return Err(Error::shape(
                    format!("[k, {ACTION_COUNT}] intention vectors"),
                    format!("{:?}", tape.value(a).dims()),
                ));
            }
            let e = self.embed_intent.apply_relu(tape, store, a);
            state = self.lstm_intent.step(tape, store, e, state);
        }
        let s = self.intent_head.apply(tape, store, state.h);
        let realism = tape.sigmoid(s);
        Ok(SequenceScore { realism })
    }
}

/// Lift a concrete path into per-step single-row constants.
pub fn path_step_vars(tape: &mut Tape, path: &crate::geometry::Path) -> Vec<Var> {
    path.positions()
        .iter()
        .map(|p| tape.constant(Tensor::row(&[p[0], p[1]])))
        .collect()
}

/// Lift a concrete action sequence into per-step one-hot row constants.
pub fn intent_step_vars(tape: &mut Tape, labels: &[crate::action::Action]) -> Vec<Var> {
    labels
        .iter()
        .map(|a| tape.constant(Tensor::row(&a.one_hot())))
        .collect()
}
