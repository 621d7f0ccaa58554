//! Two-stage training: deterministic single-path pretraining that seeds the
//! feature extractor, then alternating adversarial updates of the generator
//! (plus feature extractor) against the discriminator pair.

use crate::action::Action;
use crate::backbone::{Backbone, BackboneConfig, VisualContext};
use crate::checkpoint;
use crate::discriminator::{intent_step_vars, path_step_vars, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::evaluation::{sample_metrics, MetricReport, SampleMetrics};
use crate::generator::{Generator, GeneratorConfig, GeneratorVariant};
use crate::geometry::Path;
use crate::losses::{
    adversarial_loss, global_classification_loss, local_classification_loss, variety_loss,
    GanRole, LossBundle, LossWeights,
};
use crate::params::{ParamId, ParamStore};
use crate::scenes::{select_global_intention, Dataset, IntentionMode, Sample, Split};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::path::Path as FsPath;

/// Ablation stages; later stages add loss terms and architecture pieces.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AblationId {
    /// Variety loss only.
    P1,
    /// + path discriminator and global classification.
    P2,
    /// + interaction model, intentions read directly from the context vector.
    P3A,
    /// + interaction model with a shared attention context.
    P3B,
    /// + interaction model with split attention contexts.
    P3C,
    /// P3-B + the sequential local-intention discriminator.
    P4,
}

impl AblationId {
    pub fn parse(s: &str) -> Result<AblationId> {
        match s.to_ascii_uppercase().as_str() {
            "P1" => Ok(AblationId::P1),
            "P2" => Ok(AblationId::P2),
            "P3-A" | "P3A" => Ok(AblationId::P3A),
            "P3-B" | "P3B" | "P3" => Ok(AblationId::P3B),
            "P3-C" | "P3C" => Ok(AblationId::P3C),
            "P4" => Ok(AblationId::P4),
            other => Err(Error::Config(format!("unknown ablation id '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationId::P1 => "P1",
            AblationId::P2 => "P2",
            AblationId::P3A => "P3-A",
            AblationId::P3B => "P3-B",
            AblationId::P3C => "P3-C",
            AblationId::P4 => "P4",
        }
    }

    pub fn generator_variant(self) -> GeneratorVariant {
        match self {
            AblationId::P1 | AblationId::P2 => GeneratorVariant::NoLocalIntent,
            AblationId::P3A => GeneratorVariant::DirectContext,
            AblationId::P3B | AblationId::P4 => GeneratorVariant::SharedAttention,
            AblationId::P3C => GeneratorVariant::SplitAttention,
        }
    }

    pub fn uses_path_discriminator(self) -> bool {
        self != AblationId::P1
    }

    pub fn uses_local_classification(self) -> bool {
        matches!(self, AblationId::P3A | AblationId::P3B | AblationId::P3C | AblationId::P4)
    }

    pub fn uses_sequence_discriminator(self) -> bool {
        self == AblationId::P4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub ablation: AblationId,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_main: f64,
    pub lr_fen: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Leading local labels considered for the global intention.
    pub f: usize,
    /// Rollouts per sample for the variety loss.
    pub k_train: usize,
    /// Use the literal saturating generator objective instead of the
    /// non-saturating default.
    pub saturating_gan: bool,
    /// Fraction of the training split held out for divergence detection.
    pub val_fraction: f64,
    /// Rollouts per sample for the per-epoch validation metrics.
    pub val_k: usize,
    /// Optional cap on optimizer iterations.
    pub max_steps: Option<usize>,
    /// Stop once train-subset minADE(K=20) falls below this value; checked
    /// every `check_every` steps.
    pub stop_at_train_min_ade: Option<f64>,
    pub check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ablation: AblationId::P4,
            batch_size: 16,
            epochs: 10,
            lr_main: 1e-4,
            lr_fen: 5e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 1,
            f: 5,
            k_train: 20,
            saturating_gan: false,
            val_fraction: 0.1,
            val_k: 6,
            max_steps: None,
            stop_at_train_min_ade: None,
            check_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone.feature_dim != self.generator.feature_dim
            || self.backbone.feature_dim != self.discriminator.feature_dim
        {
            return Err(Error::Config("feature_dim mismatch across networks".into()));
        }
        if self.generator.path_len != self.discriminator.path_len {
            return Err(Error::Config("path_len mismatch across networks".into()));
        }
        Ok(())
    }

    fn to_meta(&self) -> Vec<(String, String)> {
        let g = &self.generator;
        let b = &self.backbone;
        let d = &self.discriminator;
        let variant = match g.variant {
            GeneratorVariant::NoLocalIntent => "no_li",
            GeneratorVariant::DirectContext => "direct",
            GeneratorVariant::SharedAttention => "shared",
            GeneratorVariant::SplitAttention => "split",
        };
        vec![
            ("variant".into(), variant.into()),
            ("hidden".into(), g.hidden_dim.to_string()),
            ("noise".into(), g.noise_dim.to_string()),
            ("path_len".into(), g.path_len.to_string()),
            ("feature_dim".into(), g.feature_dim.to_string()),
            ("attn_dim".into(), g.attn_dim.to_string()),
            ("embed_dim".into(), g.embed_dim.to_string()),
            ("image_size".into(), b.image_size.to_string()),
            ("image_channels".into(), b.image_channels.to_string()),
            ("grid".into(), b.grid.to_string()),
            (
                "conv_channels".into(),
                b.conv_channels.map(|c| c.to_string()).join(" "),
            ),
            ("disc_path_hidden".into(), d.path_hidden.to_string()),
            ("disc_intent_hidden".into(), d.intent_hidden.to_string()),
            ("disc_embed_dim".into(), d.embed_dim.to_string()),
        ]
    }

    fn from_meta(meta: &[(String, String)]) -> Result<ModelConfig> {
        let get = |k: &str| -> Result<&str> {
            meta.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing meta key '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad meta '{k}'")))
        };
        let variant = match get("variant")? {
            "no_li" => GeneratorVariant::NoLocalIntent,
            "direct" => GeneratorVariant::DirectContext,
            "shared" => GeneratorVariant::SharedAttention,
            "split" => GeneratorVariant::SplitAttention,
            other => return Err(Error::Checkpoint(format!("bad variant '{other}'"))),
        };
        let conv: Vec<usize> = get("conv_channels")?
            .split(' ')
            .map(|c| c.parse().map_err(|_| Error::Checkpoint("bad conv_channels".into())))
            .collect::<Result<_>>()?;
        if conv.len() != 4 {
            return Err(Error::Checkpoint("conv_channels must have 4 entries".into()));
        }
        let feature_dim = num("feature_dim")?;
        let path_len = num("path_len")?;
        let attn_dim = num("attn_dim")?;
        Ok(ModelConfig {
            backbone: BackboneConfig {
                image_size: num("image_size")?,
                image_channels: num("image_channels")?,
                grid: num("grid")?,
                feature_dim,
                conv_channels: [conv[0], conv[1], conv[2], conv[3]],
            },
            generator: GeneratorConfig {
                variant,
                hidden_dim: num("hidden")?,
                noise_dim: num("noise")?,
                path_len,
                feature_dim,
                attn_dim,
                embed_dim: num("embed_dim")?,
                force_intent_to_global: false,
            },
            discriminator: DiscriminatorConfig {
                path_hidden: num("disc_path_hidden")?,
                intent_hidden: num("disc_intent_hidden")?,
                feature_dim,
                attn_dim,
                embed_dim: num("disc_embed_dim")?,
                path_len,
            },
        })
    }
}

/// The full parameter set: feature extractor, generator, discriminator.
pub struct Model {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::register(&mut store, "fen", config.backbone.clone(), &mut rng)?;
        let generator = Generator::register(&mut store, "gen", config.generator.clone(), &mut rng);
        let discriminator =
            Discriminator::register(&mut store, "disc", config.discriminator.clone(), &mut rng);
        Ok(Model { store, backbone, generator, discriminator, config })
    }

    /// Visual context values for an image on a gradient-free tape.
    pub fn features_for(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let v = self.backbone.extract_features(&mut tape, &self.store, image)?;
        Ok(tape.value(v.features).clone())
    }

    pub fn generate<R: Rng>(
        &self,
        image: &Tensor,
        a: Action,
        speed: f64,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<crate::generator::GeneratedPath>> {
        let v = self.features_for(image)?;
        self.generator.generate(&self.store, &v, a, speed, k, rng)
    }

    pub fn save(&self, path: &FsPath, extra_meta: &[(String, String)]) -> Result<()> {
        let mut meta = self.config.to_meta();
        meta.extend_from_slice(extra_meta);
        checkpoint::save(path, &self.store, &meta)
    }

    pub fn load(path: &FsPath) -> Result<(Model, Vec<(String, String)>)> {
        let (loaded, meta) = checkpoint::load(path)?;
        let config = ModelConfig::from_meta(&meta)?;
        let mut model = Model::new(config, 0)?;
        let copied = model.store.copy_matching_from(&loaded);
        if copied != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint covers {copied} of {} parameters",
                model.store.len()
            )));
        }
        Ok((model, meta))
    }

    pub fn fen_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("fen/").collect()
    }

    pub fn gen_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("gen/").collect()
    }

    pub fn disc_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("disc/").collect()
    }
}

/// Adam over a subset of parameters; one shared step counter per instance.
pub struct Adam {
    m: ParamStore,
    v: ParamStore,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Adam {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    /// One update over the listed groups, each with its own learning rate.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, groups: &[(&[ParamId], f64)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (ids, lr) in groups {
            for &id in ids.iter() {
                let g = grads.tensor(id).data();
                let m = self.m.tensor_mut(id).data_mut();
                for (mi, gi) in m.iter_mut().zip(g) {
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                }
                let v = self.v.tensor_mut(id).data_mut();
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                }
                let m = self.m.tensor(id).data();
                let v = self.v.tensor(id).data();
                let p = params.tensor_mut(id).data_mut();
                for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pi -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}

/// One training example as fed to a step: image, ground truth, drawn global
/// intention, labels, speed.
#[derive(Clone)]
pub struct BatchItem {
    pub image: Tensor,
    pub path: Path,
    pub a: Action,
    pub labels: Vec<Action>,
    pub speed: f64,
    /// Seed for this item's noise draws.
    pub z_seed: u64,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(dims);
    for x in t.data_mut() {
        *x = rng.sample::<f64, _>(StandardNormal);
    }
    t
}

/// Per-epoch summary written to the training report.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub losses: LossBundle,
    pub val_min_ade: f64,
    pub val_min_fde: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    pub wall_seconds: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "epoch,variety,adv_path,adv_seq,cls_global,cls_local,total_g,total_d,val_min_ade,val_min_fde\n",
        );
        for e in &self.epochs {
            let l = &e.losses;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                l.variety,
                l.adv_path,
                l.adv_seq,
                l.cls_global,
                l.cls_local,
                l.total_g,
                l.total_d,
                e.val_min_ade,
                e.val_min_fde
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let last = self.epochs.last();
        format!(
            "steps={} wall={:.1}s early_stop={} final_val_min_ade={}\n",
            self.steps,
            self.wall_seconds,
            self.stopped_early,
            last.map_or(f64::NAN, |e| e.val_min_ade)
        )
    }
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    g_opt: Adam,
    d_opt: Adam,
    gen_ids: Vec<ParamId>,
    fen_ids: Vec<ParamId>,
    disc_ids: Vec<ParamId>,
}

/// Per-sample forward result on the generator side.
struct GSampleOut {
    grads: ParamStore,
    variety: f64,
    adv_path: f64,
    adv_seq: f64,
    cls_global: f64,
    cls_local: f64,
    total: f64,
}

struct DSampleOut {
    grads: ParamStore,
    adv_path: f64,
    adv_seq: f64,
    cls_global: f64,
    total: f64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Trainer {
        let g_opt = Adam::new(&model.store, &cfg);
        let d_opt = Adam::new(&model.store, &cfg);
        let gen_ids = model.gen_ids();
        let fen_ids = model.fen_ids();
        let disc_ids = model.disc_ids();
        Trainer {
            model,
            cfg,
            weights: LossWeights::default(),
            g_opt,
            d_opt,
            gen_ids,
            fen_ids,
            disc_ids,
        }
    }

    /// One discriminator update over a batch. Fake paths come from gradient-
    /// free rollouts; the visual context enters as a constant so no gradient
    /// reaches the feature extractor from the discriminator objective.
    pub fn discriminator_step(&mut self, batch: &[BatchItem]) -> Result<LossBundle> {
        let model = &self.model;
        let cfg = &self.cfg;
        let weights = &self.weights;
        let outs: Vec<Result<DSampleOut>> = batch
            .par_iter()
            .map(|item| d_sample_pass(model, cfg, weights, item))
            .collect();
        let mut grads = self.model.store.zeros_like();
        let mut bundle = LossBundle::default();
        let scale = 1.0 / batch.len() as f64;
        for out in outs {
            let out = out?;
            for id in self.disc_ids.iter() {
                grads.tensor_mut(*id).add_scaled(out.grads.tensor(*id), scale);
            }
            bundle.adv_path += out.adv_path * scale;
            bundle.adv_seq += out.adv_seq * scale;
            bundle.cls_global += out.cls_global * scale;
            bundle.total_d += out.total * scale;
        }
        if !bundle.total_d.is_finite() {
            return Err(Error::TrainingAbort(format!("discriminator loss {bundle:?}")));
        }
        self.d_opt.step(
            &mut self.model.store,
            &grads,
            &[(&self.disc_ids, self.cfg.lr_main)],
        );
        if !self.model.store.all_finite() {
            return Err(Error::TrainingAbort("non-finite discriminator parameter".into()));
        }
        Ok(bundle)
    }

    /// One generator (+ feature extractor) update over a batch.
    pub fn generator_step(&mut self, batch: &[BatchItem]) -> Result<LossBundle> {
        let model = &self.model;
        let cfg = &self.cfg;
        let weights = &self.weights;
        let outs: Vec<Result<GSampleOut>> = batch
            .par_iter()
            .map(|item| g_sample_pass(model, cfg, weights, item))
            .collect();
        let mut grads = self.model.store.zeros_like();
        let mut bundle = LossBundle::default();
        let scale = 1.0 / batch.len() as f64;
        for out in outs {
            let out = out?;
            for id in self.gen_ids.iter().chain(self.fen_ids.iter()) {
                grads.tensor_mut(*id).add_scaled(out.grads.tensor(*id), scale);
            }
            bundle.variety += out.variety * scale;
            bundle.adv_path += out.adv_path * scale;
            bundle.adv_seq += out.adv_seq * scale;
            bundle.cls_global += out.cls_global * scale;
            bundle.cls_local += out.cls_local * scale;
            bundle.total_g += out.total * scale;
        }
        if !bundle.total_g.is_finite() {
            return Err(Error::TrainingAbort(format!("generator loss {bundle:?}")));
        }
        self.g_opt.step(
            &mut self.model.store,
            &grads,
            &[(&self.gen_ids, self.cfg.lr_main), (&self.fen_ids, self.cfg.lr_fen)],
        );
        if !self.model.store.all_finite() {
            return Err(Error::TrainingAbort("non-finite generator parameter".into()));
        }
        Ok(bundle)
    }
}

fn features_on_tape<'a>(
    model: &Model,
    tape: &mut Tape,
    image: &Tensor,
) -> Result<VisualContext> {
    model.backbone.extract_features(tape, &model.store, image)
}

/// Inject pre-computed feature values as a constant (discriminator side).
fn features_as_constant(model: &Model, tape: &mut Tape, image: &Tensor) -> Result<VisualContext> {
    let v = model.features_for(image)?;
    let m = v.rows();
    let dim = v.cols();
    let features = tape.constant(v);
    Ok(VisualContext { features, m, dim })
}

fn d_sample_pass(
    model: &Model,
    cfg: &TrainConfig,
    weights: &LossWeights,
    item: &BatchItem,
) -> Result<DSampleOut> {
    // Gradient-free fake rollout.
    let v_values = model.features_for(&item.image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(item.z_seed, 0xD15C));
    let fakes = model
        .generator
        .generate(&model.store, &v_values, item.a, item.speed, 1, &mut rng)?;
    let fake = &fakes[0];

    let mut tape = Tape::new();
    let v = features_as_constant(model, &mut tape, &item.image)?;
    let real_vars = path_step_vars(&mut tape, &item.path);
    let real_out = model.discriminator.score_path(&mut tape, &model.store, &real_vars, &v)?;
    let fake_path = fake.to_path();
    let fake_vars = path_step_vars(&mut tape, &fake_path);
    let fake_out = model.discriminator.score_path(&mut tape, &model.store, &fake_vars, &v)?;
    let adv_path = adversarial_loss(
        &mut tape,
        Some(real_out.realism),
        fake_out.realism,
        GanRole::Discriminator,
        cfg.saturating_gan,
    )?;
    // Classification on real samples with ground-truth global intentions.
    let cls_global = global_classification_loss(&mut tape, real_out.class_logits, item.a)?;

    let adv_seq = if cfg.ablation.uses_sequence_discriminator() {
        let real_seq = intent_step_vars(&mut tape, &item.labels);
        let real_score = model.discriminator.score_intentions(&mut tape, &model.store, &real_seq)?;
        // Generated sequences enter as soft vectors.
        let fake_rows: Vec<Var> = fake
            .intent_logits
            .iter()
            .map(|row| {
                let logits = tape.constant(Tensor::row(row));
                tape.softmax_rows(logits)
            })
            .collect();
        let fake_score = model.discriminator.score_intentions(&mut tape, &model.store, &fake_rows)?;
        Some(adversarial_loss(
            &mut tape,
            Some(real_score.realism),
            fake_score.realism,
            GanRole::Discriminator,
            cfg.saturating_gan,
        )?)
    } else {
        None
    };

    let mut terms = vec![(adv_path, 1.0), (cls_global, 1.0)];
    if let Some(seq) = adv_seq {
        terms.push((seq, weights.lambda4));
    }
    let total = tape.weighted_sum(&terms);
    let grads_sweep = tape.backward(total);
    let mut grads = model.store.zeros_like();
    grads_sweep.accumulate_params(&tape, &mut grads, 1.0);
    Ok(DSampleOut {
        grads,
        adv_path: tape.value(adv_path).scalar_value(),
        adv_seq: adv_seq.map_or(0.0, |s| tape.value(s).scalar_value()),
        cls_global: tape.value(cls_global).scalar_value(),
        total: tape.value(total).scalar_value(),
    })
}

fn g_sample_pass(
    model: &Model,
    cfg: &TrainConfig,
    weights: &LossWeights,
    item: &BatchItem,
) -> Result<GSampleOut> {
    let mut tape = Tape::new();
    let v = features_on_tape(model, &mut tape, &item.image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(item.z_seed, 0x6E4));
    let z = normal_tensor(&[cfg.k_train, model.config.generator.noise_dim], &mut rng);
    let rollout = model
        .generator
        .rollout(&mut tape, &model.store, &v, item.a, item.speed, z)?;

    let variety = variety_loss(&mut tape, &item.path, &rollout.positions)?;
    let mut terms = vec![(variety, weights.lambda1)];

    let mut adv_path_v = None;
    let mut cls_global_v = None;
    if cfg.ablation.uses_path_discriminator() {
        let out = model
            .discriminator
            .score_path(&mut tape, &model.store, &rollout.positions, &v)?;
        let adv = adversarial_loss(&mut tape, None, out.realism, GanRole::Generator, cfg.saturating_gan)?;
        let cls = global_classification_loss(&mut tape, out.class_logits, item.a)?;
        terms.push((adv, 1.0));
        terms.push((cls, 1.0));
        adv_path_v = Some(adv);
        cls_global_v = Some(cls);
    }

    let mut cls_local_v = None;
    if cfg.ablation.uses_local_classification() {
        let cls2 = local_classification_loss(&mut tape, &rollout.intent_logits, &item.labels)?;
        terms.push((cls2, weights.lambda3));
        cls_local_v = Some(cls2);
    }

    let mut adv_seq_v = None;
    if cfg.ablation.uses_sequence_discriminator() {
        let soft: Vec<Var> = rollout
            .intent_logits
            .iter()
            .map(|&lv| tape.softmax_rows(lv))
            .collect();
        let score = model.discriminator.score_intentions(&mut tape, &model.store, &soft)?;
        let adv2 = adversarial_loss(&mut tape, None, score.realism, GanRole::Generator, cfg.saturating_gan)?;
        terms.push((adv2, weights.lambda2));
        adv_seq_v = Some(adv2);
    }

    let total = tape.weighted_sum(&terms);
    let grads_sweep = tape.backward(total);
    let mut grads = model.store.zeros_like();
    grads_sweep.accumulate_params(&tape, &mut grads, 1.0);
    Ok(GSampleOut {
        grads,
        variety: tape.value(variety).scalar_value(),
        adv_path: adv_path_v.map_or(0.0, |t| tape.value(t).scalar_value()),
        adv_seq: adv_seq_v.map_or(0.0, |t| tape.value(t).scalar_value()),
        cls_global: cls_global_v.map_or(0.0, |t| tape.value(t).scalar_value()),
        cls_local: cls_local_v.map_or(0.0, |t| tape.value(t).scalar_value()),
        total: tape.value(total).scalar_value(),
    })
}

fn batch_item(ds: &Dataset, sample: &Sample, f: usize, mode: IntentionMode, rng: &mut ChaCha8Rng) -> Result<BatchItem> {
    let window = &sample.local_intentions[..f.min(sample.local_intentions.len())];
    let a = select_global_intention(window, mode, rng)?;
    Ok(BatchItem {
        image: ds.image_tensor(sample),
        path: sample.path.clone(),
        a,
        labels: sample.local_intentions.clone(),
        speed: sample.speed,
        z_seed: rng.gen(),
    })
}

/// Evaluate a model over dataset samples (test-mode intention selection),
/// drawing K rollouts per sample.
pub fn evaluate_model(
    model: &Model,
    ds: &Dataset,
    indices: &[usize],
    k: usize,
    f: usize,
    seed: u64,
) -> Result<MetricReport> {
    let rows: Vec<Result<(Action, SampleMetrics)>> = indices
        .par_iter()
        .map(|&i| {
            let sample = &ds.samples[i];
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
            let window = &sample.local_intentions[..f.min(sample.local_intentions.len())];
            let a = select_global_intention(window, IntentionMode::Test, &mut rng)?;
            let image = ds.image_tensor(sample);
            let gen = model.generate(&image, a, sample.speed, k, &mut rng)?;
            let paths: Vec<Path> = gen.iter().map(|g| g.to_path()).collect();
            let metrics = sample_metrics(&sample.path, &paths, sample.speed)?;
            Ok((sample.maneuver, metrics))
        })
        .collect();
    let rows: Vec<(Action, SampleMetrics)> = rows.into_iter().collect::<Result<_>>()?;
    Ok(MetricReport::aggregate(&rows, k, f))
}

/// Stage one: train the feature extractor and a single-path generator (no
/// intention pathway, K = 1, zero noise) under mean squared position error.
pub fn pretrain_single(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let mut mc = model_cfg.clone();
    mc.generator.variant = GeneratorVariant::NoLocalIntent;
    let model = Model::new(mc, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.clone());
    let t0 = std::time::Instant::now();
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut report = TrainReport::default();
    let mut steps = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xE90C + epoch as u64));
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut epoch_mse = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| batch_item(ds, &ds.samples[i], cfg.f, IntentionMode::Train, &mut rng))
                .collect::<Result<_>>()?;
            let bundle = pretrain_step(&mut trainer, &batch)?;
            epoch_mse += bundle.variety;
            batches += 1;
            steps += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                report.epochs.push(EpochStats {
                    epoch,
                    losses: LossBundle { variety: epoch_mse / batches as f64, ..Default::default() },
                    val_min_ade: f64::NAN,
                    val_min_fde: f64::NAN,
                });
                break 'epochs;
            }
        }
        report.epochs.push(EpochStats {
            epoch,
            losses: LossBundle { variety: epoch_mse / batches.max(1) as f64, ..Default::default() },
            val_min_ade: f64::NAN,
            val_min_fde: f64::NAN,
        });
    }
    report.steps = steps;
    report.wall_seconds = t0.elapsed().as_secs_f64();
    Ok((trainer.model, report))
}

/// A pretraining step is a generator step restricted to the MSE objective
/// with one deterministic rollout.
fn pretrain_step(trainer: &mut Trainer, batch: &[BatchItem]) -> Result<LossBundle> {
    let model = &trainer.model;
    let outs: Vec<Result<(ParamStore, f64)>> = batch
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let v = features_on_tape(model, &mut tape, &item.image)?;
            let z = Tensor::zeros(&[1, model.config.generator.noise_dim]);
            let rollout = model
                .generator
                .rollout(&mut tape, &model.store, &v, item.a, item.speed, z)?;
            let mse = variety_loss(&mut tape, &item.path, &rollout.positions)?;
            let sweep = tape.backward(mse);
            let mut grads = model.store.zeros_like();
            sweep.accumulate_params(&tape, &mut grads, 1.0);
            Ok((grads, tape.value(mse).scalar_value()))
        })
        .collect();
    let mut grads = trainer.model.store.zeros_like();
    let mut mse = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for out in outs {
        let (g, m) = out?;
        for id in trainer.gen_ids.iter().chain(trainer.fen_ids.iter()) {
            grads.tensor_mut(*id).add_scaled(g.tensor(*id), scale);
        }
        mse += m * scale;
    }
    if !mse.is_finite() {
        return Err(Error::TrainingAbort(format!("pretraining mse {mse}")));
    }
    trainer.g_opt.step(
        &mut trainer.model.store,
        &grads,
        &[(&trainer.gen_ids, trainer.cfg.lr_main), (&trainer.fen_ids, trainer.cfg.lr_main)],
    );
    Ok(LossBundle { variety: mse, total_g: mse, ..Default::default() })
}

/// Stage two: alternating 1:1 discriminator/generator updates with loss terms
/// masked by the ablation id. `fen_init` seeds the feature extractor.
pub fn train_adversarial(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    fen_init: Option<&ParamStore>,
) -> Result<(Model, TrainReport)> {
    let mut mc = model_cfg.clone();
    mc.generator.variant = cfg.ablation.generator_variant();
    let mut model = Model::new(mc, cfg.seed)?;
    if let Some(init) = fen_init {
        copy_prefix(&mut model.store, init, "fen/");
    }
    let mut trainer = Trainer::new(model, cfg.clone());

    let t0 = std::time::Instant::now();
    let all_train = ds.indices(Split::Train);
    if all_train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    // Hold out a validation slice for divergence detection.
    let mut split_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x7A11));
    let mut shuffled = all_train.clone();
    shuffled.shuffle(&mut split_rng);
    let val_count = ((shuffled.len() as f64) * cfg.val_fraction).round() as usize;
    let (val_idx, train_idx) = shuffled.split_at(val_count.min(shuffled.len().saturating_sub(1)));

    let mut report = TrainReport::default();
    let mut steps = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xAD7 + epoch as u64));
        let mut order = train_idx.to_vec();
        order.shuffle(&mut rng);
        let mut sums = LossBundle::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| batch_item(ds, &ds.samples[i], cfg.f, IntentionMode::Train, &mut rng))
                .collect::<Result<_>>()?;
            if cfg.ablation.uses_path_discriminator() {
                let d = trainer.discriminator_step(&batch)?;
                sums.adv_seq += d.adv_seq;
                sums.total_d += d.total_d;
            }
            let g = trainer.generator_step(&batch)?;
            sums.variety += g.variety;
            sums.adv_path += g.adv_path;
            sums.cls_global += g.cls_global;
            sums.cls_local += g.cls_local;
            sums.total_g += g.total_g;
            batches += 1;
            steps += 1;

            if steps % cfg.check_every == 0 {
                if let Some(target) = cfg.stop_at_train_min_ade {
                    let probe: Vec<usize> = train_idx.iter().copied().take(64).collect();
                    let m = evaluate_model(&trainer.model, ds, &probe, 20, cfg.f, mix(cfg.seed, 0xC4EC))?;
                    if m.min_ade < target {
                        report.stopped_early = true;
                        finish_epoch(&mut report, &trainer, ds, val_idx, epoch, &sums, batches, cfg)?;
                        break 'epochs;
                    }
                }
            }
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                finish_epoch(&mut report, &trainer, ds, val_idx, epoch, &sums, batches, cfg)?;
                break 'epochs;
            }
        }
        finish_epoch(&mut report, &trainer, ds, val_idx, epoch, &sums, batches, cfg)?;
    }
    report.steps = steps;
    report.wall_seconds = t0.elapsed().as_secs_f64();
    Ok((trainer.model, report))
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    report: &mut TrainReport,
    trainer: &Trainer,
    ds: &Dataset,
    val_idx: &[usize],
    epoch: usize,
    sums: &LossBundle,
    batches: usize,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = batches.max(1) as f64;
    let losses = LossBundle {
        variety: sums.variety / n,
        adv_path: sums.adv_path / n,
        adv_seq: sums.adv_seq / n,
        cls_global: sums.cls_global / n,
        cls_local: sums.cls_local / n,
        total_g: sums.total_g / n,
        total_d: sums.total_d / n,
    };
    let (val_min_ade, val_min_fde) = if val_idx.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let probe: Vec<usize> = val_idx.iter().copied().take(96).collect();
        let m = evaluate_model(&trainer.model, ds, &probe, cfg.val_k, cfg.f, mix(cfg.seed, 0xEA1))?;
        (m.min_ade, m.min_fde)
    };
    report.epochs.push(EpochStats { epoch, losses, val_min_ade, val_min_fde });
    Ok(())
}

fn copy_prefix(dst: &mut ParamStore, src: &ParamStore, prefix: &str) {
    let ids: Vec<ParamId> = dst.ids_with_prefix(prefix).collect();
    for id in ids {
        let name = dst.name(id).to_string();
        if let Some(sid) = src.id_of(&name) {
            *dst.tensor_mut(id) = src.tensor(sid).clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::extract_paths;
    use crate::scenes::{build_dataset, DatasetConfig};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                image_size: 16,
                image_channels: 3,
                grid: 4,
                feature_dim: 6,
                conv_channels: [3, 4, 4, 6],
            },
            generator: GeneratorConfig {
                variant: GeneratorVariant::SharedAttention,
                hidden_dim: 10,
                noise_dim: 4,
                path_len: 20,
                feature_dim: 6,
                attn_dim: 5,
                embed_dim: 8,
                force_intent_to_global: false,
            },
            discriminator: DiscriminatorConfig {
                path_hidden: 8,
                intent_hidden: 5,
                feature_dim: 6,
                attn_dim: 5,
                embed_dim: 8,
                path_len: 20,
            },
        }
    }

    fn tiny_dataset() -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(
            &DatasetConfig {
                count: 18,
                seed: 5,
                image_size: 16,
                path_len: 20,
                train_fraction: 0.5,
                balance_tolerance: 0.6,
            },
            dir.path(),
        )
        .unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        (dir, ds)
    }

    fn fast_cfg(ablation: AblationId) -> TrainConfig {
        TrainConfig {
            ablation,
            batch_size: 4,
            epochs: 1,
            max_steps: Some(2),
            k_train: 2,
            val_fraction: 0.2,
            val_k: 2,
            lr_main: 1e-3,
            lr_fen: 5e-4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!(AblationId::parse("p3-b").unwrap(), AblationId::P3B);
        assert_eq!(AblationId::parse("P4").unwrap(), AblationId::P4);
        assert!(AblationId::parse("P9").is_err());
        assert_eq!(AblationId::P3C.generator_variant(), GeneratorVariant::SplitAttention);
    }

    #[test]
    fn model_save_load_roundtrip() {
        let model = Model::new(tiny_model_config(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path, &[("stage".into(), "test".into())]).unwrap();
        let (loaded, meta) = Model::load(&path).unwrap();
        assert!(meta.iter().any(|(k, v)| k == "stage" && v == "test"));
        assert_eq!(loaded.store.len(), model.store.len());
        for (name, tensor) in model.store.iter() {
            let id = loaded.store.id_of(name).unwrap();
            assert_eq!(loaded.store.tensor(id), tensor, "{name}");
        }
    }

    #[test]
    fn p1_leaves_discriminator_untouched() {
        let (_dir, ds) = tiny_dataset();
        let cfg = fast_cfg(AblationId::P1);
        let before = Model::new(
            {
                let mut mc = tiny_model_config();
                mc.generator.variant = AblationId::P1.generator_variant();
                mc
            },
            cfg.seed,
        )
        .unwrap();
        let (after, _report) = train_adversarial(&ds, &tiny_model_config(), &cfg, None).unwrap();
        for id in after.disc_ids() {
            let name = after.store.name(id).to_string();
            let bid = before.store.id_of(&name).unwrap();
            assert_eq!(after.store.tensor(id), before.store.tensor(bid), "{name} changed");
        }
        // The generator itself must have moved.
        let moved = after.gen_ids().iter().any(|&id| {
            let name = after.store.name(id).to_string();
            let bid = before.store.id_of(&name).unwrap();
            after.store.tensor(id) != before.store.tensor(bid)
        });
        assert!(moved);
    }

    #[test]
    fn p3b_leaves_sequence_discriminator_untouched() {
        let (_dir, ds) = tiny_dataset();
        let cfg = fast_cfg(AblationId::P3B);
        let before = Model::new(
            {
                let mut mc = tiny_model_config();
                mc.generator.variant = AblationId::P3B.generator_variant();
                mc
            },
            cfg.seed,
        )
        .unwrap();
        let (after, _) = train_adversarial(&ds, &tiny_model_config(), &cfg, None).unwrap();
        for name in ["disc/lstm_d2/w", "disc/lstm_d2/b", "disc/scr2/w", "disc/scr2/b", "disc/embed_a/w", "disc/embed_a/b"] {
            let id = after.store.id_of(name).unwrap();
            let bid = before.store.id_of(name).unwrap();
            assert_eq!(after.store.tensor(id), before.store.tensor(bid), "{name} changed");
        }
        // The path discriminator must have moved.
        let d1 = after.store.id_of("disc/lstm_d1/w").unwrap();
        let b1 = before.store.id_of("disc/lstm_d1/w").unwrap();
        assert_ne!(after.store.tensor(d1), before.store.tensor(b1));
    }

    #[test]
    fn discriminator_objective_never_updates_fen() {
        let (_dir, ds) = tiny_dataset();
        let mut mc = tiny_model_config();
        mc.generator.variant = GeneratorVariant::SharedAttention;
        let model = Model::new(mc, 11).unwrap();
        let fen_before: Vec<Tensor> = model
            .fen_ids()
            .iter()
            .map(|&id| model.store.tensor(id).clone())
            .collect();
        let cfg = fast_cfg(AblationId::P4);
        let mut trainer = Trainer::new(model, cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<BatchItem> = ds
            .indices(Split::Train)
            .iter()
            .take(3)
            .map(|&i| batch_item(&ds, &ds.samples[i], cfg.f, IntentionMode::Train, &mut rng).unwrap())
            .collect();
        trainer.discriminator_step(&batch).unwrap();
        for (id, before) in trainer.model.fen_ids().iter().zip(&fen_before) {
            assert_eq!(trainer.model.store.tensor(*id), before);
        }
    }

    #[test]
    fn epoch_losses_are_reproducible() {
        let (_dir, ds) = tiny_dataset();
        let cfg = fast_cfg(AblationId::P4);
        let (_m1, r1) = train_adversarial(&ds, &tiny_model_config(), &cfg, None).unwrap();
        let (_m2, r2) = train_adversarial(&ds, &tiny_model_config(), &cfg, None).unwrap();
        assert_eq!(r1.epochs.len(), r2.epochs.len());
        for (a, b) in r1.epochs.iter().zip(&r2.epochs) {
            assert_eq!(a.losses, b.losses);
        }
    }

    #[test]
    fn pretrain_reduces_mse_and_seeds_fen() {
        let (_dir, ds) = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 9,
            lr_main: 3e-3,
            ..fast_cfg(AblationId::P1)
        };
        let cfg = TrainConfig { max_steps: Some(60), ..cfg };
        let (model, report) = pretrain_single(&ds, &tiny_model_config(), &cfg).unwrap();
        let first = report.epochs.first().unwrap().losses.variety;
        let last = report.epochs.last().unwrap().losses.variety;
        assert!(
            last < first,
            "pretraining did not reduce mse: {first} -> {last}"
        );
        // Zero noise: rollouts are deterministic and identical across draws.
        let sample = &ds.samples[0];
        let img = ds.image_tensor(sample);
        let v = model.features_for(&img).unwrap();
        let mut tape = Tape::no_grad();
        let features = tape.constant(v.clone());
        let vc = VisualContext { features, m: v.rows(), dim: v.cols() };
        let z = Tensor::zeros(&[2, model.config.generator.noise_dim]);
        let r = model
            .generator
            .rollout(&mut tape, &model.store, &vc, sample.a, sample.speed, z)
            .unwrap();
        let paths = extract_paths(&tape, &r);
        assert_eq!(paths[0].positions, paths[1].positions);

        // FEN init flows into the adversarial stage.
        let adv_cfg = fast_cfg(AblationId::P2);
        let (adv, _) = train_adversarial(&ds, &tiny_model_config(), &adv_cfg, Some(&model.store)).unwrap();
        assert_eq!(adv.store.len(), Model::new({
            let mut mc = tiny_model_config();
            mc.generator.variant = GeneratorVariant::NoLocalIntent;
            mc
        }, 0).unwrap().store.len());
    }

    #[test]
    fn evaluate_model_produces_finite_report() {
        let (_dir, ds) = tiny_dataset();
        let model = Model::new(
            {
                let mut mc = tiny_model_config();
                mc.generator.variant = GeneratorVariant::SharedAttention;
                mc
            },
            2,
        )
        .unwrap();
        let idx = ds.indices(Split::Test);
        let report = evaluate_model(&model, &ds, &idx, 4, 5, 9).unwrap();
        assert_eq!(report.count, idx.len());
        assert!(report.min_ade.is_finite());
        assert!(report.min_ade <= report.per_action.iter().map(|(_, _, m)| m.min_ade).fold(f64::NEG_INFINITY, f64::max) + 1e-12);
        assert!(report.diversity >= 0.0);
    }
}
