//! Masked bounding box reconstruction: mask entity features, fuse them with
//! geometry embeddings, encode the scene and reconstruct every feature.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Scene, UnlabeledScene, FEATURE_DIM};
use crate::encoder::{encode_on_tape, EncoderConfig, EncoderVars, EncoderWeights};
use crate::error::{Error, Result};
use crate::geometry::{embed_box, GEOMETRY_DIM};
use crate::nn::{clip_grad_norm, gradients, prefixed, Binder, Linear, LinearVars, Params};
use crate::rng::{derive_seed, rng, Rng};
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamConfig, Checkpoint, Tape, Tensor, Var, WeightDecay};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Reconstruction,
    Classification,
}

/// What replaces the feature of a masked entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    Learned,
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to zero over all steps.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decay_style: WeightDecay,
    pub fine_tune_epochs: usize,
    pub loss_kind: LossKind,
    pub mask_fill: MaskFill,
    pub grad_clip: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_ratio: 0.5,
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            decay_style: WeightDecay::L2,
            fine_tune_epochs: 20,
            loss_kind: LossKind::Reconstruction,
            mask_fill: MaskFill::Learned,
            grad_clip: None,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} is outside [0, 1]", self.mask_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate and weight_decay must be non-negative".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            decay_style: self.decay_style,
            ..AdamConfig::default()
        }
    }
}

/// Per-entity mask flags of one scene (true = masked).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan(pub Vec<bool>);

impl MaskPlan {
    pub fn none(n: usize) -> Self {
        MaskPlan(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_masked(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }
}

/// Independent Bernoulli(`ratio`) draw per entity.
pub fn draw_mask(num_entities: usize, ratio: f64, rng: &mut Rng) -> MaskPlan {
    MaskPlan((0..num_entities).map(|_| rng.gen::<f64>() < ratio).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights<T> {
    pub mask_vector: Tensor<T>,
    /// `(FEATURE_DIM + GEOMETRY_DIM) → model_dim`
    pub input_projection: Linear<T>,
    /// `model_dim → FEATURE_DIM`
    pub reconstruction_projection: Linear<T>,
}

impl<T: Scalar> FusionWeights<T> {
    pub fn init(model_dim: usize, fill: MaskFill, r: &mut Rng) -> Self {
        let mask_vector = match fill {
            MaskFill::Zeros => Tensor::zeros(&[FEATURE_DIM]),
            MaskFill::Learned => {
                let n = Normal::new(0.0, 0.02).expect("valid std");
                let data = (0..FEATURE_DIM).map(|_| T::from_f64_lossy(n.sample(r))).collect();
                Tensor::new(vec![FEATURE_DIM], data).expect("shape")
            }
        };
        FusionWeights {
            mask_vector,
            input_projection: Linear::xavier(FEATURE_DIM + GEOMETRY_DIM, model_dim, r),
            reconstruction_projection: Linear::xavier(model_dim, FEATURE_DIM, r),
        }
    }
}

impl<T: Scalar> Params<T> for FusionWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(prefixed(prefix, "mask_vector"), &self.mask_vector);
        self.input_projection.visit(&prefixed(prefix, "input_projection"), f);
        self.reconstruction_projection
            .visit(&prefixed(prefix, "reconstruction_projection"), f);
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.mask_vector];
        out.extend(self.input_projection.params_mut());
        out.extend(self.reconstruction_projection.params_mut());
        out
    }
}

/// Fusion layers, encoder and the optional classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct MbbrModel<T> {
    pub encoder_config: EncoderConfig,
    pub mask_fill: MaskFill,
    pub fusion: FusionWeights<T>,
    pub encoder: EncoderWeights<T>,
    /// `model_dim → C`, present after classification pretraining.
    pub class_head: Option<Linear<T>>,
}

impl<T: Scalar> MbbrModel<T> {
    pub fn init(cfg: &EncoderConfig, fill: MaskFill, num_classes: Option<usize>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(derive_seed(seed, "fusion"));
        let fusion = FusionWeights::init(cfg.model_dim, fill, &mut r);
        let class_head = num_classes.map(|c| Linear::xavier(cfg.model_dim, c, &mut r));
        Ok(MbbrModel {
            encoder_config: cfg.clone(),
            mask_fill: fill,
            fusion,
            encoder: EncoderWeights::init(cfg, derive_seed(seed, "encoder"))?,
            class_head,
        })
    }

    fn check(&self) -> Result<()> {
        self.encoder.check(&self.encoder_config)?;
        let d = self.encoder_config.model_dim;
        let f = &self.fusion;
        if f.mask_vector.numel() != FEATURE_DIM
            || f.input_projection.input_dim() != FEATURE_DIM + GEOMETRY_DIM
            || f.input_projection.output_dim() != d
            || f.reconstruction_projection.input_dim() != d
            || f.reconstruction_projection.output_dim() != FEATURE_DIM
            || self.class_head.as_ref().is_some_and(|h| h.input_dim() != d)
        {
            return Err(Error::dim("mbbr", "fusion weights do not match the encoder config"));
        }
        Ok(())
    }

    /// Binds every parameter, in `params_mut` order. The mask vector is a
    /// constant under [`MaskFill::Zeros`]; the rest follow `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> (ModelVars, Vec<Var>) {
        let mut b = Binder::new(tape, trainable && self.mask_fill == MaskFill::Learned);
        let mask_vector = b.bind(&self.fusion.mask_vector);
        b.set_trainable(trainable);
        let input_projection = self.fusion.input_projection.bind(&mut b);
        let reconstruction_projection = self.fusion.reconstruction_projection.bind(&mut b);
        let encoder = self.encoder.bind(&mut b);
        let class_head = self.class_head.as_ref().map(|h| h.bind(&mut b));
        let vars = ModelVars {
            mask_vector,
            input_projection,
            reconstruction_projection,
            encoder,
            class_head,
        };
        (vars, b.into_vars())
    }
}

/// Shape description stored next to model tensors in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescription {
    pub encoder_config: EncoderConfig,
    pub mask_fill: MaskFill,
    pub num_classes: Option<usize>,
}

impl<T: Scalar> MbbrModel<T> {
    pub fn describe(&self) -> ModelDescription {
        ModelDescription {
            encoder_config: self.encoder_config.clone(),
            mask_fill: self.mask_fill,
            num_classes: self.class_head.as_ref().map(Linear::output_dim),
        }
    }

    /// Rebuilds a model from tensors stored under `prefix`.
    pub fn from_checkpoint(desc: &ModelDescription, ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut model = MbbrModel::init(&desc.encoder_config, desc.mask_fill, desc.num_classes, 0)?;
        model.load_from(prefix, ckpt)?;
        model.check()?;
        Ok(model)
    }
}

impl<T: Scalar> Params<T> for MbbrModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.fusion.visit(&prefixed(prefix, "fusion"), f);
        self.encoder.visit(&prefixed(prefix, "encoder"), f);
        if let Some(h) = &self.class_head {
            h.visit(&prefixed(prefix, "class_head"), f);
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.fusion.params_mut();
        out.extend(self.encoder.params_mut());
        if let Some(h) = &mut self.class_head {
            out.extend(h.params_mut());
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub mask_vector: Var,
    pub input_projection: LinearVars,
    pub reconstruction_projection: LinearVars,
    pub encoder: EncoderVars,
    pub class_head: Option<LinearVars>,
}

/// A scene reduced to what the pretext task sees: features and geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedScene<T> {
    pub num_entities: usize,
    /// `n × FEATURE_DIM`, row-major.
    pub features: Vec<T>,
    /// `n × GEOMETRY_DIM`, row-major.
    pub geometry: Vec<T>,
}

impl<T: Scalar> PreparedScene<T> {
    pub fn from_unlabeled(scene: &UnlabeledScene) -> Result<Self> {
        let n = scene.entities.len();
        let mut features = Vec::with_capacity(n * FEATURE_DIM);
        let mut geometry = Vec::with_capacity(n * GEOMETRY_DIM);
        for e in &scene.entities {
            if e.feature.len() != FEATURE_DIM {
                return Err(Error::dim("prepare_scene", format!("feature of length {}", e.feature.len())));
            }
            features.extend(e.feature.iter().map(|&v| T::from_f64_lossy(v)));
            let g = embed_box(&e.bbox, scene.width, scene.height)?;
            geometry.extend(g.iter().map(|&v| T::from_f64_lossy(v)));
        }
        Ok(PreparedScene { num_entities: n, features, geometry })
    }

    pub fn from_scene(scene: &Scene) -> Result<Self> {
        Self::from_unlabeled(&scene.without_labels())
    }
}

pub fn prepare_scenes<T: Scalar>(scenes: &[UnlabeledScene]) -> Result<Vec<PreparedScene<T>>> {
    scenes.iter().map(PreparedScene::from_unlabeled).collect()
}

/// Padded tape inputs for a group of scenes.
struct BatchInputs<T> {
    batch: usize,
    seq: usize,
    features: Tensor<T>,
    geometry: Tensor<T>,
    valid: Vec<bool>,
    masked: Vec<bool>,
    /// Flat slot index of every real entity, scene by scene.
    real: Vec<usize>,
}

fn assemble<T: Scalar>(scenes: &[&PreparedScene<T>], plans: &[&MaskPlan]) -> Result<BatchInputs<T>> {
    if scenes.is_empty() {
        return Err(Error::dim("mbbr_batch", "empty batch"));
    }
    let batch = scenes.len();
    let seq = scenes.iter().map(|s| s.num_entities).max().unwrap_or(0);
    if seq == 0 {
        return Err(Error::dim("mbbr_batch", "batch has no entities"));
    }
    let mut features = vec![T::zero(); batch * seq * FEATURE_DIM];
    let mut geometry = vec![T::zero(); batch * seq * GEOMETRY_DIM];
    let mut valid = vec![false; batch * seq];
    let mut masked = vec![false; batch * seq];
    let mut real = Vec::new();
    for (b, (s, p)) in scenes.iter().zip(plans).enumerate() {
        let n = s.num_entities;
        if p.len() != n {
            return Err(Error::dim("mask_plan", format!("{} flags for {n} entities", p.len())));
        }
        let at = b * seq;
        features[at * FEATURE_DIM..(at + n) * FEATURE_DIM].copy_from_slice(&s.features);
        geometry[at * GEOMETRY_DIM..(at + n) * GEOMETRY_DIM].copy_from_slice(&s.geometry);
        for i in 0..n {
            valid[at + i] = true;
            masked[at + i] = p.0[i];
            real.push(at + i);
        }
    }
    Ok(BatchInputs {
        batch,
        seq,
        features: Tensor::new(vec![batch * seq, FEATURE_DIM], features)?,
        geometry: Tensor::new(vec![batch * seq, GEOMETRY_DIM], geometry)?,
        valid,
        masked,
        real,
    })
}

struct Forward {
    target: Var,
    z: Var,
}

fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    inputs: &BatchInputs<T>,
    cfg: &EncoderConfig,
    dropout: Option<&mut Rng>,
) -> Result<Forward> {
    let target = tape.constant(inputs.features.clone());
    let geometry = tape.constant(inputs.geometry.clone());
    let fb = tape.replace_rows(target, vars.mask_vector, &inputs.masked)?;
    let fused = tape.concat_cols(&[fb, geometry])?;
    let entity = vars.input_projection.forward(tape, fused)?;
    let entity = tape.mask_rows(entity, &inputs.valid)?;
    let out = encode_on_tape(tape, &vars.encoder, entity, &inputs.valid, inputs.batch, cfg, dropout)?;
    Ok(Forward { target, z: out.z })
}

fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    inputs: &BatchInputs<T>,
    fw: &Forward,
    kind: LossKind,
    categories: Option<&[&Vec<usize>]>,
) -> Result<Option<Var>> {
    match kind {
        LossKind::Reconstruction => {
            let y = vars.reconstruction_projection.forward(tape, fw.z)?;
            let y = tape.gather_rows(y, &inputs.real)?;
            let t = tape.gather_rows(fw.target, &inputs.real)?;
            Ok(Some(tape.mse_loss(y, t)?))
        }
        LossKind::Classification => {
            let head = vars
                .class_head
                .ok_or_else(|| Error::Contract("classification loss needs a class head".into()))?;
            let cats = categories.ok_or_else(|| Error::Contract("classification loss needs categories".into()))?;
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (b, c) in cats.iter().enumerate() {
                for (i, &cat) in c.iter().enumerate() {
                    let slot = b * inputs.seq + i;
                    if inputs.masked[slot] {
                        rows.push(slot);
                        labels.push(cat);
                    }
                }
            }
            if rows.is_empty() {
                return Ok(None);
            }
            let z = tape.gather_rows(fw.z, &rows)?;
            let logits = head.forward(tape, z)?;
            Ok(Some(tape.cross_entropy(logits, &labels)?))
        }
    }
}

/// Unmasked forward pass on an existing tape. Returns `z` over the padded
/// slots and the slot count per scene.
pub fn encode_on_tape_unmasked<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    model: &MbbrModel<T>,
    scenes: &[&PreparedScene<T>],
) -> Result<(Var, usize)> {
    let plans: Vec<MaskPlan> = scenes.iter().map(|s| MaskPlan::none(s.num_entities)).collect();
    let p: Vec<&MaskPlan> = plans.iter().collect();
    let inputs = assemble(scenes, &p)?;
    let fw = forward(tape, vars, &inputs, &model.encoder_config, None)?;
    Ok((fw.z, inputs.seq))
}

/// Fused entity embeddings `f_e` (`n × model_dim`) of one scene.
pub fn build_entity_embeddings<T: Scalar>(
    scene: &PreparedScene<T>,
    plan: &MaskPlan,
    model: &MbbrModel<T>,
) -> Result<Tensor<T>> {
    model.check()?;
    let inputs = assemble(&[scene], &[plan])?;
    let mut tape = Tape::new();
    let (vars, _) = model.bind(&mut tape, false);
    let fb = tape.constant(inputs.features.clone());
    let geometry = tape.constant(inputs.geometry.clone());
    let fb = tape.replace_rows(fb, vars.mask_vector, &inputs.masked)?;
    let fused = tape.concat_cols(&[fb, geometry])?;
    let e = vars.input_projection.forward(&mut tape, fused)?;
    Ok(detach(tape.value(e)))
}

fn detach<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut t = t.clone();
    t.clear_grad();
    t
}

/// Reconstructed features `y_rec` (`n × FEATURE_DIM`) of one scene.
pub fn reconstruct<T: Scalar>(scene: &PreparedScene<T>, plan: &MaskPlan, model: &MbbrModel<T>) -> Result<Tensor<T>> {
    model.check()?;
    let inputs = assemble(&[scene], &[plan])?;
    let mut tape = Tape::new();
    let (vars, _) = model.bind(&mut tape, false);
    let fw = forward(&mut tape, &vars, &inputs, &model.encoder_config, None)?;
    let y = vars.reconstruction_projection.forward(&mut tape, fw.z)?;
    Ok(detach(tape.value(y)))
}

/// Reconstructions for many scenes, evaluated `batch_size` scenes at a time.
pub fn reconstruct_all<T: Scalar>(
    scenes: &[PreparedScene<T>],
    plans: &[MaskPlan],
    model: &MbbrModel<T>,
    batch_size: usize,
) -> Result<Vec<Tensor<T>>> {
    run_batched(scenes, Some(plans), model, batch_size, true)
}

/// Unmasked context representations `z` (`n × model_dim`) per scene.
pub fn encode_scenes<T: Scalar>(
    scenes: &[PreparedScene<T>],
    model: &MbbrModel<T>,
    batch_size: usize,
) -> Result<Vec<Tensor<T>>> {
    run_batched(scenes, None, model, batch_size, false)
}

fn run_batched<T: Scalar>(
    scenes: &[PreparedScene<T>],
    plans: Option<&[MaskPlan]>,
    model: &MbbrModel<T>,
    batch_size: usize,
    reconstruct: bool,
) -> Result<Vec<Tensor<T>>> {
    model.check()?;
    if plans.is_some_and(|p| p.len() != scenes.len()) {
        return Err(Error::dim("mask_plan", "one plan per scene required"));
    }
    let none: Vec<MaskPlan> = scenes.iter().map(|s| MaskPlan::none(s.num_entities)).collect();
    let plans = plans.unwrap_or(&none);
    let mut out = Vec::with_capacity(scenes.len());
    let idx: Vec<usize> = (0..scenes.len()).filter(|&i| scenes[i].num_entities > 0).collect();
    let mut results: Vec<Option<Tensor<T>>> = vec![None; scenes.len()];
    for chunk in idx.chunks(batch_size.max(1)) {
        let s: Vec<&PreparedScene<T>> = chunk.iter().map(|&i| &scenes[i]).collect();
        let p: Vec<&MaskPlan> = chunk.iter().map(|&i| &plans[i]).collect();
        let inputs = assemble(&s, &p)?;
        let mut tape = Tape::new();
        let (vars, _) = model.bind(&mut tape, false);
        let fw = forward(&mut tape, &vars, &inputs, &model.encoder_config, None)?;
        let v = if reconstruct {
            vars.reconstruction_projection.forward(&mut tape, fw.z)?
        } else {
            fw.z
        };
        let value = tape.value(v);
        let width = value.rows_cols().1;
        for (b, &i) in chunk.iter().enumerate() {
            let n = scenes[i].num_entities;
            let start = b * inputs.seq * width;
            let data = value.data()[start..start + n * width].to_vec();
            results[i] = Some(Tensor::new(vec![n, width], data)?);
        }
    }
    for (i, r) in results.into_iter().enumerate() {
        let width = if reconstruct { FEATURE_DIM } else { model.encoder_config.model_dim };
        out.push(r.unwrap_or_else(|| Tensor::zeros(&[scenes[i].num_entities, width])));
    }
    Ok(out)
}

/// Pooled loss over `scenes` with the given plans, and its gradient with
/// respect to every parameter (in `params_mut` order).
pub fn loss_and_gradients<T: Scalar>(
    model: &MbbrModel<T>,
    scenes: &[&PreparedScene<T>],
    plans: &[&MaskPlan],
    kind: LossKind,
    categories: Option<&[&Vec<usize>]>,
) -> Result<(f64, Vec<Vec<T>>)> {
    model.check()?;
    let inputs = assemble(scenes, plans)?;
    let mut tape = Tape::new();
    let (vars, bound) = model.bind(&mut tape, true);
    let fw = forward(&mut tape, &vars, &inputs, &model.encoder_config, None)?;
    let Some(loss) = batch_loss(&mut tape, &vars, &inputs, &fw, kind, categories)? else {
        return Ok((0.0, bound.iter().map(|&v| vec![T::zero(); tape.value(v).numel()]).collect()));
    };
    tape.backward(loss)?;
    Ok((tape.value(loss).item().to_f64_lossy(), gradients(&tape, &bound)))
}

/// Loss history and timings of a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome<T> {
    pub model: MbbrModel<T>,
    /// Mean batch loss per epoch.
    pub losses: Vec<f64>,
    /// Wall-clock seconds per epoch; not deterministic.
    pub epoch_seconds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
}

/// Deterministic training log: config echo, seed and per-epoch losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub config: serde_json::Value,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
}

impl<T> PretrainOutcome<T> {
    pub fn log(&self, config: serde_json::Value, seed: u64) -> TrainingLog {
        TrainingLog {
            config,
            seed,
            epochs: self
                .losses
                .iter()
                .enumerate()
                .map(|(epoch, &loss)| EpochRecord { epoch, loss })
                .collect(),
        }
    }
}

/// Reconstruction pretraining. Scenes without entities are skipped.
pub fn pretrain<T: Scalar>(
    scenes: &[UnlabeledScene],
    encoder: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome<T>> {
    if cfg.loss_kind != LossKind::Reconstruction {
        return Err(Error::Config(
            "pretrain runs the reconstruction loss; use pretrain_classification_variant".into(),
        ));
    }
    let prepared = prepare_scenes(scenes)?;
    let model = MbbrModel::init(encoder, cfg.mask_fill, None, cfg.seed)?;
    train(model, &prepared, None, cfg)
}

/// Pretraining with cross-entropy on the categories of masked entities
/// instead of feature reconstruction.
pub fn pretrain_classification_variant<T: Scalar>(
    scenes: &[Scene],
    num_categories: usize,
    encoder: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome<T>> {
    if num_categories == 0 {
        return Err(Error::Config("classification pretraining needs at least one category".into()));
    }
    let prepared: Vec<PreparedScene<T>> = scenes.iter().map(PreparedScene::from_scene).collect::<Result<_>>()?;
    let categories: Vec<Vec<usize>> = scenes.iter().map(|s| s.categories()).collect();
    if let Some(&bad) = categories.iter().flatten().find(|&&c| c >= num_categories) {
        return Err(Error::MissingCategory(bad));
    }
    let cfg = PretrainConfig { loss_kind: LossKind::Classification, ..cfg.clone() };
    let model = MbbrModel::init(encoder, cfg.mask_fill, Some(num_categories), cfg.seed)?;
    train(model, &prepared, Some(&categories), &cfg)
}

fn train<T: Scalar>(
    mut model: MbbrModel<T>,
    scenes: &[PreparedScene<T>],
    categories: Option<&[Vec<usize>]>,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome<T>> {
    cfg.validate()?;
    let usable: Vec<usize> = (0..scenes.len()).filter(|&i| scenes[i].num_entities > 0).collect();
    if usable.is_empty() {
        return Err(Error::Invalid("pretraining needs at least one scene with entities".into()));
    }
    let mut shuffle_rng = rng(derive_seed(cfg.seed, "shuffle"));
    let mut mask_rng = rng(derive_seed(cfg.seed, "mask"));
    let mut dropout_rng = rng(derive_seed(cfg.seed, "dropout"));
    let use_dropout = model.encoder_config.dropout > 0.0;
    let mut adam = Adam::new(cfg.adam());
    let steps_per_epoch = usable.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);
    let mut order = usable.clone();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        let mut counted = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let plans: Vec<MaskPlan> = chunk
                .iter()
                .map(|&i| draw_mask(scenes[i].num_entities, cfg.mask_ratio, &mut mask_rng))
                .collect();
            let s: Vec<&PreparedScene<T>> = chunk.iter().map(|&i| &scenes[i]).collect();
            let p: Vec<&MaskPlan> = plans.iter().collect();
            let cats: Option<Vec<&Vec<usize>>> = categories.map(|c| chunk.iter().map(|&i| &c[i]).collect());
            let inputs = assemble(&s, &p)?;
            let mut tape = Tape::new();
            let (vars, bound) = model.bind(&mut tape, true);
            let dropout = use_dropout.then_some(&mut dropout_rng);
            let diverged = |e: Error| match e {
                Error::NonFinite { op } => Error::Diverged(format!(
                    "non-finite value in {op} at epoch {epoch}, batch {step}"
                )),
                other => other,
            };
            let fw = forward(&mut tape, &vars, &inputs, &model.encoder_config, dropout).map_err(diverged)?;
            let loss = batch_loss(&mut tape, &vars, &inputs, &fw, cfg.loss_kind, cats.as_deref()).map_err(diverged)?;
            let Some(loss) = loss else { continue };
            let value = tape.value(loss).item().to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("loss {value} at epoch {epoch}, batch {step}")));
            }
            tape.backward(loss)?;
            let mut grads = gradients(&tape, &bound);
            drop(tape);
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            if cfg.lr_schedule == LrSchedule::Cosine {
                let t = (epoch * steps_per_epoch + step) as f64 / total_steps as f64;
                adam.set_learning_rate(cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()));
            }
            let refs: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut model.params_mut(), &refs)?;
            sum += value;
            counted += 1;
        }
        losses.push(if counted > 0 { sum / counted as f64 } else { 0.0 });
        epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(PretrainOutcome { model, losses, epoch_seconds })
}
