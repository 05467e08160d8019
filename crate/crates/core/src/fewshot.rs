//! Few-shot predicate classification on pair features built from entity
//! representations, relative geometry and label embeddings.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabelEmbeddingTable, Scene, TripletRef, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::eval::PairPrediction;
use crate::geometry::normalize_box;
use crate::data::BoundingBox;
use crate::mbbr::{encode_on_tape_unmasked, encode_scenes, MbbrModel, PreparedScene};
use crate::nn::{gradients, prefixed, Binder, Linear, LinearVars, Params, LAYER_NORM_EPS};
use crate::rng::{derive_seed, rng};
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamConfig, Checkpoint, NamedTensor, Tape, Tensor, Var, WeightDecay};

pub const SPATIAL_DIM: usize = 14;

/// Relative geometry of an ordered pair: both normalized boxes, centre
/// offset and log scale of the object relative to the subject, IoU, and the
/// union area as a fraction of the image.
pub fn compute_spatial(s: &BoundingBox, o: &BoundingBox, width: f64, height: f64) -> Result<[f64; SPATIAL_DIM]> {
    let ns = normalize_box(s, width, height)?;
    let no = normalize_box(o, width, height)?;
    let (sx, sy) = s.center();
    let (ox, oy) = o.center();
    let (ws, hs) = (s.width(), s.height());
    let mut v = [0.0; SPATIAL_DIM];
    v[..4].copy_from_slice(&ns.0);
    v[4..8].copy_from_slice(&no.0);
    v[8] = (ox - sx) / ws;
    v[9] = (oy - sy) / hs;
    v[10] = (o.width() / ws).ln();
    v[11] = (o.height() / hs).ln();
    v[12] = s.iou(o);
    v[13] = s.union_area(o) / (width * height);
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureAblationConfig {
    pub use_visual: bool,
    pub use_spatial: bool,
    pub use_linguistic: bool,
}

impl Default for FeatureAblationConfig {
    fn default() -> Self {
        FeatureAblationConfig {
            use_visual: true,
            use_spatial: true,
            use_linguistic: true,
        }
    }
}

impl FeatureAblationConfig {
    pub const LINGUISTIC_SPATIAL: Self = FeatureAblationConfig {
        use_visual: false,
        use_spatial: true,
        use_linguistic: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.use_visual || self.use_spatial || self.use_linguistic {
            Ok(())
        } else {
            Err(Error::Config("at least one pair-feature block must be enabled".into()))
        }
    }

    /// Short name such as `L+S+V`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_linguistic {
            parts.push("L");
        }
        if self.use_spatial {
            parts.push("S");
        }
        if self.use_visual {
            parts.push("V");
        }
        parts.join("+")
    }

    pub fn feature_dim(&self, visual_dim: usize, label_dim: usize) -> usize {
        let mut d = 0;
        if self.use_visual {
            d += 2 * visual_dim;
        }
        if self.use_spatial {
            d += SPATIAL_DIM;
        }
        if self.use_linguistic {
            d += 2 * label_dim;
        }
        d
    }
}

/// Which per-entity vectors fill the visual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Detector features `f_b` as stored in the scene.
    Raw,
    /// Context representations `z` from an unmasked encoder pass.
    Encoded,
}

/// `[z_S | z_O | spatial | ling_S | ling_O]` with disabled blocks omitted.
pub fn build_pair_feature<T: Scalar>(
    scene: &Scene,
    subject: usize,
    object: usize,
    z: &Tensor<T>,
    table: &LabelEmbeddingTable,
    ab: &FeatureAblationConfig,
) -> Result<Vec<T>> {
    ab.validate()?;
    let n = scene.entities.len();
    if subject >= n || object >= n {
        return Err(Error::index("pair_feature", format!("pair ({subject}, {object}) with {n} entities")));
    }
    if subject == object {
        return Err(Error::index("pair_feature", format!("subject and object are both {subject}")));
    }
    if z.rows_cols().0 != n {
        return Err(Error::dim("pair_feature", format!("{} representations for {n} entities", z.rows_cols().0)));
    }
    let mut out = Vec::with_capacity(ab.feature_dim(z.rows_cols().1, table.dim()));
    if ab.use_visual {
        out.extend_from_slice(z.row(subject));
        out.extend_from_slice(z.row(object));
    }
    if ab.use_spatial {
        let (s, o) = (&scene.entities[subject], &scene.entities[object]);
        let sp = compute_spatial(&s.bbox, &o.bbox, scene.width, scene.height)?;
        out.extend(sp.iter().map(|&v| T::from_f64_lossy(v)));
    }
    if ab.use_linguistic {
        for idx in [subject, object] {
            let v = table.get(scene.entities[idx].category_id)?;
            out.extend(v.iter().map(|&x| T::from_f64_lossy(x)));
        }
    }
    Ok(out)
}

/// Raw detector features of a scene as an `n × FEATURE_DIM` matrix.
pub fn raw_features<T: Scalar>(scene: &Scene) -> Result<Tensor<T>> {
    let data = scene
        .entities
        .iter()
        .flat_map(|e| e.feature.iter().map(|&v| T::from_f64_lossy(v)))
        .collect();
    Tensor::new(vec![scene.entities.len(), FEATURE_DIM], data)
}

/// Row normalization applied to visual representations before they enter
/// pair features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualNorm {
    None,
    /// Subtract the row mean and scale to unit L2 norm (up to the layer-norm
    /// epsilon), so the visual block has the same scale as the label vectors.
    #[default]
    Unit,
}

/// Applies `norm` to the rows of `x`; differentiable for joint fine-tuning.
pub fn normalize_visual_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, norm: VisualNorm) -> Result<Var> {
    match norm {
        VisualNorm::None => Ok(x),
        VisualNorm::Unit => {
            let d = tape.value(x).rows_cols().1;
            let gain = tape.constant(Tensor::full(&[d], T::from_f64_lossy(1.0 / (d as f64).sqrt())));
            let bias = tape.constant(Tensor::zeros(&[d]));
            tape.layer_norm(x, gain, bias, T::from_f64_lossy(LAYER_NORM_EPS))
        }
    }
}

/// Per-scene visual representations for the chosen source.
pub fn scene_representations<T: Scalar>(
    scenes: &[Scene],
    model: Option<&MbbrModel<T>>,
    repr: Representation,
    norm: VisualNorm,
    batch_size: usize,
) -> Result<Vec<Tensor<T>>> {
    let reps: Vec<Tensor<T>> = match repr {
        Representation::Raw => scenes.iter().map(raw_features).collect::<Result<_>>()?,
        Representation::Encoded => {
            let model = model.ok_or_else(|| Error::Config("encoded representations need a pretrained model".into()))?;
            let prepared: Vec<PreparedScene<T>> = scenes.iter().map(PreparedScene::from_scene).collect::<Result<_>>()?;
            encode_scenes(&prepared, model, batch_size)?
        }
    };
    if norm == VisualNorm::None {
        return Ok(reps);
    }
    reps.into_iter()
        .map(|t| {
            let mut tape = Tape::new();
            let x = tape.constant(t);
            let y = normalize_visual_on_tape(&mut tape, x, norm)?;
            Ok(tape.value(y).clone())
        })
        .collect()
}

/// Visual inputs for `cfg`: zero-width matrices when the visual block is
/// ablated, so no model is needed.
pub fn visual_inputs<T: Scalar>(
    scenes: &[Scene],
    model: Option<&MbbrModel<T>>,
    cfg: &FewShotConfig,
    batch_size: usize,
) -> Result<Vec<Tensor<T>>> {
    if !cfg.ablation.use_visual {
        return Ok(scenes.iter().map(|s| Tensor::zeros(&[s.entities.len(), 0])).collect());
    }
    scene_representations(scenes, model, cfg.representation, cfg.visual_norm, batch_size)
}

/// Fixed per-dimension standardization `(x - mean) · inv_std`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputScaler<T> {
    pub mean: Tensor<T>,
    pub inv_std: Tensor<T>,
}

impl<T: Scalar> InputScaler<T> {
    /// Statistics of the rows of `x`; constant columns get unit scale.
    pub fn fit(x: &Tensor<T>) -> Self {
        let (m, d) = x.rows_cols();
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for i in 0..m {
            for (j, v) in x.row(i).iter().enumerate() {
                mean[j] += v.to_f64_lossy();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m.max(1) as f64);
        for i in 0..m {
            for (j, v) in x.row(i).iter().enumerate() {
                let c = v.to_f64_lossy() - mean[j];
                sq[j] += c * c;
            }
        }
        let inv_std = sq
            .iter()
            .map(|&s| {
                let sd = (s / m.max(1) as f64).sqrt();
                if sd > 1e-12 { 1.0 / sd } else { 1.0 }
            })
            .collect::<Vec<_>>();
        InputScaler {
            mean: Tensor::from_f64(vec![d], &mean).expect("shape"),
            inv_std: Tensor::from_f64(vec![d], &inv_std).expect("shape"),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.numel()
    }
}

/// MLP with an optional ReLU hidden layer. Without it this is a linear
/// probe. The optional input scaler is fixed, not trained.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeights<T> {
    pub scaler: Option<InputScaler<T>>,
    pub hidden: Option<Linear<T>>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct ClassifierVars<T> {
    scaler: Option<(Vec<T>, Vec<T>)>,
    hidden: Option<LinearVars>,
    output: LinearVars,
}

impl<T: Scalar> ClassifierVars<T> {
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let x = match &self.scaler {
            Some((mean, inv_std)) => {
                let (m, d) = tape.value(x).rows_cols();
                if d != mean.len() {
                    return Err(Error::dim("classifier", format!("input width {d} vs scaler {}", mean.len())));
                }
                let shift = tape.constant(Tensor::new(vec![m, d], mean.repeat(m))?);
                let scale = tape.constant(Tensor::new(vec![m, d], inv_std.repeat(m))?);
                let c = tape.sub(x, shift)?;
                tape.mul(c, scale)?
            }
            None => x,
        };
        let h = match &self.hidden {
            Some(l) => {
                let h = l.forward(tape, x)?;
                tape.relu(h)?
            }
            None => x,
        };
        self.output.forward(tape, h)
    }
}

impl<T: Scalar> ClassifierWeights<T> {
    pub fn init(input: usize, hidden: Option<usize>, classes: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        match hidden {
            Some(h) => ClassifierWeights {
                scaler: None,
                hidden: Some(Linear::xavier(input, h, &mut r)),
                output: Linear::xavier(h, classes, &mut r),
            },
            None => ClassifierWeights {
                scaler: None,
                hidden: None,
                output: Linear::xavier(input, classes, &mut r),
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.scaler
            .as_ref()
            .map(InputScaler::dim)
            .unwrap_or_else(|| self.hidden.as_ref().unwrap_or(&self.output).input_dim())
    }

    pub fn num_classes(&self) -> usize {
        self.output.output_dim()
    }

    pub fn bind(&self, b: &mut Binder<'_, T>) -> ClassifierVars<T> {
        ClassifierVars {
            scaler: self.scaler.as_ref().map(|s| (s.mean.data().to_vec(), s.inv_std.data().to_vec())),
            hidden: self.hidden.as_ref().map(|l| l.bind(b)),
            output: self.output.bind(b),
        }
    }

    /// Logits for each row of `x` (`m × input_dim`).
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_dim() {
            return Err(Error::dim("classifier", format!("input {:?} for width {}", x.shape(), self.input_dim())));
        }
        let mut tape = Tape::unchecked();
        let vars = {
            let mut b = Binder::new(&mut tape, false);
            self.bind(&mut b)
        };
        let xv = tape.constant(x.clone());
        let y = vars.forward(&mut tape, xv)?;
        let mut out = tape.value(y).clone();
        out.clear_grad();
        Ok(out)
    }
}

/// Shape description stored next to classifier tensors in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierDescription {
    pub input_dim: usize,
    pub hidden_dim: Option<usize>,
    pub num_classes: usize,
    pub standardized: bool,
}

impl<T: Scalar> ClassifierWeights<T> {
    pub fn describe(&self) -> ClassifierDescription {
        ClassifierDescription {
            input_dim: self.input_dim(),
            hidden_dim: self.hidden.as_ref().map(Linear::output_dim),
            num_classes: self.num_classes(),
            standardized: self.scaler.is_some(),
        }
    }

    /// Trainable tensors plus `scaler.mean` and `scaler.inv_std` when present.
    pub fn checkpoint_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = self.to_named_tensors(prefix);
        if let Some(s) = &self.scaler {
            out.push(NamedTensor::from_tensor(prefixed(prefix, "scaler.mean"), &s.mean));
            out.push(NamedTensor::from_tensor(prefixed(prefix, "scaler.inv_std"), &s.inv_std));
        }
        out
    }

    pub fn from_checkpoint(desc: &ClassifierDescription, ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut w = ClassifierWeights::init(desc.input_dim, desc.hidden_dim, desc.num_classes, 0);
        w.load_from(prefix, ckpt)?;
        if desc.standardized {
            let get = |name: &str| -> Result<Tensor<T>> {
                let full = prefixed(prefix, name);
                let t = ckpt.get(&full).ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
                if t.shape != [desc.input_dim] {
                    return Err(Error::Checkpoint(format!("tensor {full} has shape {:?}", t.shape)));
                }
                t.to_tensor()
            };
            w.scaler = Some(InputScaler { mean: get("scaler.mean")?, inv_std: get("scaler.inv_std")? });
        }
        Ok(w)
    }
}

impl<T: Scalar> Params<T> for ClassifierWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        if let Some(h) = &self.hidden {
            h.visit(&prefixed(prefix, "hidden"), f);
        }
        self.output.visit(&prefixed(prefix, "output"), f);
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(h) = &mut self.hidden {
            out.extend(h.params_mut());
        }
        out.extend(self.output.params_mut());
        out
    }
}

/// Softmax in `f64` over logits.
pub fn softmax_scores<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let l: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy()).collect();
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|&v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax scores over predicates for one pair feature.
pub fn predict_pair<T: Scalar>(feature: &[T], w: &ClassifierWeights<T>) -> Result<Vec<f64>> {
    let x = Tensor::new(vec![1, feature.len()], feature.to_vec())?;
    Ok(softmax_scores(w.logits(&x)?.data()))
}

/// Predicate ids by descending score; ties go to the lower id.
pub fn rank_predicates(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Minibatch Adam settings for classifier fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decay_style: WeightDecay,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            decay_style: WeightDecay::L2,
            seed: 0,
        }
    }
}

impl FitConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            decay_style: self.decay_style,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Trains a softmax classifier on fixed inputs `x` (`m × d`).
pub fn fit_classifier<T: Scalar>(
    x: &Tensor<T>,
    labels: &[usize],
    num_classes: usize,
    hidden: Option<usize>,
    standardize: bool,
    cfg: &FitConfig,
) -> Result<ClassifierWeights<T>> {
    cfg.validate()?;
    let (m, d) = x.rows_cols();
    if m == 0 {
        return Err(Error::Invalid("classifier training needs at least one sample".into()));
    }
    if labels.len() != m || x.shape().len() != 2 {
        return Err(Error::dim("fit_classifier", format!("{} labels for {:?}", labels.len(), x.shape())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::index("fit_classifier", format!("label {bad} with {num_classes} classes")));
    }
    let mut w = ClassifierWeights::init(d, hidden, num_classes, derive_seed(cfg.seed, "classifier-init"));
    if standardize {
        w.scaler = Some(InputScaler::fit(x));
    }
    let mut adam = Adam::new(cfg.adam());
    let mut order: Vec<usize> = (0..m).collect();
    let mut r = rng(derive_seed(cfg.seed, "classifier-shuffle"));
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let mut rows = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                rows.extend_from_slice(x.row(i));
            }
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let (vars, bound) = {
                let mut b = Binder::new(&mut tape, true);
                let v = w.bind(&mut b);
                (v, b.into_vars())
            };
            let xv = tape.constant(Tensor::new(vec![chunk.len(), d], rows)?);
            let logits = vars.forward(&mut tape, xv)?;
            let loss = tape.cross_entropy(logits, &y)?;
            tape.backward(loss)?;
            let grads = gradients(&tape, &bound);
            let refs: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut w.params_mut(), &refs)?;
        }
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub hidden_dim: usize,
    pub representation: Representation,
    pub ablation: FeatureAblationConfig,
    pub visual_norm: VisualNorm,
    /// Also update encoder and fusion weights during fine-tuning.
    pub unfreeze_encoder: bool,
    /// Standardize pair features with statistics of the training samples.
    pub standardize: bool,
    pub fit: FitConfig,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            hidden_dim: 512,
            representation: Representation::Encoded,
            ablation: FeatureAblationConfig::default(),
            visual_norm: VisualNorm::Unit,
            unfreeze_encoder: false,
            standardize: false,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotOutcome<T> {
    pub classifier: ClassifierWeights<T>,
    /// Fine-tuned copy of the pretrained model when the encoder was unfrozen.
    pub model: Option<MbbrModel<T>>,
}

impl<T: Scalar> FewShotOutcome<T> {
    /// The pretrained model as it should be used for inference.
    pub fn model_or<'a>(&'a self, pretrained: Option<&'a MbbrModel<T>>) -> Option<&'a MbbrModel<T>> {
        self.model.as_ref().or(pretrained)
    }
}

/// Trains the predicate classifier on k-shot samples.
pub fn train_few_shot<T: Scalar>(
    samples: &[TripletRef],
    scenes: &[Scene],
    model: Option<&MbbrModel<T>>,
    table: &LabelEmbeddingTable,
    num_predicates: usize,
    cfg: &FewShotConfig,
) -> Result<FewShotOutcome<T>> {
    cfg.ablation.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("few-shot training needs at least one sample".into()));
    }
    for s in samples {
        if s.scene_index >= scenes.len() {
            return Err(Error::index("train_few_shot", format!("scene {} of {}", s.scene_index, scenes.len())));
        }
        if s.triplet.predicate_id >= num_predicates {
            return Err(Error::index("train_few_shot", format!("predicate {}", s.triplet.predicate_id)));
        }
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.triplet.predicate_id).collect();
    let unfreeze = cfg.unfreeze_encoder && cfg.ablation.use_visual && cfg.representation == Representation::Encoded;
    if !unfreeze {
        let mut needed: Vec<usize> = samples.iter().map(|s| s.scene_index).collect();
        needed.sort_unstable();
        needed.dedup();
        let subset: Vec<Scene> = needed.iter().map(|&i| scenes[i].clone()).collect();
        let reps = visual_inputs(&subset, model, cfg, 32)?;
        let mut rows = Vec::new();
        for s in samples {
            let at = needed.binary_search(&s.scene_index).expect("collected above");
            let f = build_pair_feature(&scenes[s.scene_index], s.triplet.subject, s.triplet.object, &reps[at], table, &cfg.ablation)?;
            rows.push(f);
        }
        let d = rows[0].len();
        let x = Tensor::new(vec![rows.len(), d], rows.concat())?;
        let classifier = fit_classifier(&x, &labels, num_predicates, Some(cfg.hidden_dim), cfg.standardize, &cfg.fit)?;
        return Ok(FewShotOutcome { classifier, model: None });
    }
    let model = model.ok_or_else(|| Error::Config("unfreezing the encoder needs a pretrained model".into()))?;
    fine_tune_jointly(samples, scenes, model, table, &labels, num_predicates, cfg)
}

fn fine_tune_jointly<T: Scalar>(
    samples: &[TripletRef],
    scenes: &[Scene],
    model: &MbbrModel<T>,
    table: &LabelEmbeddingTable,
    labels: &[usize],
    num_predicates: usize,
    cfg: &FewShotConfig,
) -> Result<FewShotOutcome<T>> {
    cfg.fit.validate()?;
    let mut model = model.clone();
    let visual = model.encoder_config.model_dim;
    let no_visual = FeatureAblationConfig { use_visual: false, ..cfg.ablation };
    let rest_dim = no_visual.feature_dim(0, table.dim());
    let mut classifier = ClassifierWeights::init(
        cfg.ablation.feature_dim(visual, table.dim()),
        Some(cfg.hidden_dim),
        num_predicates,
        derive_seed(cfg.fit.seed, "classifier-init"),
    );
    let mut rest = Vec::with_capacity(samples.len());
    for s in samples {
        let sc = &scenes[s.scene_index];
        if rest_dim == 0 {
            rest.push(Vec::new());
            continue;
        }
        let dummy = Tensor::<T>::zeros(&[sc.entities.len(), 0]);
        rest.push(build_pair_feature(sc, s.triplet.subject, s.triplet.object, &dummy, table, &no_visual)?);
    }
    if cfg.standardize {
        let frozen = train_few_shot(
            samples,
            scenes,
            Some(&model),
            table,
            num_predicates,
            &FewShotConfig { unfreeze_encoder: false, fit: FitConfig { epochs: 0, ..cfg.fit.clone() }, ..cfg.clone() },
        )?;
        classifier.scaler = frozen.classifier.scaler;
    }
    let mut prepared: Vec<Option<PreparedScene<T>>> = vec![None; scenes.len()];
    for s in samples {
        if prepared[s.scene_index].is_none() {
            prepared[s.scene_index] = Some(PreparedScene::from_scene(&scenes[s.scene_index])?);
        }
    }
    let mut enc_adam = Adam::new(cfg.fit.adam());
    let mut cls_adam = Adam::new(cfg.fit.adam());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut r = rng(derive_seed(cfg.fit.seed, "classifier-shuffle"));
    for _ in 0..cfg.fit.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.fit.batch_size) {
            let mut batch_scenes: Vec<usize> = chunk.iter().map(|&i| samples[i].scene_index).collect();
            batch_scenes.sort_unstable();
            batch_scenes.dedup();
            let refs: Vec<&PreparedScene<T>> = batch_scenes
                .iter()
                .map(|&i| prepared[i].as_ref().expect("prepared above"))
                .collect();
            let mut tape = Tape::new();
            let (mvars, mbound) = model.bind(&mut tape, true);
            let (cvars, cbound) = {
                let mut b = Binder::new(&mut tape, true);
                let v = classifier.bind(&mut b);
                (v, b.into_vars())
            };
            let (z, seq) = encode_on_tape_unmasked(&mut tape, &mvars, &model, &refs)?;
            let z = normalize_visual_on_tape(&mut tape, z, cfg.visual_norm)?;
            let slot = |i: usize, e: usize| batch_scenes.binary_search(&samples[i].scene_index).expect("in batch") * seq + e;
            let subj: Vec<usize> = chunk.iter().map(|&i| slot(i, samples[i].triplet.subject)).collect();
            let obj: Vec<usize> = chunk.iter().map(|&i| slot(i, samples[i].triplet.object)).collect();
            let zs = tape.gather_rows(z, &subj)?;
            let zo = tape.gather_rows(z, &obj)?;
            let mut parts = vec![zs, zo];
            if rest_dim > 0 {
                let data: Vec<T> = chunk.iter().flat_map(|&i| rest[i].iter().copied()).collect();
                parts.push(tape.constant(Tensor::new(vec![chunk.len(), rest_dim], data)?));
            }
            let x = tape.concat_cols(&parts)?;
            let logits = cvars.forward(&mut tape, x)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = tape.cross_entropy(logits, &y)?;
            tape.backward(loss)?;
            let mg = gradients(&tape, &mbound);
            let cg = gradients(&tape, &cbound);
            drop(tape);
            let mrefs: Vec<&[T]> = mg.iter().map(|g| g.as_slice()).collect();
            let crefs: Vec<&[T]> = cg.iter().map(|g| g.as_slice()).collect();
            enc_adam.step(&mut model.params_mut(), &mrefs)?;
            cls_adam.step(&mut classifier.params_mut(), &crefs)?;
        }
    }
    Ok(FewShotOutcome { classifier, model: Some(model) })
}

/// Scores every annotated pair of every scene. `reps[i]` holds the visual
/// representations of `scenes[i]`.
pub fn predict_scenes<T: Scalar>(
    scenes: &[Scene],
    reps: &[Tensor<T>],
    table: &LabelEmbeddingTable,
    ab: &FeatureAblationConfig,
    w: &ClassifierWeights<T>,
) -> Result<Vec<Vec<PairPrediction>>> {
    if reps.len() != scenes.len() {
        return Err(Error::dim("predict_scenes", format!("{} representations for {} scenes", reps.len(), scenes.len())));
    }
    scenes
        .iter()
        .zip(reps)
        .map(|(scene, z)| {
            let pairs = scene.annotated_pairs();
            if pairs.is_empty() {
                return Ok(Vec::new());
            }
            let mut rows = Vec::new();
            for &(s, o) in &pairs {
                rows.extend(build_pair_feature(scene, s, o, z, table, ab)?);
            }
            let x = Tensor::new(vec![pairs.len(), rows.len() / pairs.len()], rows)?;
            let logits = w.logits(&x)?;
            Ok(pairs
                .iter()
                .enumerate()
                .map(|(i, &(s, o))| PairPrediction {
                    scene_id: scene.scene_id.clone(),
                    subject_index: s,
                    object_index: o,
                    scores: softmax_scores(logits.row(i)),
                })
                .collect())
        })
        .collect()
}
