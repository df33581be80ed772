//! Data preparation, the three-stage training schedule and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{
    crop_window, project_to_image, CropCorner, CropSpec, CropTransform, RotationSpec, ScaleSpec,
    SkeletonAugment,
};
use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{
    DataConfig, FusionMode, ModelConfig, RunConfig, SkeletonBackbone, TrainConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{decision_fusion, Logits};
use crate::model::{FeatureCache, FrameInput, FusionNet, Model, ModelInput, Stream, FUSION, HEADS};
use crate::params::{Adam, ParamId, ParamStore};
use crate::rgb_stream::skeleton_attention_mask;
use crate::skeleton_io::{
    resample, select_frame, va_pre_normalize, ActionSample, Dataset, SkeletonSequence,
};
use crate::skeleton_stream::skeleton_to_ctv;
use crate::tensor::Tensor;

/// One network input with its label and dataset index.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub source: usize,
    pub label: usize,
    pub input: ModelInput,
}

/// Train/test split: the manifest's `split` field when present, otherwise
/// every fifth sample goes to test.
pub fn split_indices(ds: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in ds.manifest.samples.iter().enumerate() {
        let is_test = match &s.meta {
            Some(m) => m.split == "test",
            None => i % 5 == 4,
        };
        if is_test {
            test.push(i)
        } else {
            train.push(i)
        }
    }
    (train, test)
}

/// VA-pre, skeleton augmentation, resampling, then the backbone's layout.
pub fn prepare_skeleton(
    seq: &SkeletonSequence,
    augment: &SkeletonAugment,
    data: &DataConfig,
    backbone: SkeletonBackbone,
) -> Result<Tensor> {
    let mut s = if data.va_pre {
        va_pre_normalize(seq)
    } else {
        seq.clone()
    };
    s = augment.apply(&s);
    if data.target_frames > 0 {
        let pad = (data.pad_frames > 0).then_some(data.pad_frames);
        s = resample(&s, data.target_frames, pad)?;
    }
    match backbone {
        SkeletonBackbone::Stgcn => Ok(skeleton_to_ctv(&s)),
        SkeletonBackbone::Bilstm => {
            Tensor::new(&[s.frame_count(), 3 * s.joint_count()], s.data().to_vec())
        }
    }
}

/// Loaded frame with the projected joints of its time step.
struct FrameSource {
    index: usize,
    image: crate::frame::FrameTensor,
    joints2d: Vec<[f64; 2]>,
}

fn load_frames(sample: &ActionSample, fractions: &[f64]) -> Result<Vec<FrameSource>> {
    fractions
        .iter()
        .map(|&f| {
            let r = select_frame(sample, f);
            let image = crate::frame::FrameTensor::load_png(&sample.frame_paths[r.index])?;
            let joints2d =
                project_to_image(&sample.skeleton.frame_joints(r.index), &sample.camera)?;
            Ok(FrameSource {
                index: r.index,
                image,
                joints2d,
            })
        })
        .collect()
}

fn crop_for(
    src: &FrameSource,
    crop: Option<&CropSpec>,
    model: &ModelConfig,
) -> Result<CropTransform> {
    let n = model.rgb.input_size;
    match crop {
        Some(spec) => crop_window(
            &src.joints2d,
            src.image.width(),
            src.image.height(),
            spec,
            n,
            n,
        ),
        None => Ok(CropTransform::full_frame(
            src.image.width(),
            src.image.height(),
            n,
            n,
        )),
    }
}

fn frame_input(
    sample: &ActionSample,
    src: &FrameSource,
    crop: Option<&CropSpec>,
    model: &ModelConfig,
) -> Result<FrameInput> {
    let t = crop_for(src, crop, model)?;
    let image = t.render(&src.image).into_tensor().map(|v| v - 0.5);
    let (_, fh, fw) = model.rgb.out_shape();
    let mask = skeleton_attention_mask(
        &sample.skeleton,
        src.index,
        &sample.camera,
        &t,
        fw,
        fh,
        model.square_frac,
    )?;
    Ok(FrameInput {
        image,
        mask: mask.tensor().clone(),
    })
}

/// Training items for one sample: the original skeleton plus its rotated and
/// scaled copies, each paired with a projection-crop variant.
pub fn prepare_train_sample(
    source: usize,
    sample: &ActionSample,
    data: &DataConfig,
    model: &ModelConfig,
    seed: u64,
) -> Result<Vec<Prepared>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(source as u64);
    let mut copies = vec![SkeletonAugment::Identity];
    if data.augmentation {
        for _ in 0..data.augment.n_rot {
            copies.push(SkeletonAugment::Rotate(RotationSpec::sample(
                &data.augment,
                &mut rng,
            )));
        }
        for _ in 0..data.augment.n_scale {
            copies.push(SkeletonAugment::Scale(ScaleSpec::sample(
                &data.augment,
                &mut rng,
            )));
        }
    }
    let crops: Vec<Option<CropSpec>> = if data.projection_crop {
        (0..data.crop_variants.max(1))
            .map(|k| {
                let corner = data.crop_corners[k % data.crop_corners.len()];
                Some(CropSpec::sample(data.crop_margin_range, corner, &mut rng))
            })
            .collect()
    } else {
        vec![None]
    };
    let frames = load_frames(sample, &data.frame_fractions)?;
    let count = copies.len().max(crops.len());
    (0..count)
        .map(|k| {
            let skeleton = prepare_skeleton(
                &sample.skeleton,
                &copies[k % copies.len()],
                data,
                model.backbone,
            )?;
            let crop = crops[k % crops.len()].as_ref();
            let frames = frames
                .iter()
                .map(|f| frame_input(sample, f, crop, model))
                .collect::<Result<Vec<_>>>()?;
            Ok(Prepared {
                source,
                label: sample.label,
                input: ModelInput { skeleton, frames },
            })
        })
        .collect()
}

fn eval_crop_spec(data: &DataConfig) -> Option<CropSpec> {
    let mid = 0.5 * (data.crop_margin_range.0 + data.crop_margin_range.1);
    data.projection_crop.then_some(CropSpec {
        margin_w: mid,
        margin_h: mid,
        corner: CropCorner::Center,
    })
}

/// The first evaluation frame of a sample as the network sees it.
#[derive(Clone, Debug)]
pub struct EvalView {
    pub frame_index: usize,
    pub crop: CropTransform,
    /// The crop at network resolution, values in `[0, 1]`.
    pub image: crate::frame::FrameTensor,
}

pub fn eval_view(
    sample: &ActionSample,
    data: &DataConfig,
    model: &ModelConfig,
) -> Result<EvalView> {
    let src = load_frames(sample, &data.frame_fractions[..1])?.remove(0);
    let crop = crop_for(&src, eval_crop_spec(data).as_ref(), model)?;
    Ok(EvalView {
        frame_index: src.index,
        crop,
        image: crop.render(&src.image),
    })
}

/// The single evaluation item of a sample: no augmentation, centered crop
/// with the mid-range margin.
pub fn prepare_eval_sample(
    source: usize,
    sample: &ActionSample,
    data: &DataConfig,
    model: &ModelConfig,
) -> Result<Prepared> {
    let skeleton = prepare_skeleton(
        &sample.skeleton,
        &SkeletonAugment::Identity,
        data,
        model.backbone,
    )?;
    let crop = eval_crop_spec(data);
    let frames = load_frames(sample, &data.frame_fractions)?
        .iter()
        .map(|f| frame_input(sample, f, crop.as_ref(), model))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        source,
        label: sample.label,
        input: ModelInput { skeleton, frames },
    })
}

/// Loads and prepares the given dataset indices in parallel, keeping index order.
pub fn prepare_split(
    ds: &Dataset,
    indices: &[usize],
    train: bool,
    cfg: &RunConfig,
) -> Result<Vec<Prepared>> {
    let per: Vec<Vec<Prepared>> = indices
        .par_iter()
        .map(|&i| {
            let s = ds.load_sample(i)?;
            if train {
                prepare_train_sample(i, &s, &cfg.data, &cfg.model, cfg.seed)
            } else {
                Ok(vec![prepare_eval_sample(i, &s, &cfg.data, &cfg.model)?])
            }
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// What the loss is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// A stream through its temporary head.
    Head(Stream),
    /// The fusion module's scores.
    Fused,
    /// Both temporary heads (decision fusion); the losses are summed.
    Decision,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

struct SampleStep {
    loss: f64,
    pred: usize,
    grads: Vec<(ParamId, Tensor)>,
}

fn scores(g: &Graph, v: Var) -> Logits {
    Logits::from_scores(g.value(v).data().to_vec())
}

fn sample_step(
    model: &Model,
    item: &Prepared,
    cache: Option<&FeatureCache>,
    objective: Objective,
) -> Result<SampleStep> {
    let mut g = Graph::new();
    let (loss, pred) = match objective {
        Objective::Head(stream) => {
            let vec = match stream {
                Stream::Skeleton => model.skel_forward(&mut g, &item.input)?.vec,
                Stream::Rgb => model.rgb_forward(&mut g, &item.input)?.vec,
            };
            let out = model.head_forward(&mut g, stream, vec)?;
            let pred = scores(&g, out).argmax();
            (g.cross_entropy(out, item.label)?, pred)
        }
        Objective::Fused | Objective::Decision => {
            let (sm, sv, rm, rv) = match cache {
                Some(c) => {
                    let sm = c.skel_map.clone().map(|t| g.constant(t));
                    let sv = g.constant(c.skel_vec.clone());
                    let rm = c.rgb_map.clone().map(|t| g.constant(t));
                    let rv = g.constant(c.rgb_vec.clone());
                    (sm, sv, rm, rv)
                }
                None => {
                    let s = model.skel_forward(&mut g, &item.input)?;
                    let r = model.rgb_forward(&mut g, &item.input)?;
                    (s.map, s.vec, r.map, r.vec)
                }
            };
            if objective == Objective::Fused {
                let out = model.fuse(&mut g, sm, sv, rm, rv)?;
                let pred = scores(&g, out).argmax();
                (g.cross_entropy(out, item.label)?, pred)
            } else {
                let a = model.head_forward(&mut g, Stream::Skeleton, sv)?;
                let b = model.head_forward(&mut g, Stream::Rgb, rv)?;
                let pred =
                    decision_fusion(&scores(&g, a), &scores(&g, b), model.config.decision_weight)?
                        .argmax();
                let la = g.cross_entropy(a, item.label)?;
                let lb = g.cross_entropy(b, item.label)?;
                (g.add(la, lb)?, pred)
            }
        }
    };
    let grads = g.backward(loss);
    Ok(SampleStep {
        loss: g.value(loss).data()[0],
        pred,
        grads: g.param_grads(&grads),
    })
}

/// Runs the staged schedule on a model and records a log row per epoch.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub seed: u64,
    pub verbose: bool,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(config: TrainConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            verbose: false,
            log: Vec::new(),
        }
    }

    /// Stage 1: trains one stream with its temporary head; everything else is frozen.
    pub fn train_stream(
        &mut self,
        model: &mut Model,
        stream: Stream,
        items: &[Prepared],
    ) -> Result<()> {
        model.store.set_all_frozen(true);
        model.store.set_frozen(stream.prefix(), false);
        model.store.set_frozen(stream.head_prefix(), false);
        let stage = match stream {
            Stream::Skeleton => "stream_skeleton",
            Stream::Rgb => "stream_rgb",
        };
        let epochs = self.config.epochs_stream;
        let result = self.run(
            model,
            items,
            None,
            Objective::Head(stream),
            epochs,
            1.0,
            stage,
        );
        model.store.set_all_frozen(false);
        result
    }

    /// Stage 2: trains the fusion module on frozen stream features. Decision
    /// fusion has no fusion parameters and refits the two heads instead.
    pub fn train_fusion(&mut self, model: &mut Model, items: &[Prepared]) -> Result<()> {
        let decision = matches!(model.fusion, FusionNet::Decision);
        model.store.set_all_frozen(true);
        model
            .store
            .set_frozen(if decision { HEADS } else { FUSION }, false);
        let streams_before = stream_fingerprint(&model.store);
        let caches: Vec<FeatureCache> = items
            .par_iter()
            .map(|it| model.features(&it.input))
            .collect::<Result<_>>()?;
        let objective = if decision {
            Objective::Decision
        } else {
            Objective::Fused
        };
        let epochs = self.config.epochs_fusion;
        let result = self.run(
            model,
            items,
            Some(&caches),
            objective,
            epochs,
            1.0,
            "fusion",
        );
        model.store.set_all_frozen(false);
        result?;
        if stream_fingerprint(&model.store) != streams_before {
            return Err(Error::Config(
                "stream weights changed while training the fusion".into(),
            ));
        }
        Ok(())
    }

    /// Stage 3: unfreezes everything and trains end to end at a reduced rate.
    pub fn finetune_all(&mut self, model: &mut Model, items: &[Prepared]) -> Result<()> {
        model.store.set_all_frozen(false);
        let objective = if matches!(model.fusion, FusionNet::Decision) {
            Objective::Decision
        } else {
            Objective::Fused
        };
        let (epochs, scale) = (self.config.epochs_finetune, self.config.finetune_lr_scale);
        self.run(model, items, None, objective, epochs, scale, "finetune")
    }

    /// Mini-batch Adam over `items`. Per-sample gradients are computed in
    /// parallel and reduced in batch order, so results do not depend on the
    /// thread count.
    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &mut self,
        model: &mut Model,
        items: &[Prepared],
        caches: Option<&[FeatureCache]>,
        objective: Objective,
        epochs: usize,
        lr_scale: f64,
        stage: &str,
    ) -> Result<()> {
        if items.is_empty() {
            return Err(Error::DataEmpty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(
            stage
                .bytes()
                .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64)),
        );
        let mut opt = Adam::new(self.config.beta1, self.config.beta2, self.config.eps);
        let mut order: Vec<usize> = (0..items.len()).collect();
        let bs = self.config.batch_size;
        for epoch in 0..epochs {
            let lr = self.config.lr_at(epoch) * lr_scale;
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for (step, batch) in order.chunks(bs).enumerate() {
                let m: &Model = model;
                let steps: Vec<SampleStep> = batch
                    .par_iter()
                    .map(|&i| sample_step(m, &items[i], caches.map(|c| &c[i]), objective))
                    .collect::<Result<_>>()?;
                let mut acc: Vec<Option<Tensor>> = vec![None; model.store.len()];
                let mut batch_loss = 0.0;
                for (s, &i) in steps.into_iter().zip(batch) {
                    batch_loss += s.loss;
                    correct += usize::from(s.pred == items[i].label);
                    for (id, gt) in s.grads {
                        match &mut acc[id.0] {
                            Some(a) => a.add_assign(&gt),
                            slot @ None => *slot = Some(gt),
                        }
                    }
                }
                if !batch_loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        stage: stage.to_string(),
                        epoch,
                        step,
                        loss: batch_loss,
                    });
                }
                loss_sum += batch_loss;
                let inv = 1.0 / batch.len() as f64;
                let grads: Vec<(ParamId, Tensor)> = acc
                    .into_iter()
                    .enumerate()
                    .filter_map(|(i, g)| g.map(|g| (ParamId(i), g.map(|v| v * inv))))
                    .collect();
                opt.step(&mut model.store, &grads, lr);
            }
            let row = EpochLog {
                stage: stage.to_string(),
                epoch,
                lr,
                loss: loss_sum / items.len() as f64,
                train_accuracy: correct as f64 / items.len() as f64,
            };
            if self.verbose {
                eprintln!(
                    "[{}] epoch {:>3} lr {:.2e} loss {:.4} acc {:.3}",
                    row.stage, row.epoch, row.lr, row.loss, row.train_accuracy
                );
            }
            self.log.push(row);
        }
        Ok(())
    }
}

fn stream_fingerprint(store: &ParamStore) -> (u64, u64) {
    (
        store.fingerprint(Stream::Skeleton.prefix()),
        store.fingerprint(Stream::Rgb.prefix()),
    )
}

/// Which output of the model is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    Full,
    Stream(Stream),
}

/// Accuracy and confusion matrix over a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<f64>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn from_predictions(
        labels: &[usize],
        predictions: &[usize],
        classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::DataEmpty);
        }
        if labels.len() != predictions.len() {
            return Err(Error::shape(format!(
                "{} labels, {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&l, &p) in labels.iter().zip(predictions) {
            if l >= classes || p >= classes {
                return Err(Error::Config(format!("class index outside 0..{classes}")));
            }
            confusion[l][p] += 1;
        }
        let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[k] as f64 / n as f64
                }
            })
            .collect();
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            confusion,
            per_class,
            labels: labels.to_vec(),
            predictions: predictions.to_vec(),
        })
    }

    /// Accuracy restricted to the positions where `keep` is true.
    pub fn subset_accuracy(&self, keep: impl Fn(usize) -> bool) -> Option<f64> {
        let (mut n, mut ok) = (0usize, 0usize);
        for (i, (&l, &p)) in self.labels.iter().zip(&self.predictions).enumerate() {
            if keep(i) {
                n += 1;
                ok += usize::from(l == p);
            }
        }
        (n > 0).then(|| ok as f64 / n as f64)
    }
}

/// Scores `items` in parallel.
pub fn evaluate(model: &Model, items: &[Prepared], predictor: Predictor) -> Result<EvalReport> {
    let preds: Vec<usize> = items
        .par_iter()
        .map(|it| {
            let out = match predictor {
                Predictor::Full => model.predict(&it.input)?,
                Predictor::Stream(s) => model.predict_stream(s, &it.input)?,
            };
            Ok(out.argmax())
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
    EvalReport::from_predictions(&labels, &preds, model.classes)
}

/// Result of one ablation variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub accuracy: f64,
    /// Accuracy per synthetic family, when the manifest carries metadata.
    pub family_accuracy: BTreeMap<String, f64>,
    pub params: usize,
    pub report: EvalReport,
}

/// How a named ablation variant modifies the base run.
#[derive(Clone, Debug)]
pub struct VariantPlan {
    pub config: RunConfig,
    pub stages: u8,
    pub predictor: Predictor,
}

/// Resolves a variant name against `base`.
pub fn variant_plan(base: &RunConfig, name: &str) -> Result<VariantPlan> {
    let mut config = base.clone();
    let mut stages = 3;
    let mut predictor = Predictor::Full;
    match name {
        "full" => {}
        "no_self_attn" => config.model.self_attention = false,
        "no_skel_attn" => config.model.skeleton_attention = false,
        "decision" => config.model.fusion = FusionMode::Decision,
        "sum" => config.model.fusion = FusionMode::Sum,
        "skeleton_only" => {
            stages = 1;
            predictor = Predictor::Stream(Stream::Skeleton);
        }
        "rgb_only" => {
            config.model.skeleton_attention = false;
            stages = 1;
            predictor = Predictor::Stream(Stream::Rgb);
        }
        "no_augmentation" => config.data.augmentation = false,
        "no_projection_crop" => config.data.projection_crop = false,
        other => {
            if let Some(x) = other.strip_prefix("frame_fraction:") {
                let f: f64 = x.parse().map_err(|_| Error::UnknownVariant(other.into()))?;
                config.data.frame_fractions = vec![f];
            } else if let Some(x) = other.strip_prefix("frame_count:") {
                let n: usize = x.parse().map_err(|_| Error::UnknownVariant(other.into()))?;
                config.data.frame_fractions = RunConfig::fractions_for_count(n)?;
            } else {
                return Err(Error::UnknownVariant(other.into()));
            }
        }
    }
    config.validate()?;
    Ok(VariantPlan {
        config,
        stages,
        predictor,
    })
}

/// Prepared training and test items.
pub type SplitItems = (Vec<Prepared>, Vec<Prepared>);

/// Trains and evaluates variants on one dataset, reusing prepared data and
/// stage-1 streams whose inputs are unchanged between variants.
pub struct Experiment {
    pub dataset: Dataset,
    pub base: RunConfig,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub verbose: bool,
    prepared: HashMap<String, Arc<SplitItems>>,
    streams: HashMap<String, ParamStore>,
}

fn key<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serializes")
}

impl Experiment {
    pub fn new(dataset: Dataset, base: RunConfig) -> Result<Self> {
        base.validate()?;
        if dataset.is_empty() {
            return Err(Error::DataEmpty);
        }
        let (train_idx, test_idx) = split_indices(&dataset);
        if train_idx.is_empty() || test_idx.is_empty() {
            return Err(Error::DataEmpty);
        }
        Ok(Self {
            dataset,
            base,
            train_idx,
            test_idx,
            verbose: false,
            prepared: HashMap::new(),
            streams: HashMap::new(),
        })
    }

    pub fn classes(&self) -> usize {
        self.dataset.class_count()
    }

    fn data_key(cfg: &RunConfig) -> String {
        let m = &cfg.model;
        key(&(&cfg.data, &m.rgb, m.square_frac, m.backbone, cfg.seed))
    }

    /// Prepared `(train, test)` items for `cfg`, cached by the inputs that affect them.
    pub fn prepared(&mut self, cfg: &RunConfig) -> Result<Arc<SplitItems>> {
        let k = Self::data_key(cfg);
        if let Some(p) = self.prepared.get(&k) {
            return Ok(p.clone());
        }
        let train = prepare_split(&self.dataset, &self.train_idx, true, cfg)?;
        let test = prepare_split(&self.dataset, &self.test_idx, false, cfg)?;
        let p = Arc::new((train, test));
        self.prepared.insert(k, p.clone());
        Ok(p)
    }

    fn stream_key(cfg: &RunConfig, stream: Stream, classes: usize) -> String {
        let m = &cfg.model;
        match stream {
            Stream::Skeleton => {
                // the skeleton stream never sees frames, crops or masks
                let mut data = cfg.data.clone();
                data.frame_fractions = Vec::new();
                data.crop_margin_range = (0.0, 0.0);
                key(&(
                    "skel",
                    &data,
                    m.backbone,
                    &m.stgcn,
                    &m.lstm,
                    &m.edges,
                    m.joints,
                    &m.partition,
                    &cfg.train,
                    cfg.seed,
                    classes,
                ))
            }
            Stream::Rgb => key(&(
                "rgb",
                Self::data_key(cfg),
                &m.rgb,
                m.self_attention,
                m.skeleton_attention,
                m.feature_dim,
                &cfg.train,
                classes,
            )),
        }
    }

    /// Trains a model for `cfg` through `stages` (1 to 3). Stage-1 streams are
    /// shared with earlier runs whose stream inputs match.
    pub fn train(&mut self, cfg: &RunConfig, stages: u8) -> Result<(Model, Vec<EpochLog>)> {
        self.train_with(cfg, stages, &[Stream::Skeleton, Stream::Rgb])
    }

    /// Like [`Experiment::train`], but stage 1 only trains `streams`. Stages 2
    /// and 3 always train both.
    pub fn train_with(
        &mut self,
        cfg: &RunConfig,
        stages: u8,
        streams: &[Stream],
    ) -> Result<(Model, Vec<EpochLog>)> {
        let data = self.prepared(cfg)?;
        let (train, _) = &*data;
        let classes = self.classes();
        let mut model = Model::new(&cfg.model, classes, cfg.seed)?;
        let mut trainer = Trainer::new(cfg.train.clone(), cfg.seed);
        trainer.verbose = self.verbose;
        let all = [Stream::Skeleton, Stream::Rgb];
        for &stream in if stages >= 2 { &all[..] } else { streams } {
            let k = Self::stream_key(cfg, stream, classes);
            if let Some(saved) = self.streams.get(&k) {
                model.store.load_from(saved)?;
            } else {
                trainer.train_stream(&mut model, stream, train)?;
                self.streams.insert(
                    k,
                    model.store.subset(&[stream.prefix(), stream.head_prefix()]),
                );
            }
        }
        if stages >= 2 {
            trainer.train_fusion(&mut model, train)?;
        }
        if stages >= 3 {
            trainer.finetune_all(&mut model, train)?;
        }
        Ok((model, trainer.log))
    }

    /// Trains and scores one named variant.
    pub fn run_variant(&mut self, name: &str) -> Result<VariantResult> {
        Ok(self.run_variant_model(name)?.0)
    }

    /// [`Experiment::run_variant`], also returning the trained model.
    pub fn run_variant_model(&mut self, name: &str) -> Result<(VariantResult, Model)> {
        let plan = variant_plan(&self.base, name)?;
        let (model, _) = match plan.predictor {
            Predictor::Stream(s) => self.train_with(&plan.config, plan.stages, &[s])?,
            Predictor::Full => self.train(&plan.config, plan.stages)?,
        };
        let data = self.prepared(&plan.config)?;
        let report = evaluate(&model, &data.1, plan.predictor)?;
        let mut family_accuracy = BTreeMap::new();
        let families: Vec<Option<String>> = data
            .1
            .iter()
            .map(|p| {
                self.dataset.manifest.samples[p.source]
                    .meta
                    .as_ref()
                    .map(|m| m.family.clone())
            })
            .collect();
        let mut names: Vec<&String> = families.iter().flatten().collect();
        names.sort();
        names.dedup();
        for f in names {
            if let Some(a) = report.subset_accuracy(|i| families[i].as_ref() == Some(f)) {
                family_accuracy.insert(f.clone(), a);
            }
        }
        let result = VariantResult {
            name: name.to_string(),
            accuracy: report.accuracy,
            family_accuracy,
            params: model.store.count(""),
            report,
        };
        Ok((result, model))
    }
}

/// Trains `cfg` on `dataset` up to stage `stages`, starting after the stage of
/// `resume` when given. `on_stage` runs after every completed stage, e.g. to
/// write a checkpoint.
pub fn train_stages(
    cfg: &RunConfig,
    dataset: &Dataset,
    stages: u8,
    resume: Option<&Checkpoint>,
    verbose: bool,
    mut on_stage: impl FnMut(&Model, u8) -> Result<()>,
) -> Result<(Model, Vec<EpochLog>)> {
    if !(1..=3).contains(&stages) {
        return Err(Error::Config(format!(
            "stages must be 1, 2 or 3, got {stages}"
        )));
    }
    cfg.validate()?;
    let (train_idx, _) = split_indices(dataset);
    if train_idx.is_empty() {
        return Err(Error::DataEmpty);
    }
    let (mut model, done) = match resume {
        Some(ck) => (ck.to_model()?, ck.stage),
        None => (Model::new(&cfg.model, dataset.class_count(), cfg.seed)?, 0),
    };
    if model.classes != dataset.class_count() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset {}",
            model.classes,
            dataset.class_count()
        )));
    }
    let items = prepare_split(dataset, &train_idx, true, cfg)?;
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.seed);
    trainer.verbose = verbose;
    for stage in done + 1..=stages {
        match stage {
            1 => {
                trainer.train_stream(&mut model, Stream::Skeleton, &items)?;
                trainer.train_stream(&mut model, Stream::Rgb, &items)?;
            }
            2 => trainer.train_fusion(&mut model, &items)?,
            _ => trainer.finetune_all(&mut model, &items)?,
        }
        on_stage(&model, stage)?;
    }
    Ok((model, trainer.log))
}

/// Trains and scores every variant under the same seed and data.
pub fn run_ablation(
    dataset: Dataset,
    variants: &[String],
    config: &RunConfig,
    verbose: bool,
) -> Result<Vec<VariantResult>> {
    // resolve every name first so a typo fails before any training
    for v in variants {
        variant_plan(config, v)?;
    }
    let mut exp = Experiment::new(dataset, config.clone())?;
    exp.verbose = verbose;
    variants.iter().map(|v| exp.run_variant(v)).collect()
}
