//! The two-stage distillation domain-adaptation pipeline.
//!
//! Stage one trains student model 1 against a frozen teacher; stage two
//! freezes student model 1 and trains student model 2 from it. Each epoch
//! selects target samples whose highest teacher-softmax probability exceeds
//! the stage threshold (strictly), computes the soft-target loss on the
//! selected samples and the covariance-alignment loss between source and
//! target feature batches, and steps the optimizer under the decaying
//! learning-rate schedule `eta = eta0 / (1 + alpha p)^beta` with `p` running
//! linearly from 0 to 1 over the stage. Stage one uses the higher threshold;
//! stage two may admit more samples through a lower one. Everything is
//! deterministic under the configured seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{shuffle, DomainDataset};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, coral_loss_grad, cross_entropy_grad, soft_target_loss_grad, softmax};
use crate::model::{Model, ModelGrads, ModelSpec};
use crate::quant::argmax;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn parse(s: &str) -> Result<OptimizerKind> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::sgd()),
            "adam" => Ok(Self::adam()),
            other => Err(Error::config("optimizer", format!("unknown optimizer `{}`", other))),
        }
    }
}

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the domain-confusion term.
    pub lambda: f64,
    pub threshold_stage1: f64,
    pub threshold_stage2: f64,
    pub temperature: f64,
    pub optimizer: OptimizerKind,
    /// Learning-rate schedule constants.
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            threshold_stage1: 0.9,
            threshold_stage2: 0.8,
            temperature: 4.0,
            optimizer: OptimizerKind::sgd(),
            eta0: 0.01,
            alpha: 10.0,
            beta: 0.75,
            epochs: 10,
            batch_size: 32,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::config("lambda", "must be non-negative"));
        }
        for (name, v) in [
            ("threshold_stage1", self.threshold_stage1),
            ("threshold_stage2", self.threshold_stage2),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        if self.threshold_stage1 < self.threshold_stage2 {
            return Err(Error::config(
                "threshold_stage1",
                "the first distillation stage uses the higher threshold",
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.eta0 <= 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::config("lr schedule", "eta0 > 0, alpha >= 0, beta >= 0 required"));
        }
        Ok(())
    }
}

/// Decayed learning rate at training progress `p` in `[0, 1]`.
pub fn lr_at(p: f64, cfg: &TrainConfig) -> f64 {
    cfg.eta0 / (1.0 + cfg.alpha * p).powf(cfg.beta)
}

/// Target samples admitted by the confidence threshold, with their
/// pseudo-labels and the (frozen) selector's logits.
#[derive(Debug, Clone)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub pseudo_labels: Vec<usize>,
    pub max_probs: Vec<f64>,
    pub logits: Vec<Tensor>,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Keep the samples whose highest softmax probability strictly exceeds the
/// threshold; the pseudo-label is the argmax class.
pub fn select_samples(model: &Model, inputs: &[Tensor], threshold: f64) -> Result<Selection> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config("threshold", "must lie in [0, 1]"));
    }
    let mut selection = Selection {
        indices: Vec::new(),
        pseudo_labels: Vec::new(),
        max_probs: Vec::new(),
        logits: Vec::new(),
    };
    for (i, x) in inputs.iter().enumerate() {
        let out = model.forward(x)?;
        let probs = softmax(&out.logits);
        let label = argmax(&probs);
        let p = probs.data()[label];
        if p > threshold {
            selection.indices.push(i);
            selection.pseudo_labels.push(label);
            selection.max_probs.push(p);
            selection.logits.push(out.logits);
        }
    }
    Ok(selection)
}

/// Classification accuracy over a labeled set (inference mode).
pub fn evaluate_accuracy(model: &Model, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (x, &y) in images.iter().zip(labels) {
        if argmax(&model.forward(x)?.logits) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

/// SGD-with-momentum or Adam over the flat parameter list.
pub struct Optimizer {
    kind: OptimizerKind,
    velocity: Vec<Tensor>,
    second: Vec<Tensor>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &Model) -> Optimizer {
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
        Optimizer {
            kind,
            velocity: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads, lr: f64) {
        self.t += 1;
        let params = model.params_mut();
        let gs = grads.params();
        debug_assert_eq!(params.len(), gs.len());
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), v) in params.into_iter().zip(gs).zip(&mut self.velocity) {
                    debug_assert_eq!(p.shape(), g.shape());
                    for ((pv, &gv), vv) in
                        p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut())
                    {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(gs)
                    .zip(&mut self.velocity)
                    .zip(&mut self.second)
                {
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Per-epoch record of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub l_soft: f64,
    pub l_dc: f64,
    pub l_combined: f64,
    pub lr: f64,
    pub selected: usize,
    pub accuracy: f64,
}

/// Full record of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub threshold: f64,
    pub epochs: Vec<EpochReport>,
    pub warnings: Vec<String>,
}

impl StageReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_soft,l_dc,l,lr,selected,acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.l_soft, e.l_dc, e.l_combined, e.lr, e.selected, e.accuracy
            ));
        }
        out
    }

    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.accuracy)
    }
}

/// Train a student against a frozen selector model (the teacher in stage
/// one, student model 1 in stage two).
pub fn train_student(
    teacher: &Model,
    student: &mut Model,
    data: &DomainDataset,
    cfg: &TrainConfig,
    threshold: f64,
) -> Result<StageReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, student);
    let mut report = StageReport {
        threshold,
        epochs: Vec::with_capacity(cfg.epochs),
        warnings: Vec::new(),
    };

    // The selector is frozen, so the admitted subset is identical in every
    // epoch; selecting once keeps the loop cheap without changing results.
    let selection = select_samples(teacher, &data.target_images, threshold)?;
    let soft_active = !selection.is_empty();
    if !soft_active {
        report.warnings.push(format!(
            "no target sample exceeded threshold {}; soft-target loss skipped",
            threshold
        ));
    }
    // covariance alignment still runs on unselected target data
    let target_pool: Vec<usize> = if soft_active {
        selection.indices.clone()
    } else {
        (0..data.target_images.len()).collect()
    };
    if target_pool.is_empty() || data.source_images.is_empty() {
        return Err(Error::InvalidArgument(
            "training requires non-empty source and target sets".to_string(),
        ));
    }

    let batch = cfg.batch_size.min(target_pool.len()).max(1);
    let batches_per_epoch = (target_pool.len() / batch).max(1);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let mut step_idx = 0usize;

    let mut src_order: Vec<usize> = (0..data.source_images.len()).collect();
    let mut src_cursor = src_order.len(); // force an initial shuffle

    for epoch in 0..cfg.epochs {
        let mut tgt_order: Vec<usize> = (0..target_pool.len()).collect();
        shuffle(&mut tgt_order, &mut rng);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut last_lr = 0.0;
        for b in 0..batches_per_epoch {
            let p = step_idx as f64 / total_steps as f64;
            let lr = lr_at(p, cfg);
            last_lr = lr;
            step_idx += 1;

            // assemble the paired batch: source half then target half
            let tgt_slots = &tgt_order[b * batch..(b + 1) * batch];
            let mut inputs: Vec<Tensor> = Vec::with_capacity(2 * batch);
            for _ in 0..batch {
                if src_cursor >= src_order.len() {
                    shuffle(&mut src_order, &mut rng);
                    src_cursor = 0;
                }
                inputs.push(data.source_images[src_order[src_cursor]].clone());
                src_cursor += 1;
            }
            let mut teacher_logits: Vec<&Tensor> = Vec::with_capacity(batch);
            for &slot in tgt_slots {
                let target_idx = target_pool[slot];
                inputs.push(data.target_images[target_idx].clone());
                if soft_active {
                    teacher_logits.push(&selection.logits[slot]);
                }
            }

            let (out, cache) = student.forward_train(&inputs)?;
            let src_feats = &out.features[..batch];
            let tgt_feats = &out.features[batch..];
            let tgt_logits = &out.logits[batch..];

            let (l_soft, soft_grads) = if soft_active {
                let teacher_batch: Vec<Tensor> =
                    teacher_logits.iter().map(|t| (*t).clone()).collect();
                soft_target_loss_grad(&teacher_batch, tgt_logits, cfg.temperature)?
            } else {
                (0.0, vec![Tensor::zeros(&[student.spec.classes]); batch])
            };
            let (l_dc, mut g_src, mut g_tgt) = if batch >= 2 {
                coral_loss_grad(src_feats, tgt_feats)?
            } else {
                (
                    0.0,
                    vec![Tensor::zeros(&[student.spec.feature_channels()]); batch],
                    vec![Tensor::zeros(&[student.spec.feature_channels()]); batch],
                )
            };
            let l = combined_loss(l_soft, l_dc, cfg.lambda);
            sums.0 += l_soft;
            sums.1 += l_dc;
            sums.2 += l;

            // upstream gradients: logits get the soft term (target half
            // only), features get the weighted covariance term
            let zero_logits = Tensor::zeros(&[student.spec.classes]);
            let mut grad_logits: Vec<Tensor> = vec![zero_logits; batch];
            grad_logits.extend(soft_grads);
            for g in g_src.iter_mut().chain(g_tgt.iter_mut()) {
                g.scale(cfg.lambda);
            }
            let mut grad_features = g_src;
            grad_features.extend(g_tgt);

            let grads = student.backward(&cache, &grad_logits, Some(&grad_features))?;
            opt.step(student, &grads, lr);
            student.apply_bn_updates(&cache);
        }
        let accuracy = evaluate_accuracy(student, &data.eval_images, &data.eval_labels)?;
        let nb = batches_per_epoch as f64;
        report.epochs.push(EpochReport {
            epoch,
            l_soft: sums.0 / nb,
            l_dc: sums.1 / nb,
            l_combined: sums.2 / nb,
            lr: last_lr,
            selected: selection.len(),
            accuracy,
        });
    }
    Ok(report)
}

/// Supervised cross-entropy training, used to pre-train the teacher on the
/// labeled source domain.
pub fn train_supervised(
    model: &mut Model,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "supervised training requires matching non-empty images and labels".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, model);
    let batch = cfg.batch_size.min(images.len()).max(1);
    let batches_per_epoch = (images.len() / batch).max(1);
    let total_steps = (epochs * batches_per_epoch).max(1);
    let mut step_idx = 0usize;
    let mut losses = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for _ in 0..epochs {
        shuffle(&mut order, &mut rng);
        let mut sum = 0.0;
        for b in 0..batches_per_epoch {
            let p = step_idx as f64 / total_steps as f64;
            let lr = lr_at(p, cfg);
            step_idx += 1;
            let idx = &order[b * batch..(b + 1) * batch];
            let xs: Vec<Tensor> = idx.iter().map(|&i| images[i].clone()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (out, cache) = model.forward_train(&xs)?;
            let (loss, grad_logits) = cross_entropy_grad(&out.logits, &ys)?;
            sum += loss;
            let grads = model.backward(&cache, &grad_logits, None)?;
            opt.step(model, &grads, lr);
            model.apply_bn_updates(&cache);
        }
        losses.push(sum / batches_per_epoch as f64);
    }
    Ok(losses)
}

/// Output of the two-stage pipeline.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub student1: Model,
    pub student2: Model,
    pub report1: StageReport,
    pub report2: StageReport,
}

/// Run both distillation stages: the pre-trained teacher trains student
/// model 1 under the stage-one threshold, then student model 1 (frozen)
/// trains student model 2 under the stage-two threshold.
pub fn run_pipeline(
    teacher: &Model,
    student_spec: &ModelSpec,
    data: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut student1 = Model::init(student_spec, cfg.seed.wrapping_add(1))?;
    let report1 = train_student(teacher, &mut student1, data, cfg, cfg.threshold_stage1)?;
    let stage2_cfg = TrainConfig {
        seed: cfg.seed.wrapping_add(2),
        ..cfg.clone()
    };
    let mut student2 = Model::init(student_spec, cfg.seed.wrapping_add(3))?;
    let report2 = train_student(&student1, &mut student2, data, &stage2_cfg, cfg.threshold_stage2)?;
    Ok(PipelineOutput {
        student1,
        student2,
        report1,
        report2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_digits, SyntheticConfig};
    use crate::model::Variant;
    use rand::Rng;

    fn tiny_spec() -> ModelSpec {
        let mut spec = ModelSpec::new(Variant::DsOdeNet, 2);
        spec.base_channels = 4;
        spec.c_iters = 1;
        spec.input_shape = [3, 8, 8];
        spec
    }

    fn tiny_data() -> DomainDataset {
        synthetic_digits(&SyntheticConfig {
            per_class_source: 3,
            per_class_target: 3,
            per_class_eval: 2,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn lr_schedule_endpoints_and_monotonicity() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0.0, &cfg), 0.01);
        let want = 0.01 * 11f64.powf(-0.75);
        assert!((lr_at(1.0, &cfg) - want).abs() <= 1e-12);
        assert!((lr_at(1.0, &cfg) - 1.6556e-3).abs() < 1e-7);
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let lr = lr_at(i as f64 / 1000.0, &cfg);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn threshold_zero_selects_everything() {
        let spec = tiny_spec();
        let model = Model::init(&spec, 1).unwrap();
        let data = tiny_data();
        let sel = select_samples(&model, &data.target_images, 0.0).unwrap();
        assert_eq!(sel.len(), data.target_images.len());
    }

    #[test]
    fn threshold_one_selects_nothing() {
        let spec = tiny_spec();
        let model = Model::init(&spec, 1).unwrap();
        let data = tiny_data();
        let sel = select_samples(&model, &data.target_images, 1.0).unwrap();
        assert!(sel.is_empty());
    }

    #[test]
    fn selection_softmax_arithmetic() {
        // logits that give probabilities about (0.95, 0.05): selected at 0.9
        let mut spec = tiny_spec();
        spec.classes = 2;
        let mut model = Model::zeros(&spec).unwrap();
        model.fc.bias.data_mut()[0] = 2.9444389791664403; // ln(0.95/0.05)
        let inputs = vec![Tensor::zeros(&spec.input_shape)];
        let sel = select_samples(&model, &inputs, 0.9).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel.pseudo_labels, vec![0]);
        assert!((sel.max_probs[0] - 0.95).abs() < 1e-9);
        let none = select_samples(&model, &inputs, 0.96).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn selection_is_monotone_in_threshold() {
        let spec = tiny_spec();
        let model = Model::init(&spec, 5).unwrap();
        let data = tiny_data();
        let mut prev = usize::MAX;
        for th in [0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 0.9, 0.99, 1.0] {
            let n = select_samples(&model, &data.target_images, th).unwrap().len();
            assert!(n <= prev, "threshold {th} admitted more samples");
            prev = n;
        }
    }

    #[test]
    fn teacher_is_immutable_during_training() {
        let spec = tiny_spec();
        let teacher = Model::init(&spec, 2).unwrap();
        let frozen = teacher.clone();
        let mut student = Model::init(&spec, 3).unwrap();
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        train_student(&teacher, &mut student, &data, &cfg, 0.0).unwrap();
        assert_eq!(teacher, frozen);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let spec = tiny_spec();
        let teacher = Model::init(&spec, 2).unwrap();
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut s_a = Model::init(&spec, 3).unwrap();
        let r_a = train_student(&teacher, &mut s_a, &data, &cfg, 0.5).unwrap();
        let mut s_b = Model::init(&spec, 3).unwrap();
        let r_b = train_student(&teacher, &mut s_b, &data, &cfg, 0.5).unwrap();
        assert_eq!(r_a, r_b);
        assert_eq!(s_a, s_b);
    }

    #[test]
    fn empty_selection_records_warning_and_still_trains() {
        let spec = tiny_spec();
        let teacher = Model::zeros(&spec).unwrap(); // uniform logits: max prob 0.1
        let mut student = Model::init(&spec, 3).unwrap();
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let report = train_student(&teacher, &mut student, &data, &cfg, 0.9).unwrap();
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.epochs[0].selected, 0);
        assert_eq!(report.epochs[0].l_soft, 0.0);
        assert!(report.epochs[0].l_dc != 0.0);
    }

    #[test]
    fn zero_epoch_pipeline_returns_initialized_students() {
        let spec = tiny_spec();
        let teacher = Model::init(&spec, 2).unwrap();
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = run_pipeline(&teacher, &spec, &data, &cfg).unwrap();
        assert_eq!(out.report1.epochs.len(), 0);
        assert_eq!(out.report2.epochs.len(), 0);
        assert_eq!(out.student1, Model::init(&spec, cfg.seed.wrapping_add(1)).unwrap());
        assert_eq!(out.student2, Model::init(&spec, cfg.seed.wrapping_add(3)).unwrap());
    }

    #[test]
    fn pipeline_records_stage_thresholds() {
        let spec = tiny_spec();
        let teacher = Model::init(&spec, 2).unwrap();
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            threshold_stage1: 0.9,
            threshold_stage2: 0.8,
            ..TrainConfig::default()
        };
        let out = run_pipeline(&teacher, &spec, &data, &cfg).unwrap();
        assert_eq!(out.report1.threshold, 0.9);
        assert_eq!(out.report2.threshold, 0.8);
    }

    #[test]
    fn invalid_threshold_ordering_rejected() {
        let cfg = TrainConfig {
            threshold_stage1: 0.5,
            threshold_stage2: 0.8,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn soft_loss_fixed_point_with_identical_models() {
        // lambda = 0, threshold 0, teacher == student: with the
        // normalization gains zeroed the batch/running statistics cannot
        // separate the two, the soft loss starts at zero, every gradient
        // vanishes, and the parameters stay put
        let spec = tiny_spec();
        let mut teacher = Model::init(&spec, 4).unwrap();
        for stage in &mut teacher.stages {
            if let crate::model::Stage::Ode(b) = stage {
                for step in &mut b.steps {
                    step.bn.gamma.scale(0.0);
                }
            }
        }
        teacher.pre.bn.gamma.scale(0.0);
        if let crate::model::Stage::Down(d) = &mut teacher.stages[1] {
            for step in &mut d.main {
                step.bn.gamma.scale(0.0);
            }
        }
        let mut student = teacher.clone();
        let data = tiny_data();
        let cfg = TrainConfig {
            lambda: 0.0,
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let params_before: Vec<Tensor> = student.params().into_iter().cloned().collect();
        let report = train_student(&teacher, &mut student, &data, &cfg, 0.0).unwrap();
        for e in &report.epochs {
            assert!(e.l_soft.abs() < 1e-12, "epoch {} l_soft {}", e.epoch, e.l_soft);
        }
        for (before, after) in params_before.iter().zip(student.params()) {
            assert_eq!(before.data(), after.data());
        }
    }

    #[test]
    fn supervised_training_reduces_loss() {
        let spec = tiny_spec();
        let mut model = Model::init(&spec, 6).unwrap();
        let data = tiny_data();
        let cfg = TrainConfig {
            batch_size: 10,
            seed: 11,
            ..TrainConfig::default()
        };
        let losses = train_supervised(&mut model, &data.source_images, &data.source_labels, &cfg, 6).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn adam_optimizer_steps() {
        let spec = tiny_spec();
        let mut model = Model::init(&spec, 8).unwrap();
        let before = model.clone();
        let mut opt = Optimizer::new(OptimizerKind::adam(), &model);
        let mut grads = ModelGrads::zeros_like(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in grads.params_mut() {
            for v in g.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        opt.step(&mut model, &grads, 0.01);
        assert_ne!(model, before);
    }
}
