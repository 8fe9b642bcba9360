//! Minibatch training with AdamW, validation-loss model selection and
//! repeated stratified train/test splits.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{metrics, summarize, Metrics};
use super::optim::{AdamW, AdamWSettings};
use super::prepare::PreparedSlide;
use crate::model::{init_params, predict, slide_forward, AblationFlags, ModelConfig, ParamStore};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{kernels, Graph, Tensor};
use crate::{Error, Result};

const SPLIT_STREAM: u64 = 1 << 20;
const INIT_STREAM: u64 = 2 << 20;
const SHUFFLE_STREAM: u64 = 3 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamWSettings,
    pub batch_size: usize,
    pub epochs: usize,
    /// Share of each training fold held out for model selection.
    pub val_fraction: f64,
    /// Share of each class sent to the test side of a split.
    pub test_fraction: f64,
    pub folds: usize,
    /// Attempts per fold to draw a split with every class on both sides.
    pub max_resample: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWSettings::default(),
            batch_size: 10,
            epochs: 30,
            val_fraction: 0.1,
            test_fraction: 0.2,
            folds: 5,
            max_resample: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.folds == 0 || self.max_resample == 0 {
            return Err(Error::Config("batch_size, epochs, folds and max_resample must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 0.5)", self.val_fraction)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction {} outside (0, 1)", self.test_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn by_class(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups
}

/// Rounded share of `n`, kept inside `[lo, n - 1]` when `n > lo`.
fn share(n: usize, fraction: f64, lo: usize) -> usize {
    if n <= lo {
        return 0;
    }
    ((n as f64 * fraction).round() as usize).clamp(lo, n - 1)
}

/// One stratified draw: a `test_fraction` share of every class goes to test,
/// a `val_fraction` share of every class's remainder to validation.
pub fn stratified_split(labels: &[usize], classes: usize, test_fraction: f64, val_fraction: f64, rng: &mut ChaCha8Rng) -> Split {
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for mut group in by_class(labels, classes) {
        group.shuffle(rng);
        let n_test = share(group.len(), test_fraction, 1);
        let rest = group.len() - n_test;
        let n_val = if val_fraction > 0.0 { share(rest, val_fraction, 1) } else { 0 };
        split.test.extend_from_slice(&group[..n_test]);
        split.val.extend_from_slice(&group[n_test..n_test + n_val]);
        split.train.extend_from_slice(&group[n_test + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

fn covers(idx: &[usize], labels: &[usize], classes: usize) -> bool {
    let mut seen = vec![false; classes];
    for &i in idx {
        seen[labels[i]] = true;
    }
    seen.into_iter().all(|s| s)
}

/// `cfg.folds` independent Monte-Carlo splits.
pub fn monte_carlo_splits(labels: &[usize], classes: usize, cfg: &TrainConfig) -> Result<Vec<Split>> {
    if labels.len() < 10 {
        return Err(Error::Usage(format!("cross-validation needs at least 10 slides, got {}", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Usage(format!("label {l} out of range for {classes} classes")));
    }
    (0..cfg.folds)
        .map(|fold| {
            let mut rng = seeded(cfg.seed, SPLIT_STREAM + fold as u64);
            for _ in 0..cfg.max_resample {
                let s = stratified_split(labels, classes, cfg.test_fraction, cfg.val_fraction, &mut rng);
                if covers(&s.test, labels, classes) && covers(&s.train, labels, classes) {
                    return Ok(s);
                }
            }
            Err(Error::Metric(format!(
                "fold {fold}: no split with every class in train and test after {} draws",
                cfg.max_resample
            )))
        })
        .collect()
}

/// Cross-entropy of one slide and its parameter gradients.
pub fn slide_loss_and_grads(cfg: &ModelConfig, params: &ParamStore, slide: &PreparedSlide) -> Result<(f64, Vec<Tensor>)> {
    let graph = Graph::new();
    let p = params.bind(&graph);
    let loss = slide_forward(&graph, cfg, &p, &slide.input)?.logits.cross_entropy(slide.label)?;
    let value = loss.value().data()[0];
    graph.backward(loss)?;
    Ok((value, p.grads()))
}

/// Mean loss and mean gradient over a batch. Slides run in parallel; the
/// reduction is a fixed-order sum.
pub fn batch_gradient(cfg: &ModelConfig, params: &ParamStore, batch: &[&PreparedSlide]) -> Result<(f64, Vec<Tensor>)> {
    let parts: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|s| slide_loss_and_grads(cfg, params, s))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (l, g) in &parts {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, grads))
}

pub fn mean_loss(cfg: &ModelConfig, params: &ParamStore, slides: &[PreparedSlide], idx: &[usize]) -> Result<f64> {
    let losses: Vec<f64> = idx
        .par_iter()
        .map(|&i| {
            let pred = predict(cfg, params, &slides[i].input)?;
            let logits = Tensor::row(pred.logits)?;
            let p = kernels::softmax(&logits, 1)?;
            Ok(-p.data()[slides[i].label].max(f64::MIN_POSITIVE).ln())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / idx.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ParamStore,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

/// Trains fresh parameters on `train`, keeping the epoch with the lowest
/// validation loss (the last epoch when `val` is empty).
pub fn train_model(cfg: &ModelConfig, tc: &TrainConfig, slides: &[PreparedSlide], train: &[usize], val: &[usize], init_seed: u64, shuffle_seed: u64) -> Result<TrainedModel> {
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    let mut params = init_params(cfg, init_seed)?;
    let mut opt = AdamW::new(params.tensors(), tc.optimizer)?;
    let mut rng = rand::SeedableRng::seed_from_u64(shuffle_seed);
    let mut order = train.to_vec();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step_losses = Vec::new();
    for epoch in 1..=tc.epochs {
        order.shuffle::<ChaCha8Rng>(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&PreparedSlide> = chunk.iter().map(|&i| &slides[i]).collect();
            let (loss, grads) = batch_gradient(cfg, &params, &batch)?;
            opt.step(params.tensors_mut(), &grads)?;
            step_losses.push(loss);
        }
        if !val.is_empty() {
            let v = mean_loss(cfg, &params, slides, val)?;
            if best.as_ref().map_or(true, |b| v < b.0) {
                best = Some((v, epoch, params.clone()));
            }
        }
    }
    Ok(match best {
        Some((v, epoch, p)) => TrainedModel {
            params: p,
            best_epoch: epoch,
            best_val_loss: Some(v),
            step_losses,
        },
        None => TrainedModel {
            params,
            best_epoch: tc.epochs,
            best_val_loss: None,
            step_losses,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: u32,
    pub label: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn predict_slides(cfg: &ModelConfig, params: &ParamStore, slides: &[PreparedSlide], idx: &[usize]) -> Result<Vec<SlidePrediction>> {
    idx.par_iter()
        .map(|&i| {
            let s = &slides[i];
            let logits = predict(cfg, params, &s.input)?.logits;
            let probs = kernels::softmax(&Tensor::row(logits.clone())?, 1)?.into_data();
            Ok(SlidePrediction {
                slide_id: s.slide_id,
                label: s.label,
                logits,
                probs,
            })
        })
        .collect()
}

pub fn score_predictions(preds: &[SlidePrediction], classes: usize) -> Result<Metrics> {
    let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    metrics(&scores, &labels, classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub metrics: Metrics,
    pub predictions: Vec<SlidePrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub flags: AblationFlags,
    pub classes: usize,
    pub folds: Vec<FoldReport>,
    pub mean: Metrics,
    pub std: Metrics,
}

impl EvalReport {
    /// One line per fold plus a `mean ± std` line.
    pub fn table(&self) -> String {
        let mut out = String::from("fold    AUC     ACC     F1      Pre\n");
        for f in &self.folds {
            let m = f.metrics;
            out += &format!("{:<7} {:.4}  {:.4}  {:.4}  {:.4}\n", f.fold, m.auc, m.acc, m.f1, m.precision);
        }
        let (m, s) = (self.mean, self.std);
        out += &format!(
            "mean    {:.4}±{:.4}  {:.4}±{:.4}  {:.4}±{:.4}  {:.4}±{:.4}\n",
            m.auc, s.auc, m.acc, s.acc, m.f1, s.f1, m.precision, s.precision
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub report: EvalReport,
    /// Selected parameters of every fold.
    pub params: Vec<ParamStore>,
}

/// Monte-Carlo cross-validation: every fold trains from a fresh
/// initialization on its own stratified split.
pub fn monte_carlo_cv(slides: &[PreparedSlide], classes: usize, cfg: &ModelConfig, tc: &TrainConfig) -> Result<CvOutcome> {
    cfg.validate()?;
    tc.validate()?;
    if cfg.classes != classes {
        return Err(Error::Config(format!("model has {} classes, cohort has {classes}", cfg.classes)));
    }
    let labels: Vec<usize> = slides.iter().map(|s| s.label).collect();
    let splits = monte_carlo_splits(&labels, classes, tc)?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| slides[i].slide_id).collect::<Vec<_>>();
    let mut folds = Vec::with_capacity(splits.len());
    let mut params = Vec::with_capacity(splits.len());
    for (fold, split) in splits.iter().enumerate() {
        let trained = train_model(
            cfg,
            tc,
            slides,
            &split.train,
            &split.val,
            derive_seed(tc.seed, INIT_STREAM + fold as u64),
            derive_seed(tc.seed, SHUFFLE_STREAM + fold as u64),
        )?;
        let predictions = predict_slides(cfg, &trained.params, slides, &split.test)?;
        let m = score_predictions(&predictions, classes)?;
        log::info!(
            "model {} fold {fold}: auc {:.4} acc {:.4} (epoch {})",
            cfg.flags,
            m.auc,
            m.acc,
            trained.best_epoch
        );
        folds.push(FoldReport {
            fold,
            train: ids(&split.train),
            val: ids(&split.val),
            test: ids(&split.test),
            best_epoch: trained.best_epoch,
            best_val_loss: trained.best_val_loss,
            metrics: m,
            predictions,
        });
        params.push(trained.params);
    }
    let per_fold: Vec<Metrics> = folds.iter().map(|f| f.metrics).collect();
    let (mean, std) = summarize(&per_fold);
    Ok(CvOutcome {
        report: EvalReport {
            model: cfg.flags.letter().to_string(),
            flags: cfg.flags,
            classes,
            folds,
            mean,
            std,
        },
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_cohort, CohortSpec};
    use crate::train::prepare::{prepare_cohort, PrepConfig};

    fn labels(n: usize, c: usize) -> Vec<usize> {
        (0..n).map(|i| i % c).collect()
    }

    #[test]
    fn splits_are_stratified_disjoint_and_reproducible() {
        let labels = labels(60, 3);
        let cfg = TrainConfig::default();
        let splits = monte_carlo_splits(&labels, 3, &cfg).unwrap();
        assert_eq!(splits.len(), 5);
        for s in &splits {
            assert_eq!(s.test.len(), 12);
            assert_eq!(s.val.len(), 6);
            assert_eq!(s.train.len() + s.val.len() + s.test.len(), 60);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..60).collect::<Vec<_>>());
            for c in 0..3 {
                assert_eq!(s.test.iter().filter(|&&i| labels[i] == c).count(), 4);
            }
        }
        assert_ne!(splits[0], splits[1]);
        assert_eq!(splits, monte_carlo_splits(&labels, 3, &cfg).unwrap());
    }

    #[test]
    fn too_few_slides_or_absent_class_is_rejected() {
        let cfg = TrainConfig::default();
        assert!(monte_carlo_splits(&labels(8, 2), 2, &cfg).is_err());
        let mut l = labels(12, 2);
        l[1] = 0;
        l[3] = 0;
        l[5] = 0;
        l[7] = 0;
        l[9] = 0;
        l[11] = 0;
        assert!(matches!(monte_carlo_splits(&l, 2, &cfg), Err(Error::Metric(_))));
    }

    fn tiny(seed: u64, classes: usize, per_class: usize) -> Vec<PreparedSlide> {
        let mut spec = CohortSpec::planted(classes, per_class, seed);
        spec.d = 8;
        spec.patches_per_slide = crate::synth::CountRange::new(2, 3);
        spec.nuclei_per_patch = crate::synth::CountRange::new(4, 8);
        let (cohort, _) = gen_cohort(&spec).unwrap();
        prepare_cohort(&cohort, &PrepConfig::default()).unwrap()
    }

    #[test]
    fn batch_gradient_ignores_batch_order() {
        let slides = tiny(1, 2, 3);
        let cfg = ModelConfig::new(8, 2, AblationFlags::full());
        let params = init_params(&cfg, 0).unwrap();
        let fwd: Vec<&PreparedSlide> = slides.iter().collect();
        let rev: Vec<&PreparedSlide> = slides.iter().rev().collect();
        let (la, ga) = batch_gradient(&cfg, &params, &fwd).unwrap();
        let (lb, gb) = batch_gradient(&cfg, &params, &rev).unwrap();
        assert!((la - lb).abs() < 1e-12);
        for (a, b) in ga.iter().zip(&gb) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
        // each slide's logits do not depend on what else is in the batch
        let alone = predict(&cfg, &params, &slides[0].input).unwrap();
        let again = predict(&cfg, &params, &slides[0].input).unwrap();
        assert_eq!(alone, again);
    }

    #[test]
    fn smoothed_training_loss_decreases() {
        let slides = tiny(2, 2, 10);
        let cfg = ModelConfig::new(8, 2, AblationFlags::full());
        let tc = TrainConfig {
            optimizer: AdamWSettings {
                lr: 1e-3,
                ..AdamWSettings::default()
            },
            batch_size: 4,
            epochs: 25,
            ..TrainConfig::default()
        };
        let train: Vec<usize> = (0..20).collect();
        let t = train_model(&cfg, &tc, &slides, &train, &[], 1, 2).unwrap();
        assert_eq!(t.step_losses.len(), 25 * 5);
        let window = |k: usize| t.step_losses[k..k + 10].iter().sum::<f64>() / 10.0;
        let smoothed: Vec<f64> = (0..=40).step_by(10).map(window).collect();
        for w in smoothed.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{smoothed:?}");
        }
    }

    #[test]
    fn cv_report_shape_and_determinism() {
        let slides = tiny(3, 2, 6);
        let cfg = ModelConfig::new(8, 2, AblationFlags::from_letter('C').unwrap());
        let tc = TrainConfig {
            epochs: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = monte_carlo_cv(&slides, 2, &cfg, &tc).unwrap();
        assert_eq!(a.report.folds.len(), 5);
        assert_eq!(a.params.len(), 5);
        assert!(a.report.table().lines().count() == 7);
        let b = monte_carlo_cv(&slides, 2, &cfg, &tc).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.params, b.params);
    }
}
