//! Deterministic Adam training over (I0, I1, target) triples.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossConfig};
use crate::predictor::{self, ModelConfig, ModelParams, TimeSpec};
use crate::synth::SubjectSequence;
use crate::tensor::{self, ImageTensor};

/// Triples whose normalised target time exceeds this magnitude are not used
/// for supervision.
pub const T_NORM_LIMIT: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub folds: usize,
    /// Which fold is held out for validation.
    pub fold_index: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Caps the number of training triples drawn per epoch (a fresh
    /// deterministic subset every epoch). `None` uses all of them.
    pub max_triples_per_epoch: Option<usize>,
    /// Caps the validation set to a fixed subset.
    pub max_val_triples: Option<usize>,
    /// Worker threads for per-item gradients. Does not affect results.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-4,
            weight_decay: 1e-5,
            batch: 8,
            folds: 5,
            fold_index: 0,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_triples_per_epoch: None,
            max_val_triples: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch == 0 {
            return fail("epochs and batch must be at least 1".into());
        }
        if self.folds < 2 {
            return fail(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.fold_index >= self.folds {
            return fail(format!("fold index {} out of range for {} folds", self.fold_index, self.folds));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("lr and weight decay must be finite and >= 0".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return fail("adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        if self.max_triples_per_epoch == Some(0) || self.max_val_triples == Some(0) {
            return fail("triple caps must be at least 1".into());
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub train_rec: f64,
    pub train_uncertainty: f64,
    pub val_total: f64,
    pub val_rec: f64,
    pub val_uncertainty: f64,
    /// Kept out of the serialized history so that it stays reproducible.
    #[serde(skip)]
    pub wall_secs: f64,
}

/// Equality ignores the wall-clock time.
impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        (
            self.epoch,
            self.train_total,
            self.train_rec,
            self.train_uncertainty,
            self.val_total,
            self.val_rec,
            self.val_uncertainty,
        ) == (
            o.epoch,
            o.train_total,
            o.train_rec,
            o.train_uncertainty,
            o.val_total,
            o.val_rec,
            o.val_uncertainty,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// One JSON object per epoch, newline terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Subject-level k-fold partition. Returns `(train, val)` index lists into
/// `dataset`, one pair per fold. Fold sizes differ by at most one.
pub fn kfold_split(dataset: &[SubjectSequence], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if dataset.len() < k {
        return Err(Error::Data(format!("{} subjects cannot fill {k} folds", dataset.len())));
    }
    // Order by subject id first so the split does not depend on input order.
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| dataset[a].subject_id().cmp(dataset[b].subject_id()));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds: Vec<Vec<usize>> = (0..k)
        .map(|f| {
            let mut v: Vec<usize> = order.iter().copied().skip(f).step_by(k).collect();
            v.sort_unstable();
            v
        })
        .collect();
    Ok((0..k)
        .map(|f| {
            let mut train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            train.sort_unstable();
            (train, folds[f].clone())
        })
        .collect())
}

/// One supervision example borrowed from a sequence.
#[derive(Clone, Copy, Debug)]
pub struct Triple<'a> {
    pub i0: &'a ImageTensor,
    pub i1: &'a ImageTensor,
    pub target: &'a ImageTensor,
    pub time: TimeSpec,
}

/// All `(a, b, target)` with `a < b`, `target > a`, `target != b` and
/// `|t_norm| <= T_NORM_LIMIT`, in lexicographic order of scan indices.
pub fn make_training_triples(seq: &SubjectSequence) -> Result<Vec<Triple<'_>>> {
    let scans = seq.scans();
    if scans.len() < 3 {
        return Err(Error::Data(format!(
            "{}: need at least 3 scans for training triples, got {}",
            seq.subject_id(),
            scans.len()
        )));
    }
    let mut out = Vec::new();
    for a in 0..scans.len() {
        for b in a + 1..scans.len() {
            for c in a + 1..scans.len() {
                if c == b {
                    continue;
                }
                let time = TimeSpec::new(scans[a].age_years(), scans[b].age_years(), scans[c].age_years())?;
                if time.normalized().abs() <= T_NORM_LIMIT {
                    out.push(Triple {
                        i0: &scans[a],
                        i1: &scans[b],
                        target: &scans[c],
                        time,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Adam with decoupled weight decay:
/// `p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn from_config(n: usize, cfg: &TrainConfig) -> Self {
        Self::new(n, cfg.lr, cfg.weight_decay, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] = params[i] * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Loss of one triple under `model` using the same target definitions as
/// training.
pub fn triple_loss(model: &ModelParams, tr: &Triple<'_>, cfg: &LossConfig) -> Result<LossBreakdown> {
    let p = predictor::tnig_forward(tr.i0, tr.i1, &tr.time, model)?;
    let d_truth = losses::change_target(tr.target, tr.i1);
    losses::loss_total(p.image.pixels(), tr.target.pixels(), &d_truth, &p.fused, cfg)
}

/// Loss and flattened parameter gradient of one triple.
pub fn triple_gradient(model: &ModelParams, tr: &Triple<'_>, cfg: &LossConfig) -> Result<(LossBreakdown, Vec<f64>)> {
    let (p, trace) = predictor::forward_traced(tr.i0, tr.i1, &tr.time, model)?;
    let d_truth = losses::change_target(tr.target, tr.i1);
    let loss = losses::loss_total(p.image.pixels(), tr.target.pixels(), &d_truth, &p.fused, cfg)?;
    let (g_img, g_maps) = losses::loss_total_grad(p.image.pixels(), tr.target.pixels(), &d_truth, &p.fused, cfg)?;
    let grad = predictor::backward(tr.i0, tr.i1, model, &p, &trace, &g_img, &g_maps)?;
    Ok((loss, grad.flatten()))
}

/// Evaluates `f` on every item, possibly on several threads, and returns
/// the results in item order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[derive(Default)]
struct Mean {
    total: f64,
    rec: f64,
    uncertainty: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, b: &LossBreakdown) {
        self.total += b.total;
        self.rec += b.rec;
        self.uncertainty += b.uncertainty;
        self.n += 1;
    }

    fn get(&self) -> (f64, f64, f64) {
        let n = self.n.max(1) as f64;
        (self.total / n, self.rec / n, self.uncertainty / n)
    }
}

fn collect_triples<'a>(dataset: &'a [SubjectSequence], idx: &[usize]) -> Result<Vec<Triple<'a>>> {
    let mut out = Vec::new();
    for &i in idx {
        out.extend(make_training_triples(&dataset[i])?);
    }
    Ok(out)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub fn train(dataset: &[SubjectSequence], cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    train_with(dataset, cfg, |_| {})
}

/// Trains on all folds but `cfg.fold_index` and returns the parameters of
/// the epoch with the lowest validation loss, rounded to `f32`.
/// `on_epoch` sees every record as soon as it is complete.
pub fn train_with(
    dataset: &[SubjectSequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    let folds = kfold_split(dataset, cfg.folds, cfg.seed)?;
    let (train_idx, val_idx) = &folds[cfg.fold_index];
    let train_set = collect_triples(dataset, train_idx)?;
    let mut val_set = collect_triples(dataset, val_idx)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("no admissible training triples".into()));
    }
    if let Some(cap) = cfg.max_val_triples {
        if val_set.len() > cap {
            val_set.shuffle(&mut epoch_rng(cfg.seed, 0));
            val_set.truncate(cap);
        }
    }

    let mut model = ModelParams::init(cfg.model, cfg.seed)?;
    let mut flat = model.flatten();
    let mut adam = Adam::from_config(flat.len(), cfg);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        if let Some(cap) = cfg.max_triples_per_epoch {
            order.truncate(cap);
        }
        let mut train_mean = Mean::default();
        for batch in order.chunks(cfg.batch) {
            let items: Vec<&Triple<'_>> = batch.iter().map(|&i| &train_set[i]).collect();
            let results = par_map(&items, cfg.threads, |tr| triple_gradient(&model, tr, &cfg.loss));
            let mut sum = vec![0.0; flat.len()];
            for r in results {
                let (loss, g) = r?;
                if !loss.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite loss or gradient in epoch {epoch}")));
                }
                train_mean.add(&loss);
                for (s, v) in sum.iter_mut().zip(&g) {
                    *s += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            sum.iter_mut().for_each(|v| *v *= scale);
            adam.step(&mut flat, &sum);
            model.assign_flat(&flat)?;
        }

        let mut val_mean = Mean::default();
        for r in par_map(&val_set, cfg.threads, |tr| triple_loss(&model, tr, &cfg.loss)) {
            let loss = r?;
            if !loss.total.is_finite() {
                return Err(Error::Numerical(format!("non-finite validation loss in epoch {epoch}")));
            }
            val_mean.add(&loss);
        }

        let (train_total, train_rec, train_uncertainty) = train_mean.get();
        let (val_total, val_rec, val_uncertainty) = val_mean.get();
        let record = EpochRecord {
            epoch,
            train_total,
            train_rec,
            train_uncertainty,
            val_total,
            val_rec,
            val_uncertainty,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(b, _)| val_total < *b) {
            best = Some((val_total, model.clone()));
            history.best_epoch = epoch;
        }
    }

    let (_, mut best_model) = best.expect("at least one epoch");
    best_model.for_each_tensor_mut(|_, _, v| tensor::quantize_f32(v));
    Ok((best_model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_dataset, Label, SynthConfig};

    fn seq_with_ages(ages: &[f64]) -> SubjectSequence {
        let scans = ages
            .iter()
            .map(|&a| ImageTensor::from_rows(8, 8, vec![0.5; 64], a).unwrap())
            .collect();
        SubjectSequence::new("X", Label::CN, scans).unwrap()
    }

    #[test]
    fn triple_examples() {
        let seq = seq_with_ages(&[0.0, 2.0, 5.0]);
        let triples = make_training_triples(&seq).unwrap();
        let got: Vec<(f64, f64, f64)> = triples
            .iter()
            .map(|t| (t.time.t0(), t.time.t1(), t.time.target()))
            .collect();
        assert_eq!(got, vec![(0.0, 2.0, 5.0), (0.0, 5.0, 2.0)]);
        assert_eq!(make_training_triples(&seq_with_ages(&[0.0, 1.0, 2.0, 3.0])).unwrap().len(), 8);
        assert!(matches!(make_training_triples(&seq_with_ages(&[0.0, 1.0])), Err(Error::Data(_))));
    }

    #[test]
    fn triple_guard_drops_far_targets() {
        // (0, 1) -> 10 has t_norm 9.
        let seq = seq_with_ages(&[0.0, 1.0, 10.0]);
        let triples = make_training_triples(&seq).unwrap();
        assert!(triples.iter().all(|t| t.time.normalized().abs() <= T_NORM_LIMIT));
        assert_eq!(triples.len(), 1);
    }

    fn subjects(n: usize) -> Vec<SubjectSequence> {
        synth_dataset(&SynthConfig {
            subjects: n,
            height: 8,
            width: 8,
            scans_min: 3,
            scans_max: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn kfold_partition() {
        let ds = subjects(10);
        let folds = kfold_split(&ds, 5, 3).unwrap();
        let mut seen = vec![0; 10];
        for (train, val) in &folds {
            assert_eq!(val.len(), 2);
            assert_eq!(train.len(), 8);
            assert!(val.iter().all(|v| !train.contains(v)));
            val.iter().for_each(|&v| seen[v] += 1);
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(folds, kfold_split(&ds, 5, 3).unwrap());
        assert_ne!(folds, kfold_split(&ds, 5, 4).unwrap());
        assert!(matches!(kfold_split(&ds[..3], 5, 0), Err(Error::Data(_))));
    }

    #[test]
    fn adam_zero_gradient_is_pure_decay() {
        let mut opt = Adam::new(3, 0.1, 0.01, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            let before = p.clone();
            opt.step(&mut p, &[0.0; 3]);
            for (a, b) in p.iter().zip(&before) {
                assert_eq!(*a, b * (1.0 - 0.1 * 0.01));
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(2, 0.01, 0.0, 0.9, 0.999, 1e-12);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] + 0.01).abs() < 1e-9 && (p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let ds = subjects(4);
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            folds: 2,
            ..TrainConfig::default()
        };
        let (model, history) = train(&ds, &cfg).unwrap();
        assert_eq!(model, ModelParams::init(cfg.model, cfg.seed).unwrap());
        assert_eq!(history.epochs.len(), 1);
    }

    #[test]
    fn training_is_deterministic_across_thread_counts() {
        let ds = subjects(4);
        let cfg = TrainConfig {
            epochs: 2,
            lr: 1e-3,
            folds: 2,
            batch: 3,
            ..TrainConfig::default()
        };
        let (m1, h1) = train(&ds, &cfg).unwrap();
        let (m2, h2) = train(&ds, &TrainConfig { threads: 3, ..cfg }).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
        assert_eq!(h1.to_jsonl(), h2.to_jsonl());
        assert_eq!(h1.to_jsonl().lines().count(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { folds: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { fold_index: 5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
