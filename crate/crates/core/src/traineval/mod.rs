//! Training loop, feature extraction and retrieval evaluation.

mod losses;
mod optim;
mod retrieval;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use losses::{total_loss, LossTerms};
pub use optim::{adam_step, AdamState, LrSchedule, ADAM_EPS, BETA1, BETA2};
pub use retrieval::{
    average_precision, evaluate_retrieval, expected_random_ap, random_feature_baseline, rank_gallery,
    RandomBaseline, RetrievalResult,
};

use crate::autodiff::Var;
use crate::backbone::Branch;
use crate::bicnet::{BicnetModel, ModelConfig, SegmentSplit};
use crate::dao::mean_pairwise_cosine;
use crate::error::{Error, Result};
use crate::params::{assign_grads, Forward, ParamId, ParamStore, BN_MOMENTUM};
use crate::synthdata::{augment, batch_sampler, resize_and_split, sample_segment, AugmentConfig, Dataset, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub lambda_div: f64,
    pub triplet_margin: f64,
    /// Identities per batch.
    pub p: usize,
    /// Segments per identity in a batch.
    pub s: usize,
    /// Frame stride when sampling a training segment.
    pub sample_stride: usize,
    /// Passes over the training identities per epoch.
    pub passes_per_epoch: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::mini()
    }
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            lr: 3.5e-4,
            weight_decay: 5e-4,
            lr_decay: 0.1,
            decay_every: 40,
            epochs: 150,
            lambda_div: 1.0,
            triplet_margin: 0.3,
            p: 16,
            s: 4,
            sample_stride: 4,
            passes_per_epoch: 1,
            augment: AugmentConfig::default(),
        }
    }

    pub fn mini() -> Self {
        Self {
            epochs: 20,
            p: 4,
            s: 2,
            passes_per_epoch: 3,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.p < 2 || self.s < 2 {
            return Err(Error::config("batch-hard triplet mining needs p >= 2 and s >= 2"));
        }
        if self.sample_stride == 0 || self.passes_per_epoch == 0 {
            return Err(Error::config("train.sample_stride and train.passes_per_epoch must be positive"));
        }
        if self.weight_decay < 0.0 || self.triplet_margin < 0.0 || self.lambda_div < 0.0 {
            return Err(Error::config("weight decay, margin and lambda_div must be non-negative"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            decay: self.lr_decay,
            every: self.decay_every,
        }
    }
}

/// Two-branch network plus the identity classifier used for training.
#[derive(Clone, Debug)]
pub struct ReidModel {
    pub net: BicnetModel,
    pub classifier_weight: ParamId,
    pub classifier_bias: ParamId,
    pub num_classes: usize,
}

impl ReidModel {
    pub fn build(cfg: &ModelConfig, num_classes: usize, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        if num_classes == 0 {
            return Err(Error::config("classifier needs at least one class"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = BicnetModel::build(cfg, &mut store, &mut rng)?;
        let c = net.out_channels();
        let std = 1e-3;
        let classifier_weight = store.add(
            "classifier.weight",
            Tensor::normal(&[num_classes, c], std, &mut rng),
            true,
            None,
        )?;
        let classifier_bias = store.add("classifier.bias", Tensor::zeros(&[num_classes]), true, None)?;
        Ok((
            Self {
                net,
                classifier_weight,
                classifier_bias,
                num_classes,
            },
            store,
        ))
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    pub loss: f64,
    pub ce: f64,
    pub triplet: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_cosine: Option<f64>,
}

/// Mean pairwise map cosine per segment and branch, from `[B, M, H, W]` maps.
pub fn segment_map_cosines(maps: &Tensor<f32>) -> Vec<f64> {
    let s = maps.shape();
    let (b, m, per) = (s[0], s[1], s[2] * s[3]);
    (0..b)
        .filter_map(|seg| {
            let frames: Vec<&[f32]> = (0..m)
                .map(|k| &maps.data()[(seg * m + k) * per..(seg * m + k + 1) * per])
                .collect();
            mean_pairwise_cosine(&frames)
        })
        .collect()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Class groups `(identity, tracklets)` of the training split, label = position.
pub fn train_groups(dataset: &Dataset) -> Vec<(usize, Vec<usize>)> {
    dataset
        .train_identities()
        .into_iter()
        .map(|id| {
            let ts = (0..dataset.tracklets.len())
                .filter(|&i| {
                    let t = &dataset.tracklets[i].info;
                    t.split == Split::Train && t.identity == id
                })
                .collect();
            (id, ts)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ReidModel,
    pub store: ParamStore<f32>,
    pub log: Vec<EpochLog>,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    epoch: usize,
    batch: usize,
    ce: f64,
    triplet: f64,
    divergence: Option<f64>,
    param_max_abs: Vec<(&'a str, f64)>,
}

/// Trains from scratch; each finished epoch is written to `log` as one JSON line.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    seed: u64,
    log: &mut dyn Write,
    dump_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    let groups = train_groups(dataset);
    if groups.len() < cfg.p {
        return Err(Error::input(format!(
            "training split has {} identities, batches need {}",
            groups.len(),
            cfg.p
        )));
    }
    let (model, mut store) = ReidModel::build(model_cfg, groups.len(), seed)?;
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_DA7A);
    let schedule = cfg.schedule();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.at(epoch);
        let mut batches = Vec::new();
        for _ in 0..cfg.passes_per_epoch {
            batches.extend(batch_sampler(&groups, cfg.p, cfg.s, &mut rng)?);
        }
        let (mut sum_loss, mut sum_ce, mut sum_tri, mut sum_div) = (0.0, 0.0, 0.0, 0.0);
        let mut cosines = Vec::new();
        for (bi, batch) in batches.iter().enumerate() {
            let mut splits = Vec::with_capacity(batch.len());
            for item in batch {
                let len = dataset.tracklets[item.tracklet].len();
                let idx = sample_segment(len, model_cfg.segment_len, cfg.sample_stride, &mut rng)?;
                let mut seg = dataset.frames_tensor(item.tracklet, &idx)?;
                augment(&mut seg, &cfg.augment, [0.0; 3], &mut rng);
                splits.push(resize_and_split(&seg, model_cfg.alpha, model_cfg.big_res, model_cfg.small_res())?);
            }
            let labels: Vec<usize> = batch.iter().map(|it| it.label).collect();

            let mut fw = Forward::new(&store, true);
            let out = model.net.forward_splits(&mut fw, &splits)?;
            let w = fw.param(model.classifier_weight);
            let b = fw.param(model.classifier_bias);
            let logits = fw.tape.linear(out.feature, w, Some(b))?;
            let terms = total_loss(
                &mut fw.tape,
                out.feature,
                logits,
                &labels,
                out.dao_loss,
                cfg.lambda_div,
                cfg.triplet_margin,
            )?;
            let value = |v: Var| fw.tape.value(v).item() as f64;
            let (loss, ce, tri) = (value(terms.total), value(terms.ce), value(terms.triplet));
            let div = terms.divergence.map(value);
            if !loss.is_finite() {
                if let Some(dir) = dump_dir {
                    let dump = NonFiniteDump {
                        epoch,
                        batch: bi,
                        ce,
                        triplet: tri,
                        divergence: div,
                        param_max_abs: store
                            .iter()
                            .map(|(_, p)| (p.name.as_str(), p.tensor.max_abs() as f64))
                            .collect(),
                    };
                    let path = dir.join("nonfinite_dump.json");
                    let text = serde_json::to_string_pretty(&dump)?;
                    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                }
                return Err(Error::Verification(format!(
                    "loss became non-finite at epoch {epoch}, batch {bi} (ce {ce}, triplet {tri}, divergence {div:?})"
                )));
            }
            for (_, maps) in &out.maps {
                cosines.extend(segment_map_cosines(fw.tape.value(*maps)));
            }
            let grads = fw.tape.backward(terms.total)?;
            let param_grads = fw.param_grads(&grads);
            let bn_stats = fw.take_bn_stats();
            drop(fw);

            assign_grads(&mut store, param_grads);
            adam_step(&mut store, &mut adam, lr, cfg.weight_decay);
            for (h, s) in &bn_stats {
                store.update_running_stats(h, s, BN_MOMENTUM);
            }
            sum_loss += loss;
            sum_ce += ce;
            sum_tri += tri;
            sum_div += div.unwrap_or(0.0);
        }
        let n = batches.len() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            batches: batches.len(),
            loss: sum_loss / n,
            ce: sum_ce / n,
            triplet: sum_tri / n,
            divergence: model.net.dao.is_some().then_some(sum_div / n),
            attention_cosine: mean(&cosines),
        };
        log::info!(
            "epoch {} loss {:.4} ce {:.4} triplet {:.4} div {:?} cos {:?}",
            entry.epoch,
            entry.loss,
            entry.ce,
            entry.triplet,
            entry.divergence,
            entry.attention_cosine
        );
        writeln!(log, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io("<metrics log>", e))?;
        history.push(entry);
    }
    Ok(TrainOutcome {
        model,
        store,
        log: history,
    })
}

/// Consecutive non-overlapping windows of `n` frames; the remainder is dropped.
pub fn segment_windows(len: usize, n: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::config("segment length must be positive"));
    }
    if len < n {
        return Err(Error::input(format!("tracklet of {len} frames is shorter than one {n}-frame segment")));
    }
    Ok((0..len / n).map(|s| (s * n..(s + 1) * n).collect()).collect())
}

/// Video feature and attention statistics of one tracklet.
#[derive(Clone, Debug)]
pub struct TrackletFeature {
    pub feature: Vec<f32>,
    /// Mean pairwise map cosine per (segment, branch).
    pub map_cosines: Vec<(Branch, f64)>,
}

/// Mean of the aggregated features of every full segment of `frames`
/// (`[L, 3, H, W]`), computed with running normalization statistics.
pub fn extract_video_feature(
    net: &BicnetModel,
    store: &ParamStore<f32>,
    frames: &Tensor<f32>,
) -> Result<TrackletFeature> {
    let cfg = &net.config;
    let len = frames.shape()[0];
    let windows = segment_windows(len, cfg.segment_len)?;
    let splits: Vec<SegmentSplit<f32>> = windows
        .iter()
        .map(|w| {
            let seg = Tensor::stack0(&w.iter().map(|&f| frames.index0(f)).collect::<Vec<_>>())?;
            resize_and_split(&seg, cfg.alpha, cfg.big_res, cfg.small_res())
        })
        .collect::<Result<_>>()?;
    let mut fw = Forward::new(store, false);
    let out = net.forward_splits(&mut fw, &splits)?;
    let feats = fw.tape.value(out.feature);
    let c = feats.shape()[1];
    let b = windows.len();
    let mut feature = vec![0f32; c];
    for s in 0..b {
        for (f, &v) in feature.iter_mut().zip(&feats.data()[s * c..(s + 1) * c]) {
            *f += v;
        }
    }
    feature.iter_mut().for_each(|f| *f /= b as f32);
    let mut map_cosines = Vec::new();
    for (branch, maps) in &out.maps {
        map_cosines.extend(segment_map_cosines(fw.tape.value(*maps)).into_iter().map(|c| (*branch, c)));
    }
    Ok(TrackletFeature { feature, map_cosines })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// Mean over held-out segments and both branches.
    pub mean_cosine: f64,
    pub detail: Option<f64>,
    pub context: Option<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub gallery: usize,
    pub retrieval: RetrievalResult,
    pub random_baseline: RandomBaseline,
    pub map_over_random: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionStats>,
}

pub const RANDOM_BASELINE_TRIALS: usize = 30;

/// Extracts query and gallery features and scores retrieval.
pub fn evaluate(net: &BicnetModel, store: &ParamStore<f32>, dataset: &Dataset, seed: u64) -> Result<EvalReport> {
    let query = dataset.of_split(Split::Query);
    let gallery = dataset.of_split(Split::Gallery);
    let run = |ids: &[usize]| -> Result<Vec<TrackletFeature>> {
        ids.par_iter()
            .map(|&t| {
                let frames: Vec<usize> = (0..dataset.tracklets[t].len()).collect();
                let x = dataset.frames_tensor(t, &frames)?;
                extract_video_feature(net, store, &x)
            })
            .collect()
    };
    let qf = run(&query)?;
    let gf = run(&gallery)?;
    let labels = |ids: &[usize]| ids.iter().map(|&t| dataset.tracklets[t].info.identity).collect::<Vec<_>>();
    let (ql, gl) = (labels(&query), labels(&gallery));
    let qv: Vec<Vec<f32>> = qf.iter().map(|f| f.feature.clone()).collect();
    let gv: Vec<Vec<f32>> = gf.iter().map(|f| f.feature.clone()).collect();
    let retrieval = evaluate_retrieval(&qv, &ql, &gv, &gl)?;
    let dim = net.out_channels();
    let random_baseline = random_feature_baseline(&ql, &gl, dim, RANDOM_BASELINE_TRIALS, seed)?;
    let all: Vec<(Branch, f64)> = qf.iter().chain(&gf).flat_map(|f| f.map_cosines.clone()).collect();
    let attention = mean(&all.iter().map(|p| p.1).collect::<Vec<_>>()).map(|m| {
        let of = |b: Branch| mean(&all.iter().filter(|p| p.0 == b).map(|p| p.1).collect::<Vec<_>>());
        AttentionStats {
            mean_cosine: m,
            detail: of(Branch::Detail),
            context: of(Branch::Context),
            samples: all.len(),
        }
    });
    Ok(EvalReport {
        queries: query.len(),
        gallery: gallery.len(),
        map_over_random: retrieval.map / random_baseline.mean_map.max(1e-12),
        retrieval,
        random_baseline,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_drop_remainder() {
        let w = segment_windows(17, 8).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1], (8..16).collect::<Vec<_>>());
        assert!(matches!(segment_windows(7, 8), Err(Error::Input(_))));
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::mini().validate().is_ok());
        let bad = TrainConfig { lr: 0.0, ..TrainConfig::mini() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { epochs: 0, ..TrainConfig::mini() };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::full().p * TrainConfig::full().s, 64);
    }
}
