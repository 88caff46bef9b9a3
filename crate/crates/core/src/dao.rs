//! Diverse attention: per-frame spatial maps, their divergence loss and the
//! residual re-weighting of the features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::Branch;
use crate::error::{Error, Result};
use crate::params::{Forward, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Dot product of unit-normalized maps.
    Cosine,
    /// Raw dot product.
    Dot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaoConfig {
    pub enabled: bool,
    /// Backbone stage whose output is re-weighted.
    pub stage: usize,
    pub similarity: Similarity,
    /// Multiplier on the map in `D * (1 + gain * A)`.
    pub gain: f64,
}

impl Default for DaoConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            stage: 3,
            similarity: Similarity::Cosine,
            gain: 1.0,
        }
    }
}

impl DaoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(1..=4).contains(&self.stage) {
            return Err(Error::config(format!("dao stage {} outside 1..=4", self.stage)));
        }
        if !self.gain.is_finite() {
            return Err(Error::config("dao gain must be finite"));
        }
        Ok(())
    }
}

/// A spatial probability map of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    pub values: Tensor<T>,
    pub frame_index: usize,
    pub branch: Branch,
}

/// Learned module for frames 2..M: 1x1 channel compression then a spatial FC.
#[derive(Clone, Debug)]
pub struct AttentionModuleParams {
    pub channels: usize,
    pub hw: usize,
    pub channel_compress: ParamId,
    pub spatial_fc: ParamId,
    pub spatial_bias: ParamId,
}

impl AttentionModuleParams {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        channels: usize,
        hw: usize,
    ) -> Result<Self> {
        let cb = 1.0 / (channels as f64).sqrt();
        let fb = 1.0 / (hw as f64).sqrt();
        Ok(Self {
            channels,
            hw,
            channel_compress: store.add(
                format!("{prefix}.compress"),
                Tensor::uniform(&[1, channels, 1, 1], cb, rng),
                true,
                None,
            )?,
            spatial_fc: store.add(format!("{prefix}.fc"), Tensor::uniform(&[hw, hw], fb, rng), true, None)?,
            spatial_bias: store.add(format!("{prefix}.fc_bias"), Tensor::zeros(&[hw]), true, None)?,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.channel_compress, self.spatial_fc, self.spatial_bias]
    }
}

/// Learned modules of one branch: one per frame after the first.
#[derive(Clone, Debug)]
pub struct DaoModules {
    pub branch: Branch,
    pub modules: Vec<AttentionModuleParams>,
}

impl DaoModules {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        branch: Branch,
        frames: usize,
        channels: usize,
        hw: usize,
    ) -> Result<Self> {
        let modules = (2..=frames)
            .map(|k| {
                AttentionModuleParams::register(store, rng, &format!("dao.{}.frame{k}", branch.name()), channels, hw)
            })
            .collect::<Result<_>>()?;
        Ok(Self { branch, modules })
    }
}

/// Frame-1 map: softmax over positions of the channel mean. `d` is `[B,C,H,W]`;
/// returns `[B, H*W]`.
pub fn self_attention_map<T: Real>(tape: &mut Tape<T>, d: Var) -> Result<Var> {
    let s = tape.shape(d).to_vec();
    let [b, _, h, w] = *s.as_slice() else {
        return Err(Error::config(format!("attention expects [B,C,H,W], got {s:?}")));
    };
    let m = tape.mean_axes(d, &[1])?;
    let m = tape.reshape(m, &[b, h * w])?;
    tape.softmax(m, 1)
}

/// Map of a later frame through its learned module; returns `[B, H*W]`.
pub fn learned_attention_map<T: Real>(
    fw: &mut Forward<'_, T>,
    d: Var,
    params: &AttentionModuleParams,
) -> Result<Var> {
    let s = fw.tape.shape(d).to_vec();
    let [b, c, h, w] = *s.as_slice() else {
        return Err(Error::config(format!("attention expects [B,C,H,W], got {s:?}")));
    };
    if c != params.channels || h * w != params.hw {
        return Err(Error::config(format!(
            "attention module sized for C={} HW={}, feature is C={c} HW={}",
            params.channels,
            params.hw,
            h * w
        )));
    }
    let wc = fw.param(params.channel_compress);
    let wf = fw.param(params.spatial_fc);
    let bf = fw.param(params.spatial_bias);
    let y = fw.tape.conv2d(d, wc, 1, 0)?;
    let y = fw.tape.reshape(y, &[b, h * w])?;
    let y = fw.tape.linear(y, wf, Some(bf))?;
    fw.tape.softmax(y, 1)
}

/// `D * (1 + gain * A)` with `A` (`[B, H*W]`) broadcast over channels.
pub fn apply_attention_residual<T: Real>(tape: &mut Tape<T>, d: Var, a: Var, gain: f64) -> Result<Var> {
    let s = tape.shape(d).to_vec();
    let [b, _, h, w] = *s.as_slice() else {
        return Err(Error::config(format!("residual expects [B,C,H,W], got {s:?}")));
    };
    let a = tape.reshape(a, &[b, 1, h, w])?;
    let a = tape.scale(a, gain);
    let a = tape.add_scalar(a, 1.0);
    let a = tape.expand(a, &s)?;
    tape.mul(d, a)
}

/// Pair weights so that `L = sum_{k>l} w[k][l] * sim(A_k, A_l) - 1`.
pub fn pair_weights(m: usize) -> Vec<f64> {
    let mut w = vec![0.0; m * m];
    if m < 2 {
        return w;
    }
    for k in 1..m {
        for l in 0..k {
            w[k * m + l] = 1.0 / ((m - 1) as f64 * k as f64);
        }
    }
    w
}

/// Divergence loss of maps `[M, HW]` or `[B, M, HW]` (averaged over `B`).
pub fn divergence_loss_var<T: Real>(tape: &mut Tape<T>, maps: Var, similarity: Similarity) -> Result<Var> {
    let s = tape.shape(maps).to_vec();
    let (b, m, hw) = match *s.as_slice() {
        [m, hw] => (1, m, hw),
        [b, m, hw] => (b, m, hw),
        _ => return Err(Error::config(format!("divergence expects [M,HW] or [B,M,HW], got {s:?}"))),
    };
    if m < 2 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let maps = tape.reshape(maps, &[b, m, hw])?;
    let maps = match similarity {
        Similarity::Cosine => tape.l2_normalize(maps, 2)?,
        Similarity::Dot => maps,
    };
    let weights = Tensor::from_vec(&[m, m], pair_weights(m).into_iter().map(T::of).collect())?;
    let weights = tape.constant(weights);
    let mut total = None;
    for i in 0..b {
        let a = tape.select(maps, 0, i)?;
        let at = tape.transpose(a)?;
        let gram = tape.matmul(a, at)?;
        let weighted = tape.mul(gram, weights)?;
        let s = tape.sum_all(weighted);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let mean = tape.scale(total.expect("b >= 1"), 1.0 / b as f64);
    Ok(tape.add_scalar(mean, -1.0))
}

fn check_same_shape<T: Real>(maps: &[AttentionMap<T>]) -> Result<()> {
    if let Some(first) = maps.first() {
        if let Some(bad) = maps.iter().find(|m| m.values.shape() != first.values.shape()) {
            return Err(Error::config(format!(
                "attention maps differ in shape: {:?} vs {:?}",
                first.values.shape(),
                bad.values.shape()
            )));
        }
    }
    Ok(())
}

/// Divergence loss of an ordered list of maps (frame 1 first).
pub fn divergence_loss(maps: &[AttentionMap<f64>], similarity: Similarity) -> Result<f64> {
    check_same_shape(maps)?;
    if maps.len() < 2 {
        return Ok(0.0);
    }
    let hw = maps[0].values.numel();
    let data = maps.iter().flat_map(|m| m.values.data().iter().copied()).collect();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(&[maps.len(), hw], data)?);
    let l = divergence_loss_var(&mut tape, v, similarity)?;
    Ok(tape.value(l).item())
}

/// Plain cosine similarity of two flattened maps.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.to_f64_lossy() * y.to_f64_lossy()).sum();
    let na: f64 = a.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Unweighted mean cosine over all unordered pairs of maps.
pub fn mean_pairwise_cosine<T: Real>(maps: &[&[T]]) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for k in 1..maps.len() {
        for l in 0..k {
            total += cosine(maps[k], maps[l]);
            n += 1;
        }
    }
    (n > 0).then(|| total / n as f64)
}

/// Result of re-weighting one branch.
#[derive(Clone, Debug)]
pub struct DaoOutput {
    /// Updated features, same shape as the input.
    pub features: Var,
    pub loss: Var,
    /// Maps `[B, M, H, W]`.
    pub maps: Var,
}

/// Applies attention to `[B*M, C, H, W]` features grouped into segments of
/// `frames` consecutive frames.
pub fn dao_forward<T: Real>(
    fw: &mut Forward<'_, T>,
    features: Var,
    frames: usize,
    modules: &DaoModules,
    config: &DaoConfig,
) -> Result<DaoOutput> {
    if frames == 0 || modules.modules.len() + 1 != frames {
        return Err(Error::config(format!(
            "{} branch has {} attention modules for {frames} frames",
            modules.branch.name(),
            modules.modules.len()
        )));
    }
    let s = fw.tape.shape(features).to_vec();
    let [n, c, h, w] = *s.as_slice() else {
        return Err(Error::config(format!("dao expects [B*M,C,H,W], got {s:?}")));
    };
    if n % frames != 0 {
        return Err(Error::config(format!("{n} frames do not group into segments of {frames}")));
    }
    let b = n / frames;
    let grouped = fw.tape.reshape(features, &[b, frames, c, h, w])?;
    let mut outs = Vec::with_capacity(frames);
    let mut maps = Vec::with_capacity(frames);
    for k in 0..frames {
        let d = fw.tape.select(grouped, 1, k)?;
        let a = if k == 0 {
            self_attention_map(&mut fw.tape, d)?
        } else {
            learned_attention_map(fw, d, &modules.modules[k - 1])?
        };
        outs.push(apply_attention_residual(&mut fw.tape, d, a, config.gain)?);
        maps.push(a);
    }
    let out = fw.tape.stack(&outs, 1)?;
    let out = fw.tape.reshape(out, &s)?;
    let maps = fw.tape.stack(&maps, 1)?;
    let loss = divergence_loss_var(&mut fw.tape, maps, config.similarity)?;
    let maps = fw.tape.reshape(maps, &[b, frames, h, w])?;
    Ok(DaoOutput {
        features: out,
        loss,
        maps,
    })
}

/// Splits a `[B, M, H, W]` map tensor into per-frame maps of segment `seg`.
pub fn maps_of_segment<T: Real>(maps: &Tensor<T>, seg: usize, branch: Branch) -> Vec<AttentionMap<T>> {
    let s = maps.shape();
    let (m, h, w) = (s[1], s[2], s[3]);
    let per = h * w;
    (0..m)
        .map(|k| {
            let start = (seg * m + k) * per;
            AttentionMap {
                values: Tensor::from_vec(&[h, w], maps.data()[start..start + per].to_vec()).unwrap(),
                frame_index: k,
                branch,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(values: Vec<f64>, k: usize) -> AttentionMap<f64> {
        let n = values.len();
        AttentionMap {
            values: Tensor::from_vec(&[1, n], values).unwrap(),
            frame_index: k,
            branch: Branch::Detail,
        }
    }

    #[test]
    fn self_attention_on_indicator() {
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let a = self_attention_map(&mut tape, d).unwrap();
        let v = tape.value(a).data();
        assert!((v[0] - 0.4754).abs() < 1e-4);
        for &x in &v[1..] {
            assert!((x - 0.1749).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_features_give_uniform_map() {
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::full(&[2, 3, 4, 2], 1.7));
        let a = self_attention_map(&mut tape, d).unwrap();
        assert!(tape.value(a).data().iter().all(|&x| (x - 0.125).abs() < 1e-15));
    }

    #[test]
    fn zero_fc_gives_uniform_map() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AttentionModuleParams::register(&mut store, &mut rng, "m", 3, 8).unwrap();
        store.get_mut(p.spatial_fc).tensor = Tensor::zeros(&[8, 8]);
        let mut fw = Forward::new(&store, false);
        let d = fw.tape.constant(Tensor::normal(&[2, 3, 4, 2], 1.0, &mut rng));
        let a = learned_attention_map(&mut fw, d, &p).unwrap();
        assert!(fw.tape.value(a).data().iter().all(|&x| (x - 0.125).abs() < 1e-15));
    }

    #[test]
    fn identity_module_reproduces_self_attention() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionModuleParams::register(&mut store, &mut rng, "m", 4, 6).unwrap();
        store.get_mut(p.channel_compress).tensor = Tensor::full(&[1, 4, 1, 1], 0.25);
        let mut eye = Tensor::zeros(&[6, 6]);
        for i in 0..6 {
            eye.data_mut()[i * 7] = 1.0;
        }
        store.get_mut(p.spatial_fc).tensor = eye;
        let mut fw = Forward::new(&store, false);
        let d = fw.tape.constant(Tensor::normal(&[1, 4, 3, 2], 1.0, &mut rng));
        let a = learned_attention_map(&mut fw, d, &p).unwrap();
        let s = self_attention_map(&mut fw.tape, d).unwrap();
        for (x, y) in fw.tape.value(a).data().iter().zip(fw.tape.value(s).data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn module_shape_mismatch_is_config_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionModuleParams::register(&mut store, &mut rng, "m", 4, 6).unwrap();
        let mut fw = Forward::new(&store, false);
        let d = fw.tape.constant(Tensor::zeros(&[1, 4, 4, 2]));
        assert!(matches!(learned_attention_map(&mut fw, d, &p), Err(Error::Config(_))));
    }

    #[test]
    fn residual_with_uniform_map_scales() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dt = Tensor::normal(&[1, 3, 2, 2], 1.0, &mut rng);
        let d = tape.constant(dt.clone());
        let a = tape.constant(Tensor::full(&[1, 4], 0.25));
        let y = apply_attention_residual(&mut tape, d, a, 1.0).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(dt.data()) {
            assert!((o - i * 1.25).abs() < 1e-15);
        }
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let y0 = apply_attention_residual(&mut tape, d, z, 1.0).unwrap();
        assert_eq!(tape.value(y0).data(), dt.data());
    }

    #[test]
    fn divergence_oracle_values() {
        let a = map(vec![0.2, 0.3, 0.5], 0);
        assert!(divergence_loss(&[a.clone(), a.clone()], Similarity::Cosine).unwrap().abs() < 1e-15);
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        let l2 = divergence_loss(&[map(e(0), 0), map(e(1), 1)], Similarity::Cosine).unwrap();
        assert!((l2 + 1.0).abs() < 1e-15);
        let l3 = divergence_loss(&[map(e(0), 0), map(e(1), 1), map(e(2), 2)], Similarity::Cosine).unwrap();
        assert!((l3 + 1.0).abs() < 1e-15);
        assert_eq!(divergence_loss(std::slice::from_ref(&a), Similarity::Cosine).unwrap(), 0.0);
        let bad = map(vec![1.0, 0.0], 1);
        assert!(divergence_loss(&[a, bad], Similarity::Cosine).is_err());
    }

    #[test]
    fn pair_weights_sum_to_one() {
        for m in 2..9 {
            let s: f64 = pair_weights(m).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dao_forward_checks_module_count() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mods = DaoModules::register(&mut store, &mut rng, Branch::Detail, 3, 2, 4).unwrap();
        let mut fw = Forward::new(&store, false);
        let x = fw.tape.constant(Tensor::normal(&[4, 2, 2, 2], 1.0, &mut rng));
        assert!(dao_forward(&mut fw, x, 2, &mods, &DaoConfig::default()).is_err());
        let x3 = fw.tape.constant(Tensor::normal(&[6, 2, 2, 2], 1.0, &mut rng));
        let out = dao_forward(&mut fw, x3, 3, &mods, &DaoConfig::default()).unwrap();
        assert_eq!(fw.tape.shape(out.maps), &[2, 3, 2, 2]);
        let l = fw.tape.value(out.loss).item();
        assert!((-1.0..=0.0).contains(&l));
    }

    #[test]
    fn single_frame_uses_self_attention_only() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mods = DaoModules::register(&mut store, &mut rng, Branch::Context, 1, 2, 4).unwrap();
        assert!(mods.modules.is_empty());
        let mut fw = Forward::new(&store, false);
        let x = fw.tape.constant(Tensor::normal(&[2, 2, 2, 2], 1.0, &mut rng));
        let out = dao_forward(&mut fw, x, 1, &mods, &DaoConfig::default()).unwrap();
        assert_eq!(fw.tape.value(out.loss).item(), 0.0);
    }
}
