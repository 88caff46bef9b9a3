//! Temporal Kernel Selection: partition, select, excite.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Forward, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TksConfig {
    pub enabled: bool,
    /// Number of temporal paths; path `i` (1-based) uses dilation `i`.
    pub k: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Backbone stages after which a block is inserted.
    pub stages: Vec<usize>,
    /// Average the paths with equal weights instead of selecting.
    pub fixed_fusion: bool,
}

impl Default for TksConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 2,
            grid_h: 4,
            grid_w: 2,
            stages: vec![2],
            fixed_fusion: false,
        }
    }
}

impl TksConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.k == 0 {
            return Err(Error::config("tks.k must be at least 1"));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::config("tks grid extents must be positive"));
        }
        let mut seen = self.stages.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.stages.len() {
            return Err(Error::config("tks.stages contains duplicates"));
        }
        if let Some(&s) = self.stages.iter().find(|&&s| !(1..=4).contains(&s)) {
            return Err(Error::config(format!("tks stage {s} outside 1..=4")));
        }
        Ok(())
    }

    /// Stages with an active block.
    pub fn active_stages(&self) -> &[usize] {
        if self.enabled {
            &self.stages
        } else {
            &[]
        }
    }
}

/// Parameters of one block: per path a `[C,C,3]` kernel and a `[C,C]` selector.
#[derive(Clone, Debug)]
pub struct TksParams {
    pub channels: usize,
    pub path_weights: Vec<ParamId>,
    pub select_weights: Vec<ParamId>,
}

impl TksParams {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        channels: usize,
        k: usize,
        stage: Option<usize>,
    ) -> Result<Self> {
        let mut path_weights = Vec::with_capacity(k);
        let mut select_weights = Vec::with_capacity(k);
        let path_bound = 1.0 / ((3 * channels) as f64).sqrt();
        let select_bound = 1.0 / (channels as f64).sqrt();
        for i in 1..=k {
            path_weights.push(store.add(
                format!("{prefix}.path{i}"),
                Tensor::uniform(&[channels, channels, 3], path_bound, rng),
                true,
                stage,
            )?);
        }
        for i in 1..=k {
            select_weights.push(store.add(
                format!("{prefix}.select{i}"),
                Tensor::uniform(&[channels, channels], select_bound, rng),
                true,
                stage,
            )?);
        }
        Ok(Self {
            channels,
            path_weights,
            select_weights,
        })
    }

    pub fn k(&self) -> usize {
        self.path_weights.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.path_weights.iter().chain(&self.select_weights).copied().collect()
    }
}

/// Intermediate values of one block, for inspection.
#[derive(Clone, Debug)]
pub struct TksTrace {
    pub x: Var,
    pub paths: Vec<Var>,
    pub u: Var,
    /// Selection weights `[K, B, C]`, a simplex along the first axis.
    pub g: Var,
    pub z: Var,
}

fn as_batched(shape: &[usize]) -> Result<[usize; 5]> {
    match *shape {
        [t, c, h, w] => Ok([1, t, c, h, w]),
        [b, t, c, h, w] => Ok([b, t, c, h, w]),
        _ => Err(Error::config(format!("tks expects [T,C,H,W] or [B,T,C,H,W], got {shape:?}"))),
    }
}

/// Uniform region averaging of `[.., H, W]` down to `[.., h, w]`.
pub fn partition<T: Real>(fw: &mut Forward<'_, T>, f: Var, h: usize, w: usize) -> Result<Var> {
    let shape = fw.tape.shape(f).to_vec();
    let (fh, fwid) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h == 0 || w == 0 || fh % h != 0 || fwid % w != 0 {
        return Err(Error::config(format!(
            "partition grid {h}x{w} does not divide feature map {fh}x{fwid}"
        )));
    }
    fw.tape.avg_pool2d(f, fh / h, fwid / w)
}

/// Selection step on partitioned features `[T,C,h,w]` or `[B,T,C,h,w]`.
pub fn select<T: Real>(
    fw: &mut Forward<'_, T>,
    x: Var,
    params: &TksParams,
    fixed_fusion: bool,
) -> Result<TksTrace> {
    let in_shape = fw.tape.shape(x).to_vec();
    let [b, t, c, h, w] = as_batched(&in_shape)?;
    if c != params.channels {
        return Err(Error::config(format!(
            "tks block built for {} channels, input has {c}",
            params.channels
        )));
    }
    let xb = fw.tape.reshape(x, &[b, t, c, h, w])?;
    let k = params.k();
    let mut paths = Vec::with_capacity(k);
    for (i, &pid) in params.path_weights.iter().enumerate() {
        let wp = fw.param(pid);
        paths.push(fw.tape.temporal_conv1d(xb, wp, i + 1)?);
    }
    let mut total = paths[0];
    for &p in &paths[1..] {
        total = fw.tape.add(total, p)?;
    }
    let u = fw.tape.mean_axes(total, &[1, 3, 4])?;
    let g = if fixed_fusion {
        fw.tape.constant(Tensor::full(&[k, b, c], T::one() / T::of(k as f64)))
    } else {
        let mut logits = Vec::with_capacity(k);
        for &sid in &params.select_weights {
            let ws = fw.param(sid);
            logits.push(fw.tape.linear(u, ws, None)?);
        }
        let stacked = fw.tape.stack(&logits, 0)?;
        fw.tape.softmax(stacked, 0)?
    };
    let full = [b, t, c, h, w];
    let mut z = None;
    for (i, &y) in paths.iter().enumerate() {
        let gi = fw.tape.select(g, 0, i)?;
        let gi = fw.tape.reshape(gi, &[b, 1, c, 1, 1])?;
        let gi = fw.tape.expand(gi, &full)?;
        let term = fw.tape.mul(gi, y)?;
        z = Some(match z {
            None => term,
            Some(acc) => fw.tape.add(acc, term)?,
        });
    }
    let z = fw.tape.reshape(z.expect("k >= 1"), &in_shape)?;
    Ok(TksTrace { x, paths, u, g, z })
}

/// `E = upsample(Z) + F`.
pub fn excite<T: Real>(fw: &mut Forward<'_, T>, f: Var, z: Var) -> Result<Var> {
    let fs = fw.tape.shape(f).to_vec();
    let zs = fw.tape.shape(z).to_vec();
    let r = fs.len();
    if zs.len() != r || fs[..r - 2] != zs[..r - 2] {
        return Err(Error::config(format!("excite: {zs:?} does not match {fs:?}")));
    }
    let (fh, fwid, zh, zw) = (fs[r - 2], fs[r - 1], zs[r - 2], zs[r - 1]);
    if zh == 0 || zw == 0 || fh % zh != 0 || fwid % zw != 0 {
        return Err(Error::config(format!(
            "excite: {zh}x{zw} does not upsample evenly to {fh}x{fwid}"
        )));
    }
    let up = fw.tape.upsample_nearest(z, fh / zh, fwid / zw)?;
    fw.tape.add(up, f)
}

/// Full block; returns `E` and the trace.
pub fn tks_forward<T: Real>(
    fw: &mut Forward<'_, T>,
    f: Var,
    config: &TksConfig,
    params: &TksParams,
) -> Result<(Var, TksTrace)> {
    let x = partition(fw, f, config.grid_h, config.grid_w)?;
    let trace = select(fw, x, params, config.fixed_fusion)?;
    let e = excite(fw, f, trace.z)?;
    Ok((e, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize, k: usize, seed: u64) -> (ParamStore<f64>, TksParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = TksParams::register(&mut store, &mut rng, "tks", c, k, Some(2)).unwrap();
        (store, p)
    }

    #[test]
    fn partition_means_regions() {
        let (store, _) = setup(1, 1, 0);
        let mut fw = Forward::new(&store, false);
        let data: Vec<f64> = (0..128).map(|v| v as f64).collect();
        let f = fw.tape.constant(Tensor::from_vec(&[1, 1, 16, 8], data.clone()).unwrap());
        let x = partition(&mut fw, f, 4, 2).unwrap();
        assert_eq!(fw.tape.shape(x), &[1, 1, 4, 2]);
        for gh in 0..4 {
            for gw in 0..2 {
                let mut s = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        s += data[(gh * 4 + i) * 8 + gw * 4 + j];
                    }
                }
                assert!((fw.tape.value(x).data()[gh * 2 + gw] - s / 16.0).abs() < 1e-12);
            }
        }
        assert!(partition(&mut fw, f, 3, 2).is_err());
    }

    #[test]
    fn partition_full_grid_is_identity() {
        let (store, _) = setup(1, 1, 0);
        let mut fw = Forward::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::normal(&[2, 3, 4, 2], 1.0, &mut rng);
        let f = fw.tape.constant(t.clone());
        let x = partition(&mut fw, f, 4, 2).unwrap();
        assert_eq!(fw.tape.value(x).data(), t.data());
    }

    #[test]
    fn single_path_selects_itself() {
        let (store, params) = setup(3, 1, 1);
        let mut fw = Forward::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = fw.tape.constant(Tensor::normal(&[4, 3, 2, 2], 1.0, &mut rng));
        let tr = select(&mut fw, x, &params, false).unwrap();
        assert!(fw.tape.value(tr.g).data().iter().all(|&g| g == 1.0));
        assert_eq!(fw.tape.value(tr.z).data(), fw.tape.value(tr.paths[0]).data());
    }

    #[test]
    fn equal_selectors_give_half_weights() {
        let (mut store, params) = setup(3, 2, 2);
        let w1 = store.get(params.select_weights[0]).tensor.clone();
        store.get_mut(params.select_weights[1]).tensor = w1;
        let mut fw = Forward::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = fw.tape.constant(Tensor::normal(&[4, 3, 2, 2], 1.0, &mut rng));
        let tr = select(&mut fw, x, &params, false).unwrap();
        assert!(fw.tape.value(tr.g).data().iter().all(|&g| g == 0.5));
        let y1 = fw.tape.value(tr.paths[0]).clone();
        let y2 = fw.tape.value(tr.paths[1]).clone();
        for ((z, a), b) in fw.tape.value(tr.z).data().iter().zip(y1.data()).zip(y2.data()) {
            assert!((z - (a + b) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn excite_zero_is_identity_and_broadcasts_scalar() {
        let (store, _) = setup(1, 1, 0);
        let mut fw = Forward::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ft = Tensor::normal(&[6, 4, 8, 4], 1.0, &mut rng);
        let f = fw.tape.constant(ft.clone());
        let z = fw.tape.constant(Tensor::zeros(&[6, 4, 4, 2]));
        let e = excite(&mut fw, f, z).unwrap();
        assert_eq!(fw.tape.value(e).data(), ft.data());

        let f1t = Tensor::normal(&[1, 1, 3, 2], 1.0, &mut rng);
        let f1 = fw.tape.constant(f1t.clone());
        let v = fw.tape.constant(Tensor::full(&[1, 1, 1, 1], 0.75));
        let e1 = excite(&mut fw, f1, v).unwrap();
        for (a, b) in fw.tape.value(e1).data().iter().zip(f1t.data()) {
            assert_eq!(*a, b + 0.75);
        }
    }

    #[test]
    fn zero_weights_leave_input_unchanged() {
        let (mut store, params) = setup(4, 2, 7);
        for id in params.param_ids() {
            let shape = store.get(id).tensor.shape().to_vec();
            store.get_mut(id).tensor = Tensor::zeros(&shape);
        }
        let mut fw = Forward::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ft = Tensor::normal(&[3, 4, 8, 4], 1.0, &mut rng);
        let f = fw.tape.constant(ft.clone());
        let (e, _) = tks_forward(&mut fw, f, &TksConfig::default(), &params).unwrap();
        assert_eq!(fw.tape.value(e).data(), ft.data());
    }

    #[test]
    fn batched_matches_per_segment() {
        let (store, params) = setup(2, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Tensor::normal(&[3, 2, 4, 2], 1.0, &mut rng);
        let b = Tensor::normal(&[3, 2, 4, 2], 1.0, &mut rng);
        let cfg = TksConfig::default();
        let mut fw = Forward::new(&store, false);
        let both = fw
            .tape
            .constant(Tensor::stack0(&[a.clone(), b.clone()]).unwrap());
        let (e, _) = tks_forward(&mut fw, both, &cfg, &params).unwrap();
        let ea = fw.tape.constant(a);
        let (e1, _) = tks_forward(&mut fw, ea, &cfg, &params).unwrap();
        let eb = fw.tape.constant(b);
        let (e2, _) = tks_forward(&mut fw, eb, &cfg, &params).unwrap();
        let joined: Vec<f64> = fw
            .tape
            .value(e1)
            .data()
            .iter()
            .chain(fw.tape.value(e2).data())
            .copied()
            .collect();
        assert_eq!(fw.tape.value(e).data(), joined.as_slice());
    }

    #[test]
    fn config_validation() {
        assert!(TksConfig::default().validate().is_ok());
        let bad = TksConfig { k: 0, ..TksConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TksConfig { stages: vec![5], ..TksConfig::default() };
        assert!(bad.validate().is_err());
    }
}
