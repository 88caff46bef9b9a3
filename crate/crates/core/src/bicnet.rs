//! Two-branch model: frame splitting, shared staged forward, cross-scale
//! paths and branch aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, Branch, StageFeature, NUM_STAGES};
use crate::dao::{dao_forward, DaoConfig, DaoModules};
use crate::error::{Error, Result};
use crate::params::{Forward, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::tks::{tks_forward, TksConfig, TksParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Small frames per big frame.
    pub alpha: usize,
    /// Frames per segment.
    pub segment_len: usize,
    /// Big-frame resolution `[H, W]`; small frames use half of each.
    pub big_res: [usize; 2],
    #[serde(default = "default_branches")]
    pub branches: usize,
    pub csp_stages: Vec<usize>,
    pub dao: DaoConfig,
    pub tks: TksConfig,
}

fn default_branches() -> usize {
    2
}

impl ModelConfig {
    /// Full-scale configuration.
    pub fn resnet50() -> Self {
        Self {
            backbone: BackboneConfig::resnet50(),
            alpha: 3,
            segment_len: 8,
            big_res: [256, 128],
            branches: 2,
            csp_stages: vec![1, 2, 3],
            dao: DaoConfig::default(),
            tks: TksConfig::default(),
        }
    }

    /// Desk-scale configuration.
    pub fn mini() -> Self {
        Self {
            backbone: BackboneConfig::mini(),
            big_res: [64, 32],
            ..Self::resnet50()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "resnet50" => Ok(Self::resnet50()),
            "mini" => Ok(Self::mini()),
            other => Err(Error::config(format!("unknown preset `{other}` (expected resnet50 or mini)"))),
        }
    }

    pub fn small_res(&self) -> [usize; 2] {
        [self.big_res[0] / 2, self.big_res[1] / 2]
    }

    /// Big frames per segment.
    pub fn big_frames(&self) -> usize {
        self.segment_len / (1 + self.alpha)
    }

    pub fn small_frames(&self) -> usize {
        self.big_frames() * self.alpha
    }

    pub fn stage_size(&self, branch: Branch, stage: usize) -> (usize, usize) {
        let [h, w] = match branch {
            Branch::Detail => self.big_res,
            Branch::Context => self.small_res(),
        };
        self.backbone.stage_output_size(stage, h, w)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.dao.validate()?;
        self.tks.validate()?;
        if self.branches != 2 {
            return Err(Error::config(format!(
                "exactly two branches are supported, got {}",
                self.branches
            )));
        }
        if self.alpha == 0 {
            return Err(Error::config("alpha must be at least 1"));
        }
        if self.segment_len == 0 || !self.segment_len.is_multiple_of(1 + self.alpha) {
            return Err(Error::config(format!(
                "segment length {} is not divisible by 1 + alpha = {}",
                self.segment_len,
                1 + self.alpha
            )));
        }
        let [h, w] = self.big_res;
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("big resolution {h}x{w} must be even and non-zero")));
        }
        for &s in &self.csp_stages {
            if !(1..=NUM_STAGES).contains(&s) {
                return Err(Error::config(format!("csp stage {s} outside 1..=4")));
            }
            let (dh, dw) = self.stage_size(Branch::Detail, s);
            let (ch, cw) = self.stage_size(Branch::Context, s);
            if dh % 2 != 0 || dw % 2 != 0 || (dh / 2, dw / 2) != (ch, cw) {
                return Err(Error::config(format!(
                    "csp after stage {s}: detail map {dh}x{dw} does not halve to context map {ch}x{cw}"
                )));
            }
        }
        let mut csp = self.csp_stages.clone();
        csp.sort_unstable();
        csp.dedup();
        if csp.len() != self.csp_stages.len() {
            return Err(Error::config("csp_stages contains duplicates"));
        }
        for &s in self.tks.active_stages() {
            for branch in [Branch::Detail, Branch::Context] {
                let (fh, fw) = self.stage_size(branch, s);
                if fh % self.tks.grid_h != 0 || fw % self.tks.grid_w != 0 {
                    return Err(Error::config(format!(
                        "tks grid {}x{} does not divide the {} stage-{s} map {fh}x{fw}",
                        self.tks.grid_h,
                        self.tks.grid_w,
                        branch.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One segment divided into full- and half-resolution frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSplit<T> {
    /// `[M, 3, H, W]`
    pub big_frames: Tensor<T>,
    /// `[alpha*M, 3, H/2, W/2]`
    pub small_frames: Tensor<T>,
    pub alpha: usize,
    pub m: usize,
}

/// First `N/(1+alpha)` frames stay big; the rest are bilinearly halved.
pub fn split_segment<T: Real>(segment: &Tensor<T>, alpha: usize) -> Result<SegmentSplit<T>> {
    let s = segment.shape();
    let [n, c, h, w] = *s else {
        return Err(Error::input(format!("segment must be [N,C,H,W], got {s:?}")));
    };
    if n == 0 || n % (1 + alpha) != 0 {
        return Err(Error::input(format!(
            "segment of {n} frames cannot be split with alpha = {alpha}"
        )));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::input(format!("frame size {h}x{w} must be even")));
    }
    let m = n / (1 + alpha);
    let per = c * h * w;
    let data = segment.data();
    let big = Tensor::from_vec(&[m, c, h, w], data[..m * per].to_vec())?;
    let rest = Tensor::from_vec(&[n - m, c, h, w], data[m * per..].to_vec())?;
    Ok(SegmentSplit {
        big_frames: big,
        small_frames: rest.resize_bilinear(h / 2, w / 2)?,
        alpha,
        m,
    })
}

/// Stacks per-segment splits into branch batches.
pub fn batch_splits<T: Real>(splits: &[SegmentSplit<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let cat = |items: Vec<&Tensor<T>>| -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| Error::input("empty batch"))?;
        let mut shape = first.shape().to_vec();
        let mut data = Vec::new();
        for t in &items {
            if t.shape()[1..] != first.shape()[1..] {
                return Err(Error::input("segments in a batch differ in shape"));
            }
            data.extend_from_slice(t.data());
        }
        shape[0] = items.iter().map(|t| t.shape()[0]).sum();
        Tensor::from_vec(&shape, data)
    };
    Ok((
        cat(splits.iter().map(|s| &s.big_frames).collect())?,
        cat(splits.iter().map(|s| &s.small_frames).collect())?,
    ))
}

/// Pool, project to `alpha*C` channels and unfold into `alpha` frames per
/// input frame: group `j` of frame `m` becomes frame `m*alpha + j`.
pub fn csp_transform<T: Real>(tape: &mut Tape<T>, f_d: Var, w_c: Var, alpha: usize) -> Result<Var> {
    let s = tape.shape(f_d).to_vec();
    let ws = tape.shape(w_c).to_vec();
    let [m, c, h, w] = *s.as_slice() else {
        return Err(Error::config(format!("csp expects [M,C,H,W], got {s:?}")));
    };
    if ws != [alpha * c, c, 1, 1] {
        return Err(Error::config(format!(
            "csp weight {ws:?} does not match {c} channels at alpha {alpha}"
        )));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!("csp input {h}x{w} must be even")));
    }
    let p = tape.max_pool2d(f_d, 2, 2, 0)?;
    let y = tape.conv2d(p, w_c, 1, 0)?;
    tape.reshape(y, &[m * alpha, c, h / 2, w / 2])
}

/// Elementwise mean of the two branch vectors.
pub fn aggregate_branches<T: Real>(tape: &mut Tape<T>, f_d: Var, f_c: Var) -> Result<Var> {
    if tape.shape(f_d) != tape.shape(f_c) {
        return Err(Error::config(format!(
            "branch features differ in shape: {:?} vs {:?}",
            tape.shape(f_d),
            tape.shape(f_c)
        )));
    }
    let s = tape.add(f_d, f_c)?;
    Ok(tape.scale(s, 0.5))
}

/// Per-stage `W_c` of the cross-scale paths.
#[derive(Clone, Debug)]
pub struct CspParams {
    pub stages: Vec<(usize, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct BicnetModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub csp: CspParams,
    pub dao: Option<[DaoModules; 2]>,
    pub tks: Vec<(usize, TksParams)>,
}

/// Everything a forward pass exposes.
#[derive(Clone, Debug)]
pub struct BicnetOutput {
    /// `[B, C]` per branch and aggregated.
    pub f_d: Var,
    pub f_c: Var,
    pub feature: Var,
    /// Mean of the two branch divergence losses.
    pub dao_loss: Option<Var>,
    /// Attention maps `[B, frames, H, W]` per branch.
    pub maps: Vec<(Branch, Var)>,
    /// Selection weights `[K, B, C]` per TKS block and branch.
    pub selection: Vec<(usize, Branch, Var)>,
}

impl BicnetModel {
    pub fn build<T: Real, R: Rng>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::build(&config.backbone, store, rng, "backbone")?;
        let mut csp = Vec::new();
        for &s in &config.csp_stages {
            let c = config.backbone.stage_channels(s);
            let ac = config.alpha * c;
            let std = (2.0 / ac as f64).sqrt();
            let id = store.add(format!("csp.stage{s}"), Tensor::normal(&[ac, c, 1, 1], std, rng), true, Some(s))?;
            csp.push((s, id));
        }
        let dao = if config.dao.enabled {
            let s = config.dao.stage;
            let c = config.backbone.stage_channels(s);
            let (dh, dw) = config.stage_size(Branch::Detail, s);
            let (ch, cw) = config.stage_size(Branch::Context, s);
            Some([
                DaoModules::register(store, rng, Branch::Detail, config.big_frames(), c, dh * dw)?,
                DaoModules::register(store, rng, Branch::Context, config.small_frames(), c, ch * cw)?,
            ])
        } else {
            None
        };
        let mut tks = Vec::new();
        for &s in config.tks.active_stages() {
            let c = config.backbone.stage_channels(s);
            tks.push((s, TksParams::register(store, rng, &format!("tks.stage{s}"), c, config.tks.k, Some(s))?));
        }
        Ok(Self {
            config: config.clone(),
            backbone,
            csp: CspParams { stages: csp },
            dao,
            tks,
        })
    }

    /// Runs `B` segments: `big` is `[B*M,3,H,W]`, `small` is `[B*alpha*M,3,H/2,W/2]`.
    pub fn forward<T: Real>(&self, fw: &mut Forward<'_, T>, big: Var, small: Var) -> Result<BicnetOutput> {
        let cfg = &self.config;
        let m = cfg.big_frames();
        let am = cfg.small_frames();
        let nb = fw.tape.shape(big)[0];
        let ns = fw.tape.shape(small)[0];
        if !nb.is_multiple_of(m) || ns != nb / m * am {
            return Err(Error::config(format!(
                "{nb} big and {ns} small frames do not form segments of {m}+{am}"
            )));
        }
        let b = nb / m;
        let mut d = StageFeature::input(big, Branch::Detail);
        let mut c = StageFeature::input(small, Branch::Context);
        let mut dao_loss = None;
        let mut maps = Vec::new();
        let mut selection = Vec::new();
        for s in 1..=NUM_STAGES {
            d = self.backbone.forward_stage(fw, d, s)?;
            c = self.backbone.forward_stage(fw, c, s)?;
            if let Some((_, params)) = self.tks.iter().find(|(st, _)| *st == s) {
                for (feat, frames) in [(&mut d, m), (&mut c, am)] {
                    let shape = fw.tape.shape(feat.var).to_vec();
                    let x = fw.tape.reshape(feat.var, &[b, frames, shape[1], shape[2], shape[3]])?;
                    let (e, trace) = tks_forward(fw, x, &cfg.tks, params)?;
                    feat.var = fw.tape.reshape(e, &shape)?;
                    selection.push((s, feat.branch, trace.g));
                }
            }
            if let Some(&(_, wid)) = self.csp.stages.iter().find(|(st, _)| *st == s) {
                let w = fw.param(wid);
                let t = csp_transform(&mut fw.tape, d.var, w, cfg.alpha)?;
                c.var = fw.tape.add(c.var, t)?;
            }
            if let (Some(modules), true) = (&self.dao, cfg.dao.stage == s) {
                let od = dao_forward(fw, d.var, m, &modules[0], &cfg.dao)?;
                let oc = dao_forward(fw, c.var, am, &modules[1], &cfg.dao)?;
                d.var = od.features;
                c.var = oc.features;
                let l = fw.tape.add(od.loss, oc.loss)?;
                dao_loss = Some(fw.tape.scale(l, 0.5));
                maps.push((Branch::Detail, od.maps));
                maps.push((Branch::Context, oc.maps));
            }
        }
        let f_d = pool_segments(&mut fw.tape, d.var, b, m)?;
        let f_c = pool_segments(&mut fw.tape, c.var, b, am)?;
        let feature = aggregate_branches(&mut fw.tape, f_d, f_c)?;
        Ok(BicnetOutput {
            f_d,
            f_c,
            feature,
            dao_loss,
            maps,
            selection,
        })
    }

    /// Convenience: forward a batch of splits given as tensors.
    pub fn forward_splits<T: Real>(
        &self,
        fw: &mut Forward<'_, T>,
        splits: &[SegmentSplit<T>],
    ) -> Result<BicnetOutput> {
        let (big, small) = batch_splits(splits)?;
        let big = fw.tape.constant(big);
        let small = fw.tape.constant(small);
        self.forward(fw, big, small)
    }

    pub fn out_channels(&self) -> usize {
        self.config.backbone.out_channels()
    }
}

/// Spatial average per frame, then the mean over each segment's frames.
fn pool_segments<T: Real>(tape: &mut Tape<T>, x: Var, b: usize, frames: usize) -> Result<Var> {
    let c = tape.shape(x)[1];
    let g = tape.mean_axes(x, &[2, 3])?;
    let g = tape.reshape(g, &[b, frames, c])?;
    tape.mean_axes(g, &[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_counts() {
        let seg = Tensor::<f32>::zeros(&[8, 3, 8, 4]);
        let s3 = split_segment(&seg, 3).unwrap();
        assert_eq!((s3.big_frames.shape()[0], s3.small_frames.shape()[0]), (2, 6));
        assert_eq!(s3.small_frames.shape(), &[6, 3, 4, 2]);
        let s1 = split_segment(&seg, 1).unwrap();
        assert_eq!((s1.m, s1.small_frames.shape()[0]), (4, 4));
        assert!(matches!(split_segment(&seg, 2), Err(Error::Input(_))));
    }

    #[test]
    fn split_keeps_order() {
        let data: Vec<f32> = (0..4).flat_map(|f| std::iter::repeat_n(f as f32, 3 * 4 * 2)).collect();
        let seg = Tensor::from_vec(&[4, 3, 4, 2], data).unwrap();
        let s = split_segment(&seg, 1).unwrap();
        assert!(s.big_frames.data()[..24].iter().all(|&v| v == 0.0));
        assert!(s.big_frames.data()[24..].iter().all(|&v| v == 1.0));
        assert!(s.small_frames.data()[..6].iter().all(|&v| v == 2.0));
        assert!(s.small_frames.data()[6..].iter().all(|&v| v == 3.0));
    }

    #[test]
    fn csp_shapes_and_zero_weight() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = tape.constant(Tensor::normal(&[2, 64, 16, 8], 1.0, &mut rng));
        let w = tape.constant(Tensor::zeros(&[192, 64, 1, 1]));
        let y = csp_transform(&mut tape, f, w, 3).unwrap();
        assert_eq!(tape.shape(y), &[6, 64, 8, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(&[128, 64, 1, 1]));
        assert!(matches!(csp_transform(&mut tape, f, bad, 3), Err(Error::Config(_))));
    }

    #[test]
    fn csp_group_maps_to_frame() {
        // one frame, C=1, alpha=2; weights pick +1 and -1 copies
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, -1.0]).unwrap());
        let y = csp_transform(&mut tape, f, w, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0, -5.0]);
    }

    #[test]
    fn aggregate_is_mean() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
        let v = tape.constant(Tensor::from_vec(&[1, 2], vec![2.0, -4.0]).unwrap());
        let r = aggregate_branches(&mut tape, a, v).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, -2.0]);
        let bad = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(aggregate_branches(&mut tape, a, bad).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::mini().validate().is_ok());
        assert!(ModelConfig::resnet50().validate().is_ok());
        let bad = ModelConfig { branches: 3, ..ModelConfig::mini() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { alpha: 2, ..ModelConfig::mini() };
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::mini();
        bad.tks.grid_h = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mini_forward_output_length() {
        let cfg = ModelConfig::mini();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = BicnetModel::build(&cfg, &mut store, &mut rng).unwrap();
        let seg = Tensor::normal(&[8, 3, 64, 32], 1.0, &mut rng);
        let split = split_segment(&seg, 3).unwrap();
        let mut fw = Forward::new(&store, true);
        let out = model.forward_splits(&mut fw, &[split]).unwrap();
        assert_eq!(fw.tape.shape(out.feature), &[1, 128]);
        assert_eq!(fw.tape.shape(out.maps[0].1), &[1, 2, 4, 2]);
        assert_eq!(fw.tape.shape(out.maps[1].1), &[1, 6, 2, 1]);
        let l = fw.tape.value(out.dao_loss.unwrap()).item();
        assert!((-1.0..=0.0).contains(&l));
    }
}
