//! Staged ResNet-style feature extractor shared by both branches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{BnHandles, Forward, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    /// Output-to-inner width ratio.
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
    /// 3x3 / stride 2 max pooling after the stem convolution.
    pub pooling: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub blocks: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
    /// Forces stage 4 to stride 1 regardless of its declared stride.
    pub last_downsample_removed: bool,
    pub block_kind: BlockKind,
}

pub const NUM_STAGES: usize = 4;

impl BackboneConfig {
    /// ResNet-50 without classifier, last downsampling removed.
    pub fn resnet50() -> Self {
        Self {
            in_channels: 3,
            stem: StemConfig {
                kernel: 7,
                stride: 2,
                out_channels: 64,
                pooling: true,
            },
            stages: vec![
                StageConfig { blocks: 3, out_channels: 256, stride: 1 },
                StageConfig { blocks: 4, out_channels: 512, stride: 2 },
                StageConfig { blocks: 6, out_channels: 1024, stride: 2 },
                StageConfig { blocks: 3, out_channels: 2048, stride: 2 },
            ],
            last_downsample_removed: true,
            block_kind: BlockKind::Bottleneck,
        }
    }

    /// Desk-scale network with the same stride plan.
    pub fn mini() -> Self {
        Self {
            in_channels: 3,
            stem: StemConfig {
                kernel: 3,
                stride: 2,
                out_channels: 16,
                pooling: true,
            },
            stages: vec![
                StageConfig { blocks: 1, out_channels: 16, stride: 1 },
                StageConfig { blocks: 1, out_channels: 32, stride: 2 },
                StageConfig { blocks: 1, out_channels: 64, stride: 2 },
                StageConfig { blocks: 1, out_channels: 128, stride: 2 },
            ],
            last_downsample_removed: true,
            block_kind: BlockKind::Basic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != NUM_STAGES {
            return Err(Error::config(format!(
                "backbone needs exactly {NUM_STAGES} stages, got {}",
                self.stages.len()
            )));
        }
        if self.in_channels == 0 || self.stem.out_channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return Err(Error::config("stem extents must be positive"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.out_channels == 0 || s.stride == 0 {
                return Err(Error::config(format!("stage {} has a zero extent", i + 1)));
            }
            if s.out_channels % self.block_kind.expansion() != 0 {
                return Err(Error::config(format!(
                    "stage {} width {} not divisible by expansion {}",
                    i + 1,
                    s.out_channels,
                    self.block_kind.expansion()
                )));
            }
        }
        Ok(())
    }

    /// Stride actually applied by stage `stage` (1-based).
    pub fn stage_stride(&self, stage: usize) -> usize {
        if stage == NUM_STAGES && self.last_downsample_removed {
            1
        } else {
            self.stages[stage - 1].stride
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.stages[stage - 1].out_channels
    }

    /// Channels entering stage `stage` (1-based).
    pub fn stage_in_channels(&self, stage: usize) -> usize {
        if stage == 1 {
            self.stem.out_channels
        } else {
            self.stages[stage - 2].out_channels
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stages[NUM_STAGES - 1].out_channels
    }

    /// Spatial size after the stem (including pooling).
    pub fn stem_output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.stem.kernel;
        let pad = k / 2;
        let conv = |x: usize| (x + 2 * pad - k) / self.stem.stride + 1;
        let (mut h, mut w) = (conv(h), conv(w));
        if self.stem.pooling {
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
        }
        (h, w)
    }

    /// Spatial size at the output of stage `stage` for an `h x w` input.
    pub fn stage_output_size(&self, stage: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut h, mut w) = self.stem_output_size(h, w);
        for s in 1..=stage {
            let st = self.stage_stride(s);
            h = (h - 1) / st + 1;
            w = (w - 1) / st + 1;
        }
        (h, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Detail,
    Context,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Detail => "detail",
            Branch::Context => "context",
        }
    }
}

/// Output of a backbone stage; stage 0 is the raw frame batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageFeature {
    pub var: Var,
    pub stage_index: usize,
    pub branch: Branch,
}

impl StageFeature {
    pub fn input(var: Var, branch: Branch) -> Self {
        Self {
            var,
            stage_index: 0,
            branch,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub weight: ParamId,
    pub bn: BnHandles,
    pub stride: usize,
    pub padding: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        stage: Option<usize>,
    ) -> Result<Self> {
        // He initialization, fan-out mode.
        let std = (2.0 / (cout * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{prefix}.conv"),
            Tensor::normal(&[cout, cin, kernel, kernel], std, rng),
            true,
            stage,
        )?;
        let bn = BnHandles::register(store, &format!("{prefix}.bn"), cout, stage)?;
        Ok(Self {
            weight,
            bn,
            stride,
            padding: kernel / 2,
        })
    }

    fn forward<T: Real>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = fw.param(self.weight);
        let y = fw.tape.conv2d(x, w, self.stride, self.padding)?;
        fw.batch_norm(y, &self.bn)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub convs: Vec<ConvBn>,
    pub shortcut: Option<ConvBn>,
}

impl Block {
    fn forward<T: Real>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            y = c.forward(fw, y)?;
            if i != last {
                y = fw.tape.relu(y);
            }
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(fw, x)?,
            None => x,
        };
        let sum = fw.tape.add(y, skip)?;
        Ok(fw.tape.relu(sum))
    }
}

/// A built backbone: layer descriptors pointing into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: ConvBn,
    pub stages: Vec<Vec<Block>>,
}

impl Backbone {
    pub fn build<T: Real, R: Rng>(
        config: &BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::register(
            store,
            rng,
            &format!("{prefix}.stem"),
            config.in_channels,
            config.stem.out_channels,
            config.stem.kernel,
            config.stem.stride,
            Some(0),
        )?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 1..=NUM_STAGES {
            let spec = config.stages[s - 1];
            let mut blocks = Vec::with_capacity(spec.blocks);
            let mut cin = config.stage_in_channels(s);
            for b in 0..spec.blocks {
                let stride = if b == 0 { config.stage_stride(s) } else { 1 };
                let cout = spec.out_channels;
                let p = format!("{prefix}.stage{s}.block{b}");
                let convs = match config.block_kind {
                    BlockKind::Basic => vec![
                        ConvBn::register(store, rng, &format!("{p}.conv1"), cin, cout, 3, stride, Some(s))?,
                        ConvBn::register(store, rng, &format!("{p}.conv2"), cout, cout, 3, 1, Some(s))?,
                    ],
                    BlockKind::Bottleneck => {
                        let width = cout / 4;
                        vec![
                            ConvBn::register(store, rng, &format!("{p}.conv1"), cin, width, 1, 1, Some(s))?,
                            ConvBn::register(store, rng, &format!("{p}.conv2"), width, width, 3, stride, Some(s))?,
                            ConvBn::register(store, rng, &format!("{p}.conv3"), width, cout, 1, 1, Some(s))?,
                        ]
                    }
                };
                let shortcut = if stride != 1 || cin != cout {
                    Some(ConvBn::register(store, rng, &format!("{p}.down"), cin, cout, 1, stride, Some(s))?)
                } else {
                    None
                };
                blocks.push(Block { convs, shortcut });
                cin = cout;
            }
            stages.push(blocks);
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    /// Runs stage `stage_index`; stage 1 includes the stem.
    pub fn forward_stage<T: Real>(
        &self,
        fw: &mut Forward<'_, T>,
        feature: StageFeature,
        stage_index: usize,
    ) -> Result<StageFeature> {
        if stage_index == 0 || stage_index > NUM_STAGES || feature.stage_index + 1 != stage_index {
            return Err(Error::Usage(format!(
                "forward_stage: stage {stage_index} requested after stage {}",
                feature.stage_index
            )));
        }
        let mut x = feature.var;
        if stage_index == 1 {
            let shape = fw.tape.shape(x).to_vec();
            if shape.len() != 4 || shape[1] != self.config.in_channels {
                return Err(Error::config(format!(
                    "backbone expects [frames,{},H,W] input, got {shape:?}",
                    self.config.in_channels
                )));
            }
            x = self.stem.forward(fw, x)?;
            x = fw.tape.relu(x);
            if self.config.stem.pooling {
                x = fw.tape.max_pool2d(x, 3, 2, 1)?;
            }
        }
        for block in &self.stages[stage_index - 1] {
            x = block.forward(fw, x)?;
        }
        Ok(StageFeature {
            var: x,
            stage_index,
            branch: feature.branch,
        })
    }

    /// Runs the remaining stages up to and including `last`.
    pub fn forward_to<T: Real>(
        &self,
        fw: &mut Forward<'_, T>,
        mut feature: StageFeature,
        last: usize,
    ) -> Result<StageFeature> {
        while feature.stage_index < last {
            feature = self.forward_stage(fw, feature, feature.stage_index + 1)?;
        }
        Ok(feature)
    }

    /// Every trainable parameter id reachable from a forward pass.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let mut push = |c: &ConvBn| ids.extend([c.weight, c.bn.gamma, c.bn.beta]);
        push(&self.stem);
        for stage in &self.stages {
            for block in stage {
                block.convs.iter().for_each(&mut push);
                if let Some(s) = &block.shortcut {
                    push(s);
                }
            }
        }
        ids
    }
}
