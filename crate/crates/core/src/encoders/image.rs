use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, relu, upsample2x, Conv2d, GroupNorm, Linear, Scope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Channel width of each of the four stages.
    pub widths: [usize; 4],
    /// Residual blocks per stage.
    pub blocks: [usize; 4],
    /// Common width of the pyramid after lateral fusion.
    pub fpn_width: usize,
    /// Stride-2 stem convolutions ahead of stage 1.
    pub stem_convs: usize,
}

impl ImageEncoderConfig {
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            widths: [32, 64, 128, 256],
            blocks: [1, 1, 1, 1],
            fpn_width: 32,
            stem_convs: 3,
        }
    }

    /// 256x256 inputs, [3, 4, 6, 3] basic blocks, ResNet-50 stage widths.
    pub fn paper() -> Self {
        Self {
            image_size: 256,
            channels: 1,
            widths: [256, 512, 1024, 2048],
            blocks: [3, 4, 6, 3],
            fpn_width: 256,
            stem_convs: 2,
        }
    }

    /// Side length of stage `k` (1-based): `S / 2^(stem + k - 1)`.
    pub fn stage_grid(&self, k: usize) -> usize {
        self.image_size >> (self.stem_convs + k - 1)
    }

    pub fn stage_grids(&self) -> [usize; 4] {
        [1, 2, 3, 4].map(|k| self.stage_grid(k))
    }

    /// Side of the aggregated token grid: the finest pyramid level after two
    /// stride-2 convolutions.
    pub fn token_grid(&self) -> usize {
        self.stage_grid(1) / 4
    }

    pub fn n_image_tokens(&self) -> usize {
        self.token_grid() * self.token_grid()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 1usize << (self.stem_convs + 3);
        if self.stem_convs == 0 || self.image_size % unit != 0 || self.stage_grid(1) < 4 {
            return Err(Error::Config(format!(
                "image_size {} must be a multiple of {unit} with a stage-1 grid of at least 4 \
                 ({} stem convolutions)",
                self.image_size, self.stem_convs
            )));
        }
        if self.channels == 0 || self.fpn_width == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("image encoder widths must be positive".into()));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        Ok(())
    }
}

fn groups_for(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl BasicBlock {
    fn new(vs: &Scope, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(&vs.pp("down"), cin, cout, 1, stride, false)?,
                GroupNorm::new(&vs.pp("down_norm"), cout, groups_for(cout))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&vs.pp("conv1"), cin, cout, 3, stride, false)?,
            norm1: GroupNorm::new(&vs.pp("norm1"), cout, groups_for(cout))?,
            conv2: Conv2d::new(&vs.pp("conv2"), cout, cout, 3, 1, false)?,
            norm2: GroupNorm::new(&vs.pp("norm2"), cout, groups_for(cout))?,
            shortcut,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward_relu(&self.conv1.forward(xs)?)?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(xs)?)?,
            None => xs.clone(),
        };
        Ok(relu(&(h + skip)?)?)
    }
}

/// The stage outputs of the backbone, finest first.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub maps: Vec<Tensor>,
}

impl MultiScaleFeatures {
    pub fn grids(&self) -> Vec<(usize, usize)> {
        self.maps
            .iter()
            .map(|m| {
                let d = m.dims();
                (d[2], d[3])
            })
            .collect()
    }
}

/// Residual backbone with four stages, a global projection head, and the
/// pyramid aggregator that produces the image token grid.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    cfg: ImageEncoderConfig,
    stem: Vec<(Conv2d, GroupNorm)>,
    stages: Vec<Vec<BasicBlock>>,
    global_proj: Linear,
    aggregator: Aggregator,
}

impl ImageEncoder {
    pub fn new(vs: &Scope, cfg: &ImageEncoderConfig, embed_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let w0 = cfg.widths[0];
        let half = (w0 / 2).max(1);
        let stem = (0..cfg.stem_convs)
            .map(|i| {
                let cin = if i == 0 { cfg.channels } else { half };
                let cout = if i + 1 == cfg.stem_convs { w0 } else { half };
                Ok((
                    Conv2d::new(&vs.pp(format!("stem.conv{}", i + 1)), cin, cout, 3, 2, false)?,
                    GroupNorm::new(&vs.pp(format!("stem.norm{}", i + 1)), cout, groups_for(cout))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = w0;
        for (k, (&width, &n)) in cfg.widths.iter().zip(cfg.blocks.iter()).enumerate() {
            let vs = vs.pp(format!("stage{}", k + 1));
            let mut blocks = Vec::with_capacity(n);
            for b in 0..n {
                let stride = if k > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(&vs.pp(b), cin, width, stride)?);
                cin = width;
            }
            stages.push(blocks);
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            global_proj: Linear::new(&vs.pp("global_proj"), cfg.widths[3], embed_dim)?,
            aggregator: Aggregator::new(&vs.pp("aggregate"), cfg, embed_dim)?,
        })
    }

    pub fn config(&self) -> &ImageEncoderConfig {
        &self.cfg
    }

    /// Returns the four stage maps and the unit-norm global embedding
    /// `[B, D]` of the average-pooled deepest map.
    pub fn encode(&self, images: &Tensor) -> Result<(MultiScaleFeatures, Tensor)> {
        let dims = images.dims();
        let s = self.cfg.image_size;
        if dims.len() != 4 || dims[1] != self.cfg.channels || dims[2] != s || dims[3] != s {
            return Err(Error::Shape(format!(
                "image batch {:?} does not match [B, {}, {s}, {s}] (stage grids {:?})",
                dims,
                self.cfg.channels,
                self.cfg.stage_grids()
            )));
        }
        let mut h = images.clone();
        for (conv, norm) in &self.stem {
            h = norm.forward_relu(&conv.forward(&h)?)?;
        }
        let mut maps = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h)?;
            }
            maps.push(h.clone());
        }
        let pooled = h.mean((2, 3))?;
        let global = l2_normalize(&self.global_proj.forward(&pooled)?)?;
        Ok((MultiScaleFeatures { maps }, global))
    }

    /// Unit-norm image tokens `[B, n1, D]`.
    pub fn aggregate(&self, features: &MultiScaleFeatures) -> Result<Tensor> {
        self.aggregator.forward(features)
    }
}

/// Top-down lateral pyramid fusion followed by two stride-2 3x3 convolutions
/// on the finest fused map.
#[derive(Clone, Debug)]
pub struct Aggregator {
    lateral: Vec<Conv2d>,
    smooth: Conv2d,
    down: [(Conv2d, GroupNorm); 2],
    token_proj: Linear,
}

impl Aggregator {
    pub fn new(vs: &Scope, cfg: &ImageEncoderConfig, embed_dim: usize) -> Result<Self> {
        let f = cfg.fpn_width;
        let lateral = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(k, &w)| Conv2d::new(&vs.pp(format!("lateral{}", k + 1)), w, f, 1, 1, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lateral,
            smooth: Conv2d::new(&vs.pp("smooth"), f, f, 3, 1, true)?,
            down: [
                (
                    Conv2d::new(&vs.pp("down1"), f, f, 3, 2, false)?,
                    GroupNorm::new(&vs.pp("down1_norm"), f, groups_for(f))?,
                ),
                (
                    Conv2d::new(&vs.pp("down2"), f, f, 3, 2, false)?,
                    GroupNorm::new(&vs.pp("down2_norm"), f, groups_for(f))?,
                ),
            ],
            token_proj: Linear::new(&vs.pp("token_proj"), f, embed_dim)?,
        })
    }

    pub fn forward(&self, features: &MultiScaleFeatures) -> Result<Tensor> {
        if features.maps.len() != self.lateral.len() {
            return Err(Error::Shape(format!(
                "aggregator expects {} maps, got {}",
                self.lateral.len(),
                features.maps.len()
            )));
        }
        let mut fused: Option<Tensor> = None;
        for (map, lat) in features.maps.iter().zip(&self.lateral).rev() {
            let l = lat.forward(map)?;
            fused = Some(match fused {
                Some(top) => (l + upsample2x(&top)?)?,
                None => l,
            });
        }
        let mut h = relu(&self.smooth.forward(&fused.expect("at least one map"))?)?;
        for (conv, norm) in &self.down {
            h = norm.forward_relu(&conv.forward(&h)?)?;
        }
        let (b, f, gh, gw) = h.dims4()?;
        let tokens = h.reshape((b, f, gh * gw))?.transpose(1, 2)?.contiguous()?;
        l2_normalize(&self.token_proj.forward(&tokens)?)
    }
}
