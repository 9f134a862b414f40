//! ResNetX: a bottleneck residual network without max pooling.
//!
//! Two stride-2 stem convolutions are followed by four bottleneck stages.
//! Channel counts come from [`BackboneConfig`] and are multiplied by a
//! rational width scale, so the full-size network and the small CPU
//! variant share one code path.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_len, BatchNormArgs, Graph, Padding, ParamId, ParamStore, Real, Tensor, Var};
use crate::{Branch, Mode};

/// Stage names in order.
pub const STAGE_NAMES: [&str; 4] = ["Conv3_x", "Conv4_x", "Conv5_x", "Conv6_x"];

/// Bottleneck channel triples of the reference table.
pub const TABLE_CHANNELS: [[usize; 3]; 4] = [[64, 64, 256], [128, 128, 256], [256, 256, 1024], [512, 512, 2048]];

/// Exact rational channel multiplier, written `"num/den"` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WidthScale {
    pub num: usize,
    pub den: usize,
}

impl WidthScale {
    pub const ONE: WidthScale = WidthScale { num: 1, den: 1 };

    pub fn apply(self, channels: usize) -> usize {
        channels * self.num / self.den
    }
}

impl fmt::Display for WidthScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for WidthScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |p: &str| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid width_scale {s:?}")))
        };
        let (num, den) = match s.split_once('/') {
            Some((n, d)) => (parse(n)?, parse(d)?),
            None => (parse(s)?, 1),
        };
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("width_scale {s:?} must be positive")));
        }
        Ok(WidthScale { num, den })
    }
}

impl Serialize for WidthScale {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for WidthScale {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Input height and width in pixels (3 colour channels).
    pub input_size: [usize; 2],
    /// Output channels of both stem convolutions.
    pub stem_channels: usize,
    pub block_counts: [usize; 4],
    /// (1×1 reduce, 3×3, 1×1 expand) channels per stage.
    pub block_channels: [[usize; 3]; 4],
    pub width_scale: WidthScale,
    pub use_max_pool: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for BackboneConfig {
    /// The small CPU-trainable variant: 1/16 width, 64×64 input, one block
    /// per stage.
    fn default() -> Self {
        BackboneConfig {
            input_size: [64, 64],
            stem_channels: 64,
            block_counts: [1, 1, 1, 1],
            block_channels: TABLE_CHANNELS,
            width_scale: WidthScale { num: 1, den: 16 },
            use_max_pool: false,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl BackboneConfig {
    /// Full-size network: 224×224 input, blocks 3/4/6/3, unit width.
    pub fn full_scale() -> Self {
        BackboneConfig {
            input_size: [224, 224],
            block_counts: [3, 4, 6, 3],
            width_scale: WidthScale::ONE,
            ..Self::default()
        }
    }

    fn scaled(&self, what: &str, c: usize) -> Result<usize> {
        match self.width_scale.apply(c) {
            0 => Err(Error::Config(format!(
                "width_scale {} reduces {what} ({c} channels) to zero",
                self.width_scale
            ))),
            v => Ok(v),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_max_pool {
            return Err(Error::Config("max pooling is not supported by ResNetX".into()));
        }
        if self.block_counts.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be > 0 and bn_momentum in [0, 1)".into()));
        }
        self.describe().map(|_| ())
    }

    /// Layer-by-layer structure derived from the config alone.
    pub fn describe(&self) -> Result<BackboneSummary> {
        let mut layers = Vec::new();
        let (mut h, mut w) = (self.input_size[0], self.input_size[1]);
        let mut c_in = 3;
        let mut stages = Vec::new();
        let push = |layers: &mut Vec<LayerInfo>, name: String, k: usize, c_in: usize, c_out: usize, stride: usize, h: &mut usize, w: &mut usize| -> Result<()> {
            let pad = Padding::Same.amount(k);
            let (Some(nh), Some(nw)) = (conv_out_len(*h, k, stride, pad), conv_out_len(*w, k, stride, pad)) else {
                return Err(Error::Config(format!("input too small for layer {name}")));
            };
            *h = nh;
            *w = nw;
            layers.push(LayerInfo {
                name,
                kernel: k,
                in_channels: c_in,
                out_channels: c_out,
                stride,
                output_hw: [nh, nw],
                params: c_in * c_out * k * k + 2 * c_out,
            });
            Ok(())
        };
        let stem = self.scaled("stem", self.stem_channels)?;
        push(&mut layers, "Conv1".into(), 7, c_in, stem, 2, &mut h, &mut w)?;
        stages.push(StageRow {
            name: "Conv1".into(),
            output_hw: [h, w],
            convs: vec![(7, stem)],
            stride: 2,
            repeats: 1,
        });
        c_in = stem;
        push(&mut layers, "Conv2".into(), 3, c_in, stem, 2, &mut h, &mut w)?;
        stages.push(StageRow {
            name: "Conv2".into(),
            output_hw: [h, w],
            convs: vec![(3, stem)],
            stride: 2,
            repeats: 1,
        });
        for (s, name) in STAGE_NAMES.iter().enumerate() {
            let [a, b, c] = self.block_channels[s];
            let (a, b, c) = (self.scaled(name, a)?, self.scaled(name, b)?, self.scaled(name, c)?);
            let stage_stride = if s == 0 { 1 } else { 2 };
            for blk in 0..self.block_counts[s] {
                let stride = if blk == 0 { stage_stride } else { 1 };
                let prefix = format!("{name}.{blk}");
                let (bh, bw) = (h, w);
                push(&mut layers, format!("{prefix}.reduce"), 1, c_in, a, 1, &mut h, &mut w)?;
                push(&mut layers, format!("{prefix}.spatial"), 3, a, b, stride, &mut h, &mut w)?;
                push(&mut layers, format!("{prefix}.expand"), 1, b, c, 1, &mut h, &mut w)?;
                if stride != 1 || c_in != c {
                    let (mut sh, mut sw) = (bh, bw);
                    push(&mut layers, format!("{prefix}.shortcut"), 1, c_in, c, stride, &mut sh, &mut sw)?;
                }
                c_in = c;
            }
            stages.push(StageRow {
                name: (*name).into(),
                output_hw: [h, w],
                convs: vec![(1, a), (3, b), (1, c)],
                stride: stage_stride,
                repeats: self.block_counts[s],
            });
        }
        Ok(BackboneSummary {
            layers,
            stages,
            out_channels: c_in,
            out_hw: [h, w],
        })
    }
}

/// One convolution (+ batch norm) in the structural description.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInfo {
    pub name: String,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub output_hw: [usize; 2],
    pub params: usize,
}

/// One row of the stage table: output size, conv (kernel, channels)
/// sequence, first-block stride and repeat count.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRow {
    pub name: String,
    pub output_hw: [usize; 2],
    pub convs: Vec<(usize, usize)>,
    pub stride: usize,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSummary {
    pub layers: Vec<LayerInfo>,
    pub stages: Vec<StageRow>,
    pub out_channels: usize,
    pub out_hw: [usize; 2],
}

impl BackboneSummary {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }
}

/// Backbone output for a batch of images.
#[derive(Debug, Clone)]
pub struct FeatureMap<T> {
    /// `[N, C, h, w]`
    pub values: Tensor<T>,
    pub branch: Branch,
}

/// Convolution without bias followed by batch norm.
#[derive(Debug, Clone)]
pub(crate) struct ConvBn {
    pub(crate) weight: ParamId,
    pub(crate) gamma: ParamId,
    pub(crate) beta: ParamId,
    pub(crate) running_mean: ParamId,
    pub(crate) running_var: ParamId,
    pub(crate) stride: usize,
    pub(crate) in_channels: usize,
}

impl ConvBn {
    fn build<T: Real>(store: &mut ParamStore<T>, name: &str, info: &LayerInfo, seed: u64) -> Self {
        let k = info.kernel;
        let fan_in = info.in_channels * k * k;
        let c = info.out_channels;
        let weight = store.add_gaussian(
            format!("{name}.weight"),
            &[c, info.in_channels, k, k],
            (2.0 / fan_in as f64).sqrt(),
            seed,
        );
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor::ones(&[c]));
        let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(&[c]));
        let running_mean = store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[c]));
        let running_var = store.add_buffer(format!("{name}.bn.running_var"), Tensor::ones(&[c]));
        ConvBn {
            weight,
            gamma,
            beta,
            running_mean,
            running_var,
            stride: info.stride,
            in_channels: info.in_channels,
        }
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        cfg: &BackboneConfig,
        relu: bool,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.conv2d(x, w, None, self.stride, Padding::Same)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.batch_norm(
            y,
            gamma,
            beta,
            BatchNormArgs {
                train: mode == Mode::Train,
                eps: T::of(cfg.bn_eps),
                momentum: T::of(cfg.bn_momentum),
                running_mean: store.get(self.running_mean),
                running_var: store.get(self.running_var),
                running_ids: Some((self.running_mean, self.running_var)),
            },
        )?;
        Ok(if relu { g.relu(y) } else { y })
    }
}

/// 1×1 → 3×3 → 1×1 residual block with optional projection shortcut.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub(crate) reduce: ConvBn,
    pub(crate) spatial: ConvBn,
    pub(crate) expand: ConvBn,
    pub(crate) shortcut: Option<ConvBn>,
}

impl Bottleneck {
    pub fn in_channels(&self) -> usize {
        self.reduce.in_channels
    }

    pub fn has_projection(&self) -> bool {
        self.shortcut.is_some()
    }

    /// `relu(shortcut(x) + bn(conv1x1(relu(bn(conv3x3(relu(bn(conv1x1(x)))))))))`
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        cfg: &BackboneConfig,
    ) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels() {
            return Err(Error::dim(format!(
                "bottleneck expects {} input channels, got shape {:?}",
                self.in_channels(),
                g.shape(x)
            )));
        }
        let h = self.reduce.forward(g, store, x, mode, cfg, true)?;
        let h = self.spatial.forward(g, store, h, mode, cfg, true)?;
        let h = self.expand.forward(g, store, h, mode, cfg, false)?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(g, store, x, mode, cfg, false)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }

    /// Parameter ids of the final batch norm of the conv path (gamma, beta).
    pub fn last_bn(&self) -> (ParamId, ParamId) {
        (self.expand.gamma, self.expand.beta)
    }
}

/// A constructed ResNetX with parameters living in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    summary: BackboneSummary,
    conv1: ConvBn,
    conv2: ConvBn,
    stages: Vec<Vec<Bottleneck>>,
}

/// Build a ResNetX whose parameters are registered under `prefix`.
pub fn build_resnetx<T: Real>(
    config: &BackboneConfig,
    store: &mut ParamStore<T>,
    prefix: &str,
    seed: u64,
) -> Result<Backbone> {
    config.validate()?;
    let summary = config.describe()?;
    let mut layers = summary.layers.iter();
    let mut next = |name: &str| -> ConvBn {
        let info = layers.next().expect("summary covers every layer");
        debug_assert!(info.name.ends_with(name) || name.is_empty());
        ConvBn::build(store, &format!("{prefix}.{}", info.name), info, seed)
    };
    let conv1 = next("Conv1");
    let conv2 = next("Conv2");
    let mut stages = Vec::new();
    let mut c_in = config.scaled("stem", config.stem_channels)?;
    for (s, &count) in config.block_counts.iter().enumerate() {
        let c_out = config.scaled(STAGE_NAMES[s], config.block_channels[s][2])?;
        let mut blocks = Vec::new();
        for blk in 0..count {
            let stride = if blk == 0 && s > 0 { 2 } else { 1 };
            let reduce = next("reduce");
            let spatial = next("spatial");
            let expand = next("expand");
            let shortcut = (stride != 1 || c_in != c_out).then(|| next("shortcut"));
            blocks.push(Bottleneck {
                reduce,
                spatial,
                expand,
                shortcut,
            });
            c_in = c_out;
        }
        stages.push(blocks);
    }
    Ok(Backbone {
        config: config.clone(),
        summary,
        conv1,
        conv2,
        stages,
    })
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn summary(&self) -> &BackboneSummary {
        &self.summary
    }

    pub fn stages(&self) -> &[Vec<Bottleneck>] {
        &self.stages
    }

    /// Record the forward pass for `x[N,3,H,W]` on `g`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(x);
        let [h, w] = self.config.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::dim(format!(
                "backbone expects images [N, 3, {h}, {w}], got {s:?}"
            )));
        }
        let mut y = self.conv1.forward(g, store, x, mode, &self.config, true)?;
        y = self.conv2.forward(g, store, y, mode, &self.config, true)?;
        for stage in &self.stages {
            for block in stage {
                y = block.forward(g, store, y, mode, &self.config)?;
            }
        }
        Ok(y)
    }

    /// Run the backbone on a batch outside any training graph. Train mode
    /// folds the batch statistics into `store`'s running averages.
    pub fn extract<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        images: &Tensor<T>,
        branch: Branch,
        mode: Mode,
    ) -> Result<FeatureMap<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, store, x, mode)?;
        store.apply_bn_updates(g.take_bn_updates());
        Ok(FeatureMap {
            values: g.value(y).clone(),
            branch,
        })
    }
}
