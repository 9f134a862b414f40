//! Two-branch Siamese model.
//!
//! Each branch owns its own ResNetX. Variant I gives each branch its own
//! capsule head; variant II registers one capsule head and hands the same
//! parameter ids to both branches. The FC head replaces the capsule layers
//! with a single affine layer per branch.

use serde::{Deserialize, Serialize};

use crate::backbone::{build_resnetx, Backbone, BackboneConfig, BackboneSummary};
use crate::capsules::{CapsuleConfig, CapsuleHead, CapsuleSummary};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::{Branch, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Separate capsule weights per branch.
    I,
    /// Capsule weights shared between branches.
    II,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Caps,
    Fc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub head: Head,
    pub backbone: BackboneConfig,
    pub capsules: CapsuleConfig,
    /// Output width of the FC head; defaults to the capsule code length.
    pub fc_dim: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::II,
            head: Head::Caps,
            backbone: BackboneConfig::default(),
            capsules: CapsuleConfig::default(),
            fc_dim: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn full_scale(variant: Variant) -> Self {
        ModelConfig {
            variant,
            backbone: BackboneConfig::full_scale(),
            capsules: CapsuleConfig::full_scale(),
            ..Self::default()
        }
    }

    pub fn fc_width(&self) -> usize {
        self.fc_dim.unwrap_or_else(|| self.capsules.code_length())
    }

    pub fn code_length(&self) -> usize {
        match self.head {
            Head::Caps => self.capsules.code_length(),
            Head::Fc => self.fc_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        match self.head {
            Head::Caps => {
                self.capsules.validate()?;
                let b = self.backbone.describe()?;
                self.capsules
                    .describe(b.out_channels, b.out_hw)
                    .map_err(|e| Error::Config(e.to_string()))?;
            }
            Head::Fc => {
                if self.fc_width() == 0 {
                    return Err(Error::Config("fc_dim must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Structural description without allocating parameters.
    pub fn describe(&self) -> Result<ModelSummary> {
        self.validate()?;
        let backbone = self.backbone.describe()?;
        let (capsules, head_params) = match self.head {
            Head::Caps => {
                let c = self.capsules.describe(backbone.out_channels, backbone.out_hw)?;
                let copies = match self.variant {
                    Variant::I => 2,
                    Variant::II => 1,
                };
                let p = c.param_count() * copies;
                (Some(c), p)
            }
            Head::Fc => {
                let flat = backbone.out_channels * backbone.out_hw[0] * backbone.out_hw[1];
                (None, 2 * (flat * self.fc_width() + self.fc_width()))
            }
        };
        Ok(ModelSummary {
            total_params: 2 * backbone.param_count() + head_params,
            head_params,
            backbone,
            capsules,
            code_length: self.code_length(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    /// Per-branch backbone (both branches have the same structure).
    pub backbone: BackboneSummary,
    pub capsules: Option<CapsuleSummary>,
    /// Trainable scalars in the head section(s), counting shared weights once.
    pub head_params: usize,
    pub total_params: usize,
    pub code_length: usize,
}

/// Single affine layer on the flattened feature map.
#[derive(Debug, Clone)]
pub struct FcHead {
    weight: ParamId,
    bias: ParamId,
    in_features: usize,
}

impl FcHead {
    fn build<T: Real>(store: &mut ParamStore<T>, prefix: &str, in_features: usize, out: usize, seed: u64) -> Self {
        let weight = store.add_gaussian(
            format!("{prefix}.fc.weight"),
            &[in_features, out],
            (2.0 / in_features as f64).sqrt(),
            seed,
        );
        let bias = store.add(format!("{prefix}.fc.bias"), Tensor::zeros(&[out]));
        FcHead {
            weight,
            bias,
            in_features,
        }
    }

    /// Flatten, affine (no activation), L2-normalise.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<Var> {
        let n = g.shape(feat)[0];
        let flat_len = g.value(feat).len() / n;
        if flat_len != self.in_features {
            return Err(Error::dim(format!(
                "fc head expects {} features per image, got shape {:?}",
                self.in_features,
                g.shape(feat)
            )));
        }
        let flat = g.reshape(feat, &[n, flat_len])?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.affine(flat, w, b)?;
        Ok(g.l2_normalize(y))
    }
}

#[derive(Debug, Clone)]
pub enum HeadNet {
    Caps(CapsuleHead),
    Fc(FcHead),
}

#[derive(Debug, Clone)]
pub struct BranchNet {
    pub backbone: Backbone,
    pub head: HeadNet,
}

/// A batch of descriptors, one row per image.
#[derive(Debug, Clone)]
pub struct Descriptors<T> {
    /// `[N, code_length]`
    pub values: Tensor<T>,
    pub degenerate: Vec<bool>,
    pub branch: Branch,
}

impl<T: Real> Descriptors<T> {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.values.data()[i * d..(i + 1) * d]
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    pub store: ParamStore<T>,
    ground: BranchNet,
    satellite: BranchNet,
}

pub fn build_model<T: Real>(config: &ModelConfig) -> Result<Model<T>> {
    Model::new(config)
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let seed = config.seed;
        let gb = build_resnetx(&config.backbone, &mut store, "ground.backbone", seed)?;
        let sb = build_resnetx(&config.backbone, &mut store, "satellite.backbone", seed)?;
        let out_c = gb.summary().out_channels;
        let out_hw = gb.summary().out_hw;
        let (gh, sh) = match config.head {
            Head::Caps => {
                let caps = |store: &mut ParamStore<T>, prefix: &str| {
                    CapsuleHead::build(&config.capsules, store, prefix, out_c, out_hw, seed)
                };
                match config.variant {
                    Variant::I => (
                        HeadNet::Caps(caps(&mut store, "ground.caps")?),
                        HeadNet::Caps(caps(&mut store, "satellite.caps")?),
                    ),
                    Variant::II => {
                        let shared = caps(&mut store, "shared.caps")?;
                        (HeadNet::Caps(shared.clone()), HeadNet::Caps(shared))
                    }
                }
            }
            Head::Fc => {
                let flat = out_c * out_hw[0] * out_hw[1];
                let w = config.fc_width();
                (
                    HeadNet::Fc(FcHead::build(&mut store, "ground", flat, w, seed)),
                    HeadNet::Fc(FcHead::build(&mut store, "satellite", flat, w, seed)),
                )
            }
        };
        Ok(Model {
            config: config.clone(),
            store,
            ground: BranchNet { backbone: gb, head: gh },
            satellite: BranchNet { backbone: sb, head: sh },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn branch(&self, branch: Branch) -> &BranchNet {
        match branch {
            Branch::Ground => &self.ground,
            Branch::Satellite => &self.satellite,
        }
    }

    /// Trainable scalars in the capsule (or FC) section, shared weights
    /// counted once.
    pub fn head_param_count(&self) -> usize {
        let mut ids: Vec<ParamId> = [&self.ground.head, &self.satellite.head]
            .iter()
            .flat_map(|h| match h {
                HeadNet::Caps(c) => c.param_ids().to_vec(),
                HeadNet::Fc(f) => vec![f.weight, f.bias],
            })
            .collect();
        ids.sort();
        ids.dedup();
        ids.iter().map(|&id| self.store.get(id).len()).sum()
    }

    /// Backbone features `[N, C, h, w]` for `images` on graph `g`.
    pub fn features(&self, g: &mut Graph<T>, branch: Branch, images: Var, mode: Mode) -> Result<Var> {
        self.branch(branch).backbone.forward(g, &self.store, images, mode)
    }

    /// Descriptor rows for features produced by [`Model::features`].
    pub fn head_forward(&self, g: &mut Graph<T>, branch: Branch, feat: Var) -> Result<Var> {
        match &self.branch(branch).head {
            HeadNet::Caps(c) => c.descriptor(g, &self.store, feat),
            HeadNet::Fc(f) => f.forward(g, &self.store, feat),
        }
    }

    /// Images → backbone → head → L2 normalisation, recorded on `g`.
    pub fn forward_branch(&self, g: &mut Graph<T>, branch: Branch, images: Var, mode: Mode) -> Result<Var> {
        let feat = self.features(g, branch, images, mode)?;
        self.head_forward(g, branch, feat)
    }

    /// Embed a batch outside of training. Train mode updates running
    /// batch-norm statistics.
    pub fn embed(&mut self, images: &Tensor<T>, branch: Branch, mode: Mode) -> Result<Descriptors<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let d = self.forward_branch(&mut g, branch, x, mode)?;
        let updates = g.take_bn_updates();
        self.store.apply_bn_updates(updates);
        Ok(Descriptors {
            values: g.value(d).clone(),
            degenerate: g.degenerate_rows(d).map(<[bool]>::to_vec).unwrap_or_default(),
            branch,
        })
    }

    /// Eval-mode embedding in chunks of `chunk` images.
    pub fn embed_all(&mut self, images: &[&Tensor<T>], branch: Branch, chunk: usize) -> Result<Descriptors<T>> {
        let mut values = Vec::new();
        let mut degenerate = Vec::new();
        let mut dim = self.config.code_length();
        for part in images.chunks(chunk.max(1)) {
            let batch = Tensor::stack(part)?;
            let d = self.embed(&batch, branch, Mode::Eval)?;
            dim = d.dim();
            values.extend_from_slice(d.values.data());
            degenerate.extend(d.degenerate);
        }
        if images.is_empty() {
            return Err(Error::Data("nothing to embed".into()));
        }
        Ok(Descriptors {
            values: Tensor::new(&[images.len(), dim], values)?,
            degenerate,
            branch,
        })
    }
}
