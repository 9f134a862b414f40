//! PrimaryCaps and GeoCaps layers.
//!
//! PrimaryCaps is a convolution whose output channels are grouped into
//! `n_primary` capsules of `d_primary` components at every grid cell, each
//! pose vector squashed. GeoCaps maps every primary pose `u_i` through a
//! per-(i, j) matrix to predictions `û_{j|i}` and combines them by dynamic
//! routing:
//!
//! ```text
//! b_ij = 0
//! repeat r times:
//!     c_i  = softmax_j(b_i)
//!     s_j  = Σ_i c_ij û_{j|i}
//!     v_j  = squash(s_j)
//!     b_ij += û_{j|i} · v_j        (skipped after the last round)
//! ```
//!
//! Every round is recorded on the graph, so gradients flow through the
//! couplings as well as the predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_len, l2_normalize, Graph, Padding, ParamId, ParamStore, Real, Tensor, Var};
use crate::Branch;

/// How transformation matrices are allocated between capsule pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSharing {
    /// One `d_in × d_out` matrix for every (input, output) capsule pair.
    PerPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapsuleConfig {
    pub n_primary: usize,
    pub d_primary: usize,
    pub primary_kernel: [usize; 2],
    pub primary_stride: usize,
    pub n_out: usize,
    pub d_out: usize,
    pub routing_iterations: usize,
    pub weight_sharing: WeightSharing,
    /// Standard deviation of the Gaussian used for capsule weights.
    pub weight_std: f64,
}

impl Default for CapsuleConfig {
    /// Small variant matched to the default backbone (2×2 feature grid).
    fn default() -> Self {
        CapsuleConfig {
            n_primary: 8,
            d_primary: 8,
            primary_kernel: [1, 1],
            primary_stride: 1,
            n_out: 8,
            d_out: 16,
            routing_iterations: 4,
            weight_sharing: WeightSharing::PerPair,
            weight_std: 0.05,
        }
    }
}

impl CapsuleConfig {
    /// 32 primary capsules of 8 dimensions from 3×3 kernels, 32 output
    /// capsules of 64 dimensions, 4 routing rounds.
    pub fn full_scale() -> Self {
        CapsuleConfig {
            n_primary: 32,
            d_primary: 8,
            primary_kernel: [3, 3],
            primary_stride: 1,
            n_out: 32,
            d_out: 64,
            routing_iterations: 4,
            weight_sharing: WeightSharing::PerPair,
            weight_std: 0.05,
        }
    }

    pub fn code_length(&self) -> usize {
        self.n_out * self.d_out
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_primary", self.n_primary),
            ("d_primary", self.d_primary),
            ("primary_kernel", self.primary_kernel[0].min(self.primary_kernel[1])),
            ("primary_stride", self.primary_stride),
            ("n_out", self.n_out),
            ("d_out", self.d_out),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("capsule {name} must be >= 1")));
            }
        }
        if self.routing_iterations == 0 {
            return Err(Error::Config("routing_iterations must be >= 1".into()));
        }
        if !(self.weight_std > 0.0) {
            return Err(Error::Config("capsule weight_std must be > 0".into()));
        }
        Ok(())
    }

    /// Primary grid size for a feature map of `hw`.
    pub fn primary_grid(&self, hw: [usize; 2]) -> Result<[usize; 2]> {
        let [kh, kw] = self.primary_kernel;
        match (
            conv_out_len(hw[0], kh, self.primary_stride, 0),
            conv_out_len(hw[1], kw, self.primary_stride, 0),
        ) {
            (Some(h), Some(w)) => Ok([h, w]),
            _ => Err(Error::dim(format!(
                "feature map {}x{} is smaller than the primary capsule kernel {kh}x{kw}",
                hw[0], hw[1]
            ))),
        }
    }

    /// Structural description for a `channels × hw` feature map.
    pub fn describe(&self, channels: usize, hw: [usize; 2]) -> Result<CapsuleSummary> {
        let grid = self.primary_grid(hw)?;
        let n_in = grid[0] * grid[1] * self.n_primary;
        let conv_out = self.n_primary * self.d_primary;
        let primary_params = conv_out * channels * self.primary_kernel[0] * self.primary_kernel[1] + conv_out;
        let routing_params = n_in * self.n_out * self.d_primary * self.d_out;
        Ok(CapsuleSummary {
            grid,
            primary_volume: [grid[0], grid[1], self.d_primary, self.n_primary],
            n_in,
            geo_shape: [self.n_out, self.d_out],
            code_length: self.code_length(),
            primary_params,
            routing_params,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapsuleSummary {
    pub grid: [usize; 2],
    /// h' × w' × d_primary × n_primary
    pub primary_volume: [usize; 4],
    /// Number of primary pose vectors.
    pub n_in: usize,
    pub geo_shape: [usize; 2],
    pub code_length: usize,
    pub primary_params: usize,
    pub routing_params: usize,
}

impl CapsuleSummary {
    pub fn param_count(&self) -> usize {
        self.primary_params + self.routing_params
    }
}

/// Which capsule layer produced a set of pose vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapsLayer {
    Primary,
    Geo,
}

/// `G` pose vectors of dimension `d`.
#[derive(Debug, Clone)]
pub struct PoseVectors<T> {
    /// `[G, d]`
    pub values: Tensor<T>,
    pub layer: CapsLayer,
    pub branch: Branch,
}

/// Final routing logits and coupling coefficients, both `[G_in, n_out]`.
#[derive(Debug, Clone)]
pub struct RoutingState<T> {
    pub logits: Tensor<T>,
    pub couplings: Tensor<T>,
}

/// Graph handles produced by [`route`].
#[derive(Debug, Clone, Copy)]
pub struct RoutingVars {
    /// `[N, n_out, d_out]`
    pub v: Var,
    /// `[N, G_in, n_out]`, the logits that produced the final couplings.
    pub logits: Var,
    /// `[N, G_in, n_out]`
    pub couplings: Var,
}

/// Dynamic routing over predictions `û[N, G_in, n_out, d_out]`.
pub fn route<T: Real>(g: &mut Graph<T>, u_hat: Var, iterations: usize) -> Result<RoutingVars> {
    if iterations < 1 {
        return Err(Error::Contract("dynamic routing needs at least one iteration".into()));
    }
    let s = g.shape(u_hat).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!(
            "routing expects predictions [N, G_in, n_out, d_out], got {s:?}"
        )));
    }
    let (n, gin, j, d) = (s[0], s[1], s[2], s[3]);
    let mut logits = g.constant(Tensor::zeros(&[n, gin, j]));
    let mut result = None;
    for round in 0..iterations {
        let c = g.softmax(logits, 2)?;
        let ce = g.expand(c, 3, d)?;
        let weighted = g.mul(ce, u_hat)?;
        let total = g.sum_axis(weighted, 1)?;
        let v = g.squash(total);
        result = Some(RoutingVars {
            v,
            logits,
            couplings: c,
        });
        if round + 1 < iterations {
            let ve = g.expand(v, 1, gin)?;
            let prod = g.mul(u_hat, ve)?;
            let agreement = g.sum_axis(prod, 3)?;
            logits = g.add(logits, agreement)?;
        }
    }
    Ok(result.expect("at least one round"))
}

/// Prediction vectors for a single image: `û[i,j] = u[i] · W[i,j]`.
pub fn predict_vectors<T: Real>(u: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let us = u.shape();
    let ws = w.shape();
    if us.len() != 2 || ws.len() != 4 {
        return Err(Error::dim(format!(
            "predict_vectors expects u [G, d_in] and W [G, n_out, d_in, d_out], got {us:?} and {ws:?}"
        )));
    }
    if us[0] != ws[0] || us[1] != ws[2] {
        return Err(Error::dim(format!(
            "predict_vectors mismatch: u has G = {}, d = {}; W has G = {}, d_in = {} (n_out = {})",
            us[0], us[1], ws[0], ws[2], ws[1]
        )));
    }
    let mut g = Graph::new();
    let uv = g.constant(u.clone().reshape(&[1, us[0], us[1]])?);
    let wv = g.constant(w.clone());
    let out = g.pair_transform(uv, wv)?;
    g.value(out).clone().reshape(&[ws[0], ws[1], ws[3]])
}

/// Route one image's predictions `û[G_in, n_out, d_out]`.
pub fn dynamic_routing<T: Real>(u_hat: &Tensor<T>, iterations: usize) -> Result<(PoseVectors<T>, RoutingState<T>)> {
    let s = u_hat.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!(
            "dynamic_routing expects û [G_in, n_out, d_out], got {s:?}"
        )));
    }
    let (gin, j, d) = (s[0], s[1], s[2]);
    let mut g = Graph::new();
    let uh = g.constant(u_hat.clone().reshape(&[1, gin, j, d])?);
    let r = route(&mut g, uh, iterations)?;
    Ok((
        PoseVectors {
            values: g.value(r.v).clone().reshape(&[j, d])?,
            layer: CapsLayer::Geo,
            branch: Branch::Ground,
        },
        RoutingState {
            logits: g.value(r.logits).clone().reshape(&[gin, j])?,
            couplings: g.value(r.couplings).clone().reshape(&[gin, j])?,
        },
    ))
}

/// Unit-norm image code.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor<T> {
    pub values: Vec<T>,
    pub branch: Branch,
    /// Set when the pre-normalisation vector was (numerically) zero.
    pub degenerate: bool,
}

/// Flatten GeoCaps outputs capsule-major and L2-normalise.
pub fn descriptor_from_caps<T: Real>(v: &PoseVectors<T>) -> Descriptor<T> {
    let flat = v.values.clone().reshape(&[v.values.len()]).expect("flatten");
    let (unit, degenerate) = l2_normalize(&flat);
    Descriptor {
        values: unit.into_data(),
        branch: v.branch,
        degenerate,
    }
}

/// PrimaryCaps + GeoCaps parameters for one branch (or both, when shared).
#[derive(Debug, Clone)]
pub struct CapsuleHead {
    config: CapsuleConfig,
    summary: CapsuleSummary,
    in_channels: usize,
    pub(crate) conv_weight: ParamId,
    pub(crate) conv_bias: ParamId,
    pub(crate) routing_weight: ParamId,
}

/// Graph handles for every intermediate of a capsule head pass.
#[derive(Debug, Clone, Copy)]
pub struct CapsuleVars {
    /// Primary poses `[N, G_in, d_primary]`.
    pub u: Var,
    /// Predictions `[N, G_in, n_out, d_out]`.
    pub u_hat: Var,
    pub routing: RoutingVars,
}

impl CapsuleHead {
    pub fn build<T: Real>(
        config: &CapsuleConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        in_hw: [usize; 2],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let summary = config.describe(in_channels, in_hw)?;
        let [kh, kw] = config.primary_kernel;
        let conv_out = config.n_primary * config.d_primary;
        let fan_in = in_channels * kh * kw;
        let conv_weight = store.add_gaussian(
            format!("{prefix}.primary.weight"),
            &[conv_out, in_channels, kh, kw],
            (2.0 / fan_in as f64).sqrt(),
            seed,
        );
        let conv_bias = store.add(format!("{prefix}.primary.bias"), Tensor::zeros(&[conv_out]));
        let routing_weight = store.add_gaussian(
            format!("{prefix}.geo.weight"),
            &[summary.n_in, config.n_out, config.d_primary, config.d_out],
            config.weight_std,
            seed,
        );
        Ok(CapsuleHead {
            config: config.clone(),
            summary,
            in_channels,
            conv_weight,
            conv_bias,
            routing_weight,
        })
    }

    pub fn config(&self) -> &CapsuleConfig {
        &self.config
    }

    pub fn summary(&self) -> &CapsuleSummary {
        &self.summary
    }

    pub fn routing_weight(&self) -> ParamId {
        self.routing_weight
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.conv_weight, self.conv_bias, self.routing_weight]
    }

    /// Primary capsules: conv, regroup into pose vectors, squash.
    /// Returns `u[N, G_in, d_primary]`.
    pub fn primary<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<Var> {
        let fs = g.shape(feat).to_vec();
        if fs.len() != 4 || fs[1] != self.in_channels {
            return Err(Error::dim(format!(
                "primary capsules expect [N, {}, h, w], got {fs:?}",
                self.in_channels
            )));
        }
        let [gh, gw] = self.config.primary_grid([fs[2], fs[3]])?;
        let w = g.param(store, self.conv_weight);
        let b = g.param(store, self.conv_bias);
        let y = g.conv2d(feat, w, Some(b), self.config.primary_stride, Padding::Valid)?;
        let (n, p, d) = (fs[0], self.config.n_primary, self.config.d_primary);
        let y = g.reshape(y, &[n, p, d, gh, gw])?;
        let y = g.permute(y, &[0, 1, 3, 4, 2])?;
        let y = g.reshape(y, &[n, p * gh * gw, d])?;
        Ok(g.squash(y))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<CapsuleVars> {
        let u = self.primary(g, store, feat)?;
        let w = g.param(store, self.routing_weight);
        let u_hat = g.pair_transform(u, w)?;
        let routing = route(g, u_hat, self.config.routing_iterations)?;
        Ok(CapsuleVars { u, u_hat, routing })
    }

    /// Flattened, L2-normalised descriptor `[N, n_out·d_out]`.
    pub fn descriptor<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<Var> {
        let vars = self.forward(g, store, feat)?;
        let n = g.shape(feat)[0];
        let flat = g.reshape(vars.routing.v, &[n, self.config.code_length()])?;
        Ok(g.l2_normalize(flat))
    }

    /// Primary poses for a single feature map `[C, h, w]`.
    pub fn primary_caps_forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        feature: &Tensor<T>,
        branch: Branch,
    ) -> Result<PoseVectors<T>> {
        let fs = feature.shape();
        if fs.len() != 3 {
            return Err(Error::dim(format!("expected one feature map [C, h, w], got {fs:?}")));
        }
        let mut g = Graph::new();
        let x = g.constant(feature.clone().reshape(&[1, fs[0], fs[1], fs[2]])?);
        let u = self.primary(&mut g, store, x)?;
        let s = g.shape(u).to_vec();
        Ok(PoseVectors {
            values: g.value(u).clone().reshape(&[s[1], s[2]])?,
            layer: CapsLayer::Primary,
            branch,
        })
    }
}
