//! Batch distances, in-batch hard negative mining and the triplet losses.
//!
//! A batch holds `M` matching (ground, satellite) pairs. Row `a` of the
//! distance matrix compares ground descriptor `a` with every satellite
//! descriptor; the diagonal is the positive pair and the rest of the row is
//! the negative set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Hinge on positive minus hardest negative distance.
    MarginTrihard,
    /// Soft margin averaged over every in-batch negative, no mining.
    SoftTriplet,
    /// Soft margin on the hardest negative.
    SoftTrihard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub theta: f64,
    pub kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 15.0,
            theta: 0.2,
            kind: LossKind::SoftTrihard,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.theta >= 0.0) || !self.theta.is_finite() {
            return Err(Error::Config(format!("theta must be >= 0, got {}", self.theta)));
        }
        Ok(())
    }
}

/// `M × M` distances, `d[a][s]` between ground `a` and satellite `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDistances<T> {
    m: usize,
    d: Vec<T>,
}

impl<T: Real> BatchDistances<T> {
    pub fn new(m: usize, d: Vec<T>) -> Result<Self> {
        if d.len() != m * m || m == 0 {
            return Err(Error::dim(format!("{} distances do not form an {m}x{m} matrix", d.len())));
        }
        Ok(BatchDistances { m, d })
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            [a, b] if a == b => Self::new(*a, t.data().to_vec()),
            s => Err(Error::dim(format!("distance matrix must be square, got {s:?}"))),
        }
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn get(&self, a: usize, s: usize) -> T {
        self.d[a * self.m + s]
    }

    pub fn row(&self, a: usize) -> &[T] {
        &self.d[a * self.m..(a + 1) * self.m]
    }

    pub fn positive(&self, a: usize) -> T {
        self.get(a, a)
    }
}

fn unit_rows<T: Real>(x: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match x.shape() {
        [m, d] => Ok((*m, *d)),
        s => Err(Error::dim(format!("{what} descriptors must be [M, d], got {s:?}"))),
    }
}

/// Squared Euclidean distances `2 − 2·g·sᵀ` between unit descriptors.
pub fn pairwise_sq_distances<T: Real>(ground: &Tensor<T>, satellite: &Tensor<T>) -> Result<BatchDistances<T>> {
    let (m, d) = unit_rows(ground, "ground")?;
    let (ms, ds) = unit_rows(satellite, "satellite")?;
    if m != ms || d != ds {
        return Err(Error::dim(format!(
            "ground {:?} and satellite {:?} descriptors differ in shape",
            ground.shape(),
            satellite.shape()
        )));
    }
    let (g, s) = (ground.data(), satellite.data());
    let mut out = vec![T::zero(); m * m];
    for a in 0..m {
        for b in 0..m {
            let dot: T = g[a * d..(a + 1) * d].iter().zip(&s[b * d..(b + 1) * d]).map(|(&x, &y)| x * y).sum();
            out[a * m + b] = T::of(2.0) - T::of(2.0) * dot;
        }
    }
    BatchDistances::new(m, out)
}

/// Graph version of [`pairwise_sq_distances`]: `[M, M]`.
pub fn pairwise_sq_distances_var<T: Real>(g: &mut Graph<T>, ground: Var, satellite: Var) -> Result<Var> {
    let (gs, ss) = (g.shape(ground).to_vec(), g.shape(satellite).to_vec());
    if gs.len() != 2 || gs != ss {
        return Err(Error::dim(format!(
            "ground {gs:?} and satellite {ss:?} descriptors must both be [M, d]"
        )));
    }
    let dots = g.matmul(ground, satellite, true)?;
    let scaled = g.scale(dots, T::of(-2.0));
    Ok(g.add_scalar(scaled, T::of(2.0)))
}

/// Closest negative for anchor `a`: `(index, distance)`, lowest index on ties.
pub fn hard_negative<T: Real>(a: usize, d: &BatchDistances<T>) -> Result<(usize, T)> {
    if d.size() < 2 {
        return Err(Error::DegenerateBatch("hard negative mining needs at least two pairs".into()));
    }
    if a >= d.size() {
        return Err(Error::dim(format!("anchor {a} out of range for batch of {}", d.size())));
    }
    let mut best: Option<(usize, T)> = None;
    for (s, &v) in d.row(a).iter().enumerate() {
        if s == a {
            continue;
        }
        match best {
            Some((_, b)) if !(v < b) => {}
            _ => best = Some((s, v)),
        }
    }
    Ok(best.expect("m >= 2"))
}

/// Stable `ln(1 + e^x)`.
pub fn soft_margin(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_batch<T: Real>(d: &BatchDistances<T>) -> Result<usize> {
    if d.size() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "a batch needs at least two pairs, got {}",
            d.size()
        )));
    }
    Ok(d.size())
}

fn f<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// `(1/M) Σ_a max(0, d_ap − min_n d_an + θ)`.
pub fn margin_trihard_loss<T: Real>(d: &BatchDistances<T>, theta: f64) -> Result<f64> {
    let m = check_batch(d)?;
    let mut total = 0.0;
    for a in 0..m {
        let (_, neg) = hard_negative(a, d)?;
        total += (f(d.positive(a)) - f(neg) + theta).max(0.0);
    }
    Ok(total / m as f64)
}

/// Mean of `ln(1 + e^{α(d_ap − d_an)})` over all `M(M−1)` anchor/negative pairs.
pub fn soft_triplet_loss<T: Real>(d: &BatchDistances<T>, alpha: f64) -> Result<f64> {
    let m = check_batch(d)?;
    let mut total = 0.0;
    for a in 0..m {
        for n in (0..m).filter(|&n| n != a) {
            total += soft_margin(alpha * (f(d.positive(a)) - f(d.get(a, n))));
        }
    }
    Ok(total / (m * (m - 1)) as f64)
}

/// `(1/M) Σ_a ln(1 + e^{α(d_ap − min_n d_an)})`.
pub fn soft_trihard_loss<T: Real>(d: &BatchDistances<T>, alpha: f64) -> Result<f64> {
    let m = check_batch(d)?;
    let mut total = 0.0;
    for a in 0..m {
        let (_, neg) = hard_negative(a, d)?;
        total += soft_margin(alpha * (f(d.positive(a)) - f(neg)));
    }
    Ok(total / m as f64)
}

pub fn batch_loss<T: Real>(d: &BatchDistances<T>, config: &LossConfig) -> Result<f64> {
    match config.kind {
        LossKind::MarginTrihard => margin_trihard_loss(d, config.theta),
        LossKind::SoftTriplet => soft_triplet_loss(d, config.alpha),
        LossKind::SoftTrihard => soft_trihard_loss(d, config.alpha),
    }
}

/// Differentiable loss over a `[M, M]` distance node. Hard negatives are
/// chosen on the current values and their entries gathered back into the
/// graph.
pub fn loss_var<T: Real>(g: &mut Graph<T>, dist: Var, config: &LossConfig) -> Result<Var> {
    config.validate()?;
    let d = BatchDistances::from_tensor(g.value(dist))?;
    let m = check_batch(&d)?;
    let pos_idx: Vec<usize> = (0..m).map(|a| a * m + a).collect();
    let neg_idx: Vec<usize> = match config.kind {
        LossKind::SoftTriplet => (0..m).flat_map(|a| (0..m).filter(move |&n| n != a).map(move |n| a * m + n)).collect(),
        _ => (0..m)
            .map(|a| hard_negative(a, &d).map(|(n, _)| a * m + n))
            .collect::<Result<_>>()?,
    };
    let pos_idx: Vec<usize> = match config.kind {
        LossKind::SoftTriplet => pos_idx.iter().flat_map(|&p| std::iter::repeat_n(p, m - 1)).collect(),
        _ => pos_idx,
    };
    let pos = g.gather(dist, &pos_idx)?;
    let neg = g.gather(dist, &neg_idx)?;
    let gap = g.sub(pos, neg)?;
    let per = match config.kind {
        LossKind::MarginTrihard => {
            let shifted = g.add_scalar(gap, T::of(config.theta));
            g.relu(shifted)
        }
        LossKind::SoftTriplet | LossKind::SoftTrihard => {
            let scaled = g.scale(gap, T::of(config.alpha));
            g.softplus(scaled)
        }
    };
    Ok(g.mean_all(per))
}

/// Descriptors in, scalar loss node out.
pub fn descriptor_loss<T: Real>(g: &mut Graph<T>, ground: Var, satellite: Var, config: &LossConfig) -> Result<Var> {
    let dist = pairwise_sq_distances_var(g, ground, satellite)?;
    loss_var(g, dist, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dist(m: usize, v: &[f64]) -> BatchDistances<f64> {
        BatchDistances::new(m, v.to_vec()).unwrap()
    }

    #[test]
    fn unit_vector_distances() {
        let g = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let s = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let d = pairwise_sq_distances(&g, &s).unwrap();
        assert_abs_diff_eq!(d.get(0, 0), 0.0);
        assert_abs_diff_eq!(d.get(1, 1), 2.0);
        assert_abs_diff_eq!(d.get(2, 2), 4.0);
    }

    #[test]
    fn distance_shape_mismatch() {
        let g = Tensor::<f64>::zeros(&[3, 2]);
        let s = Tensor::<f64>::zeros(&[3, 4]);
        assert!(matches!(pairwise_sq_distances(&g, &s), Err(Error::Dimension(_))));
    }

    #[test]
    fn hard_negative_examples() {
        let d = dist(3, &[0.3, 0.7, 0.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(hard_negative(0, &d).unwrap(), (2, 0.4));
        let d = dist(3, &[0.3, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(hard_negative(0, &d).unwrap().0, 1);
        let d = dist(2, &[0.1, 0.9, 0.8, 0.2]);
        assert_eq!(hard_negative(1, &d).unwrap(), (0, 0.8));
        assert!(matches!(hard_negative(0, &dist(1, &[0.0])), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn margin_examples() {
        let separated = dist(2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(margin_trihard_loss(&separated, 0.5).unwrap(), 0.0);
        let equal = dist(2, &[0.5, 0.5, 0.5, 0.5]);
        assert_abs_diff_eq!(margin_trihard_loss(&equal, 0.2).unwrap(), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn soft_examples() {
        let equal = dist(3, &[0.4; 9]);
        assert_abs_diff_eq!(soft_triplet_loss(&equal, 15.0).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(soft_trihard_loss(&equal, 15.0).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let gap_neg = dist(2, &[0.0, 1.0, 1.0, 0.0]);
        assert_abs_diff_eq!(soft_triplet_loss(&gap_neg, 15.0).unwrap(), 3.059e-7, epsilon = 1e-9);
        let d = dist(2, &[0.1, 0.9, 0.8, 0.2]);
        let expected = 0.5 * ((1.0 + (15.0f64 * -0.8).exp()).ln() + (1.0 + (15.0f64 * -0.6).exp()).ln());
        assert_abs_diff_eq!(soft_trihard_loss(&d, 15.0).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn soft_margin_is_stable() {
        assert_abs_diff_eq!(soft_margin(150.0), 150.0, epsilon = 1e-12);
        assert!(soft_margin(1e6).is_finite());
        for x in [-30.0, -1.0, 0.0, 0.5, 20.0] {
            assert_abs_diff_eq!(soft_margin(x), (1.0 + f64::exp(x)).ln(), epsilon = 1e-10);
        }
    }

    #[test]
    fn graph_loss_matches_scalar() {
        let v = [0.1, 0.9, 0.3, 0.8, 0.2, 0.25, 0.6, 0.35, 0.5];
        for kind in [LossKind::MarginTrihard, LossKind::SoftTriplet, LossKind::SoftTrihard] {
            let cfg = LossConfig { kind, ..Default::default() };
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::from_f64(&[3, 3], &v).unwrap());
            let l = loss_var(&mut g, x, &cfg).unwrap();
            let expected = batch_loss(&dist(3, &v), &cfg).unwrap();
            assert_abs_diff_eq!(g.value(l).item().unwrap(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_pair_batch_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[1, 1], &[0.0]).unwrap());
        assert!(matches!(loss_var(&mut g, x, &LossConfig::default()), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn invalid_loss_config() {
        let bad = LossConfig { alpha: 0.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = LossConfig { theta: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
