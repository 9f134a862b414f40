//! Helpers shared by the integration test targets: random inputs, a
//! finite-difference harness, scalar-loop loss oracles, a sort-based
//! retrieval oracle and the desk-scale training runner.

#![allow(dead_code)]

use geocaps::config::RunConfig;
use geocaps::data::{generate_synthetic_pairs, ChannelStats, Dataset, SyntheticSpec};
use geocaps::eval::recall_curve;
use geocaps::model::{Head, Model, ModelConfig, Variant};
use geocaps::objective::{descriptor_loss, LossConfig, LossKind};
use geocaps::tensor::{finite_diff_at_4th, rel_err, Graph, ParamStore, Tensor, Var};
use geocaps::train::{TrainConfig, Trainer};
use geocaps::{Branch, Mode};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, v).unwrap()
}

/// Uniform values with `|x| >= gap`, keeping kinks out of reach of the
/// finite-difference step.
pub fn away_from_zero(shape: &[usize], gap: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = uniform(shape, gap, hi, rng);
    for x in t.data_mut() {
        if rng.gen_bool(0.5) {
            *x = -*x;
        }
    }
    t
}

/// `M` random unit rows of width `d`.
pub fn unit_rows(m: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = uniform(&[m, d], -1.0, 1.0, rng);
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    t
}

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub coords: usize,
    pub max_rel: f64,
    /// (analytic, numeric) at the worst coordinate.
    pub worst: (f64, f64),
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.coords >= 100 && self.max_rel < tol
    }
}

/// Step for the fourth-order stencil used on single primitives.
pub const OP_STEP: f64 = 3e-3;
/// Step for the two-point stencil used through the whole model, kept small
/// so that no ReLU or hard-negative choice flips inside the stencil.
pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for relative errors of near-zero gradient entries.
pub const REL_FLOOR: f64 = 1e-4;

/// Check the gradient of `Σ out ⊙ R` (`R` a fixed random weighting, or just
/// `out` when it is a scalar) with respect to every input.
pub fn check_op(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    min_coords: usize,
    seed: u64,
) -> GradReport {
    check_op_at(name, inputs, build, min_coords, seed, OP_STEP)
}

/// [`check_op`] with an explicit fourth-order step, for compositions whose
/// ReLU kinks may sit closer than [`OP_STEP`].
pub fn check_op_at(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    min_coords: usize,
    seed: u64,
    step: f64,
) -> GradReport {
    let mut r = rng(seed);
    let mut weights: Option<Tensor<f64>> = None;
    let objective = |xs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>, r: &mut ChaCha8Rng| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = if g.value(out).len() == 1 {
            g.sum_all(out)
        } else {
            let w = weights.get_or_insert_with(|| uniform(g.shape(out), -1.0, 1.0, r)).clone();
            let wv = g.constant(w);
            let prod = g.mul(out, wv).unwrap();
            g.sum_all(prod)
        };
        (g, vars, loss)
    };
    let (g, vars, loss) = objective(inputs, &mut weights, &mut r);
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let want = min_coords.min(total);
    let mut picks: Vec<Vec<usize>> = vec![Vec::new(); inputs.len()];
    for flat in sample(&mut r, total, want).into_vec() {
        let mut rem = flat;
        for (k, x) in inputs.iter().enumerate() {
            if rem < x.len() {
                picks[k].push(rem);
                break;
            }
            rem -= x.len();
        }
    }

    let mut max_rel: f64 = 0.0;
    let mut worst = (0.0, 0.0);
    let mut coords = 0;
    for (k, idx) in picks.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let f = |xk: &Tensor<f64>| {
            let mut xs = inputs.to_vec();
            xs[k] = xk.clone();
            let mut w = weights.clone();
            let (g, _, loss) = objective(&xs, &mut w, &mut rng(0));
            g.value(loss).data()[0]
        };
        let numeric = finite_diff_at_4th(f, &inputs[k], step, idx.iter().copied());
        for &i in idx {
            let (a, b) = (analytic[k].data()[i], numeric.data()[i]);
            if rel_err(a, b, REL_FLOOR) >= max_rel {
                max_rel = rel_err(a, b, REL_FLOOR);
                worst = (a, b);
            }
            coords += 1;
        }
    }
    GradReport {
        name: name.to_string(),
        coords,
        max_rel,
        worst,
    }
}

/// A model small enough to finite-difference end to end in f64.
pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.input_size = [32, 32];
    cfg.capsules.n_primary = 4;
    cfg.capsules.d_primary = 4;
    cfg.capsules.n_out = 4;
    cfg.capsules.d_out = 8;
    cfg.seed = 11;
    cfg
}

/// Finite-difference step for a parameter check: a two-point stencil at
/// `h`, or the fourth-order one.
#[derive(Debug, Clone, Copy)]
pub enum Stencil {
    TwoPoint(f64),
    FourthOrder(f64),
}

/// Compare `grads` of the scalar returned by `objective` against finite
/// differences over every stored tensor whose name passes `keep`, sampling
/// coordinates in proportion to tensor size with at least two per tensor.
pub fn check_params(
    name: &str,
    store: &mut ParamStore<f64>,
    objective: impl Fn(&ParamStore<f64>) -> (Graph<f64>, Var),
    keep: impl Fn(&str) -> bool,
    min_coords: usize,
    stencil: Stencil,
    seed: u64,
) -> GradReport {
    let mut r = rng(seed);
    let (g, loss) = objective(store);
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<_> = grads
        .for_store(store)
        .into_iter()
        .filter(|(id, _)| keep(store.name(*id)))
        .collect();
    let eval = |s: &ParamStore<f64>| {
        let (g, l) = objective(s);
        g.value(l).data()[0]
    };

    let total: usize = analytic.iter().map(|(_, t)| t.len()).sum();
    let mut max_rel: f64 = 0.0;
    let mut worst = (0.0, 0.0);
    let mut coords = 0;
    for (id, grad) in &analytic {
        let share = ((grad.len() * min_coords) as f64 / total as f64).ceil() as usize;
        let take = share.clamp(2.min(grad.len()), grad.len());
        for i in sample(&mut r, grad.len(), take).into_vec() {
            let orig = store.get(*id).data()[i];
            let mut at = |dx: f64| {
                store.get_mut(*id).data_mut()[i] = orig + dx;
                let v = eval(store);
                store.get_mut(*id).data_mut()[i] = orig;
                v
            };
            let numeric = match stencil {
                Stencil::TwoPoint(h) => (at(h) - at(-h)) / (2.0 * h),
                Stencil::FourthOrder(h) => (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h),
            };
            if rel_err(grad.data()[i], numeric, REL_FLOOR) >= max_rel {
                max_rel = rel_err(grad.data()[i], numeric, REL_FLOOR);
                worst = (grad.data()[i], numeric);
            }
            coords += 1;
        }
    }
    GradReport {
        name: name.to_string(),
        coords,
        max_rel,
        worst,
    }
}

/// Soft-TriHard loss of a tiny variant II model on a random batch of four
/// pairs, differentiated with respect to its parameters.
pub fn end_to_end_soft_trihard(min_coords: usize) -> GradReport {
    let cfg = tiny_model_config();
    let mut model: Model<f64> = Model::new(&cfg).unwrap();
    let mut r = rng(5);
    let [h, w] = cfg.backbone.input_size;
    let ground = uniform(&[4, 3, h, w], -1.0, 1.0, &mut r);
    let sat = uniform(&[4, 3, h, w], -1.0, 1.0, &mut r);
    let loss_cfg = LossConfig::default();
    let branches = model.clone();
    check_params(
        "end-to-end soft_trihard",
        &mut model.store,
        |store| {
            let mut m = branches.clone();
            m.store = store.clone();
            let mut g = Graph::new();
            let gx = g.constant(ground.clone());
            let sx = g.constant(sat.clone());
            let gd = m.forward_branch(&mut g, Branch::Ground, gx, Mode::Train).unwrap();
            let sd = m.forward_branch(&mut g, Branch::Satellite, sx, Mode::Train).unwrap();
            let loss = descriptor_loss(&mut g, gd, sd, &loss_cfg).unwrap();
            (g, loss)
        },
        |_| true,
        min_coords,
        Stencil::TwoPoint(FD_STEP),
        5,
    )
}

/// `Σ_k (x_k − y_k)²` with no shortcut through the dot product.
pub fn explicit_sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn naive_softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Scalar-loop losses straight from the definitions.
pub fn oracle_loss(ground: &Tensor<f64>, sat: &Tensor<f64>, kind: LossKind, alpha: f64, theta: f64) -> f64 {
    let (m, d) = (ground.shape()[0], ground.shape()[1]);
    let g = |i: usize| &ground.data()[i * d..(i + 1) * d];
    let s = |i: usize| &sat.data()[i * d..(i + 1) * d];
    let mut total = 0.0;
    let mut terms = 0usize;
    for a in 0..m {
        let pos = explicit_sq_dist(g(a), s(a));
        let mut hardest = f64::INFINITY;
        for n in 0..m {
            if n == a {
                continue;
            }
            let dn = explicit_sq_dist(g(a), s(n));
            if kind == LossKind::SoftTriplet {
                total += naive_softplus(alpha * (pos - dn));
                terms += 1;
            }
            if dn < hardest {
                hardest = dn;
            }
        }
        match kind {
            LossKind::MarginTrihard => {
                let h = pos - hardest + theta;
                total += if h > 0.0 { h } else { 0.0 };
                terms += 1;
            }
            LossKind::SoftTrihard => {
                total += naive_softplus(alpha * (pos - hardest));
                terms += 1;
            }
            LossKind::SoftTriplet => {}
        }
    }
    total / terms as f64
}

/// Rank of the diagonal entry by sorting the row; ties resolve in the
/// query's favour.
pub fn oracle_rank(row: &[f64], true_index: usize) -> usize {
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let target = row[true_index];
    sorted.iter().position(|&v| v == target).unwrap() + 1
}

pub fn oracle_recall(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Desk-scale experiment settings.
#[derive(Debug, Clone, Copy)]
pub struct DeskRun {
    pub seed: u64,
    pub batch: usize,
    pub kind: LossKind,
    pub head: Head,
    pub epochs: usize,
}

impl DeskRun {
    pub fn new(seed: u64) -> Self {
        DeskRun {
            seed,
            batch: 32,
            kind: LossKind::SoftTrihard,
            head: Head::Caps,
            epochs: 50,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "seed {} M={} {:?} {:?} head",
            self.seed, self.batch, self.kind, self.head
        )
    }
}

#[derive(Debug, Clone)]
pub struct DeskResult {
    pub run: DeskRun,
    pub recall_at_k: Vec<(usize, f64)>,
    pub recall_top1: f64,
    pub recall_top10: f64,
}

impl DeskResult {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at_k.iter().find(|(kk, _)| *kk == k).map(|p| p.1).unwrap()
    }
}

/// The 512/128 synthetic split, standardised with training statistics.
pub fn desk_split(seed: u64) -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic_pairs(&spec).unwrap();
    let (mut train, mut test) = data.split(512).unwrap();
    let stats = ChannelStats::compute(&train);
    train.standardize(&stats);
    test.standardize(&stats);
    (train, test)
}

/// Train the default (tiny, variant II) model and report held-out recall.
pub fn desk_run(run: DeskRun) -> DeskResult {
    let (train, test) = desk_split(run.seed);
    let defaults = RunConfig::default();
    let model_cfg = ModelConfig {
        variant: Variant::II,
        head: run.head,
        seed: run.seed,
        ..defaults.model
    };
    let train_cfg = TrainConfig {
        batch_size: run.batch,
        epochs: run.epochs,
        seed: run.seed,
        ..defaults.train
    };
    let loss = LossConfig {
        kind: run.kind,
        ..defaults.loss
    };
    let mut trainer = Trainer::new(Model::<f32>::new(&model_cfg).unwrap(), train_cfg, loss).unwrap();
    for _ in 0..run.epochs {
        trainer.train_epoch(&train).unwrap();
    }
    let g = trainer.model.embed_all(&test.images(Branch::Ground), Branch::Ground, 64).unwrap();
    let s = trainer.model.embed_all(&test.images(Branch::Satellite), Branch::Satellite, 64).unwrap();
    let ks: Vec<usize> = (1..=test.len()).collect();
    let report = recall_curve(&g.values, &s.values, &ks, &[1.0, 10.0]).unwrap();
    DeskResult {
        run,
        recall_top1: report.recall_top_percent(1.0),
        recall_top10: report.recall_top_percent(10.0),
        recall_at_k: report.recall_at_k,
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bn_case(name: &str, train: bool, seed: u64) -> GradReport {
    use geocaps::tensor::BatchNormArgs;
    let mut r = rng(seed);
    let x = uniform(&[4, 3, 5, 5], -2.0, 2.0, &mut r);
    let gamma = uniform(&[3], 0.5, 1.5, &mut r);
    let beta = uniform(&[3], -0.5, 0.5, &mut r);
    let rm = uniform(&[3], -0.2, 0.2, &mut r);
    let rv = uniform(&[3], 0.5, 2.0, &mut r);
    check_op(
        name,
        &[x, gamma, beta],
        |g, v| {
            let args = BatchNormArgs {
                train,
                eps: 1e-5,
                momentum: 0.9,
                running_mean: &rm,
                running_var: &rv,
                running_ids: None,
            };
            g.batch_norm(v[0], v[1], v[2], args).unwrap()
        },
        150,
        seed,
    )
}

/// Every differentiable primitive of the graph, one report each.
pub fn primitive_suite() -> Vec<GradReport> {
    use geocaps::tensor::Padding;
    let n = 150;
    let mut r = rng(2024);
    let mut out = Vec::new();
    let mut u = |shape: &[usize]| uniform(shape, -1.0, 1.0, &mut r);

    let (x, k, b) = (u(&[2, 3, 6, 6]), u(&[4, 3, 3, 3]), u(&[4]));
    out.push(check_op("conv2d valid 3x3", &[x, k, b], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Valid).unwrap()
    }, n, 1));
    let (x, k, b) = (u(&[2, 3, 7, 7]), u(&[5, 3, 3, 3]), u(&[5]));
    out.push(check_op("conv2d same 3x3 stride 2", &[x, k, b], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Same).unwrap()
    }, n, 2));
    let (x, k) = (u(&[2, 4, 5, 5]), u(&[6, 4, 1, 1]));
    out.push(check_op("conv2d pointwise stride 2", &[x, k], |g, v| {
        g.conv2d(v[0], v[1], None, 2, Padding::Valid).unwrap()
    }, n, 3));
    out.push(bn_case("batch_norm train", true, 4));
    out.push(bn_case("batch_norm eval", false, 5));
    let (x, w, b) = (u(&[6, 10]), u(&[10, 8]), u(&[8]));
    out.push(check_op("affine", &[x, w, b], |g, v| g.affine(v[0], v[1], v[2]).unwrap(), n, 6));
    let (a, b) = (u(&[6, 9]), u(&[9, 7]));
    out.push(check_op("matmul", &[a, b], |g, v| g.matmul(v[0], v[1], false).unwrap(), n, 7));
    let (a, b) = (u(&[6, 9]), u(&[7, 9]));
    out.push(check_op("matmul transposed", &[a, b], |g, v| g.matmul(v[0], v[1], true).unwrap(), n, 8));
    let mut r2 = rng(99);
    let x = away_from_zero(&[10, 12], 0.01, 1.0, &mut r2);
    out.push(check_op("relu", &[x], |g, v| g.relu(v[0]), n, 9));
    let x = uniform(&[4, 6, 5], -2.0, 2.0, &mut r2);
    out.push(check_op("softmax axis 1", std::slice::from_ref(&x), |g, v| g.softmax(v[0], 1).unwrap(), n, 10));
    out.push(check_op("softmax last axis", &[x], |g, v| g.softmax(v[0], 2).unwrap(), n, 11));
    let (a, b) = (uniform(&[8, 9], -1.0, 1.0, &mut r2), uniform(&[8, 9], -1.0, 1.0, &mut r2));
    out.push(check_op("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap(), n, 12));
    out.push(check_op("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap(), n, 13));
    out.push(check_op("mul", &[a.clone(), b], |g, v| g.mul(v[0], v[1]).unwrap(), n, 14));
    let x = uniform(&[10, 12], -1.0, 1.0, &mut r2);
    out.push(check_op("scale", std::slice::from_ref(&x), |g, v| g.scale(v[0], -2.5), n, 15));
    out.push(check_op("add_scalar", std::slice::from_ref(&x), |g, v| g.add_scalar(v[0], 0.75), n, 16));
    out.push(check_op("reshape", std::slice::from_ref(&x), |g, v| g.reshape(v[0], &[4, 30]).unwrap(), n, 17));
    out.push(check_op("sum_all", std::slice::from_ref(&x), |g, v| g.sum_all(v[0]), n, 18));
    out.push(check_op("mean_all", std::slice::from_ref(&x), |g, v| g.mean_all(v[0]), n, 19));
    out.push(check_op("gather", &[x], |g, v| {
        let idx: Vec<usize> = (0..200).map(|i| (i * 37) % 120).collect();
        g.gather(v[0], &idx).unwrap()
    }, n, 20));
    let x = uniform(&[3, 4, 10], -1.0, 1.0, &mut r2);
    out.push(check_op("permute", std::slice::from_ref(&x), |g, v| g.permute(v[0], &[2, 0, 1]).unwrap(), n, 21));
    out.push(check_op("sum_axis", std::slice::from_ref(&x), |g, v| g.sum_axis(v[0], 1).unwrap(), n, 22));
    out.push(check_op("expand", &[x], |g, v| g.expand(v[0], 1, 3).unwrap(), n, 23));
    let x = uniform(&[6, 20], -1.0, 1.0, &mut r2);
    out.push(check_op("l2_normalize", &[x], |g, v| g.l2_normalize(v[0]), n, 24));
    let x = uniform(&[10, 12], -6.0, 6.0, &mut r2);
    out.push(check_op("softplus", &[x], |g, v| g.softplus(v[0]), n, 25));
    let (uu, w) = (uniform(&[2, 5, 4], -1.0, 1.0, &mut r2), uniform(&[5, 3, 4, 6], -1.0, 1.0, &mut r2));
    out.push(check_op("pair_transform", &[uu, w], |g, v| g.pair_transform(v[0], v[1]).unwrap(), n, 26));
    out.push(squash_case());
    out
}

pub fn squash_case() -> GradReport {
    let x = uniform(&[6, 4, 8], -1.5, 1.5, &mut rng(27));
    check_op("squash", &[x], |g, v| g.squash(v[0]), 150, 27)
}

/// Four unrolled routing rounds, differentiated through every round.
pub fn routing_case() -> GradReport {
    let u_hat = uniform(&[2, 6, 4, 8], -0.5, 0.5, &mut rng(28));
    check_op(
        "routing, 4 iterations",
        &[u_hat],
        |g, v| geocaps::capsules::route(g, v[0], 4).unwrap().v,
        150,
        28,
    )
}

/// Largest difference between the library losses (scalar path and graph
/// path) and [`oracle_loss`] over `batches` random batches of eight pairs.
pub fn loss_oracle_max_diff(kind: LossKind, batches: usize, seed: u64) -> f64 {
    use geocaps::objective::{batch_loss, loss_var, pairwise_sq_distances};
    let cfg = LossConfig {
        kind,
        ..LossConfig::default()
    };
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..batches {
        let d = r.gen_range(2..=24);
        let ground = unit_rows(8, d, &mut r);
        let sat = unit_rows(8, d, &mut r);
        let want = oracle_loss(&ground, &sat, kind, cfg.alpha, cfg.theta);
        let bd = pairwise_sq_distances(&ground, &sat).unwrap();
        let scalar = batch_loss(&bd, &cfg).unwrap();
        let mut g = Graph::new();
        let gv = g.constant(ground.clone());
        let sv = g.constant(sat.clone());
        let l = descriptor_loss(&mut g, gv, sv, &cfg).unwrap();
        let graph = g.value(l).data()[0];
        let flat: Vec<f64> = (0..8).flat_map(|a| bd.row(a).to_vec()).collect();
        let dist = g.constant(Tensor::new(&[8, 8], flat).unwrap());
        let lv = loss_var(&mut g, dist, &cfg).unwrap();
        let from_dist = g.value(lv).data()[0];
        for v in [scalar, graph, from_dist] {
            worst = worst.max((v - want).abs());
        }
    }
    worst
}

/// Number of (matrix, metric) disagreements between the library and the
/// sort oracle over `matrices` random `n × n` distance matrices. Every
/// other matrix is quantised so that ties occur.
pub fn retrieval_oracle_mismatches(matrices: usize, n: usize, seed: u64) -> usize {
    use geocaps::eval::{rank_in_row, recall_at_k, recall_at_top_percent, RecallReport};
    let mut r = rng(seed);
    let ks = [1usize, 5, 10, 50, 100, n];
    let percents = [0.5, 1.0, 5.0, 10.0, 100.0];
    let mut mismatches = 0;
    for m in 0..matrices {
        let mut dist: Vec<f64> = (0..n * n).map(|_| r.gen_range(0.0..4.0)).collect();
        if m % 2 == 1 {
            dist.iter_mut().for_each(|v| *v = (*v * 8.0).round() / 8.0);
        }
        let lib_ranks: Vec<usize> = dist.chunks(n).enumerate().map(|(i, row)| rank_in_row(row, i).unwrap()).collect();
        let oracle_ranks: Vec<usize> = dist.chunks(n).enumerate().map(|(i, row)| oracle_rank(row, i)).collect();
        if lib_ranks != oracle_ranks {
            mismatches += 1;
        }
        let report = RecallReport::from_ranks(lib_ranks.clone(), n, &ks, &percents).unwrap();
        for &k in &ks {
            let want = oracle_recall(&oracle_ranks, k);
            if recall_at_k(&lib_ranks, k) != want || report.recall(k) != want {
                mismatches += 1;
            }
        }
        for &p in &percents {
            let k = ((p * n as f64) / 100.0).ceil().max(1.0) as usize;
            let want = oracle_recall(&oracle_ranks, k);
            if recall_at_top_percent(&lib_ranks, n, p).unwrap() != want || report.recall_top_percent(p) != want {
                mismatches += 1;
            }
        }
    }
    mismatches
}

/// recall@top1% of random unit embeddings: `trials` galleries of `n`
/// locations, every location queried once.
pub fn random_embedding_top1(n: usize, trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut hits = 0.0;
    for _ in 0..trials {
        let g = unit_rows(n, 16, &mut r);
        let s = unit_rows(n, 16, &mut r);
        hits += recall_curve(&g, &s, &[1], &[1.0]).unwrap().recall_top_percent(1.0) * n as f64;
    }
    hits / (n * trials) as f64
}
