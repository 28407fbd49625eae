//! Checks shared by the focused integration tests and the acceptance gate.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tapd::encoder::SceneContext;
use tapd::numkit::{cosine_alpha, Tape, Var};
use tapd::oaf::{pkd_loss, OafConfig, OafParams};
use tapd::scenegen::{generate_scene, truncate_history, GeneratorConfig, Scene, TruncationSpec};
use tapd::tbm::{backfill, prefix_targets, tbm_loss, TbmConfig, TbmParams, TbmSession};
use tapd::train::{stage1_pretrain, stage1_scene_loss, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const PROBES: usize = 50;
pub const METRIC_TOL: f64 = 1e-12;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy)]
pub struct GradStats {
    pub probes: usize,
    pub max_rel: f64,
}

impl GradStats {
    pub fn ok(&self) -> bool {
        self.probes >= PROBES && self.max_rel < GRAD_TOL
    }
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Random inputs, weighted-sum readout, one random element probed per trial.
fn check_op(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>], gen: &dyn Fn(&mut ChaCha8Rng) -> f64, build: &Build) -> GradStats {
    let mut max_rel: f64 = 0.0;
    for _ in 0..PROBES {
        let inputs: Vec<Vec<f64>> = shapes.iter().map(|s| (0..s.iter().product::<usize>()).map(|_| gen(rng)).collect()).collect();
        let eval = |vals: &[Vec<f64>], grad: bool| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> =
                vals.iter().zip(shapes).map(|(v, s)| tape.leaf_from(s.clone(), v.clone(), true).unwrap()).collect();
            let out = build(&mut tape, &vars);
            let n = tape.value(out).len();
            let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 13.0).collect();
            let wv = tape.constant(tape.shape(out).to_vec(), w).unwrap();
            let prod = tape.mul(out, wv).unwrap();
            let loss = tape.sum(prod);
            let value = tape.scalar_value(loss);
            if !grad {
                return (value, Vec::new());
            }
            tape.backward(loss).unwrap();
            (value, vars.iter().map(|v| tape.grad_or_zeros(*v)).collect())
        };
        let (_, grads) = eval(&inputs, true);
        let which = rng.random_range(0..inputs.len());
        let idx = rng.random_range(0..inputs[which].len());
        let mut plus = inputs.clone();
        plus[which][idx] += FD_STEP;
        let mut minus = inputs.clone();
        minus[which][idx] -= FD_STEP;
        let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
        max_rel = max_rel.max(rel_err(grads[which][idx], numeric));
    }
    GradStats { probes: PROBES, max_rel }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-2.0..2.0)
}

/// Values at least 0.01 away from zero, for kinks at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(0.01..2.0);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Distinct values spaced far apart, so maxima are unique under perturbation.
fn spaced(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0..400) as f64 * 0.01 - 2.0 + 1e-3 * rng.random_range(0.0..1.0)
}

/// Every differentiable primitive of the tape.
pub fn primitive_gradients(seed: u64) -> Vec<(&'static str, GradStats)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let s = |d: &[usize]| d.to_vec();
    vec![
        ("matmul", check_op(r, &[s(&[3, 4]), s(&[4, 2])], &normal, &|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("add", check_op(r, &[s(&[3, 4]), s(&[3, 4])], &normal, &|t, v| t.add(v[0], v[1]).unwrap())),
        ("add_broadcast", check_op(r, &[s(&[3, 4]), s(&[4])], &normal, &|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", check_op(r, &[s(&[2, 5]), s(&[5])], &normal, &|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", check_op(r, &[s(&[3, 3]), s(&[3, 3])], &normal, &|t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale", check_op(r, &[s(&[6])], &normal, &|t, v| t.scale(v[0], -1.7))),
        ("concat_rows", check_op(r, &[s(&[2, 3]), s(&[1, 3])], &normal, &|t, v| t.concat(v, 0).unwrap())),
        ("concat_cols", check_op(r, &[s(&[2, 3]), s(&[2, 2])], &normal, &|t, v| t.concat(v, 1).unwrap())),
        ("slice", check_op(r, &[s(&[3, 5])], &normal, &|t, v| t.slice(v[0], 1, 1, 4).unwrap())),
        ("reshape", check_op(r, &[s(&[2, 6])], &normal, &|t, v| t.reshape(v[0], vec![3, 4]).unwrap())),
        ("relu", check_op(r, &[s(&[10])], &away_from_zero, &|t, v| t.relu(v[0]))),
        ("tanh", check_op(r, &[s(&[10])], &normal, &|t, v| t.tanh(v[0]))),
        ("abs", check_op(r, &[s(&[10])], &away_from_zero, &|t, v| t.abs(v[0]))),
        ("softmax", check_op(r, &[s(&[3, 4])], &normal, &|t, v| t.softmax(v[0], 1).unwrap())),
        ("sum", check_op(r, &[s(&[4, 2])], &normal, &|t, v| t.sum(v[0]))),
        ("mean", check_op(r, &[s(&[4, 2])], &normal, &|t, v| t.mean(v[0]))),
        ("mean_axis", check_op(r, &[s(&[3, 4, 2])], &normal, &|t, v| t.mean_axis(v[0], 1).unwrap())),
        ("max_axis", check_op(r, &[s(&[3, 5, 2])], &spaced, &|t, v| t.max_axis(v[0], 1).unwrap())),
        ("cumsum", check_op(r, &[s(&[4, 3])], &normal, &|t, v| t.cumsum(v[0], 1).unwrap())),
        ("gather_rows", check_op(r, &[s(&[4, 3])], &normal, &|t, v| t.gather_rows(v[0], &[2, 0, 2]).unwrap())),
        ("attention", check_op(r, &[s(&[3, 4]), s(&[5, 4]), s(&[5, 2])], &normal, &|t, v| t.attention(v[0], v[1], v[2]).unwrap())),
        ("layer_norm", check_op(r, &[s(&[3, 6]), s(&[6]), s(&[6])], &normal, &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())),
        (
            "smooth_l1",
            check_op(r, &[s(&[8]), s(&[8])], &|r| 0.5 * away_from_zero(r), &|t, v| t.smooth_l1(v[0], v[1]).unwrap()),
        ),
        ("cross_entropy", check_op(r, &[s(&[6])], &normal, &|t, v| t.cross_entropy(v[0], 4).unwrap())),
        (
            "pkd_student",
            check_op(r, &[s(&[2, 4])], &normal, &|t, v| {
                let teacher = t.constant(vec![2, 4], (0..8).map(|i| 0.3 * i as f64 - 1.1).collect()).unwrap();
                pkd_loss(t, &[(1, v[0]), (2, teacher)]).unwrap()
            }),
        ),
    ]
}

pub fn small_scene(seed: u64) -> Scene {
    generate_scene(seed, &GeneratorConfig::default()).unwrap()
}

/// Central differences on random parameters of a loss `f(params) -> value`,
/// given the analytic gradient of the flat parameter vector.
fn probe_flat(
    rng: &mut ChaCha8Rng,
    flat: &[f64],
    grad: &[f64],
    candidates: &[usize],
    f: &dyn Fn(&[f64]) -> f64,
) -> GradStats {
    let mut max_rel: f64 = 0.0;
    for _ in 0..PROBES {
        let i = candidates[rng.random_range(0..candidates.len())];
        let mut p = flat.to_vec();
        p[i] = flat[i] + FD_STEP;
        let up = f(&p);
        p[i] = flat[i] - FD_STEP;
        let down = f(&p);
        max_rel = max_rel.max(rel_err(grad[i], (up - down) / (2.0 * FD_STEP)));
    }
    GradStats { probes: PROBES, max_rel }
}

/// Offsets of the parameters a binder touched, in the flat vector.
fn bound_offsets(params: &tapd::numkit::ParamSet, bound: &[tapd::numkit::ParamId]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut off = 0;
    for id in params.ids() {
        let n = params.get(id).len();
        if bound.contains(&id) {
            out.extend(off..off + n);
        }
        off += n;
    }
    out
}

/// Stage-1 prediction objective over all lengths of a small forecaster. The
/// distillation term is left out: its teacher side is detached on purpose, so
/// its analytic gradient is not the derivative of the loss value.
pub fn oaf_model_gradients(seed: u64) -> GradStats {
    let scene = small_scene(seed);
    let model = OafParams::new(OafConfig { d: 8, ..OafConfig::default() }, seed);
    let full = scene.full_history();
    let ctx = SceneContext::new(scene.timeline, &full, &scene.map, &scene.aoi_indices).unwrap();
    let futures: Vec<_> = scene.aoi_indices.iter().map(|&a| scene.future_positions(a)).collect();
    let targets = ctx.local_targets(&futures);
    let lengths = [1, 2, 3, 4];
    let loss = |m: &OafParams| stage1_scene_loss(m, &ctx, &scene, &targets, &lengths, 0.7, false).unwrap();
    let (tape, binder, _) = loss(&model);
    let mut grad = Vec::new();
    for id in model.params.ids() {
        match binder.var(id) {
            Some(v) => grad.extend(tape.grad_or_zeros(v)),
            None => grad.extend(vec![0.0; model.params.get(id).len()]),
        }
    }
    let flat = model.params.flat_values();
    let cands = bound_offsets(&model.params, &binder.bound_ids());
    let f = |p: &[f64]| {
        let mut m = model.clone();
        m.params.load_flat(p).unwrap();
        loss(&m).2[3]
    };
    probe_flat(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xA5), &flat, &grad, &cands, &f)
}

/// Reconstruction objective of a small backfiller at a random short length.
pub fn tbm_model_gradients(seed: u64) -> GradStats {
    let scene = small_scene(seed);
    let model = TbmParams::new(TbmConfig { d: 8, ..TbmConfig::default() }, seed).unwrap();
    let tl = scene.timeline;
    let tau = 1 + (seed as usize % (tl.intervals - 1));
    let full = scene.full_history();
    let ctx = SceneContext::new(tl, &full, &scene.map, &scene.aoi_indices).unwrap();
    let x = truncate_history(&scene, &TruncationSpec::for_timeline(&tl, tau)).unwrap();
    let truth = prefix_targets(&full, &ctx, model.config.prefix_steps(tau));
    let run = |m: &TbmParams| {
        let mut tape = Tape::new();
        let mut s = TbmSession::new(m, &ctx, true);
        let f = s.encode(&mut tape, &x, tau).unwrap();
        let out = s.decode(&mut tape, f, &x, tau).unwrap();
        let l = tbm_loss(&mut tape, &out, &truth).unwrap();
        let total = tape.add(l.reg, l.cls).unwrap();
        (tape, s.into_binder(), total)
    };
    let (mut tape, binder, total) = run(&model);
    tape.backward(total).unwrap();
    let mut grad = Vec::new();
    for id in model.params.ids() {
        match binder.var(id) {
            Some(v) => grad.extend(tape.grad_or_zeros(v)),
            None => grad.extend(vec![0.0; model.params.get(id).len()]),
        }
    }
    let flat = model.params.flat_values();
    let cands = bound_offsets(&model.params, &binder.bound_ids());
    let f = |p: &[f64]| {
        let mut m = model.clone();
        m.params.load_flat(p).unwrap();
        let (tape, _, total) = run(&m);
        tape.scalar_value(total)
    };
    probe_flat(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5A), &flat, &grad, &cands, &f)
}

// ---- metrics -------------------------------------------------------------

fn brute_min_ade(cands: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for c in cands {
        let mut s = 0.0;
        for t in 0..gt.len() {
            let dx = c[t][0] - gt[t][0];
            let dy = c[t][1] - gt[t][1];
            s += dx.hypot(dy);
        }
        let v = s / gt.len() as f64;
        if v < best {
            best = v;
        }
    }
    best
}

fn brute_min_fde(cands: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> f64 {
    let last = gt.len() - 1;
    let mut best = f64::INFINITY;
    for c in cands {
        let v = (c[last][0] - gt[last][0]).hypot(c[last][1] - gt[last][1]);
        if v < best {
            best = v;
        }
    }
    best
}

/// Largest deviation from the brute-force loops over `n` random instances,
/// and whether a final error of exactly 2 m counted as a hit.
pub fn metric_oracle(n: usize, seed: u64) -> (f64, bool) {
    use tapd::evalkit::{min_ade_k, min_fde_k, miss_rate_k};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = if rng.random_bool(0.5) { 1 } else { 6 };
        let t = rng.random_range(1..=30);
        let batch = rng.random_range(1..=5);
        let mut all_c = Vec::new();
        let mut all_g = Vec::new();
        for _ in 0..batch {
            let gt: Vec<[f64; 2]> = (0..t).map(|_| [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)]).collect();
            let cands: Vec<Vec<[f64; 2]>> = (0..k)
                .map(|_| {
                    let sc = rng.random_range(0.0..4.0);
                    gt.iter().map(|p| [p[0] + sc * rng.random_range(-1.0..1.0), p[1] + sc * rng.random_range(-1.0..1.0)]).collect()
                })
                .collect();
            worst = worst.max((min_ade_k(&cands, &gt).unwrap() - brute_min_ade(&cands, &gt)).abs());
            worst = worst.max((min_fde_k(&cands, &gt).unwrap() - brute_min_fde(&cands, &gt)).abs());
            all_c.push(cands);
            all_g.push(gt);
        }
        let misses = all_c.iter().zip(&all_g).filter(|(c, g)| brute_min_fde(c, g) > 2.0).count();
        let brute_mr = misses as f64 / all_c.len() as f64;
        worst = worst.max((miss_rate_k(&all_c, &all_g, 2.0).unwrap() - brute_mr).abs());
    }
    let gt = vec![[0.0, 0.0], [0.0, 0.0]];
    let exact = vec![vec![[1.0, 1.0], [1.2, 1.6]]];
    let boundary_hit = miss_rate_k(&[exact], &[gt], 2.0).unwrap() == 0.0;
    (worst, boundary_hit)
}

// ---- distillation --------------------------------------------------------

pub struct PkdContract {
    pub identical_zero: bool,
    pub teacher_grad_zero: bool,
    pub hand_value: f64,
}

/// Identical features, the detach wall on a real encoder, and a three-length
/// hand case: pairs (1,2) → (|1−3| + |2−2|)/2 = 1, (2,3) → (|3−6| + |2−0|)/2 = 2.5.
pub fn pkd_contract() -> PkdContract {
    let mut tape = Tape::new();
    let f = tape.leaf_from(vec![2, 2], vec![0.3, -1.0, 2.0, 0.1], true).unwrap();
    let l = pkd_loss(&mut tape, &[(1, f), (2, f), (3, f)]).unwrap();
    let identical_zero = tape.scalar_value(l) == 0.0;

    let mut tape = Tape::new();
    let f1 = tape.leaf_from(vec![2, 1], vec![1.0, 2.0], true).unwrap();
    let f2 = tape.leaf_from(vec![2, 1], vec![3.0, 2.0], true).unwrap();
    let f3 = tape.leaf_from(vec![2, 1], vec![6.0, 0.0], true).unwrap();
    let l = pkd_loss(&mut tape, &[(1, f1), (2, f2), (3, f3)]).unwrap();
    let hand_value = tape.scalar_value(l);
    tape.backward(l).unwrap();
    let mut teacher_grad_zero = tape.grad_or_zeros(f3).iter().all(|g| *g == 0.0);

    // Length 4 only teaches here: its own norm parameters must get no
    // gradient from the alignment term, while length 3's must.
    let scene = small_scene(3);
    let model = OafParams::new(OafConfig { d: 8, ..OafConfig::default() }, 3);
    let full = scene.full_history();
    let ctx = SceneContext::new(scene.timeline, &full, &scene.map, &scene.aoi_indices).unwrap();
    let mut tape = Tape::new();
    let mut sess = tapd::oaf::OafSession::new(&model, &ctx, true);
    let outs = tapd::oaf::forward_all_lengths(&mut tape, &mut sess, &scene, &[3, 4]).unwrap();
    let feats: Vec<(usize, Var)> = outs.iter().map(|o| (o.tau, o.agent_features)).collect();
    let l = pkd_loss(&mut tape, &feats).unwrap();
    tape.backward(l).unwrap();
    let binder = sess.into_binder();
    let grad = |name: &str| {
        let id = model.params.find(name).unwrap();
        binder.var(id).map(|v| tape.grad_or_zeros(v)).unwrap_or_default()
    };
    for k in 1..=3 {
        for p in ["gamma", "beta"] {
            teacher_grad_zero &= grad(&format!("oaf.enc.ln{k}.tau4.{p}")).iter().all(|g| *g == 0.0);
            teacher_grad_zero &= grad(&format!("oaf.enc.ln{k}.tau3.{p}")).iter().any(|g| *g != 0.0);
        }
    }
    PkdContract { identical_zero, teacher_grad_zero, hand_value }
}

// ---- schedule ------------------------------------------------------------

/// Cosine endpoints and the largest per-epoch `|total − (α·L_f + L_reg + L_cls)|`.
pub fn schedule_contract() -> (bool, f64) {
    let endpoints = [(0, 0.0), (15, 0.5), (30, 1.0)].iter().all(|&(e, v)| cosine_alpha(e, 30).unwrap() == v)
        && [(0, 0.0), (2, 0.5), (4, 1.0)].iter().all(|&(e, v)| cosine_alpha(e, 4).unwrap() == v);
    let scenes: Vec<Scene> = (0..6).map(small_scene).collect();
    let cfg = TrainConfig { epochs: 4, batch_size: 3, seed: 9, ..TrainConfig::default() };
    let out = stage1_pretrain(&cfg, OafConfig { d: 8, ..OafConfig::default() }, &scenes).unwrap();
    let worst = out
        .log
        .iter()
        .map(|e| (e.total - (e.alpha * e.l_f + e.l_reg + e.l_cls)).abs())
        .fold(0.0, f64::max);
    (endpoints, worst)
}

// ---- backfill ------------------------------------------------------------

/// `n` random (scene, τ, parameters) triples; counts completions whose observed
/// suffix is not bit-identical or whose length is not `T_obs`.
pub fn backfill_preservation(n: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models: Vec<TbmParams> =
        (0..10).map(|i| TbmParams::new(TbmConfig { d: 8, ..TbmConfig::default() }, seed + i).unwrap()).collect();
    let mut failures = 0;
    for _ in 0..n {
        let scene = small_scene(rng.random());
        let tl = scene.timeline;
        let tau = rng.random_range(1..tl.intervals);
        let model = &models[rng.random_range(0..models.len())];
        let full = scene.full_history();
        let ctx = SceneContext::new(tl, &full, &scene.map, &scene.aoi_indices).unwrap();
        let x = truncate_history(&scene, &TruncationSpec::for_timeline(&tl, tau)).unwrap();
        let r = backfill(model, &ctx, &x, tau).unwrap();
        let suffix = r.completed.suffix(x.steps);
        let same = suffix.data.iter().zip(&x.data).all(|(a, b)| a.to_bits() == b.to_bits()) && suffix.data.len() == x.data.len();
        if !same || r.completed.steps != tl.observed() || r.completed.n_agents != x.n_agents {
            failures += 1;
        }
    }
    failures
}
