//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Axis};
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::Rng;
use tase::eval::{fit_probe, linear_probe, nearest, normalize_rows, ProbeRegime, ProbeSpec, KNN10};
use tase::trainer::{epoch_rng, make_batch};
use tase::{
    class_counts, grad_ratio, kmeans, nt_xent, sgd_step, stream_rng, tase_loss, temperatures, BatchPairing, Group,
    KmeansConfig, LongTailProfile, MlpSpec, Mode, ModelParams, OptimState, PseudoState, RunObserver, Stream,
    TemperatureSchedule, Trainer,
};
use tase_cli::commands::{self, ReportJson, CHECKPOINT, HISTORY, REPORT};
use tase_cli::config::{ExperimentConfig, Preset};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn c1_cifar10_counts() -> Outcome {
    let counts = class_counts(&LongTailProfile::new(10, 4500, 100.0).unwrap()).unwrap();
    let oracle = vec![4500, 2697, 1617, 969, 581, 348, 208, 125, 75, 45];
    let sum: usize = counts.iter().sum();
    check(
        counts == oracle && sum == 11165,
        format!("sum {sum}, per-class vector matches oracle"),
        format!("got {counts:?} (sum {sum})"),
    )
}

fn c2_cifar100_counts() -> Outcome {
    let counts = class_counts(&LongTailProfile::new(100, 450, 100.0).unwrap()).unwrap();
    let sum: usize = counts.iter().sum();
    check(
        sum.abs_diff(9754) <= 5,
        format!("sum {sum} (anchor 9754)"),
        format!("sum {sum} outside 9754 +- 5"),
    )
}

fn unit_rows(rng: &mut impl Rng, rows: usize, d: usize) -> Array2<f64> {
    let x = Array2::from_shape_simple_fn((rows, d), || rng.random_range(-1.0..1.0));
    normalize_rows(x.view())
}

fn c3_reduction_identity() -> Outcome {
    let mut rng = stream_rng(3, Stream::Probe, 0);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..12);
        let d = rng.random_range(2..10);
        let tau = rng.random_range(0.05..1.0);
        let v = unit_rows(&mut rng, 2 * n, d);
        let pairing = BatchPairing::new(n).unwrap();
        let plain = nt_xent(v.view(), &pairing, tau).unwrap();
        let ours = tase_loss(v.view(), &pairing, &vec![tau; 2 * n], &vec![1.0; 2 * n]).unwrap();
        for (a, b) in plain.per_anchor.iter().zip(&ours.per_anchor) {
            worst = worst.max((a - b).abs());
        }
    }
    check(
        worst <= 1e-12,
        format!("200 batches, max per-anchor diff {worst:.1e}"),
        format!("max per-anchor diff {worst:.3e} > 1e-12"),
    )
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn c4_gradients() -> Outcome {
    let h = 1e-6;
    let mut worst_v = 0.0f64;
    let mut worst_p = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = stream_rng(seed, Stream::Probe, 4);
        let n = 4;
        let taus: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.1..0.6)).collect();
        let ws: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.05..1.0)).collect();
        let pairing = BatchPairing::new(n).unwrap();

        let v = unit_rows(&mut rng, 2 * n, 5);
        let analytic = tase_loss(v.view(), &pairing, &taus, &ws).unwrap().grad;
        for idx in 0..v.len() {
            let (r, c) = (idx / v.ncols(), idx % v.ncols());
            let mut up = v.clone();
            up[[r, c]] += h;
            let mut dn = v.clone();
            dn[[r, c]] -= h;
            let lu = tase_loss(up.view(), &pairing, &taus, &ws).unwrap().loss;
            let ld = tase_loss(dn.view(), &pairing, &taus, &ws).unwrap().loss;
            worst_v = worst_v.max(rel_err(analytic[[r, c]], (lu - ld) / (2.0 * h)));
        }

        let spec = MlpSpec::new(vec![6, 10, 8], vec![8, 7, 5]).unwrap();
        // Redraw until no projector output sits near zero, where normalization has no derivative.
        let (mut params, x) = loop {
            let params = ModelParams::<f64>::init(spec.clone(), &mut rng).unwrap();
            let x = Array2::from_shape_simple_fn((2 * n, 6), || rng.random_range(-1.5..1.5));
            let (_, cache) = params.forward(x.view()).unwrap();
            if cache.perturbed_rows().is_empty() && cache.norms().iter().all(|&m| m > 0.05) {
                break (params, x);
            }
        };
        let loss_at = |p: &ModelParams<f64>| {
            let (v, _) = p.forward(x.view()).unwrap();
            tase_loss(v.view(), &pairing, &taus, &ws).unwrap().loss
        };
        let (v, cache) = params.forward(x.view()).unwrap();
        let dv = tase_loss(v.view(), &pairing, &taus, &ws).unwrap().grad;
        let grads = params.backprop(&cache, dv.view()).unwrap().flat();
        for (i, &g) in grads.iter().enumerate() {
            let orig = *params.param_mut(i);
            *params.param_mut(i) = orig + h;
            let lu = loss_at(&params);
            *params.param_mut(i) = orig - h;
            let ld = loss_at(&params);
            *params.param_mut(i) = orig;
            worst_p = worst_p.max(rel_err(g, (lu - ld) / (2.0 * h)));
        }
    }
    check(
        worst_v < 1e-5 && worst_p < 1e-5,
        format!("10 seeds, max rel err dL/dV {worst_v:.1e}, params {worst_p:.1e}"),
        format!("max rel err dL/dV {worst_v:.3e}, params {worst_p:.3e}"),
    )
}

fn c5_grad_ratio() -> Outcome {
    let mut rng = stream_rng(5, Stream::Probe, 0);
    let mut worst_sum = 0.0f64;
    let grid = [1.0, 0.5, 0.2, 0.1];
    for _ in 0..500 {
        let m = rng.random_range(2..40);
        let sims: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let argmax = (0..m).max_by(|&a, &b| sims[a].partial_cmp(&sims[b]).unwrap()).unwrap();
        if sims.iter().filter(|&&s| s == sims[argmax]).count() > 1 {
            continue;
        }
        let mut prev = f64::NEG_INFINITY;
        for &tau in &grid {
            let r = grad_ratio(&sims, tau).unwrap();
            worst_sum = worst_sum.max((r.iter().sum::<f64>() - 1.0).abs());
            if r[argmax] <= prev {
                return Err(format!("r of hardest negative not increasing as tau falls to {tau}: {sims:?}"));
            }
            prev = r[argmax];
        }
    }
    check(
        worst_sum <= 1e-12,
        format!("500 inputs, max |sum r - 1| {worst_sum:.1e}, hardest-negative share strictly decreasing in tau"),
        format!("max |sum r - 1| = {worst_sum:.3e}"),
    )
}

/// Minimum within-cluster sum of squares over every partition into exactly `k` non-empty clusters.
fn exhaustive_inertia(points: &Array2<f64>, k: usize) -> f64 {
    let n = points.nrows();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut used = vec![false; k];
        labels.iter().for_each(|&l| used[l] = true);
        if used.iter().all(|&u| u) {
            let mut total = 0.0;
            for c in 0..k {
                let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
                let mean = points.select(Axis(0), &members).mean_axis(Axis(0)).unwrap();
                for &i in &members {
                    total += (&points.row(i) - &mean).mapv(|x| x * x).sum();
                }
            }
            best = best.min(total);
        }
        let mut i = 0;
        while i < n && labels[i] == k - 1 {
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
        labels[i] += 1;
    }
}

fn c6_kmeans_oracle() -> Outcome {
    let mut rng = stream_rng(6, Stream::Probe, 0);
    for inst in 0..50 {
        let k = rng.random_range(1..=3);
        let n = rng.random_range(k.max(2)..=8);
        let d = rng.random_range(1..=3);
        let pts = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
        let cfg = KmeansConfig {
            k,
            max_iter: 100,
            tol: 1e-6,
            restarts: 10,
            seed: inst,
        };
        let got: PseudoState<f64> = kmeans(pts.view(), &cfg).unwrap();
        let opt = exhaustive_inertia(&pts, k);
        if (got.inertia - opt).abs() > 1e-9 * opt.max(1.0) {
            return Err(format!("instance {inst} (n={n}, k={k}): inertia {} vs optimum {opt}", got.inertia));
        }
    }
    Ok("50 instances match the exhaustive optimum".into())
}

fn c7_temperature_contracts() -> Outcome {
    let mut rng = stream_rng(7, Stream::Probe, 0);
    for _ in 0..300 {
        let tau_min = rng.random_range(0.05..0.5);
        let sched = TemperatureSchedule {
            tau_base: 0.2,
            tau_min,
            tau_max: tau_min + rng.random_range(0.0..0.6),
            warmup_epochs: rng.random_range(0..20),
            horizon: 0,
            cluster_period: 5,
        };
        let sched = TemperatureSchedule {
            horizon: sched.warmup_epochs + rng.random_range(1..40),
            ..sched
        };
        let k = rng.random_range(1..8);
        let n = rng.random_range(k..60);
        let mut assign: Vec<usize> = (0..k).chain((k..n).map(|_| rng.random_range(0..k))).collect();
        assign.shuffle(&mut rng);
        let state = PseudoState::<f64>::from_parts(assign, Array2::zeros((k, 2)), 0, 0.0).unwrap();
        let ids: Vec<usize> = (0..n).collect();
        let sizes: Vec<usize> = ids.iter().map(|&i| state.cluster_size_of(i)).collect();
        let at_b = temperatures(&state, &sched, sched.warmup_epochs, &ids).unwrap();
        if at_b.iter().any(|&t| t != at_b[0]) {
            return Err("temperatures vary at epoch B".into());
        }
        for epoch in [sched.warmup_epochs + 1, sched.horizon, sched.horizon + 7] {
            let t = temperatures(&state, &sched, epoch, &ids).unwrap();
            if t.iter().any(|&x| x < sched.tau_min || x > sched.tau_max) {
                return Err(format!("unclamped temperature at epoch {epoch}"));
            }
            for i in 0..n {
                for j in 0..n {
                    if sizes[i] < sizes[j] && t[i] > t[j] {
                        return Err("temperature not monotone in cluster size".into());
                    }
                }
            }
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            if epoch >= sched.horizon && lo < hi {
                let tmin = t.iter().copied().fold(f64::INFINITY, f64::min);
                let tmax = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if (tmin - sched.tau_min).abs() > 1e-12 || (tmax - sched.tau_max).abs() > 1e-12 {
                    return Err(format!("span [{tmin}, {tmax}] at epoch {epoch} is not the full range"));
                }
            }
        }
    }
    Ok("300 randomized cluster-size vectors".into())
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        total_epochs: 24,
        warmup_epochs: 8,
        horizon: 16,
        cluster_period: 4,
        checkpoint_every: 8,
        n_max: 200,
        imbalance_factor: 20.0,
        batch_size: 64,
        hidden_dims: vec![32],
        proj_dims: vec![16],
        test_per_class: 20,
        pool_per_class: 20,
        ..ExperimentConfig::default()
    }
}

fn c8_determinism(tmp: &Path) -> Outcome {
    let cfg = small_config();
    let data = tmp.join("c8/data.bin");
    commands::generate(&cfg, &data).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.join("c8/run_a"), tmp.join("c8/run_b"));
    for dir in [&a, &b] {
        commands::train(&cfg, &data, dir, None).map_err(|e| e.to_string())?;
    }
    let same = |name: &str| fs::read(a.join(name)).unwrap() == fs::read(b.join(name)).unwrap();
    check(
        same(HISTORY) && same(CHECKPOINT),
        "history.csv and checkpoint.bin byte-identical across two runs".into(),
        format!("history equal: {}, checkpoint equal: {}", same(HISTORY), same(CHECKPOINT)),
    )
}

#[derive(Default)]
struct Tails {
    tail: f64,
    range: f64,
}

fn c9_desk_direction(tmp: &Path) -> Outcome {
    let seeds = [0u64, 1, 2];
    let mut full = Tails::default();
    let mut base = Tails::default();
    let start = Instant::now();
    for &seed in &seeds {
        let mut cfg = ExperimentConfig::preset(Preset::Desk);
        cfg.seed = seed;
        cfg.data_seed = seed;
        let splits = commands::make_splits(&cfg).map_err(|e| e.to_string())?;
        for (mode, acc) in [(Mode::Baseline, &mut base), (Mode::Full, &mut full)] {
            let c = ExperimentConfig { mode, ..cfg.clone() };
            let dir = tmp.join(format!("c9/{}_{seed}", mode.name()));
            let report = commands::train_and_eval(&c, &splits, &dir).map_err(|e| e.to_string())?;
            let knn10 = report.get(KNN10).expect("KNN@10 reported");
            acc.tail += knn10.group_mean(Group::Tail).expect("tail group") / seeds.len() as f64;
            acc.range += knn10.range() / seeds.len() as f64;
        }
    }
    let margin = full.tail - base.tail;
    let summary = format!(
        "tail KNN@10 full {:.2} vs baseline {:.2} (margin {margin:+.2}); range full {:.2} vs baseline {:.2}; {:.0}s",
        full.tail,
        base.tail,
        full.range,
        base.range,
        start.elapsed().as_secs_f64()
    );
    if margin >= 2.0 && full.range < base.range {
        Ok(summary)
    } else if margin >= 0.0 {
        Ok(format!("{summary}; target margin +2.00 with lower range NOT met, passing on Full >= Baseline"))
    } else {
        Err(summary)
    }
}

/// Per-epoch parameter snapshots.
struct Snapshots(Vec<ModelParams<f32>>);

impl RunObserver<f32> for Snapshots {
    fn epoch_end(
        &mut self,
        params: &ModelParams<f32>,
        _opt: &OptimState<f32>,
        _record: &tase::EpochRecord,
    ) -> tase::Result<()> {
        self.0.push(params.clone());
        Ok(())
    }
}

/// Plain two-view contrastive training with nothing but the base loss.
fn reference_simclr(tc: &tase::TrainConfig, features: &Array2<f32>) -> ModelParams<f32> {
    let mut params = ModelParams::init(tc.mlp.clone(), &mut stream_rng(tc.seed, Stream::Init, 0)).unwrap();
    let mut opt = OptimState::new(&tc.mlp, tc.momentum, tc.weight_decay, tc.lr_schedule()).unwrap();
    let tau = tc.schedule.tau_base as f32;
    for epoch in 0..tc.total_epochs {
        let lr = opt.schedule.lr_at(epoch).unwrap() as f32;
        let mut rng = epoch_rng(tc.seed, epoch);
        let mut order: Vec<usize> = (0..features.nrows()).collect();
        order.shuffle(&mut rng);
        for ids in order.chunks_exact(tc.batch_size) {
            let x = make_batch(features.view(), ids, &tc.augment, &mut rng);
            let (v, cache) = params.forward(x.view()).unwrap();
            let loss = nt_xent(v.view(), &BatchPairing::new(ids.len()).unwrap(), tau).unwrap();
            let grads = params.backprop(&cache, loss.grad.view()).unwrap();
            sgd_step(&mut params, &grads, &mut opt, lr).unwrap();
        }
    }
    params
}

fn c10_ablation_lattice() -> Outcome {
    let cfg = small_config();
    let splits = commands::make_splits(&cfg).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for mode in Mode::ALL {
        let tc = ExperimentConfig { mode, ..cfg.clone() }.train_config().map_err(|e| e.to_string())?;
        let mut snaps = Snapshots(Vec::new());
        Trainer::new(tc, &splits.train).unwrap().run(&mut snaps).map_err(|e| e.to_string())?;
        runs.push((mode, snaps.0));
    }
    let tc = cfg.train_config().unwrap();
    let reference = reference_simclr(&tc, splits.train.features());
    let baseline = &runs[0].1;
    if baseline.last().unwrap() != &reference {
        return Err("baseline differs from the plain contrastive reference".into());
    }
    let b = cfg.warmup_epochs;
    for (mode, snaps) in &runs[1..] {
        if snaps[..b] != baseline[..b] {
            return Err(format!("{mode} differs from baseline before epoch B"));
        }
        if snaps[b..].iter().zip(&baseline[b..]).any(|(x, y)| x == y) {
            return Err(format!("{mode} matches baseline at some epoch >= B"));
        }
    }
    Ok(format!("baseline == reference bit for bit; tau/weight/full equal baseline for epochs < {b}, differ after"))
}

fn c11_eval_identities(tmp: &Path) -> Outcome {
    let mut rng = stream_rng(11, Stream::Probe, 0);
    for pair in 0..1000 {
        let pts = Array2::from_shape_simple_fn((3, 8), || rng.random_range(-1.0..1.0f64));
        let unit = normalize_rows(pts.view());
        let nn = nearest(unit.slice(ndarray::s![1.., ..]), unit.row(0).as_slice().unwrap(), 2);
        let cos = |i: usize| unit.row(0).dot(&unit.row(i));
        let by_cos = if cos(1) >= cos(2) { 0 } else { 1 };
        if nn[0].0 != by_cos {
            return Err(format!("pair {pair}: Euclidean and cosine order disagree"));
        }
    }

    let cfg = ExperimentConfig {
        total_epochs: 10,
        warmup_epochs: 4,
        horizon: 8,
        ..small_config()
    };
    let data = tmp.join("c11/data.bin");
    let run = tmp.join("c11/run");
    commands::generate(&cfg, &data).map_err(|e| e.to_string())?;
    commands::train(&cfg, &data, &run, None).map_err(|e| e.to_string())?;
    commands::eval(&cfg, commands::EvalSource::Run { dir: &run, data: &data }, &run).map_err(|e| e.to_string())?;
    let report: ReportJson = serde_json::from_str(&fs::read_to_string(run.join(REPORT)).unwrap()).unwrap();
    for b in &report.benchmarks {
        let total: u64 = b.per_class_total.iter().sum();
        let weighted = b
            .per_class_correct
            .iter()
            .zip(&b.per_class_total)
            .filter(|(_, &t)| t > 0)
            .map(|(&c, &t)| Ratio::new(c, t) * Ratio::new(t, total))
            .fold(Ratio::from_integer(0u64), |a, x| a + x);
        let overall = Ratio::new(b.per_class_correct.iter().sum::<u64>(), total);
        let as_float = 100.0 * *overall.numer() as f64 / *overall.denom() as f64;
        if weighted != overall || b.overall != as_float {
            return Err(format!("{}: overall {} vs weighted class mean {weighted}", b.name, b.overall));
        }
    }
    Ok(format!("1000 pairs ordered identically; overall == weighted class mean exactly for {} benchmarks", report.benchmarks.len()))
}

fn c12_probe_sanity() -> Outcome {
    let groups = vec![Group::Head; 2];
    let spec = ProbeSpec {
        regime: ProbeRegime::LtLp,
        fraction: 1.0,
        iterations: 500,
        probe_lr: 1.0,
        seed: 0,
    };
    let mut rng = stream_rng(12, Stream::Probe, 0);
    let mut separable = |n: usize| {
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            let side = if y[i] == 0 { -1.0 } else { 1.0 };
            if j == 0 {
                side * rng.random_range(0.1..1.0)
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        (x, y)
    };
    let (tx, ty) = separable(200);
    let (qx, qy) = separable(400);
    let sep = linear_probe::<f64>(tx.view(), &ty, qx.view(), &qy, 2, &groups, &spec).unwrap();
    if sep.report.overall() != 100.0 {
        return Err(format!("separable construction scored {:.2}%", sep.report.overall()));
    }
    let mut accs = Vec::new();
    for seed in 0..3u64 {
        let mut rng = stream_rng(seed, Stream::Probe, 12);
        let mut random_set = |n: usize| {
            let x = Array2::from_shape_simple_fn((n, 16), || rng.random_range(-1.0..1.0f64));
            let mut y: Vec<usize> = (0..n).map(|i| i % 2).collect();
            y.shuffle(&mut rng);
            (x, y)
        };
        let (tx, ty) = random_set(500);
        let (qx, qy) = random_set(2000);
        let (probe, _, _) = fit_probe(tx.view(), &ty, 2, 500, 1.0).unwrap();
        let hits = probe.predict(qx.view()).iter().zip(&qy).filter(|(p, y)| p == y).count();
        accs.push(100.0 * hits as f64 / qy.len() as f64);
    }
    check(
        accs.iter().all(|a| (a - 50.0).abs() <= 5.0),
        format!("separable 100%; shuffled-label accuracies {accs:.1?} within 50 +- 5"),
        format!("shuffled-label accuracies {accs:.1?}"),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion<'_>> = vec![
        ("count profile exact (CIFAR10-LT)", Box::new(c1_cifar10_counts)),
        ("count profile near-exact (CIFAR100-LT)", Box::new(c2_cifar100_counts)),
        ("reduction identity", Box::new(c3_reduction_identity)),
        ("gradient exactness", Box::new(c4_gradients)),
        ("gradient-ratio properties", Box::new(c5_grad_ratio)),
        ("k-means oracle", Box::new(c6_kmeans_oracle)),
        ("temperature schedule contracts", Box::new(c7_temperature_contracts)),
        ("determinism", Box::new(|| c8_determinism(tmp.path()))),
        ("desk-scale directional result", Box::new(|| c9_desk_direction(tmp.path()))),
        ("ablation lattice", Box::new(c10_ablation_lattice)),
        ("evaluation identities", Box::new(|| c11_eval_identities(tmp.path()))),
        ("probe sanity", Box::new(c12_probe_sanity)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
