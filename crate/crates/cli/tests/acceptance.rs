//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p shresnet-cli --test acceptance`. Criterion 7 trains
//! three folds of the full phantom and dominates the runtime.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shresnet_core::dti::{fa, fit_tensor, md, DiffusionTensor};
use shresnet_core::dwi::PATCH_VOXELS;
use shresnet_core::evaluation::{cross_validate, wilcoxon_signed_rank, CvConfig, Method, Quantity, TissueName};
use shresnet_core::io::PairedSubject;
use shresnet_core::model::{NetworkParams, NetworkSpec, SHARD};
use shresnet_core::nn::{Graph, NdTensor, Optimizer, OptimizerKind};
use shresnet_core::phantom::{generate_subject, repulsion_directions, PhantomConfig};
use shresnet_core::rish::{rish_features, rish_project};
use shresnet_core::sh::{basis_row, fit_sh, ShBasisSpec, ShCoefficients};
use shresnet_core::training::{loss_and_grads, run_schedule, EpochRunner, StopReason, TrainConfig};

/// Epoch cap for the end-to-end phantom run (5 Adam epochs + 1 SGD epoch).
const E2E_MAX_EPOCHS: usize = 6;
const E2E_HIDDEN: usize = 32;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_unit(r: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn c2_sh_round_trip() -> Check {
    let start = Instant::now();
    let mut r = rng(2);
    let dirs: Vec<[f64; 3]> = (0..60).map(|_| random_unit(&mut r)).collect();
    let exact = ShBasisSpec::new(4, 0.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c: Vec<f64> = (0..15).map(|_| r.random_range(-1.0..1.0)).collect();
        let s: Vec<f64> = dirs
            .iter()
            .map(|&d| basis_row(4, d).iter().zip(&c).map(|(b, c)| b * c).sum())
            .collect();
        let fit = fit_sh(&s, &dirs, &exact).map_err(|e| e.to_string())?;
        worst = fit.values.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure!(worst <= 1e-8, "band-limited coefficient error {worst:e}");
    let one = fit_sh(&vec![1.0; 60], &dirs, &exact).unwrap();
    let c0_err = (one.values[0] - 2.0 * std::f64::consts::PI.sqrt()).abs();
    let rest = one.values[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure!(c0_err <= 1e-10 && rest <= 1e-10, "constant signal: c0 error {c0_err:e}, others {rest:e}");
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(1), "took {t:?}");
    Ok(format!("max coef err {worst:.1e}, c0 err {c0_err:.1e}, {t:.2?}"))
}

fn c3_gradients() -> Check {
    let start = Instant::now();
    let mut p = NetworkParams::build(NetworkSpec::shresnet(2, 32), 3).unwrap();
    // randomize the zero-initialized layers too so every path carries gradient
    let mut r = rng(33);
    for t in &mut p.tensors {
        let fan: usize = t.shape().iter().skip(1).product::<usize>().max(1);
        let b = (1.0 / fan as f64).sqrt();
        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-b..b));
    }
    let (n, nd) = (4, 30);
    let patches: Vec<f64> = (0..n * 15 * PATCH_VOXELS).map(|_| r.random_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..n * nd).map(|_| r.random_range(-1.0..1.0)).collect();
    let dirs = repulsion_directions(nd, 0);
    let mut bt = vec![0.0; 15 * nd];
    for (j, d) in dirs.iter().enumerate() {
        for (c, v) in basis_row(4, *d).into_iter().enumerate() {
            bt[c * nd + j] = v;
        }
    }
    let basis = Arc::new(NdTensor::new(vec![15, nd], bt.clone()).unwrap());
    let (_, analytic) = loss_and_grads(&p, &patches, &target, &basis, n).map_err(|e| e.to_string())?;
    let loss = |q: &NetworkParams| {
        let pred = q.predict(&patches, n).unwrap();
        let mut acc = 0.0;
        for s in 0..n {
            for j in 0..nd {
                let y: f64 = (0..15).map(|c| pred[s * 15 + c] * bt[c * nd + j]).sum();
                acc += (y - target[s * nd + j]).powi(2);
            }
        }
        acc / (n * nd) as f64
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
    let mut coords = Vec::new();
    for (t, tensor) in p.tensors.iter().enumerate() {
        for _ in 0..16 {
            coords.push((t, r.random_range(0..tensor.len())));
        }
    }
    let mut q = p.clone();
    let mut errors = Vec::new();
    let mut stepped_down = 0;
    for &(t, i) in &coords {
        let orig = q.tensors[t].data()[i];
        let mut central = |h: f64| {
            q.tensors[t].data_mut()[i] = orig + h;
            let up = loss(&q);
            q.tensors[t].data_mut()[i] = orig - h;
            let down = loss(&q);
            q.tensors[t].data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        };
        let a = analytic[t][i];
        let mut num = central(1e-3);
        if rel(a, num) > 1e-6 {
            // along one weight the loss is piecewise quadratic, so a central
            // difference is exact unless its stencil straddles a ReLU kink;
            // take the largest step whose half-step difference agrees
            for h in [1e-3, 1e-4, 1e-5, 1e-6] {
                let d = central(h);
                if rel(d, central(h / 2.0)) <= 1e-7 || h == 1e-6 {
                    if h < 1e-3 {
                        stepped_down += 1;
                    }
                    num = d;
                    break;
                }
            }
        }
        errors.push(rel(a, num));
    }
    errors.sort_by(f64::total_cmp);
    let p95 = errors[(errors.len() - 1) * 95 / 100];
    let max = *errors.last().unwrap();
    let t = start.elapsed();
    ensure!(max <= 1e-3 && p95 <= 1e-4, "rel err max {max:e}, p95 {p95:e}");
    ensure!(t < Duration::from_secs(30), "took {t:?}");
    Ok(format!(
        "{} coords, max {max:.1e}, p95 {p95:.1e} ({stepped_down} stencils straddled a kink at h=1e-3 and used a smaller step), {t:.1?}",
        errors.len()
    ))
}

fn c4_residual_identity() -> Check {
    let mut p = NetworkParams::build(NetworkSpec::shresnet(2, 8), 4).unwrap();
    let mut r = rng(4);
    for (name, t) in p.names.iter().zip(&mut p.tensors) {
        let zero = name.starts_with("block.");
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = if zero { 0.0 } else { r.random_range(-0.3..0.3) });
    }
    let n = 1000;
    let plen = 15 * PATCH_VOXELS;
    let patches: Vec<f64> = (0..n * plen).map(|_| r.random_range(-1.0..1.0)).collect();
    let got = p.predict(&patches, n).map_err(|e| e.to_string())?;
    // the same network with both ResBlocks removed, same shard partition
    let t = |name: &str| p.get(name).unwrap().clone();
    let mut expect = Vec::with_capacity(n * 15);
    for chunk in patches.chunks(SHARD * plen) {
        let m = chunk.len() / plen;
        let mut g = Graph::new();
        let x = g.constant(p.input_tensor(chunk, m).unwrap());
        let (pw, pb) = (g.constant(t("pre.0.weight")), g.constant(t("pre.0.bias")));
        let (qw, qb) = (g.constant(t("post.0.weight")), g.constant(t("post.0.bias")));
        let (rw, rb) = (g.constant(t("reduce.0.weight")), g.constant(t("reduce.0.bias")));
        let pre = g.conv3d(x, pw, pb, 1).unwrap();
        let post = g.conv3d(pre, qw, qb, 1).unwrap();
        let d = g.sub(pre, post).unwrap();
        let y = g.conv3d(d, rw, rb, 0).unwrap();
        expect.extend_from_slice(g.value(y).data());
    }
    ensure!(got == expect, "zeroed ResBlocks changed the output");
    Ok(format!("{n} inputs bit-identical through 2 zeroed ResBlocks"))
}

fn c5_rish_projection() -> Check {
    let mut r = rng(5);
    let blocks = [0..1, 1..6, 6..15];
    let (mut worst_e, mut worst_cos) = (0.0f64, 0.0f64);
    let mut degenerate_seen = 0;
    for trial in 0..10_000 {
        let mut a: Vec<f64> = (0..15).map(|_| r.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..15).map(|_| r.random_range(-1.0..1.0)).collect();
        let zeroed = if trial % 10 == 0 { Some(trial / 10 % 3) } else { None };
        if let Some(k) = zeroed {
            a[blocks[k].clone()].iter_mut().for_each(|v| *v = 0.0);
        }
        let proj = rish_project(&ShCoefficients::new(4, a.clone()).unwrap(), &ShCoefficients::new(4, h.clone()).unwrap())
            .map_err(|e| e.to_string())?;
        let rh = rish_features(&ShCoefficients::new(4, h).unwrap());
        let rp = rish_features(&proj.coeffs);
        for (k, b) in blocks.iter().enumerate() {
            let x = &a[b.clone()];
            let y = &proj.coeffs.values[b.clone()];
            if Some(k) == zeroed {
                ensure!(y.iter().all(|&v| v == 0.0), "degenerate block not zeroed");
                continue;
            }
            worst_e = worst_e.max((rp.values[k] - rh.values[k]).abs());
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny);
            worst_cos = worst_cos.max(1.0 - cos);
        }
        ensure!(
            proj.degenerate_orders == usize::from(zeroed.is_some()),
            "warning count {} for trial {trial}",
            proj.degenerate_orders
        );
        degenerate_seen += proj.degenerate_orders;
    }
    ensure!(worst_e <= 1e-10, "RISH mismatch {worst_e:e}");
    ensure!(worst_cos <= 1e-12, "cosine deficit {worst_cos:e}");
    Ok(format!(
        "10000 pairs, RISH err {worst_e:.1e}, 1-cos {worst_cos:.1e}, {degenerate_seen} degenerate warnings"
    ))
}

struct Scripted {
    curve: Vec<f64>,
    epoch: usize,
    seen: Vec<(usize, OptimizerKind, usize)>,
}

impl EpochRunner for Scripted {
    type Snapshot = usize;

    fn train_epoch(&mut self, epoch: usize, opt: &mut Optimizer, batch: usize) -> shresnet_core::Result<f64> {
        self.epoch = epoch;
        self.seen.push((epoch, opt.kind, batch));
        Ok(1.0)
    }

    fn validation_loss(&mut self) -> shresnet_core::Result<f64> {
        Ok(self.curve[(self.epoch - 1).min(self.curve.len() - 1)])
    }

    fn snapshot(&self) -> usize {
        self.epoch
    }
}

fn c6_schedule() -> Check {
    let mut runner = Scripted {
        curve: vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5],
        epoch: 0,
        seen: Vec::new(),
    };
    let (best, log) = run_schedule(&mut runner, &TrainConfig::default()).map_err(|e| e.to_string())?;
    for (epoch, kind, batch) in &runner.seen {
        let (k, b) = if *epoch <= 5 { (OptimizerKind::Adam, 256) } else { (OptimizerKind::Sgd, 128) };
        ensure!(*kind == k && *batch == b, "epoch {epoch}: {kind:?} batch {batch}");
    }
    let decays: Vec<usize> = log.records.iter().filter(|r| r.lr_decayed).map(|r| r.epoch).collect();
    ensure!(decays == vec![11], "decays after epochs {decays:?}");
    ensure!(log.records[10].lr == 0.001 && log.records[11].lr == 0.001 * 0.9, "lr not decayed by 0.9");
    ensure!(log.records.len() == 16, "stopped after {} epochs", log.records.len());
    ensure!(log.stop_reason == Some(StopReason::NoImprovement), "stop reason {:?}", log.stop_reason);
    ensure!(best == 6 && log.best_epoch == 6, "returned epoch {best}");
    Ok("Adam/256 -> SGD/128 after epoch 5, lr x0.9 after epoch 11, stop at 16, best epoch 6 returned".into())
}

fn enumerated_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let rank = |v: f64| {
        let below = abs.iter().filter(|&&a| a < v).count() as f64;
        let equal = abs.iter().filter(|&&a| a == v).count() as f64;
        below + (equal + 1.0) / 2.0
    };
    let ranks: Vec<f64> = abs.iter().map(|&v| rank(v)).collect();
    let total: f64 = ranks.iter().sum();
    let wp: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let w = wp.min(total - wp);
    let hits = (0u32..1 << n)
        .filter(|m| (0..n).filter(|i| m >> i & 1 == 1).map(|i| ranks[i]).sum::<f64>() <= w + 1e-9)
        .count();
    (2.0 * hits as f64 / f64::from(1u32 << n)).min(1.0)
}

fn c9_wilcoxon() -> Check {
    let mut r = rng(9);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let n = 1 + trial % 10;
        let a: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..8u8))).collect();
        let b: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..8u8))).collect();
        let res = wilcoxon_signed_rank(&a, &b).map_err(|e| e.to_string())?;
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        if res.degenerate {
            ensure!(res.p_value == 1.0, "degenerate p {}", res.p_value);
            continue;
        }
        worst = worst.max((res.p_value - enumerated_p(&d)).abs());
    }
    ensure!(worst <= 1e-12, "exact p differs from enumeration by {worst:e}");
    let five = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
    ensure!(five.p_value == 0.0625, "n=5 all positive: p {}", five.p_value);
    Ok(format!("200 samples, max |p - enumeration| {worst:.1e}, n=5 p=0.0625"))
}

fn c10_dti() -> Check {
    let mut r = rng(10);
    let dirs = repulsion_directions(30, 0);
    let bvals = vec![1000.0; 30];
    let (mut inv, mut fit_err) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let eig = [r.random_range(0.1e-3..3e-3), r.random_range(0.1e-3..3e-3), r.random_range(0.1e-3..3e-3)];
        let axis = Unit::new_normalize(Vector3::from(random_unit(&mut r)));
        let rot = Rotation3::from_axis_angle(&axis, r.random_range(0.0..std::f64::consts::TAU));
        let m = rot.matrix() * nalgebra::Matrix3::from_diagonal(&Vector3::from(eig)) * rot.matrix().transpose();
        let base = DiffusionTensor::diag(eig[0], eig[1], eig[2]);
        let turned = DiffusionTensor::from_matrix(&m);
        inv = inv.max((fa(&base) - fa(&turned)).abs()).max((md(&base) - md(&turned)).abs());
        let att: Vec<f64> = dirs.iter().map(|&g| turned.attenuation(1000.0, g)).collect();
        let got = fit_tensor(&att, &bvals, &dirs).map_err(|e| e.to_string())?;
        fit_err = got.elements.iter().zip(&turned.elements).map(|(a, b)| (a - b).abs()).fold(fit_err, f64::max);
    }
    ensure!(inv <= 1e-9, "rotation changed FA/MD by {inv:e}");
    ensure!(fit_err <= 1e-8, "noise-free fit error {fit_err:e}");
    let (l1, l2, l3): (f64, f64, f64) = (1.7e-3, 0.3e-3, 0.3e-3);
    let oracle = ((l1 - l2).powi(2) + (l2 - l3).powi(2) + (l3 - l1).powi(2)).sqrt()
        / (2.0 * (l1 * l1 + l2 * l2 + l3 * l3)).sqrt();
    let got = fa(&DiffusionTensor::diag(l1, l2, l3));
    ensure!((got - oracle).abs() <= 1e-6, "FA {got} vs closed form {oracle}");
    Ok(format!("invariance {inv:.1e}, fit err {fit_err:.1e}, FA {got:.6} (closed form {oracle:.6})"))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shresnet"))
}

fn run(mut c: Command) -> Result<(), String> {
    let out = c.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{:?}: {}", c, String::from_utf8_lossy(&out.stderr)))
    }
}

/// Relative path → bytes of every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Full phantom → train → harmonize → evaluate pipeline in `dir`.
fn pipeline(dir: &Path, threads: usize) -> Result<(), String> {
    let t = threads.to_string();
    let config = dir.join("phantom.json");
    std::fs::write(&config, r#"{"dims": [8, 8, 8], "n_subjects": 4}"#).map_err(|e| e.to_string())?;
    let data = dir.join("data");
    let mut c = bin();
    c.args(["--threads", &t, "phantom", "--seed", "11", "--config"]).arg(&config).arg("--out").arg(&data);
    run(c)?;
    let manifest = data.join("manifest.json");
    let small = ["--resblocks", "1", "--hidden", "4", "--golkov-hidden", "20", "--max-epochs", "2", "--stage1-epochs", "1", "--seed", "3"];
    let model = dir.join("model").join("m.ckpt");
    let mut c = bin();
    c.args(["--threads", &t, "train", "--val", "sub-01", "--exclude", "sub-03", "--pairs"])
        .arg(&manifest)
        .args(small)
        .arg("--out")
        .arg(&model);
    run(c)?;
    let mut c = bin();
    c.args(["--threads", &t, "harmonize", "--checkpoint"])
        .arg(&model)
        .arg("--dwi")
        .arg(data.join("sub-03").join("scanner_a.raw"))
        .arg("--mask")
        .arg(data.join("sub-03").join("mask.raw"))
        .arg("--out")
        .arg(dir.join("harmonized").join("sub-03.raw"));
    run(c)?;
    let mut c = bin();
    c.args(["--threads", &t, "evaluate", "--folds", "3", "--pairs"])
        .arg(&manifest)
        .args(small)
        .arg("--out")
        .arg(dir.join("report").join("eval.json"))
        .arg("--csv")
        .arg(dir.join("report").join("eval.csv"));
    run(c)
}

fn c11_determinism() -> Check {
    let runs: Vec<(usize, tempfile::TempDir)> = [1, 1, 4].into_iter().map(|t| (t, tempfile::tempdir().unwrap())).collect();
    for (threads, dir) in &runs {
        pipeline(dir.path(), *threads)?;
    }
    let snaps: Vec<_> = runs.iter().map(|(_, d)| snapshot(d.path())).collect();
    for stage in ["data", "model", "harmonized", "report"] {
        let pick = |s: &BTreeMap<String, Vec<u8>>| -> Vec<(String, Vec<u8>)> {
            s.iter().filter(|(k, _)| k.starts_with(stage)).map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        let first = pick(&snaps[0]);
        ensure!(!first.is_empty(), "{stage}: no outputs");
        for (i, s) in snaps.iter().enumerate().skip(1) {
            ensure!(pick(s) == first, "{stage}: run {i} (--threads {}) differs", runs[i].0);
        }
    }
    Ok(format!(
        "phantom/train/harmonize/evaluate outputs ({} files) byte-identical over --threads 1, 1, 4",
        snaps[0].len()
    ))
}

struct E2e {
    elapsed: Duration,
    report: shresnet_core::evaluation::EvalReport,
}

fn e2e_run() -> Result<E2e, String> {
    let cfg = PhantomConfig::default();
    let subjects: Vec<PairedSubject> = (0..cfg.n_subjects)
        .map(|i| {
            let s = generate_subject(&cfg, i).unwrap();
            PairedSubject {
                id: s.id,
                source: s.scanner_a,
                target: s.scanner_b,
                mask: s.mask,
            }
        })
        .collect();
    let cv = CvConfig {
        folds: 3,
        shresnet: NetworkSpec::shresnet(2, E2E_HIDDEN),
        train: TrainConfig {
            max_epochs: E2E_MAX_EPOCHS,
            ..TrainConfig::default()
        },
        ..CvConfig::default()
    };
    let start = Instant::now();
    let report = cross_validate(&subjects, &cv).map_err(|e| e.to_string())?;
    Ok(E2e {
        elapsed: start.elapsed(),
        report,
    })
}

fn c7_phantom(e: &E2e) -> Check {
    let r = &e.report;
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (tissue, needed) in [(TissueName::White, 20.0), (TissueName::Grey, 10.0)] {
        let unh = r.mean(tissue, Quantity::Signal, Method::Unharmonized);
        let shr = r.mean(tissue, Quantity::Signal, Method::Shresnet);
        let red = 100.0 * (1.0 - shr / unh);
        parts.push(format!("{} signal -{red:.1}%", tissue.name()));
        if red < needed {
            failures.push(format!("{} signal reduction {red:.1}% < {needed}%", tissue.name()));
        }
        for q in [Quantity::Fa, Quantity::Md] {
            let (u, s) = (r.mean(tissue, q, Method::Unharmonized), r.mean(tissue, q, Method::Shresnet));
            parts.push(format!("{} {} {:.2e}->{:.2e}", tissue.name(), q.name(), u, s));
            if s >= u {
                failures.push(format!("{} {} NMSE not lower ({s:e} vs {u:e})", tissue.name(), q.name()));
            }
        }
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mins = e.elapsed.as_secs_f64() / 60.0;
    let timing = if cores >= 4 {
        if mins > 20.0 {
            failures.push(format!("took {mins:.1} min on {cores} cores"));
        }
        format!("{mins:.1} min on {cores} cores")
    } else {
        format!("{mins:.1} min on {cores} core(s); 20 min/4-core bound not assessable here")
    };
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    Ok(format!("{}; {timing}", parts.join(", ")))
}

fn c8_baseline(e: &E2e) -> Check {
    let r = &e.report;
    let mut parts = Vec::new();
    for tissue in [TissueName::White, TissueName::Grey] {
        let s = r.mean(tissue, Quantity::Signal, Method::Shresnet);
        let g = r.mean(tissue, Quantity::Signal, Method::Golkov);
        ensure!(s <= g, "{}: SHResNet {s:e} > baseline {g:e}", tissue.name());
        parts.push(format!("{} {s:.2e} <= {g:.2e}", tissue.name()));
    }
    Ok(parts.join(", "))
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, result: Check| {
        match &result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    };
    println!(
        "criterion  1 N/A   clinical NMSE values: the two-scanner dataset is not distributed; criteria 2-11 stand in"
    );
    report(2, "SH round trip", guarded(c2_sh_round_trip));
    report(3, "gradient check", guarded(c3_gradients));
    report(4, "residual identity", guarded(c4_residual_identity));
    report(5, "RISH projection", guarded(c5_rish_projection));
    report(6, "schedule contract", guarded(c6_schedule));
    report(9, "Wilcoxon exact p", guarded(c9_wilcoxon));
    report(10, "DTI metrics", guarded(c10_dti));
    report(11, "determinism", guarded(c11_determinism));
    let e2e = catch_unwind(e2e_run).unwrap_or_else(|_| Err("panicked".into()));
    match &e2e {
        Ok(e) => {
            report(7, "end-to-end phantom", guarded(|| c7_phantom(e)));
            report(8, "baseline ordering", guarded(|| c8_baseline(e)));
        }
        Err(why) => {
            report(7, "end-to-end phantom", Err(why.clone()));
            report(8, "baseline ordering", Err(why.clone()));
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
