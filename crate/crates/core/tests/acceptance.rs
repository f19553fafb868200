//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.

use std::fs;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgbd_inpaint::cli::{cmd_ablate, cmd_gen_data, AblateArgs, GenDataArgs, OptimArgs};
use rgbd_inpaint::data::{rect_masks, Dataset};
use rgbd_inpaint::gradcheck::{double_backprop_suite, emd_brute_force, gradient_suite, metric_suite, ssim_direct, GradcheckConfig};
use rgbd_inpaint::metrics::{depth_metrics, emd_1d, evaluation_masks, psnr, psnr_from_mse, ssim, METRIC_NAMES};
use rgbd_inpaint::models::{build_critic, CriticConfig, CriticScope, FusionVariant, MaskRect};
use rgbd_inpaint::objectives::gradient_penalty;
use rgbd_inpaint::tensor::finite_difference_gradient;
use rgbd_inpaint::trainer::{estimate_w1_1d, loss_log_csv, TrainConfig, Trainer, W1Config};
use rgbd_inpaint::{grad, no_grad, DType, Error, Tensor};

/// Criteria run one at a time so wall-clock limits measure a single job.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, ok: bool, detail: &str) {
    println!("criterion {n:>2} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
}

fn snapshot(tr: &Trainer) -> [Vec<(String, Vec<f64>)>; 3] {
    tr.parameter_snapshot()
}

#[test]
fn c01_gradient_suite() {
    let _guard = serial();
    let start = Instant::now();
    let cfg = GradcheckConfig::for_dtype(DType::F64);
    let r = gradient_suite::<f64>(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = r.results.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let min_cases = r.results.iter().map(|c| c.cases).min().unwrap();
    let ok = r.passed() && min_cases >= 20 && secs <= 120.0;
    report(
        1,
        "gradient suite",
        ok,
        &format!("{} ops, >= {min_cases} shapes each, worst rel err {worst:.2e} <= 1e-4, {secs:.1}s", r.results.len()),
    );
    assert!(ok, "{:?}", r.first_failure());
}

/// `lambda * mean (||grad_x D||_2 - 1)^2` evaluated with one parameter swapped out.
fn penalty_with(critic: &rgbd_inpaint::models::CriticModel<f64>, x_hat: &Tensor<f64>, name: &str, value: &Tensor<f64>) -> rgbd_inpaint::Result<Tensor<f64>> {
    let mut store = critic.params.clone();
    store.replace(name, value.clone())?;
    let c = critic.with_params(store);
    rgbd_inpaint::with_grad_mode(true, || gradient_penalty(&c, &x_hat.detach().into_leaf(true), 10.0))
}

#[test]
fn c02_double_backprop() {
    let _guard = serial();
    let critic = build_critic::<f64>(&CriticConfig { scope: CriticScope::Local, input_size: 8, base_channels: 2, seed: 5 }).unwrap();
    let count = critic.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..2 * 4 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x_hat = Tensor::from_vec(x, &[2, 4, 8, 8]).unwrap().into_leaf(true);
    let gp = gradient_penalty(&critic, &x_hat, 10.0).unwrap();
    let names: Vec<String> = critic.params.names().map(str::to_string).collect();
    let analytic = grad(&gp, &critic.params.tensors(), false);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let weights: Vec<&String> = names.iter().filter(|n| n.ends_with(".weight")).collect();
    for name in &weights {
        let p = critic.params.get(name).unwrap();
        let a = grad(&gradient_penalty(&critic, &x_hat, 10.0).unwrap(), std::slice::from_ref(p), false).unwrap().remove(0);
        let numeric = finite_difference_gradient(|v| penalty_with(&critic, &x_hat, name, v), p, 1e-6).unwrap();
        let diff: f64 = a.data().iter().zip(numeric.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / norm);
        checked += p.numel();
    }
    // biases of a piecewise-linear critic do not enter its input gradient
    let bias_disconnected = matches!(analytic, Err(Error::Disconnected { .. }));

    let w = Tensor::parameter(vec![3.0, 4.0], &[2, 1]).unwrap();
    let linear = |x: &Tensor<f64>| x.matmul(&w)?.reshape(&[x.shape()[0]]);
    let pts = Tensor::from_vec(vec![0.3, -0.2, 1.0, 2.0, -1.5, 0.25], &[3, 2]).unwrap().into_leaf(true);
    let gp = gradient_penalty(&linear, &pts, 10.0).unwrap();
    let gw = grad(&gp, std::slice::from_ref(&w), false).unwrap().remove(0);
    let lin_err = [(gp.item().unwrap(), 160.0), (gw.data()[0], 48.0), (gw.data()[1], 64.0)]
        .iter()
        .map(|(g, e)| (g - e).abs())
        .fold(0.0, f64::max);

    let suite = double_backprop_suite::<f64>(&GradcheckConfig::for_dtype(DType::F64)).unwrap();
    let ok = count <= 1000 && worst <= 1e-3 && bias_disconnected && lin_err <= 1e-9 && suite.passed();
    report(
        2,
        "double backprop",
        ok,
        &format!(
            "critic {count} params, {checked} weights checked, rel err {worst:.2e} <= 1e-3; linear case err {lin_err:.1e}; second-order suite {}",
            if suite.passed() { "ok" } else { "failed" }
        ),
    );
    assert!(ok);
}

#[test]
fn c03_algorithm_fidelity() {
    let _guard = serial();
    let data = Dataset::synthetic(8, 32, 3).unwrap();
    let cfg = TrainConfig { image_size: 32, base_channels: 4, batch_size: 4, total_iters: 50, seed: 9, ..Default::default() };
    let mut manual = Trainer::new(cfg.clone()).unwrap();
    let (mut isolation, mut preserved) = (true, true);
    for _ in 0..50 {
        for _ in 0..cfg.critic_iters {
            let batch = manual.sample_batch(&data, true).unwrap();
            let [g0, ..] = snapshot(&manual);
            manual.critic_step(&batch).unwrap();
            let [g1, ..] = snapshot(&manual);
            isolation &= g0 == g1;
        }
        let batch = manual.sample_batch(&data, false).unwrap();
        let [_, c0, l0] = snapshot(&manual);
        let (z_c, z_d) = batch.masked().unwrap();
        let (fc, fd) = manual.inpaint(&z_c, &z_d, &batch.m).unwrap();
        for (f, x, ch) in [(&fc, &batch.x_c, 3), (&fd, &batch.x_d, 1)] {
            let n = 32 * 32;
            for (i, (a, b)) in f.data().iter().zip(x.data()).enumerate() {
                let (bi, p) = (i / (ch * n), i % n);
                if batch.m.data()[bi * n + p] == 1.0 {
                    preserved &= a == b;
                }
            }
        }
        manual.generator_step(&batch, true).unwrap();
        manual.iter += 1;
        let [_, c1, l1] = snapshot(&manual);
        isolation &= c0 == c1 && l0 == l1;
    }
    let mut lib = Trainer::new(cfg).unwrap();
    lib.run(&data, 50, None).unwrap();
    let counters = lib.counters;
    let same_as_manual = snapshot(&lib) == snapshot(&manual);
    let ok = counters.critic_updates == 250 && counters.generator_updates == 50 && isolation && preserved && same_as_manual;
    report(
        3,
        "training-loop fidelity",
        ok,
        &format!(
            "{} critic / {} generator updates over 50 iterations; isolation {isolation}; known pixels preserved {preserved}; loop matches step-by-step {same_as_manual}",
            counters.critic_updates, counters.generator_updates
        ),
    );
    assert!(ok);
}

/// Mean |raw output - ground truth| over hole pixels of all channels, in
/// normalized units.
fn hole_l1(tr: &Trainer, data: &Dataset, masks: &[MaskRect]) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x_c, x_d) = data.batch::<f64>(&idx).unwrap();
    let m = rect_masks::<f64>(masks, data.size).unwrap();
    let (z_c, z_d) = (x_c.mul(&m).unwrap(), x_d.mul(&m).unwrap());
    let (rc, rd) = no_grad(|| tr.generator.forward(&z_c, &z_d, &m)).unwrap();
    let n = data.size * data.size;
    let (mut sum, mut count) = (0.0, 0.0);
    for b in 0..data.len() {
        for p in 0..n {
            if m.data()[b * n + p] == 0.0 {
                for c in 0..3 {
                    let i = (b * 3 + c) * n + p;
                    sum += (rc.data()[i] - x_c.data()[i]).abs();
                }
                sum += (rd.data()[b * n + p] - x_d.data()[b * n + p]).abs();
                count += 4.0;
            }
        }
    }
    sum / count
}

#[test]
fn c04_overfit() {
    let _guard = serial();
    let start = Instant::now();
    let data = Dataset::synthetic(8, 64, 0).unwrap();
    let masks = evaluation_masks(0, 8, 64).unwrap();
    let mut cfg = TrainConfig {
        image_size: 64,
        base_channels: 4,
        batch_size: 8,
        total_iters: 2000,
        content_only_warmup_iters: 2000,
        seed: 0,
        ..Default::default()
    };
    cfg.weights.beta_adv = 0.0;
    let mut tr = Trainer::new(cfg).unwrap();
    let before = hole_l1(&tr, &data, &masks);
    tr.run(&data, 2000, None).unwrap();
    let after = hole_l1(&tr, &data, &masks);
    let secs = start.elapsed().as_secs_f64();
    let ratio = after / before;
    let ok = ratio <= 0.2 && tr.counters.critic_updates == 0 && secs <= 900.0;
    report(
        4,
        "overfit",
        ok,
        &format!("hole l1 {before:.4} -> {after:.4} (ratio {ratio:.3} <= 0.2) in {secs:.0}s"),
    );
    assert!(ok);
}

#[test]
fn c05_adversarial_smoke() {
    let _guard = serial();
    let data = Dataset::synthetic(8, 64, 1).unwrap();
    let cfg = TrainConfig { image_size: 64, base_channels: 4, batch_size: 4, total_iters: 500, seed: 2, ..Default::default() };
    assert_eq!(cfg.weights.lambda_gp, 10.0);
    let mut tr = Trainer::new(cfg).unwrap();
    let result = tr.run(&data, 500, None);
    let finite = tr.log.iter().all(|r| r.all_finite());
    let gp_ok = tr.log.iter().all(|r| r.gp_global >= 0.0 && r.gp_local >= 0.0);
    let ok = result.is_ok() && tr.log.len() == 500 && finite && gp_ok;
    let last = tr.log.last().cloned();
    report(
        5,
        "adversarial smoke",
        ok,
        &format!("{} iterations, losses finite {finite}, penalties >= 0 {gp_ok}, last {last:?}", tr.log.len()),
    );
    assert!(ok, "{result:?}");
}

#[test]
fn c06_metric_oracles() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_direct = 0.0f64;
    let mut worst_analytic = 0.0f64;

    worst_analytic = worst_analytic.max((psnr_from_mse(0.01, 1.0).unwrap() - 20.0).abs());
    let d = depth_metrics(&[4.0; 9], &[2.0; 9], 1e-3, None).unwrap();
    worst_analytic = worst_analytic.max((d.abs_rel - 1.0).abs()).max((d.rmse_log - 2f64.ln()).abs());

    for _ in 0..10 {
        let a: Vec<f64> = (0..3 * 256).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..3 * 256).map(|_| rng.gen()).collect();
        let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
        worst_direct = worst_direct.max((psnr(&a, &b, 256, 1.0, None).unwrap() - 10.0 * (1.0 / mse).log10()).abs());

        let x: Vec<f64> = (0..256).map(|_| rng.gen()).collect();
        let y: Vec<f64> = x.iter().map(|v| (v + rng.gen_range(-0.3..0.3)).clamp(0.0, 1.0)).collect();
        worst_direct = worst_direct.max((ssim(&x, &y, 16, None).unwrap() - ssim_direct(&x, &y, 16)).abs());

        let p: Vec<f64> = (0..100).map(|_| rng.gen_range(0.1..10.0)).collect();
        let g: Vec<f64> = (0..100).map(|_| rng.gen_range(0.1..10.0)).collect();
        let d = depth_metrics(&p, &g, 1e-3, None).unwrap();
        let n = 100.0;
        let direct = [
            p.iter().zip(&g).map(|(p, g)| (p - g).abs() / g).sum::<f64>() / n,
            p.iter().zip(&g).map(|(p, g)| (p - g).powi(2) / g).sum::<f64>() / n,
            (p.iter().zip(&g).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n).sqrt(),
            (p.iter().zip(&g).map(|(p, g)| (p.ln() - g.ln()).powi(2)).sum::<f64>() / n).sqrt(),
        ];
        for (got, want) in [d.abs_rel, d.sq_rel, d.rmse, d.rmse_log].iter().zip(direct) {
            worst_direct = worst_direct.max((got - want).abs());
        }
    }
    let suite = metric_suite(6).unwrap();
    let ok = worst_direct <= 1e-6 && worst_analytic <= 1e-9 && suite.passed();
    report(
        6,
        "metric oracles",
        ok,
        &format!("direct-formula err {worst_direct:.1e} <= 1e-6, analytic err {worst_analytic:.1e} <= 1e-9"),
    );
    assert!(ok);
}

#[test]
fn c07_emd_oracle() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=6);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        worst = worst.max((emd_1d(&a, &b).unwrap() - emd_brute_force(&a, &b)).abs());
    }
    // sums of the same terms in a different order may differ in the last ulp
    let ok = worst <= 1e-12;
    report(7, "emd oracle", ok, &format!("100 trials, max |emd - brute force| = {worst:.1e}"));
    assert!(ok);
}

#[test]
fn c08_critic_wasserstein_estimate() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..32).map(|_| rng.gen_range(1.0..4.0)).collect();
    let w = emd_1d(&a, &b).unwrap();
    let est = estimate_w1_1d(&a, &b, &W1Config { steps: 2000, seed: 8, ..Default::default() }).unwrap();
    let rel = (est.estimate - w).abs() / w;
    let ok = rel <= 0.2;
    report(
        8,
        "critic wasserstein estimate",
        ok,
        &format!("-critic loss {:.4} vs emd {w:.4} (rel err {rel:.3} <= 0.2)", est.estimate),
    );
    assert!(ok);
}

#[test]
fn c09_ablation_harness() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_gen_data(&GenDataArgs { out: data.clone(), count: 8, size: 32, seed: 4 }).unwrap();
    let args = AblateArgs {
        data,
        iters: 2000,
        seed: 4,
        out: dir.path().join("ablate"),
        optim: OptimArgs {
            batch: 4,
            lr: 1e-3,
            base_channels: 4,
            critic_iters: 5,
            lambda_gp: 10.0,
            beta_adv: 0.001,
            alpha: 1.0,
            warmup: 0,
        },
    };
    let result = cmd_ablate(&args);
    let csv = fs::read_to_string(args.out.join("ablation.csv")).unwrap_or_default();
    let rows: Vec<Vec<String>> = csv.lines().map(|l| l.split(',').map(str::to_string).collect()).collect();
    let shape_ok = rows.len() == 4
        && rows[0][1..] == METRIC_NAMES.map(String::from)
        && rows[1..].iter().all(|r| r.len() == 9 && r[1..].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)));
    let variants: Vec<&str> = rows.iter().skip(1).map(|r| r[0].as_str()).collect();
    let hashes = fs::read_to_string(args.out.join("batch_hashes.csv")).unwrap_or_default();
    let digests: Vec<&str> = hashes.lines().skip(1).filter_map(|l| l.split(',').nth(1)).collect();
    let hashes_equal = digests.len() == 3 && digests.iter().all(|d| *d == digests[0]);
    let expected: Vec<&str> = FusionVariant::ALL.iter().map(|v| v.short_name()).collect();
    let ok = result.is_ok() && shape_ok && hashes_equal && variants == expected;
    report(
        9,
        "ablation harness",
        ok,
        &format!("3 x 8 table {shape_ok}, variants {variants:?}, batch/mask hashes equal {hashes_equal}"),
    );
    println!("{}", fs::read_to_string(args.out.join("ablation.txt")).unwrap_or_default());
    assert!(ok, "{result:?}");
}

#[test]
fn c10_determinism_and_resume() {
    let _guard = serial();
    let data = Dataset::synthetic(6, 32, 10).unwrap();
    let cfg = TrainConfig { image_size: 32, base_channels: 4, batch_size: 3, total_iters: 30, seed: 10, ..Default::default() };
    let run = || {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.run(&data, 30, None).unwrap();
        t
    };
    let (a, b) = (run(), run());
    let same_logs = loss_log_csv(&a.log) == loss_log_csv(&b.log);

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg.clone()).unwrap();
    first.run(&data, 12, None).unwrap();
    let path = dir.path().join("mid.ckpt");
    first.save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::load(&path).unwrap();
    resumed.run(&data, 30, None).unwrap();
    let resume_equal = loss_log_csv(&resumed.log) == loss_log_csv(&a.log)
        && snapshot(&resumed) == snapshot(&a)
        && resumed.data_digest == a.data_digest
        && resumed.checkpoint().to_archive().unwrap().to_bytes() == a.checkpoint().to_archive().unwrap().to_bytes();
    let ok = same_logs && resume_equal;
    report(
        10,
        "determinism and resume",
        ok,
        &format!("same-seed loss logs identical {same_logs}; resume after 12 of 30 iterations identical {resume_equal}"),
    );
    assert!(ok);
}
