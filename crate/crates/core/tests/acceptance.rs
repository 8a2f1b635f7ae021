//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exits 0 whatever the verdicts so that a slow or unattained criterion is
//! reported rather than hidden behind a harness failure. Set
//! `SATNET_ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{dyadic, naive_conv, naive_pool, rng};
use rand::Rng;
use satnet::cli::{run_gradcheck, Scope};
use satnet::data::{kfold_split, load_manifest, load_patches, synth_generate, Distortion, PatchPair, SplitMode, SynthSpec};
use satnet::evalmetrics::{evaluate, logistic5, logistic_fit, plcc, rmse, srocc};
use satnet::layers::{init_parameters, Forward, Mode, Registry};
use satnet::pipeline::{evaluate_images, predict_images, train, Checkpoint, TrainOutcome, TrainRunConfig};
use satnet::satnet::{
    count_parameters, topdown_modulation, BaselineMode, Model, ModelConfig, Modulation, SatBlock, SatBlockConfig,
    SatVariant,
};
use satnet::tensor::kernels::PoolMode;
use satnet::tensor::{Tape, Tensor};

struct Verdict {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(id: usize, title: &'static str, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let start = Instant::now();
    let (passed, detail) = f();
    let v = Verdict { id, title, passed, detail, elapsed: start.elapsed() };
    report(&v);
    v
}

fn report(v: &Verdict) {
    println!(
        "{} criterion {} ({}): {} [{:.1}s]",
        if v.passed { "PASS" } else { "FAIL" },
        v.id,
        v.title,
        v.detail,
        v.elapsed.as_secs_f64()
    );
}

fn gradients() -> (bool, String) {
    let start = Instant::now();
    let results = run_gradcheck(Scope::All, 0).expect("gradient checks run");
    let elapsed = start.elapsed();
    let worst = |pred: &dyn Fn(&str) -> bool| {
        results.iter().filter(|r| pred(&r.name)).map(|r| r.report.max_rel_error).fold(0.0, f64::max)
    };
    let model = worst(&|n| n.starts_with("model"));
    let rest = worst(&|n| !n.starts_with("model"));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let ok = failed.is_empty() && rest < 1e-4 && model < 1e-3 && elapsed < Duration::from_secs(120);
    let mut detail = format!(
        "{} checks, worst primitive/block {rest:.2e} (< 1e-4), model {model:.2e} (< 1e-3), {:.1}s (< 120s)",
        results.len(),
        elapsed.as_secs_f64()
    );
    if !failed.is_empty() {
        detail += &format!(", failed: {}", failed.join(", "));
    }
    (ok, detail)
}

fn structure() -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, reference) in [(7usize, 7.47e6), (3, 6.87e6)] {
        let n = count_parameters(&ModelConfig::with_depth(k)).unwrap();
        let dev = (n as f64 - reference) / reference;
        ok &= dev.abs() <= 0.05;
        parts.push(format!("K={k} {n} ({:+.2}%)", 100.0 * dev));
    }
    let model = Model::<f32>::new(ModelConfig::with_depth(7)).unwrap();
    let mut r = rng(20);
    let mut tape = Tape::new();
    let mut ctx = Forward::new(&mut tape, &model.params, Mode::Eval);
    let l = ctx.tape.constant(Tensor::from_fn(&[2, 3, 40, 40], |_| r.random_range(0.0..1.0)));
    let rt = ctx.tape.constant(Tensor::from_fn(&[2, 3, 40, 40], |_| r.random_range(0.0..1.0)));
    let out = model.net.forward(&mut ctx, l, rt).unwrap();
    let (dl, dr) = out.decoded;
    let pooled = tape.pool2d(dl, 4, 4, PoolMode::Min).unwrap();
    let shape = |n: &str| model.params.by_name(n).unwrap().value.shape().to_vec();
    let checks = [
        (tape.shape(dl).to_vec(), vec![2, 64, 20, 20]),
        (tape.shape(dr).to_vec(), vec![2, 64, 20, 20]),
        (tape.shape(pooled).to_vec(), vec![2, 64, 5, 5]),
        (tape.shape(out.features).to_vec(), vec![2, 3200]),
        (shape("head.fc1.weight"), vec![1600, 3200]),
        (shape("head.fc2.weight"), vec![800, 1600]),
        (shape("head.fc3.weight"), vec![1, 800]),
        (tape.shape(out.score).to_vec(), vec![2, 1]),
    ];
    let shapes_ok = checks.iter().all(|(a, b)| a == b);
    ok &= shapes_ok;
    parts.push(format!("shapes 64x20x20 / 64x5x5 / 3200-1600-800-1 {}", if shapes_ok { "match" } else { "differ" }));
    (ok, parts.join(", "))
}

fn attention() -> (bool, String) {
    let mut g = rng(30);
    let mut worst = 0.0f64;
    let mut alpha_ok = true;
    for variant in [SatVariant::Se, SatVariant::Cbam, SatVariant::Gc] {
        let config = SatBlockConfig { variant, channels: 16, reduction_ratio: 4, ec_enabled: true };
        let mut reg = Registry::new();
        let block = SatBlock::register(&mut reg, "s", config);
        for trial in 0..1000u64 {
            let mut params = init_parameters::<f32>(&reg, trial);
            params.set_value("s.ec_raw", Tensor::full(&[1], g.random_range(-8.0f32..8.0))).unwrap();
            let scale = g.random_range(0.1f32..10.0);
            let mut tape = Tape::new();
            let mut ctx = Forward::new(&mut tape, &params, Mode::Eval);
            let l = ctx.tape.constant(Tensor::from_fn(&[1, 16, 5, 5], |_| g.random_range(-scale..scale)));
            let r = ctx.tape.constant(Tensor::from_fn(&[1, 16, 5, 5], |_| g.random_range(-scale..scale)));
            let trace = block.forward_traced(&mut ctx, l, r).unwrap();
            let alpha = tape.value(trace.alpha.unwrap()).data()[0];
            alpha_ok &= alpha > 0.0 && alpha < 1.0;
            for &(wl, wr) in &trace.weights {
                for (a, b) in tape.value(wl).data().iter().zip(tape.value(wr).data()) {
                    worst = worst.max((a + b - 1.0).abs() as f64);
                }
            }
        }
    }
    let modulation_ok = modulation_matches_oracle();
    let ok = worst <= 1e-6 && alpha_ok && modulation_ok;
    (
        ok,
        format!(
            "3000 inputs, max |W_l+W_r-1| {worst:.1e} (<= 1e-6), alpha in (0,1) {alpha_ok}, modulation oracle exact {modulation_ok}"
        ),
    )
}

fn modulation_matches_oracle() -> bool {
    let mut g = rng(31);
    let left = dyadic(&mut g, &[2, 3, 4, 4]);
    let right = dyadic(&mut g, &[2, 3, 4, 4]);
    let wc = dyadic(&mut g, &[2, 3, 1, 1]);
    let ws = dyadic(&mut g, &[2, 1, 4, 4]);
    let mut t = Tape::new();
    let (l, r) = (t.constant(left.clone()), t.constant(right.clone()));
    let (cl, cr) = (t.constant(wc.clone()), t.constant(wc.map(|v| 1.0 - v)));
    let (sl, sr) = (t.constant(ws.clone()), t.constant(ws.map(|v| 1.0 - v)));
    let (l1, r1) = topdown_modulation(&mut t, (l, r), (cl, cr), Modulation::Multiply).unwrap();
    let (l2, r2) = topdown_modulation(&mut t, (l1, r1), (sl, sr), Modulation::Multiply).unwrap();
    let mut ok = true;
    for b in 0..2 {
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let i = [b, c, y, x];
                    let (w, s) = (wc.at(&[b, c, 0, 0]), ws.at(&[b, 0, y, x]));
                    ok &= t.value(l1).at(&i) == left.at(&i) * w;
                    ok &= t.value(r1).at(&i) == right.at(&i) * (1.0 - w);
                    ok &= t.value(l2).at(&i) == left.at(&i) * w * s;
                    ok &= t.value(r2).at(&i) == right.at(&i) * (1.0 - w) * (1.0 - s);
                }
            }
        }
    }
    ok
}

fn run_pool(x: &Tensor<f32>, window: usize, stride: usize, mode: PoolMode) -> Tensor<f32> {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = t.pool2d(v, window, stride, mode).unwrap();
    t.value(y).clone()
}

fn oracles() -> (bool, String) {
    let mut r = rng(40);
    let (mut conv_ok, mut pool_ok, mut mirror_ok) = (0, 0, true);
    for case in 0..50 {
        let k = [1, 3, 5, 7][r.random_range(0..4)];
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=k / 2);
        let c = if case % 5 == 0 { r.random_range(16..=20) } else { r.random_range(1..=5) };
        let (o, n) = (r.random_range(1..=4), r.random_range(1..=2));
        let (h, w) = (r.random_range(k..k + 6), r.random_range(k..k + 6));
        let x = dyadic(&mut r, &[n, c, h, w]);
        let wt = dyadic(&mut r, &[o, c, k, k]);
        let b = dyadic(&mut r, &[o]);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(wt.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        if t.value(y).data() == naive_conv(&x, &wt, Some(&b), stride, pad).data() {
            conv_ok += 1;
        }

        let window = r.random_range(1..=4);
        let stride = r.random_range(1..=window);
        let (h, w) = (r.random_range(window..window + 7), r.random_range(window..window + 7));
        let x = dyadic(&mut r, &[n, c.min(3), h, w]);
        if [PoolMode::Max, PoolMode::Min, PoolMode::Avg]
            .iter()
            .all(|&m| run_pool(&x, window, stride, m).data() == naive_pool(&x, window, stride, m).data())
        {
            pool_ok += 1;
        }
        let neg = x.map(|v| -v);
        mirror_ok &= run_pool(&x, window, stride, PoolMode::Min).data()
            == run_pool(&neg, window, stride, PoolMode::Max).map(|v| -v).data();
    }
    (
        conv_ok == 50 && pool_ok == 50 && mirror_ok,
        format!("conv {conv_ok}/50 bitwise, max/min/avg pooling {pool_ok}/50 bitwise, min == -max(-x) {mirror_ok}"),
    )
}

fn metrics() -> (bool, String) {
    let goldens = [
        plcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0,
        srocc(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 3.0, 2.0, 5.0, 4.0]).unwrap() - 0.8,
        rmse(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 2.5f64.sqrt(),
    ];
    let golden = goldens.iter().map(|d| d.abs()).fold(0.0, f64::max);

    let curves = [[50.0, 0.1, 30.0, 0.2, 10.0], [80.0, 0.5, 5.0, 0.0, 40.0], [-30.0, 0.05, 50.0, 0.5, 0.0]];
    let mut worst_rms = 0.0f64;
    for beta in curves {
        let q: Vec<f64> = (0..60).map(|i| i as f64 * 1.5 - 10.0).collect();
        let y: Vec<f64> = q.iter().map(|&v| logistic5(&beta, v)).collect();
        let fit = logistic_fit(&q, &y).unwrap();
        let rms = (fit.mapped.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        worst_rms = worst_rms.max(rms);
    }

    let mut g = rng(50);
    let mut worst_shift = 0.0f64;
    for _ in 0..100 {
        let n = g.random_range(5..60);
        let q: Vec<f64> = (0..n).map(|_| g.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = q.iter().map(|v| v + g.random_range(-2.0..2.0)).collect();
        let base = srocc(&q, &y).unwrap();
        for f in [|v: f64| v.powi(3), |v: f64| v.exp(), |v: f64| 5.0 * v + 2.0, |v: f64| v.atan()] {
            let m: Vec<f64> = q.iter().map(|&v| f(v)).collect();
            worst_shift = worst_shift.max((srocc(&m, &y).unwrap() - base).abs());
        }
    }
    let cubic: Vec<f64> = (0..20).map(|i| i as f64 / 4.0 - 2.0).collect();
    let report = evaluate(&cubic, &cubic.iter().map(|v| v.powi(3)).collect::<Vec<_>>()).unwrap();

    let ok = golden < 1e-10 && worst_rms < 1e-4 && worst_shift < 1e-12 && report.srocc == 1.0 && report.plcc > 0.99;
    (
        ok,
        format!(
            "golden error {golden:.1e} (< 1e-10), logistic RMS {worst_rms:.1e} (< 1e-4), monotone SROCC drift {worst_shift:.1e} over 100 cases, cubic SROCC {} PLCC {:.4}",
            report.srocc, report.plcc
        ),
    )
}

struct Learning {
    se: Vec<(TrainOutcome, f64, f64)>,
    baseline: Vec<(TrainOutcome, f64, f64)>,
    test: Vec<Vec<PatchPair>>,
    spot: Option<(usize, usize)>,
    elapsed: Duration,
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn desk_run(model: ModelConfig, seed: u64) -> TrainRunConfig {
    TrainRunConfig { model, epochs: 30, batch_size: 32, base_lr: 2e-3, seed, ..TrainRunConfig::default() }
}

fn learn() -> Learning {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { scenes: 24, asymmetric: true, seed: 7, ..SynthSpec::default() };
    let summary = synth_generate(&spec, dir.path()).unwrap();
    let records = load_manifest(&summary.manifest).unwrap();
    let fold = kfold_split(&records, 1, 0.8, 11, SplitMode::Scene).unwrap().remove(0);
    let images = load_patches(&records, false).unwrap();
    let train_set: Vec<PatchPair> = fold.train.iter().flat_map(|&i| images[i].clone()).collect();
    let test: Vec<Vec<PatchPair>> = fold.test.iter().map(|&i| images[i].clone()).collect();
    // A pristine pair and its strongest symmetric blur from one held-out scene.
    let spot = fold.test.iter().enumerate().find_map(|(a, &i)| {
        let r = &records[i];
        (r.distortion == Distortion::None).then_some(())?;
        fold.test.iter().position(|&j| {
            let s = &records[j];
            s.scene_id == r.scene_id && s.distortion == Distortion::Blur && s.level == 4 && s.score == 20.0
        })
        .map(|b| (a, b))
    });

    let mut arms = [Vec::new(), Vec::new()];
    for (arm, baseline) in [BaselineMode::None, BaselineMode::BottomUp1].into_iter().enumerate() {
        for seed in SEEDS {
            let model = ModelConfig { baseline, ..ModelConfig::with_depth(3) };
            let out = train(&desk_run(model, seed), &train_set, None).unwrap();
            let r = evaluate_images(&out.model, &test).unwrap();
            println!(
                "  {} seed {seed}: SROCC {:.4} PLCC {:.4} RMSE {:.2} [{:.0}s elapsed]",
                if arm == 0 { "SAT-SE     " } else { "bottom-up-1" },
                r.srocc,
                r.plcc,
                r.rmse,
                start.elapsed().as_secs_f64()
            );
            arms[arm].push((out, r.srocc, r.plcc));
        }
    }
    let [se, baseline] = arms;
    Learning { se, baseline, test, spot, elapsed: start.elapsed() }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn end_to_end(l: &Learning) -> (bool, String) {
    let quality = l.se.iter().all(|(_, s, p)| *s >= 0.80 && *p >= 0.80);
    let se_mean = mean(l.se.iter().map(|x| x.1));
    let bu_mean = mean(l.baseline.iter().map(|x| x.1));
    let in_budget = l.elapsed < Duration::from_secs(30 * 60);
    let worst_s = l.se.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let worst_p = l.se.iter().map(|x| x.2).fold(f64::INFINITY, f64::min);
    let mut detail = format!(
        "SAT-SE worst SROCC {worst_s:.4} / PLCC {worst_p:.4} (>= 0.80), mean SROCC {se_mean:.4} vs bottom-up-1 {bu_mean:.4}, {:.1} min (< 30)",
        l.elapsed.as_secs_f64() / 60.0
    );
    if let Some((a, b)) = l.spot {
        let scores = predict_images(&l.se[0].0.model, &[l.test[a].clone(), l.test[b].clone()]).unwrap();
        detail += &format!(", pristine {:.1} vs level-4 blur {:.1}", scores[0], scores[1]);
    }
    (quality && se_mean > bu_mean && in_budget, detail)
}

fn energy(l: &Learning) -> (bool, String) {
    let inside = l.se.iter().all(|(o, _, _)| o.ec_trace.all_in_open_unit_interval());
    let delta = l.se.iter().map(|(o, _, _)| o.ec_trace.max_recent_delta(10)).fold(0.0, f64::max);
    let last: Vec<String> =
        l.se[0].0.ec_trace.epochs.last().unwrap().iter().map(|a| format!("{a:.3}")).collect();
    (
        inside && delta < 0.01,
        format!(
            "alpha in (0,1) {inside}, max |delta alpha| over final 10 epochs {delta:.1e} (< 0.01), seed 0 final [{}]",
            last.join(", ")
        ),
    )
}

fn determinism(l: &Learning) -> (bool, String) {
    let short: Vec<PatchPair> = l.test.iter().flatten().take(96).cloned().collect();
    let run = TrainRunConfig { epochs: 2, ..desk_run(ModelConfig::with_depth(3), 9) };
    let a = train(&run, &short, None).unwrap();
    let b = train(&run, &short, None).unwrap();
    let logs_equal = a.loss_log == b.loss_log && a.ec_trace == b.ec_trace;

    let ckpt = l.se[0].0.checkpoint(true);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    let params_equal = ckpt.model.params.iter().zip(back.model.params.iter()).all(|(x, y)| x.value.data() == y.value.data());
    let before = predict_images(&ckpt.model, &l.test).unwrap();
    let after = predict_images(&back.model, &l.test).unwrap();
    let forward_equal = before.iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits());
    (
        logs_equal && params_equal && forward_equal,
        format!(
            "repeated loss log identical {logs_equal}, checkpoint parameters bitwise {params_equal}, forward on {} images bitwise {forward_equal}",
            before.len()
        ),
    )
}

fn main() {
    println!("acceptance: 8 criteria");
    let mut verdicts = vec![
        timed(1, "gradient suite", gradients),
        timed(2, "structural audit", structure),
        timed(3, "attention invariants", attention),
        timed(4, "oracle equivalence", oracles),
        timed(5, "metric suite", metrics),
    ];
    let learned = learn();
    for (id, title, f) in [
        (6, "desk-scale learning", end_to_end as fn(&Learning) -> (bool, String)),
        (7, "energy coefficients", energy),
        (8, "determinism and persistence", determinism),
    ] {
        let elapsed = if id == 6 { learned.elapsed } else { Duration::ZERO };
        let start = Instant::now();
        let (passed, detail) = f(&learned);
        let v = Verdict { id, title, passed, detail, elapsed: elapsed + start.elapsed() };
        report(&v);
        verdicts.push(v);
    }
    let passed = verdicts.iter().filter(|v| v.passed).count();
    println!("acceptance: {passed}/{} criteria passed", verdicts.len());
    if passed < verdicts.len() && std::env::var_os("SATNET_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
