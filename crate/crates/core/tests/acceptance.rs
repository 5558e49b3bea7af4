//! End-to-end acceptance run: one PASS/FAIL line per criterion, exit status
//! 1 if any criterion fails. Criteria 5, 6, 8 and 9 train the default model
//! for every configured seed, so a full run takes a while on one core.

mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tttlab_core::adapt::{adapt_episode, adapt_in_place, run_ttt, AdaptConfig, AdaptReport, TestStream};
use tttlab_core::config::ExperimentConfig;
use tttlab_core::data::{entropy_shift, generate_dataset, CorruptionKind, CorruptionSpec, Dataset};
use tttlab_core::losses::{im_loss, joint_mi_bruteforce, lemma1_bounds, ClusterAssignment};
use tttlab_core::nn::{BnMode, ModelBundle, Snapshot};
use tttlab_core::pipeline;
use tttlab_core::tensor::Tensor;
use tttlab_core::train::{evaluate, EpochLog};

/// Leading batches of every corrupted stream adapted per seed.
const STREAM_BATCHES: usize = 2;
const TRAIN_BUDGET: Duration = Duration::from_secs(600);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

struct Board {
    failed: usize,
}

impl Board {
    fn run(&mut self, label: &str, f: impl FnOnce() -> Verdict) {
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            self.failed += 1;
        }
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("{label}: {status} [{:.1}s] {}", t.elapsed().as_secs_f64(), v.detail);
    }
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let mut worst = (0.0f64, "");
    let mut too_big = Vec::new();
    for seed in [1, 2] {
        for case in support::gradient_suite(seed) {
            if case.elements > 1000 {
                too_big.push(case.name);
            }
            if case.rel_err > worst.0 {
                worst = (case.rel_err, case.name);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst.0 <= support::REL_TOL && too_big.is_empty() && secs < 30.0,
        format!("worst relative error {:.2e} ({}), {secs:.1}s", worst.0, worst.1),
    )
}

fn assignment(rows: usize, k: usize, f: impl Fn(usize, usize) -> f64) -> ClusterAssignment<f64> {
    ClusterAssignment::new(Tensor::from_fn(&[rows, k], |i| f(i / k, i % k))).unwrap()
}

fn random_assignment(rng: &mut ChaCha8Rng, n: usize, k: usize) -> ClusterAssignment<f64> {
    let scale = [0.1, 1.0, 5.0, 30.0][rng.random_range(0..4)];
    let logits = Tensor::from_fn(&[n, k], |_| rng.random_range(-scale..scale));
    ClusterAssignment::from_logits(&logits).unwrap()
}

fn criterion_2() -> Verdict {
    let mut worst = 0.0f64;
    for k in [2usize, 3, 5, 10] {
        let ln_k = (k as f64).ln();
        let balanced = im_loss(&assignment(4 * k, k, |r, c| f64::from(u8::from(r % k == c))));
        let collapsed = im_loss(&assignment(4 * k, k, |_, c| f64::from(u8::from(c == 0))));
        let uniform = im_loss(&assignment(4 * k, k, |_, _| 1.0 / k as f64));
        for (got, want) in [
            ((balanced.h_cond, balanced.h_marg, balanced.loss), (0.0, ln_k, -ln_k)),
            ((collapsed.h_cond, collapsed.h_marg, collapsed.loss), (0.0, 0.0, 0.0)),
            ((uniform.h_cond, uniform.h_marg, uniform.loss), (ln_k, ln_k, 0.0)),
        ] {
            worst = worst.max((got.0 - want.0).abs()).max((got.1 - want.1).abs()).max((got.2 - want.2).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut out_of_range = 0;
    for _ in 0..1000 {
        let (n, k) = (rng.random_range(1..64), rng.random_range(2..16));
        let t = im_loss(&random_assignment(&mut rng, n, k));
        let ln_k = (k as f64).ln();
        if !(-ln_k - 1e-12 <= t.loss && t.loss <= ln_k + 1e-12) {
            out_of_range += 1;
        }
    }
    verdict(
        worst <= 1e-6 && out_of_range == 0,
        format!("analytic cases worst error {worst:.1e}; {out_of_range}/1000 random matrices outside [-ln K, ln K]"),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for _ in 0..200 {
        let (c, n) = (rng.random_range(1..=3), rng.random_range(1..=8));
        let zs: Vec<_> = (0..c)
            .map(|_| {
                let k = rng.random_range(2..=5);
                random_assignment(&mut rng, n, k)
            })
            .collect();
        let b = lemma1_bounds(&zs).unwrap();
        let mi = joint_mi_bruteforce(&zs, None).unwrap();
        if !(b.lower <= mi + 1e-9 && mi <= b.upper + 1e-9) {
            violations += 1;
        }
    }
    let mut dup_gap = 0.0f64;
    let mut ind_gap = 0.0f64;
    for k in 2..=5 {
        let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..k)).collect();
        let a = ClusterAssignment::<f64>::one_hot(&labels, k).unwrap();
        let pair = [a.clone(), a];
        let mi = joint_mi_bruteforce(&pair, None).unwrap();
        dup_gap = dup_gap.max((mi - lemma1_bounds(&pair).unwrap().lower).abs());
    }
    for k2 in 1..=4 {
        // every (z1, z2) combination appears exactly once
        let n = 2 * k2;
        let a = ClusterAssignment::<f64>::one_hot(&(0..n).map(|i| i / k2).collect::<Vec<_>>(), 2).unwrap();
        let b = ClusterAssignment::<f64>::one_hot(&(0..n).map(|i| i % k2).collect::<Vec<_>>(), k2.max(2)).unwrap();
        let pair = [a, b];
        let mi = joint_mi_bruteforce(&pair, None).unwrap();
        ind_gap = ind_gap.max((mi - lemma1_bounds(&pair).unwrap().upper).abs());
    }
    verdict(
        violations == 0 && dup_gap <= 1e-9 && ind_gap <= 1e-9,
        format!("{violations}/200 violations; duplicate-head gap {dup_gap:.1e}; independent-head gap {ind_gap:.1e}"),
    )
}

fn criterion_4(cfg: &ExperimentConfig) -> Verdict {
    let t = Instant::now();
    let r = entropy_shift(&cfg.fig1.distribution, 10, 100_000, cfg.fig1.seed).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let drop = r.source_bits - r.target_bits;
    verdict(
        (r.source_bits - 10f64.log2()).abs() <= 0.02 && drop >= 0.05 && secs < 5.0,
        format!(
            "source H(Z) {:.4} bits, target {:.4} bits, drop {drop:.4}, {secs:.2}s",
            r.source_bits, r.target_bits
        ),
    )
}

struct Trained {
    seed: u64,
    model: ModelBundle<f32>,
    log: Vec<EpochLog>,
    time: Duration,
}

fn train_all(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Vec<Trained> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            let t = Instant::now();
            let (tr, log) = pipeline::train_seed(cfg, train, test, seed, |_| {}).unwrap();
            Trained {
                seed,
                model: tr.model,
                log,
                time: t.elapsed(),
            }
        })
        .collect()
}

fn criterion_5(runs: &[Trained], k: usize) -> Verdict {
    let floor = 0.9 * (k as f64).ln();
    let mut pass = runs.len() == 3;
    let mut parts = Vec::new();
    for r in runs {
        let last = r.log.last().unwrap();
        pass &= last.test_acc >= 0.95 && last.h_marg >= floor && r.time < TRAIN_BUDGET;
        parts.push(format!(
            "seed {}: acc {:.4} H_marg {:.4} in {:.0}s",
            r.seed,
            last.test_acc,
            last.h_marg,
            r.time.as_secs_f64()
        ));
    }
    verdict(pass, format!("{} (H_marg floor {floor:.4})", parts.join("; ")))
}

fn corrupted_streams(cfg: &ExperimentConfig, test: &Dataset, seed: u64) -> Vec<TestStream> {
    pipeline::streams(cfg, test, seed).unwrap()
}

fn criterion_6(reports: &[AdaptReport]) -> Verdict {
    let mut pass = reports.len() == 3;
    let mut parts = Vec::new();
    let (mut dec, mut total) = (0usize, 0usize);
    for r in reports {
        let s = r.summary();
        let no_adapt = s.mean_no_adapt.unwrap();
        let k20 = r.config.checkpoints.iter().position(|&c| c == 20).unwrap();
        let k100 = r.config.checkpoints.iter().position(|&c| c == 100).unwrap();
        let n = r.streams.len() as f64;
        let acc20 = (0..r.streams.len()).map(|i| r.clust3_accuracy(i)[k20]).sum::<f64>() / n;
        let acc100 = (0..r.streams.len()).map(|i| r.clust3_accuracy(i)[k100]).sum::<f64>() / n;
        for b in &r.batches {
            total += 1;
            if let (Some(a), Some(z)) = (b.im.first(), b.im.get(10)) {
                dec += usize::from(z < a);
            }
        }
        pass &= s.mean_clust3_max > no_adapt && acc100 >= acc20 - 0.03;
        parts.push(format!(
            "seed {}: adapted {:.4} vs no-adapt {:.4}, acc@20 {:.4} acc@100 {:.4}",
            r.seed, s.mean_clust3_max, no_adapt, acc20, acc100
        ));
    }
    let frac = dec as f64 / total.max(1) as f64;
    pass &= frac >= 0.95;
    verdict(pass, format!("{}; IM lower at 10 on {dec}/{total} batches", parts.join("; ")))
}

fn criterion_7(model: &ModelBundle<f32>, test: &Dataset, seed: u64) -> Verdict {
    let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 5, seed).unwrap();
    let data = TestStream::corrupted(test, spec).unwrap().data.subset(&(0..192).collect::<Vec<_>>());
    let cfg = AdaptConfig {
        checkpoints: vec![1, 3, 5],
        batch_size: 64,
        ..AdaptConfig::default()
    };
    let mut src = model.clone();
    src.mark_source();
    let before = Snapshot::capture(&src, None);
    let mut failures = Vec::new();

    // episodic reset
    let base = run_ttt(&src, &[TestStream::clean(data.clone())], &cfg, seed).unwrap();
    if Snapshot::capture(&src, None) != before {
        failures.push("model changed by a sweep");
    }
    let idx: Vec<usize> = (64..128).collect();
    let x = data.batch::<f32>(&idx).0;
    let mut m = src.clone();
    let alone = adapt_episode(&mut m, &x, &cfg).unwrap();
    adapt_episode(&mut m, &data.batch::<f32>(&(0..64).collect::<Vec<_>>()).0, &cfg).unwrap();
    let after_other = adapt_episode(&mut m, &x, &cfg).unwrap();
    if alone != after_other || Snapshot::capture(&m, None) != before {
        failures.push("episode depends on earlier episodes");
    }

    // frozen classifier and projectors
    let mut adapted = src.clone();
    adapt_in_place(&mut adapted, &x, &cfg).unwrap();
    let frozen_ok = adapted.params().iter().zip(before.values()).all(|(p, v)| {
        let head = p.name.starts_with("classifier.") || p.name.starts_with("projector.");
        !head || p.value.bit_eq(v)
    });
    let moved = adapted.params().iter().zip(before.values()).any(|(p, v)| !p.value.bit_eq(v));
    if !frozen_ok || !moved {
        failures.push("head parameters moved or nothing adapted");
    }

    // labels replaced by zeros
    let zeroed = Dataset::new(data.num_classes, data.images.clone(), vec![0; data.len()]).unwrap();
    let z = run_ttt(&src, &[TestStream::clean(zeroed)], &cfg, seed).unwrap();
    let same_preds = base.batches.iter().zip(&z.batches).all(|(a, b)| {
        a.predictions == b.predictions
            && a.im.iter().map(|v| v.to_bits()).eq(b.im.iter().map(|v| v.to_bits()))
            && a.tent_entropy.as_ref().map(|e| e.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                == b.tent_entropy.as_ref().map(|e| e.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    });
    let mut zm = src.clone();
    let zx = z_images(&data, &idx);
    adapt_in_place(&mut zm, &zx, &cfg).unwrap();
    if !same_preds || Snapshot::capture(&zm, None) != Snapshot::capture(&adapted, None) {
        failures.push("labels changed predictions or parameters");
    }

    // stream permutation
    let order = [2usize, 0, 1];
    let perm: Vec<usize> = order.iter().flat_map(|&b| b * 64..(b + 1) * 64).collect();
    let p = run_ttt(&src, &[TestStream::clean(data.subset(&perm))], &cfg, seed).unwrap();
    let perm_ok = order
        .iter()
        .enumerate()
        .all(|(pos, &orig)| p.batches[pos].predictions == base.batches[orig].predictions);
    if !perm_ok {
        failures.push("per-batch predictions depend on stream order");
    }

    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "episodic reset, frozen heads, label non-leakage and stream permutation are bit-exact".to_string()
        } else {
            failures.join("; ")
        },
    )
}

fn z_images(data: &Dataset, idx: &[usize]) -> Tensor<f32> {
    let zeroed = Dataset::new(data.num_classes, data.images.clone(), vec![0; data.len()]).unwrap();
    zeroed.batch::<f32>(idx).0
}

fn criterion_8(reports: &[AdaptReport]) -> Verdict {
    let mut pass = !reports.is_empty();
    let mut parts = Vec::new();
    for r in reports {
        let s = r.summary();
        let complete = r.batches.iter().all(|b| b.ptbn.is_some() && b.tent.is_some());
        pass &= complete && s.mean_ptbn.is_some_and(f64::is_finite) && s.mean_tent_max.is_some_and(f64::is_finite);
        parts.push(format!(
            "seed {}: ptbn {:.4} tent {:.4} clust3 {:.4}",
            r.seed,
            s.mean_ptbn.unwrap_or(f64::NAN),
            s.mean_tent_max.unwrap_or(f64::NAN),
            s.mean_clust3_max
        ));
    }
    verdict(pass, parts.join("; "))
}

fn csv_bytes(r: &AdaptReport) -> Vec<u8> {
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    buf
}

fn criterion_9(cfg: &ExperimentConfig, first: &AdaptReport, first_model: &ModelBundle<f32>) -> Verdict {
    let seed = first.seed;
    let (train, test) = generate_dataset(&cfg.dataset).unwrap();
    let (tr, _) = pipeline::train_seed(cfg, &train, &test, seed, |_| {}).unwrap();
    let same_model = Snapshot::capture(&tr.model, None) == Snapshot::capture(first_model, None);
    let again = pipeline::adapt_seed(cfg, &tr.model, &test, seed).unwrap();
    let (a, b) = (csv_bytes(first), csv_bytes(&again));
    verdict(
        a == b && same_model,
        format!(
            "seed {seed}: regenerated data, retrained model {} and results CSV ({} bytes) {}",
            if same_model { "identical" } else { "differs" },
            a.len(),
            if a == b { "byte-identical" } else { "differs" }
        ),
    )
}

fn extra_checks(board: &mut Board, cfg: &ExperimentConfig, runs: &[Trained], reports: &[AdaptReport], test: &Dataset) {
    board.run("extra: loss falls over the first 5 epochs", || {
        let ok = runs
            .iter()
            .all(|r| r.log.iter().take(5).collect::<Vec<_>>().windows(2).all(|w| w[1].total < w[0].total));
        let first: Vec<String> = runs
            .iter()
            .map(|r| {
                let t: Vec<String> = r.log.iter().take(5).map(|l| format!("{:.3}", l.total)).collect();
                format!("seed {}: {}", r.seed, t.join(" "))
            })
            .collect();
        verdict(ok, first.join("; "))
    });

    board.run("extra: source accuracy falls with gaussian severity", || {
        let means: Vec<f64> = (1..=5)
            .map(|sev| {
                runs.iter()
                    .map(|r| {
                        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, sev, r.seed).unwrap();
                        let s = TestStream::corrupted(test, spec).unwrap();
                        evaluate(&r.model, &s.data, BnMode::Eval, 256).unwrap().accuracy
                    })
                    .sum::<f64>()
                    / runs.len() as f64
            })
            .collect();
        let ok = means.windows(2).all(|w| w[1] < w[0]);
        verdict(ok, format!("{:.4?}", means))
    });

    board.run("extra: PTBN at least eval mode on gaussian severity 5", || {
        let pairs: Vec<(f64, f64)> = reports
            .iter()
            .map(|r| {
                let s = r.summary();
                let g = s.streams.iter().find(|s| s.corruption == "gaussian_noise").unwrap();
                (g.ptbn.unwrap(), g.no_adapt.unwrap())
            })
            .collect();
        let n = pairs.len() as f64;
        let (p, e) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
        verdict(p >= e, format!("ptbn {p:.4} vs eval {e:.4}"))
    });

    board.run("extra: TENT entropy lower after 10 steps", || {
        let (mut dec, mut total) = (0, 0);
        for b in reports.iter().flat_map(|r| &r.batches) {
            total += 1;
            if let Some(e) = &b.tent_entropy {
                if let (Some(a), Some(z)) = (e.first(), e.get(10)) {
                    dec += usize::from(z < a);
                }
            }
        }
        verdict(dec as f64 >= 0.95 * total as f64, format!("{dec}/{total} batches"))
    });

    board.run("extra: clean stream keeps source accuracy", || {
        let mut ok = true;
        let mut parts = Vec::new();
        for r in runs {
            let eval = evaluate(&r.model, test, BnMode::Eval, 256).unwrap().accuracy;
            let mut m = r.model.clone();
            m.mark_source();
            let rep = run_ttt(&m, &[TestStream::clean(test.clone())], &cfg.adapt, r.seed).unwrap();
            let best = rep.summary().mean_clust3_max;
            ok &= best >= eval - 0.02;
            parts.push(format!("seed {}: adapted {best:.4} vs eval {eval:.4}", r.seed));
        }
        verdict(ok, parts.join("; "))
    });

    board.run("extra: training without projectors", || {
        let mut plain = cfg.clone();
        plain.model = plain.model.without_projectors();
        let seed = cfg.seeds[0];
        let (train, test) = generate_dataset(&cfg.dataset).unwrap();
        let (_, log) = pipeline::train_seed(&plain, &train, &test, seed, |_| {}).unwrap();
        let acc = log.last().unwrap().test_acc;
        verdict(acc >= 0.95, format!("seed {seed}: acc {acc:.4}"))
    });
}

fn main() -> ExitCode {
    let mut board = Board { failed: 0 };
    let mut cfg = ExperimentConfig::default();
    cfg.adapt.max_batches = Some(STREAM_BATCHES);
    println!(
        "acceptance: seeds {:?}, {} batches of {} per corrupted stream",
        cfg.seeds, STREAM_BATCHES, cfg.adapt.batch_size
    );

    board.run("criterion 1 (gradient check)", criterion_1);
    board.run("criterion 2 (information loss cases)", criterion_2);
    board.run("criterion 3 (joint information bounds)", criterion_3);
    board.run("criterion 4 (1-D equal-mass entropy)", || criterion_4(&cfg));

    let (train, test) = generate_dataset(&cfg.dataset).unwrap();
    let mut runs = Vec::new();
    board.run("criterion 5 (joint training)", || {
        runs = train_all(&cfg, &train, &test);
        criterion_5(&runs, cfg.model.projectors.k)
    });

    let mut reports = Vec::new();
    board.run("criterion 6 (adaptation efficacy)", || {
        for r in &runs {
            let mut m = r.model.clone();
            m.mark_source();
            reports.push(run_ttt(&m, &corrupted_streams(&cfg, &test, r.seed), &cfg.adapt, r.seed).unwrap());
        }
        criterion_6(&reports)
    });

    board.run("criterion 7 (protocol invariants)", || {
        let r = runs.first().expect("a trained model");
        criterion_7(&r.model, &test, r.seed)
    });
    board.run("criterion 8 (baselines on the same stream)", || criterion_8(&reports));
    board.run("criterion 9 (pipeline determinism)", || {
        let first = reports.first().expect("an adaptation report");
        criterion_9(&cfg, first, &runs[0].model)
    });

    extra_checks(&mut board, &cfg, &runs, &reports, &test);

    println!("acceptance: {} failing line(s)", board.failed);
    if board.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
