//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use savd::data::{
    decode_features, encode_features, generate_synthetic, load_videos, Manifest, SynthConfig,
};
use savd::diff::Graph;
use savd::error::FormatError;
use savd::losses::{total_loss, GuideBranch, LossConfig, BCE_CLAMP};
use savd::metrics::{average_precision, evaluate, roc_auc, EvalOptions};
use savd::model::{attention_threshold, branch_scores, ForwardOptions, ModelConfig, ModelParams};
use savd::selfcheck::{format_table, gradcheck_suite, SuiteOptions};
use savd::tensor::Tensor;
use savd::trainer::{train, TrainConfig, TrainOutputs, TrainRecord};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Outcome {
    if ok {
        Ok(msg.into())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Outcome {
    check(
        elapsed < limit,
        format!("{:.1}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()),
    )
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let opts = SuiteOptions::default();
    let rows = gradcheck_suite(&opts).map_err(|e| e.to_string())?;
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed()).collect();
    if !failed.is_empty() {
        return Err(format!(
            "{} failing rows\n{}",
            failed.len(),
            format_table(&rows)
        ));
    }
    let worst_loss = rows
        .iter()
        .filter(|r| r.name.starts_with("loss"))
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let worst_other = rows
        .iter()
        .filter(|r| !r.name.starts_with("loss"))
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let time = within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "{} rows, worst primitive/layer {worst_other:.1e} (tol {:.0e}), worst loss {worst_loss:.1e} (tol {:.0e}), {time}",
        rows.len(),
        opts.primitive_tol,
        opts.loss_tol
    ))
}

/// Mann–Whitney over all positive/negative pairs, ties worth one half.
fn pairwise_auc(s: &[f64], l: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (si, li) in s.iter().zip(l) {
        for (sj, lj) in s.iter().zip(l) {
            if *li == 1 && *lj == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// Precision at each positive's rank, ranking by descending score with ties
/// broken by index.
fn rank_walk_ap(s: &[f64], l: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    let (mut hits, mut total) = (0.0, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if l[i] == 1 {
            hits += 1.0;
            total += hits / (rank + 1) as f64;
        }
    }
    total / hits
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 100 {
        let len = rng.random_range(2..=300);
        let coarse = n % 3 == 0;
        let s: Vec<f64> = (0..len)
            .map(|_| {
                let v: f64 = rng.random();
                if coarse {
                    (v * 10.0).floor()
                } else {
                    v
                }
            })
            .collect();
        let l: Vec<u8> = (0..len).map(|_| u8::from(rng.random_bool(0.3))).collect();
        if !l.contains(&0) || !l.contains(&1) {
            continue;
        }
        let auc = roc_auc(&s, &l).map_err(|e| e.to_string())?;
        let ap = average_precision(&s, &l).map_err(|e| e.to_string())?;
        worst = worst.max((auc - pairwise_auc(&s, &l)).abs());
        worst = worst.max((ap - rank_walk_ap(&s, &l)).abs());
        n += 1;
    }
    check(
        worst <= 1e-12,
        format!("100 instances, max deviation from oracles {worst:.1e} (tol 1e-12)"),
    )
}

fn criterion_suppression() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..1000 {
        let t = rng.random_range(1..=64);
        let a: Vec<f64> = (0..t).map(|_| rng.random()).collect();
        let s_o: Vec<f64> = (0..t).map(|_| rng.random()).collect();
        let eps: f64 = rng.random();
        let fail = |what: &str| Err(format!("trial {trial}: {what}"));

        let theta = attention_threshold(&a, eps);
        let (lo, hi) = a
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        if !(lo <= theta && theta <= hi) {
            return fail("theta outside [min A, max A]");
        }
        let scale = rng.random_range(0.1..10.0);
        let shift = rng.random_range(-5.0..5.0);
        let moved: Vec<f64> = a.iter().map(|v| scale * v + shift).collect();
        if (attention_threshold(&moved, eps) - (scale * theta + shift)).abs() > 1e-9 {
            return fail("theta is not affine-equivariant");
        }

        let mut g = Graph::<f64>::new();
        let av = g.param(Tensor::column(&a));
        let sv = g.param(Tensor::column(&s_o));
        let b = branch_scores(&mut g, sv, av, eps, 0.0).map_err(|e| e.to_string())?;
        let s_a = g.value(b.s_a).data().to_vec();
        if s_a
            .iter()
            .zip(a.iter().zip(&s_o))
            .any(|(x, (p, q))| *x != p * q)
        {
            return fail("S_a differs from A * S_o");
        }
        let zero = branch_scores(&mut g, sv, av, 0.0, 0.0).map_err(|e| e.to_string())?;
        if g.value(zero.s_so)
            .data()
            .iter()
            .chain(g.value(zero.s_sa).data())
            .any(|&v| v != 0.0)
        {
            return fail("eps = 0 leaves nonzero suppressed scores");
        }
        // Raising eps can only shrink the suppressed set.
        let wider = branch_scores(
            &mut g,
            sv,
            av,
            (eps + rng.random_range(0.0..1.0 - eps)).min(1.0),
            0.0,
        )
        .map_err(|e| e.to_string())?;
        if b.retained
            .iter()
            .zip(&wider.retained)
            .any(|(&keep, &keep_wider)| keep && !keep_wider)
        {
            return fail("suppressed set grew with eps");
        }
    }
    let time = within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1000 random triples, {time}"))
}

fn criterion_loss_identities() -> Outcome {
    let mcfg = ModelConfig {
        feature_dim: 8,
        attention_hidden: 8,
        classifier_hidden: [8, 4],
        ..ModelConfig::default()
    };
    let params = ModelParams::<f64>::zeros(&mcfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = |cfg: &LossConfig, rng: &mut ChaCha8Rng| {
        let mut g = Graph::new();
        let det = params.bind(&mut g).unwrap();
        let labels = [0u8, 0, 1, 1];
        let outs: Vec<_> = labels
            .iter()
            .map(|_| {
                let x: Vec<f64> = (0..16 * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
                let x = g.constant(Tensor::new(vec![16, 8], x).unwrap());
                let opts = ForwardOptions {
                    eps: cfg.eps,
                    ..ForwardOptions::default()
                };
                det.forward(&mut g, x, &opts, rng).unwrap()
            })
            .collect();
        let (total, bd) = total_loss(&mut g, &outs, &labels, 0, cfg).unwrap();
        (g.value(total).item(), bd)
    };

    let cfg = LossConfig::default();
    let (total, bd) = batch(&cfg, &mut rng);
    let ln2 = std::f64::consts::LN_2;
    // A = S_o = 0.5 everywhere, so S_a = 0.25 and every snippet is suppressed.
    let c_a = (-(0.75f64).ln() - (0.25f64).ln()) / 2.0;
    let c_s = (-(1.0 - BCE_CLAMP).ln() - BCE_CLAMP.ln()) / 2.0;
    let expected = [
        ("c_o", bd.c_o, ln2),
        ("c_a", bd.c_a, c_a),
        ("c_so", bd.c_so, c_s),
        ("c_sa", bd.c_sa, c_s),
        ("guide_neg", bd.guide_neg, 0.25),
        ("guide_pos", bd.guide_pos, 0.0),
        ("norm", bd.norm, 0.5),
        ("smooth", bd.smooth, 0.0),
        ("sparse", bd.sparse, 0.75),
    ];
    for (name, got, want) in expected {
        if (got - want).abs() > 1e-6 {
            return Err(format!("{name} = {got}, expected {want}"));
        }
    }
    let reassembled = (bd.reassemble(&cfg) - total).abs();
    if reassembled > 1e-12 {
        return Err(format!(
            "breakdown reassembles with error {reassembled:.1e}"
        ));
    }

    let only_main = LossConfig {
        alpha: 1.0,
        ..LossConfig::default()
    };
    let (_, bd1) = batch(&only_main, &mut rng);
    if bd1.c_all != bd1.c_o + bd1.c_a {
        return Err(format!(
            "alpha = 1 gives c_all {} != c_o + c_a {}",
            bd1.c_all,
            bd1.c_o + bd1.c_a
        ));
    }
    Ok(format!(
        "zero-model breakdown within 1e-6, reassembly error {reassembled:.1e}, alpha = 1 exact"
    ))
}

struct EndToEnd {
    log: Vec<TrainRecord>,
    outcome: Outcome,
}

fn criterion_end_to_end(work: &Path) -> EndToEnd {
    let start = Instant::now();
    let synth = SynthConfig::default();
    let data = work.join("data");
    let run = || -> Result<(Vec<TrainRecord>, savd::metrics::EvalReport, usize, usize), String> {
        let out = generate_synthetic(&synth, &data).map_err(|e| e.to_string())?;
        let manifest = Manifest::load(&out.train_manifest).map_err(|e| e.to_string())?;
        let videos = load_videos(&manifest).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            iterations: 2000,
            segments: 64,
            model: ModelConfig::with_feature_dim(synth.feature_dim),
            ..TrainConfig::default()
        };
        let outputs = TrainOutputs {
            dir: work.join("run"),
        };
        let result = train::<f32>(&videos, &cfg, Some(&outputs)).map_err(|e| e.to_string())?;
        let test = Manifest::load(&out.test_manifest).map_err(|e| e.to_string())?;
        let eval =
            evaluate(&result.params, &test, &EvalOptions::default()).map_err(|e| e.to_string())?;
        Ok((result.log, eval.report, out.train_videos, out.test_videos))
    };
    match run() {
        Err(e) => EndToEnd {
            log: Vec::new(),
            outcome: Err(e),
        },
        Ok((log, r, n_train, n_test)) => {
            let elapsed = start.elapsed();
            let ok = r.auc >= 0.95
                && r.ap >= 0.80
                && r.auc >= r.auc_original - 0.01
                && elapsed < Duration::from_secs(600)
                && (n_train, n_test) == (200, 50);
            let msg = format!(
                "{n_train}/{n_test} videos, AUC {:.4} (>= 0.95), AP {:.4} (>= 0.80), AUC(S_o) {:.4} (AUC(S_a) >= AUC(S_o) - 0.01), {:.0}s (limit 600s)",
                r.auc,
                r.ap,
                r.auc_original,
                elapsed.as_secs_f64()
            );
            EndToEnd {
                log,
                outcome: check(ok, msg),
            }
        }
    }
}

fn criterion_guide_switch(log: &[TrainRecord]) -> Outcome {
    if log.is_empty() {
        return Err("no training log".into());
    }
    let m = LossConfig::default().switch_iter;
    for rec in log {
        let soft = rec.guide == GuideBranch::Soft;
        if soft != (rec.step < m) {
            return Err(format!("step {} logged {:?}", rec.step, rec.guide));
        }
    }
    Ok(format!(
        "{} logged steps, soft exactly below step {m}",
        log.len()
    ))
}

fn savd(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_savd"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "savd {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn snapshot_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn pipeline(root: &Path, workers: &str) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let s = |p: PathBuf| p.to_str().unwrap().to_owned();
    let data = s(root.join("data"));
    let run = s(root.join("run"));
    savd(&[
        "synth",
        "--out-dir",
        &data,
        "--n-normal",
        "12",
        "--n-abnormal",
        "12",
        "--seed",
        "11",
    ])?;
    savd(&[
        "train",
        "--manifest",
        &s(root.join("data/train.jsonl")),
        "--out-dir",
        &run,
        "--iterations",
        "30",
        "--batch-size",
        "8",
        "--segments",
        "32",
        "--checkpoint-every",
        "10",
        "--seed",
        "11",
        "--workers",
        workers,
    ])?;
    savd(&[
        "eval",
        "--manifest",
        &s(root.join("data/test.jsonl")),
        "--checkpoint",
        &s(root.join("run/model.ckpt")),
        "--out-dir",
        &s(root.join("eval")),
    ])?;
    Ok(snapshot_tree(root))
}

fn criterion_determinism(work: &Path) -> Outcome {
    let a = pipeline(&work.join("a"), "1")?;
    let b = pipeline(&work.join("b"), "1")?;
    let mut c = pipeline(&work.join("c"), "2")?;
    // The saved config records the worker count itself.
    let config = Path::new("run/config.json");
    c.insert(config.to_path_buf(), a[config].clone());
    for (name, other) in [("rerun", &b), ("two workers", &c)] {
        if a.keys().ne(other.keys()) {
            return Err(format!("{name}: different file sets"));
        }
        if let Some((path, _)) = a.iter().find(|(p, bytes)| other[*p] != **bytes) {
            return Err(format!("{name}: {} differs", path.display()));
        }
    }
    let needed = ["run/model.ckpt", "run/train_log.jsonl", "eval/report.json"];
    if needed.iter().any(|p| !a.contains_key(Path::new(p))) {
        return Err("expected outputs missing".into());
    }
    Ok(format!(
        "{} files byte-identical across reruns and worker counts",
        a.len()
    ))
}

fn criterion_feature_io() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let specials = [
        0.0f32,
        -0.0,
        f32::MIN_POSITIVE,
        1e-45,
        f32::MAX,
        f32::MIN,
        1.0 / 3.0,
    ];
    for trial in 0..1000 {
        let t = rng.random_range(0..40);
        let d = rng.random_range(1..24);
        let data: Vec<f32> = (0..t * d)
            .map(|_| {
                if rng.random_bool(0.1) {
                    specials[rng.random_range(0..specials.len())]
                } else {
                    f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF)
                }
            })
            .collect();
        let x = Tensor::new(vec![t, d], data).unwrap();
        let bytes = encode_features(&x).map_err(|e| e.to_string())?;
        let y = decode_features(&bytes).map_err(|e| format!("trial {trial}: {e}"))?;
        let same = y.shape() == x.shape()
            && y.data()
                .iter()
                .zip(x.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("trial {trial}: round trip changed the tensor"));
        }
    }

    let x = Tensor::new(vec![3, 2], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let good = encode_features(&x).map_err(|e| e.to_string())?;
    let mut magic = good.clone();
    magic[0] = b'X';
    let mut version = good.clone();
    version[4] = 9;
    let mut nan = good.clone();
    let at = good.len() - 4;
    nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
    let mut trailing = good.clone();
    trailing.push(0);
    let cases: [(&str, &[u8], fn(&FormatError) -> bool); 5] = [
        ("bad magic", &magic, |e| {
            matches!(e, FormatError::BadMagic { .. })
        }),
        ("version", &version, |e| {
            matches!(e, FormatError::UnsupportedVersion(9))
        }),
        ("truncated", &good[..good.len() - 3], |e| {
            matches!(e, FormatError::Truncated { .. })
        }),
        ("trailing", &trailing, |e| {
            matches!(e, FormatError::TrailingData { extra: 1 })
        }),
        ("non-finite", &nan, |e| {
            matches!(e, FormatError::NonFinite { index: 5 })
        }),
    ];
    for (name, bytes, expect) in cases {
        match decode_features(bytes) {
            Err(e) if expect(&e) => {}
            other => return Err(format!("{name}: got {other:?}")),
        }
    }
    Ok("1000 bit-exact round trips, 5 corruption kinds rejected with typed errors".into())
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient checks", criterion_gradients()),
        (2, "metric oracles", criterion_metrics()),
        (3, "suppression algebra", criterion_suppression()),
        (4, "loss identities", criterion_loss_identities()),
    ];
    let e2e = criterion_end_to_end(&work.path().join("e2e"));
    results.push((5, "end-to-end learning", e2e.outcome));
    results.push((6, "guide switch", criterion_guide_switch(&e2e.log)));
    results.push((
        7,
        "determinism",
        criterion_determinism(&work.path().join("det")),
    ));
    results.push((8, "feature file I/O", criterion_feature_io()));

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(msg) => println!("criterion {n} ({name}): PASS: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL: {msg}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
