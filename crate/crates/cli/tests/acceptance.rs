//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::HashSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;
use tensorforest::dataset::{ingest, oversample, stratified_kfold};
use tensorforest::eval::{compute_metrics, confusion_matrix};
use tensorforest::features::{FeatureMatrix, ParafacFeatureSpec, Standardizer};
use tensorforest::flops::{cost_cp_als, cost_pipeline};
use tensorforest::forest::ForestOptions;
use tensorforest::preprocess::{apply_exif_orientation, luma, resize_to_64, RawImage};
use tensorforest::seed::rng_from;
use tensorforest::synth::{generate, SynthOptions};
use tensorforest::tensor::{
    cp_als, cp_als_traced, fit_score, reconstruct, AlsOptions, CpModel, DenseTensor, Matrix,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1

fn known_factor_tensor(seed: u64, rank: usize) -> DenseTensor {
    let mut rng = rng_from(seed, &[]);
    let factors = (0..3)
        .map(|_| {
            let data = (0..16 * rank)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            Matrix::from_vec(16, rank, data).unwrap()
        })
        .collect();
    reconstruct(&CpModel {
        weights: vec![1.0; rank],
        factors,
        degenerate: false,
    })
}

fn cp_exactness() -> Check {
    let opts = AlsOptions {
        max_sweeps: 200,
        rel_fit_tolerance: 1e-10,
        ..AlsOptions::default()
    };
    let start = Instant::now();
    let mut worst = f64::INFINITY;
    for seed in 0..20 {
        let t = known_factor_tensor(100 + seed, 3);
        let fit = fit_score(&cp_als(&t, 3, &opts).map_err(|e| e.to_string())?, &t)
            .map_err(|e| e.to_string())?;
        worst = worst.min(fit);
        ensure(fit >= 0.999, || {
            format!("seed {seed}: fit {fit:.6} < 0.999")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || {
        format!("took {:.2} s (limit 5 s)", elapsed.as_secs_f64())
    })?;
    Ok(format!(
        "20 tensors, min fit {worst:.6}, {:.2} s",
        elapsed.as_secs_f64()
    ))
}

// 2

fn als_monotonicity() -> Check {
    let opts = AlsOptions {
        max_sweeps: 100,
        rel_fit_tolerance: 0.0,
        ..AlsOptions::default()
    };
    let mut checked = 0;
    for seed in 0..50u64 {
        let mut rng = rng_from(seed, &[2]);
        let t = DenseTensor::new(
            vec![16, 16, 16],
            (0..4096).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        for rank in [3, 16] {
            let (_, trace) = cp_als_traced(&t, rank, &opts).map_err(|e| e.to_string())?;
            for (s, w) in trace.errors.windows(2).enumerate() {
                ensure(w[1] <= w[0] + 1e-9, || {
                    format!(
                        "seed {seed} rank {rank} sweep {}: {} -> {}",
                        s + 1,
                        w[0],
                        w[1]
                    )
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} sweep transitions, 0 violations"))
}

// 3

fn luma_oracle(r: u8, g: u8, b: u8) -> u8 {
    let x = 0.2989 * r as f64 + 0.5870 * g as f64 + 0.1140 * b as f64;
    let frac = x - x.floor();
    let rounded = if (frac - 0.5).abs() < 1e-9 {
        // exact ties are decided on the integer numerator
        let n = 2989 * r as u32 + 5870 * g as u32 + 1140 * b as u32;
        (n / 10_000 + u32::from(n % 10_000 >= 5000)) as f64
    } else {
        x.round()
    };
    rounded.clamp(0.0, 255.0) as u8
}

fn orientation_oracle(tag: u16) -> (usize, usize, &'static str) {
    // source grid, 2 wide by 3 high:  a b / c d / e f
    match tag {
        1 => (2, 3, "abcdef"),
        2 => (2, 3, "badcfe"),
        3 => (2, 3, "fedcba"),
        4 => (2, 3, "efcdab"),
        5 => (3, 2, "acebdf"),
        6 => (3, 2, "ecafdb"),
        7 => (3, 2, "fdbeca"),
        8 => (3, 2, "bdface"),
        _ => unreachable!(),
    }
}

fn preprocessing_goldens() -> Check {
    let corners: [((u8, u8, u8), u8); 8] = [
        ((0, 0, 0), 0),
        ((255, 0, 0), 76),
        ((0, 255, 0), 150),
        ((0, 0, 255), 29),
        ((255, 255, 0), 226),
        ((255, 0, 255), 105),
        ((0, 255, 255), 179),
        ((255, 255, 255), 255),
    ];
    for ((r, g, b), want) in corners {
        ensure(luma(r, g, b) == want, || {
            format!("corner ({r},{g},{b}): {} != {want}", luma(r, g, b))
        })?;
    }
    let mut rng = rng_from(3, &[]);
    for i in 0..1000 {
        let (r, g, b) = (rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>());
        ensure(luma(r, g, b) == luma_oracle(r, g, b), || {
            format!(
                "triple {i} ({r},{g},{b}): {} != {}",
                luma(r, g, b),
                luma_oracle(r, g, b)
            )
        })?;
    }

    let grid = RawImage::gray(2, 3, b"abcdef".to_vec()).unwrap();
    for tag in 1..=8u16 {
        let mut img = grid.clone();
        img.orientation = Some(tag);
        let out = apply_exif_orientation(&img);
        let (w, h, px) = orientation_oracle(tag);
        ensure(
            out.width == w && out.height == h && out.pixels == px.as_bytes(),
            || {
                format!(
                    "tag {tag}: got {}x{} {:?}, want {w}x{h} {px}",
                    out.width,
                    out.height,
                    String::from_utf8_lossy(&out.pixels)
                )
            },
        )?;
    }

    for seed in 0..20 {
        let mut rng = rng_from(seed, &[3, 1]);
        let px: Vec<u8> = (0..4096).map(|_| rng.random()).collect();
        let out = resize_to_64(&RawImage::gray(64, 64, px.clone()).unwrap()).unwrap();
        ensure(out.as_bytes() == px.as_slice(), || {
            format!("64x64 resize changed image {seed}")
        })?;
    }
    Ok("8 corners + 1000 triples exact, tags 1-8 match, 20 identity resizes".into())
}

// 4

fn leakage_suite() -> Check {
    for cfg in 0..100u64 {
        let mut rng = rng_from(cfg, &[4]);
        let classes = rng.random_range(2..=8);
        let k = rng.random_range(2..=5);
        let mut labels = Vec::new();
        for c in 0..classes {
            let n = rng.random_range(k..k + 25);
            labels.extend(std::iter::repeat_n(c, n));
        }
        let folds = stratified_kfold(&labels, k, cfg).map_err(|e| e.to_string())?;
        let cols = 5;
        let x: Vec<f32> = (0..labels.len() * cols).map(|_| rng.random()).collect();
        let features = FeatureMatrix::new(labels.len(), cols, x, 0).unwrap();
        for f in 0..k {
            let train = folds.train_indices(f);
            let test: HashSet<usize> = folds.test_indices(f).into_iter().collect();
            let resampled = oversample(&train, &labels, cfg ^ f as u64);
            let train_set: HashSet<usize> = train.iter().copied().collect();
            ensure(resampled.iter().all(|i| !test.contains(i)), || {
                format!("config {cfg} fold {f}: test index in training multiset")
            })?;
            ensure(resampled.iter().all(|i| train_set.contains(i)), || {
                format!("config {cfg} fold {f}: oversampling drew outside the fold")
            })?;

            let before = Standardizer::fit(&features.select_rows(&train)).unwrap();
            let mut scrambled = features.as_slice().to_vec();
            for &i in &test {
                for v in &mut scrambled[i * cols..(i + 1) * cols] {
                    *v = rng.random_range(-1e3..1e3);
                }
            }
            let scrambled = FeatureMatrix::new(labels.len(), cols, scrambled, 0).unwrap();
            let after = Standardizer::fit(&scrambled.select_rows(&train)).unwrap();
            ensure(before == after, || {
                format!("config {cfg} fold {f}: standardizer moved with test rows")
            })?;
        }
    }
    Ok("100 configurations, 0 violations".into())
}

// 5

fn dedup_bookkeeping() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let plain = dir.path().join("plain");
    let mut opts = SynthOptions::new(vec![5, 5], 51);
    opts.uniform = 1;
    generate(&plain, &opts).map_err(|e| e.to_string())?;
    let m = ingest(&plain).map_err(|e| e.to_string())?.manifest;
    ensure(m.n0() == 12 && m.n1() == 10, || {
        format!(
            "10 valid + 2 uniform: N0 {} N1 {}, want 12/10",
            m.n0(),
            m.n1()
        )
    })?;

    let planted = dir.path().join("planted");
    let mut opts = SynthOptions::new(vec![6, 4, 5], 52);
    opts.duplicates = 2;
    opts.uniform = 1;
    generate(&planted, &opts).map_err(|e| e.to_string())?;
    let m = ingest(&planted).map_err(|e| e.to_string())?.manifest;
    ensure(m.raw_counts() == vec![9, 7, 8] && m.n0() == 24, || {
        format!("raw counts {:?}, N0 {}", m.raw_counts(), m.n0())
    })?;
    ensure(m.clean_counts() == vec![6, 4, 5] && m.n1() == 15, || {
        format!("clean counts {:?}, N1 {}", m.clean_counts(), m.n1())
    })?;
    for class in 0..3 {
        let group: Vec<usize> = (0..m.records.len())
            .filter(|&i| {
                let r = &m.records[i];
                r.class_id == class
                    && (r.path.ends_with("img_0000.png") || r.path.contains("/dup_"))
            })
            .collect();
        let survivors: Vec<usize> = group
            .iter()
            .copied()
            .filter(|&i| m.records[i].is_sample())
            .collect();
        ensure(group.len() == 3 && survivors.len() == 1, || {
            format!("class {class}: group {group:?}, survivors {survivors:?}")
        })?;
        let keep = survivors[0];
        ensure(keep == group[0], || {
            format!("class {class}: survivor {keep} is not the lowest index")
        })?;
        for &i in &group[1..] {
            ensure(m.records[i].duplicate_of == Some(keep), || {
                format!("record {i} points at {:?}", m.records[i].duplicate_of)
            })?;
        }
    }
    Ok("N0/N1 match hand counts; each planted group keeps exactly one survivor".into())
}

// 6

fn brute_force_metrics(t: &[usize], p: &[usize], k: usize) -> [f64; 7] {
    let n = t.len() as f64;
    let correct = t.iter().zip(p).filter(|(a, b)| a == b).count() as f64;
    let (mut mp, mut mr, mut mf, mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = t.iter().zip(p).filter(|&(&a, &b)| a == c && b == c).count() as f64;
        let fp = t.iter().zip(p).filter(|&(&a, &b)| a != c && b == c).count() as f64;
        let fneg = t.iter().zip(p).filter(|&(&a, &b)| a == c && b != c).count() as f64;
        let support = t.iter().filter(|&&a| a == c).count() as f64;
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fneg > 0.0 {
            tp / (tp + fneg)
        } else {
            0.0
        };
        let f1 = if prec + rec > 0.0 {
            2.0 * prec * rec / (prec + rec)
        } else {
            0.0
        };
        mp += prec / k as f64;
        mr += rec / k as f64;
        mf += f1 / k as f64;
        wp += prec * support / n;
        wr += rec * support / n;
        wf += f1 * support / n;
    }
    [correct / n, mp, wp, mr, wr, mf, wf]
}

fn metric_oracle() -> Check {
    let mut cases = 0;
    for k in [2usize, 8] {
        for seed in 0..1000u64 {
            let mut rng = rng_from(seed, &[6, k as u64]);
            let n = rng.random_range(1..200);
            let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let m = compute_metrics(&confusion_matrix(&t, &p, k).unwrap()).unwrap();
            let got = [
                m.accuracy,
                m.precision.macro_avg,
                m.precision.weighted,
                m.recall.macro_avg,
                m.recall.weighted,
                m.f1.macro_avg,
                m.f1.weighted,
            ];
            let want = brute_force_metrics(&t, &p, k);
            for (g, w) in got.iter().zip(want) {
                ensure((g - w).abs() <= 1e-12, || {
                    format!("k {k} seed {seed}: {got:?} vs {want:?}")
                })?;
            }
            cases += 1;
        }
    }
    let m = compute_metrics(&confusion_matrix(&[0, 0, 1], &[0, 1, 1], 2).unwrap()).unwrap();
    ensure(m.accuracy == 2.0 / 3.0, || {
        format!("hand case accuracy {}", m.accuracy)
    })?;
    ensure((m.f1.macro_avg - 2.0 / 3.0).abs() <= 1e-15, || {
        format!("hand case macro F1 {}", m.f1.macro_avg)
    })?;
    Ok(format!(
        "{cases} random pairs within 1e-12; hand case exact"
    ))
}

// 7, 8, 10 share pipeline runs on one synthetic tree

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    elapsed: Duration,
}

fn binary() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tensorforest"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = binary().args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "`tensorforest {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn run_all(f: &Fixture, out: &str, rank: usize, workers: Option<usize>) -> Result<PathBuf, String> {
    let dir = f.root.join(out);
    let rank = rank.to_string();
    let workers = workers.map(|w| w.to_string());
    let mut args = vec![
        "all",
        "--dataset_root",
        f.data.to_str().unwrap(),
        "--output_dir",
        dir.to_str().unwrap(),
        "--parafac_rank",
        &rank,
    ];
    if let Some(w) = &workers {
        args.extend(["--workers", w]);
    }
    run_cli(&args)?;
    Ok(dir)
}

fn fixture() -> &'static Result<Fixture, String> {
    static FIXTURE: OnceLock<Result<Fixture, String>> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        let start = Instant::now();
        run_cli(&[
            "synth",
            "--classes",
            "8",
            "--per-class",
            "40,40,40,40,40,40,40,20",
            "--seed",
            "7",
            "--out",
            data.to_str().unwrap(),
        ])?;
        let mut f = Fixture {
            _dir: dir,
            root,
            data,
            elapsed: Duration::ZERO,
        };
        run_all(&f, "r3", 3, None)?;
        run_all(&f, "r16", 16, None)?;
        f.elapsed = start.elapsed();
        Ok(f)
    })
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn num(v: &Value, path: &[&str]) -> Result<f64, String> {
    let mut cur = v;
    for key in path {
        cur = cur
            .get(key)
            .ok_or_else(|| format!("missing {}", path.join(".")))?;
    }
    cur.as_f64()
        .ok_or_else(|| format!("{} is not a number", path.join(".")))
}

fn end_to_end() -> Check {
    let f = fixture().as_ref()?;
    let files = walk_pngs(&f.data);
    ensure(files == 300, || {
        format!("fixture has {files} images, want 300")
    })?;
    let mut acc = Vec::new();
    for r in ["r3", "r16"] {
        let report = read_json(&f.root.join(r).join("report.json"))?;
        let mean = num(&report, &["cv", "outer_mean", "test", "accuracy"])?;
        let std = num(&report, &["cv", "outer_std", "test", "accuracy"])?;
        ensure(mean >= 0.90, || {
            format!("{r}: mean outer accuracy {mean:.4} < 0.90")
        })?;
        ensure(std <= 0.05, || {
            format!("{r}: outer accuracy std {std:.4} > 0.05")
        })?;
        acc.push((mean, std));
    }
    let delta = (acc[1].0 - acc[0].0).abs();
    ensure(delta <= 0.05, || {
        format!("|acc(16) - acc(3)| = {delta:.4} > 0.05")
    })?;
    ensure(f.elapsed < Duration::from_secs(600), || {
        format!("took {:.1} s (limit 600 s)", f.elapsed.as_secs_f64())
    })?;
    Ok(format!(
        "acc(3) {:.4} ± {:.4}, acc(16) {:.4} ± {:.4}, |Δ| {delta:.4}, {:.1} s",
        acc[0].0,
        acc[0].1,
        acc[1].0,
        acc[1].1,
        f.elapsed.as_secs_f64()
    ))
}

fn walk_pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| {
            let p = e.path();
            if p.is_dir() {
                walk_pngs(&p)
            } else {
                usize::from(p.extension().is_some_and(|x| x == "png"))
            }
        })
        .sum()
}

fn ablation_echo() -> Check {
    let f = fixture().as_ref()?;
    let a = read_json(&f.root.join("r16").join("ablation.json"))?;
    let score = |v: &str| -> Result<(f64, f64), String> {
        Ok((
            num(&a, &["ablation", v, "mean_f1"])?,
            num(&a, &["ablation", v, "std_f1"])?,
        ))
    };
    let (cnn, par, fused) = (score("CNN-only")?, score("PARAFAC-only")?, score("Fused")?);
    let best = cnn.0.max(par.0);
    let widest = cnn.1.max(par.1);
    ensure(fused.0 >= best - 0.02, || {
        format!("Fused {:.4} < best branch {best:.4} - 0.02", fused.0)
    })?;
    ensure(fused.1 <= widest + 0.02, || {
        format!(
            "Fused std {:.4} > max branch std {widest:.4} + 0.02",
            fused.1
        )
    })?;
    Ok(format!(
        "CNN-only {:.4}±{:.4}, PARAFAC-only {:.4}±{:.4}, Fused {:.4}±{:.4}",
        cnn.0, cnn.1, par.0, par.1, fused.0, fused.1
    ))
}

// 9

fn flops_golden() -> Check {
    ensure(cost_cp_als(&[2, 2, 2], 1, 1) == 78, || {
        format!("(2,2,2) R1 S1 = {}", cost_cp_als(&[2, 2, 2], 1, 1))
    })?;
    // per mode 2·3·16·256 + 2·(2·16·9) + 9 + 27 = 25188
    ensure(cost_cp_als(&[16, 16, 16], 3, 1) == 3 * 25188, || {
        format!("(16,16,16) R3 S1 = {}", cost_cp_als(&[16, 16, 16], 3, 1))
    })?;
    let shapes: [&[usize]; 5] = [
        &[2, 2, 2],
        &[3, 4, 5],
        &[16, 16, 16],
        &[7, 9],
        &[2, 3, 4, 5],
    ];
    let mut checked = 0;
    for shape in shapes {
        for rank in 1..=16 {
            let one = cost_cp_als(shape, rank, 1);
            for sweeps in 1..=6 {
                ensure(
                    cost_cp_als(shape, rank, sweeps) == sweeps as u64 * one,
                    || format!("{shape:?} R{rank}: not linear at S={sweeps}"),
                )?;
                ensure(
                    cost_cp_als(shape, rank + 1, sweeps) > cost_cp_als(shape, rank, sweeps),
                    || format!("{shape:?} S{sweeps}: R{} not above R{rank}", rank + 1),
                )?;
                checked += 1;
            }
        }
    }
    let forest = ForestOptions::default();
    let at = |n: usize, r: usize| {
        cost_pipeline(
            n,
            Some(&ParafacFeatureSpec::new(r)),
            None,
            &forest,
            8,
            Vec::new(),
        )
    };
    ensure(at(0, 16).total_flops == 0, || {
        "zero images cost something".into()
    })?;
    ensure(at(10, 3).total_flops * 3 == at(30, 3).total_flops, || {
        "pipeline not linear in images".into()
    })?;
    ensure(at(10, 16).total_flops > at(10, 3).total_flops, || {
        "rank 16 pipeline not above rank 3".into()
    })?;
    Ok(format!(
        "golden 78 exact; {checked} (shape, R, S) grid points linear and rank-monotone"
    ))
}

// 10

fn determinism() -> Check {
    let f = fixture().as_ref()?;
    let runs = [
        run_all(f, "w1a", 16, Some(1))?,
        run_all(f, "w1b", 16, Some(1))?,
        run_all(f, "w8", 16, Some(8))?,
    ];
    let reference = f.root.join("r16");
    let artifacts = [
        "report.json",
        "features_r16.fmx1",
        "features_r16.json",
        "ablation.json",
    ];
    for run in &runs {
        for name in artifacts {
            let a = fs::read(reference.join(name)).map_err(|e| e.to_string())?;
            let b = fs::read(run.join(name)).map_err(|e| e.to_string())?;
            ensure(a == b, || {
                format!(
                    "{name} differs between default workers and {}",
                    run.display()
                )
            })?;
        }
    }
    Ok("report.json and features identical across repeat, 1 and 8 workers".into())
}

fn main() -> ExitCode {
    let criteria: [(u8, &str, fn() -> Check); 10] = [
        (1, "CP exactness", cp_exactness),
        (2, "ALS monotonicity", als_monotonicity),
        (3, "preprocessing goldens", preprocessing_goldens),
        (4, "leakage suite", leakage_suite),
        (5, "dedup and bookkeeping", dedup_bookkeeping),
        (6, "metric oracle", metric_oracle),
        (7, "end-to-end synthetic run", end_to_end),
        (8, "ablation echo", ablation_echo),
        (9, "FLOPs golden", flops_golden),
        (10, "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let outcome =
            catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
