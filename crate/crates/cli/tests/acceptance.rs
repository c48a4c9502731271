//! Acceptance suite: one line per check, nonzero exit if any check fails.
//!
//! `cargo test --test acceptance` runs everything; extra arguments select
//! checks by substring, e.g. `cargo test --test acceptance -- determinism`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kdfusion::dataset::generate;
use kdfusion::distillation::{feature_loss, response_loss};
use kdfusion::encoders::ClassifierHead;
use kdfusion::evaluation::{
    confusion_matrix, evaluate_encoder, evaluate_fusion, run_ablation, weighted_f1, GridSpec,
};
use kdfusion::fusion::{Dropout, FusionConfig, FusionParams};
use kdfusion::numerics::Matrix;
use kdfusion::training::gradcheck::TOLERANCE;
use kdfusion::training::{
    distill_students, gradient_check, run_pipeline, train_teacher, LossId, PipelineConfig,
};
use kdfusion::Modality;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> (bool, String) {
    (
        elapsed.as_secs_f64() < limit_secs as f64,
        format!("{:.1}s (limit {limit_secs}s)", elapsed.as_secs_f64()),
    )
}

fn per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || f(seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = BTreeMap::new();
    for id in LossId::ALL {
        let max = (0..20)
            .map(|seed| gradient_check(id, seed).expect("gradient check runs"))
            .fold(0.0f64, f64::max);
        worst.insert(id.name(), max);
    }
    let (fast, time) = within(start.elapsed(), 30);
    let accurate = worst.values().all(|&e| e <= TOLERANCE);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(accurate && fast, format!("max rel err {detail}; {time}"))
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut self_resp, mut self_feat, mut min_loss) = (0.0f64, 0.0f64, f64::INFINITY);
    for _ in 0..100 {
        let b = rng.random_range(2..12);
        let c = rng.random_range(2..8);
        let d = rng.random_range(2..16);
        let tau = rng.random_range(0.5..4.0);
        let z = random_matrix(&mut rng, b, c, 3.0);
        let f = random_matrix(&mut rng, b, d, 3.0);
        self_resp = self_resp.max(response_loss(&z, &z, tau).unwrap());
        self_feat = self_feat.max(feature_loss(&f, &f, tau).unwrap());
        let z2 = random_matrix(&mut rng, b, c, 3.0);
        let f2 = random_matrix(&mut rng, b, d, 3.0);
        for v in [
            response_loss(&z, &z2, tau).unwrap(),
            feature_loss(&f, &f2, tau).unwrap(),
            response_loss(&z, &z, tau).unwrap(),
            feature_loss(&f, &f, tau).unwrap(),
        ] {
            min_loss = min_loss.min(v);
        }
    }
    Outcome::new(
        self_resp <= 1e-9 && self_feat <= 1e-9 && min_loss >= -1e-12,
        format!("max self response {self_resp:.2e}, max self feature {self_feat:.2e}, min loss {min_loss:.2e}"),
    )
}

fn shift_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut lambda_ok, mut bound_slack, mut zero_h, mut identity_ok, mut zero_init_ok) =
        (true, f64::INFINITY, 0, true, true);
    for i in 0..1000 {
        let d = [2, 4, 6, 8][rng.random_range(0..4)];
        let heads = [1, 2][rng.random_range(0..2)];
        let k = rng.random_range(1..=2);
        let classes = rng.random_range(2..6);
        let theta = 10f64.powf(rng.random_range(-3.0..1.0));
        let cfg = FusionConfig {
            asf: true,
            heads,
            theta,
            dropout: 0.1,
        };
        let head = ClassifierHead::glorot(d, classes, &mut rng);
        let mut params = FusionParams::glorot(d, k, head.clone(), &cfg, &mut rng).unwrap();
        let scale = if i % 4 == 3 {
            10f64.powf(rng.random_range(-3.0..3.0))
        } else {
            2.0
        };
        match i % 4 {
            1 => {
                params.displacement.weight.as_mut_slice().fill(0.0);
                params.displacement.bias.fill(0.0);
            }
            2 => params.gate.bias.fill(-1e6),
            _ => {}
        }
        let ft: Vec<f64> = (0..d).map(|_| rng.random_range(-scale..scale)).collect();
        let nv: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect())
            .collect();
        let refs: Vec<&[f64]> = nv.iter().map(Vec::as_slice).collect();

        let (_, trace) = params
            .fuse_and_classify(&ft, &refs, Dropout::Disabled)
            .unwrap();
        lambda_ok &= (0.0..=1.0).contains(&trace.lambda);
        let h = norm(&trace.displacement);
        if h == 0.0 {
            zero_h += 1;
            identity_ok &= trace.fused == ft;
        }
        let moved: Vec<f64> = trace.fused.iter().zip(&ft).map(|(z, t)| z - t).collect();
        bound_slack = bound_slack.min(h.min(theta * norm(&ft)) + 1e-9 - norm(&moved));

        let mut zero = FusionParams::zeros(d, k, classes, &cfg).unwrap();
        zero.classifier = head.clone();
        let (logits, _) = zero
            .fuse_and_classify(&ft, &refs, Dropout::Disabled)
            .unwrap();
        zero_init_ok &= logits == head.classify(&ft).unwrap();
    }
    Outcome::new(
        lambda_ok && bound_slack >= 0.0 && identity_ok && zero_init_ok && zero_h >= 500,
        format!(
            "lambda in [0,1]: {lambda_ok}; min bound slack {bound_slack:.2e}; Z = F_T on all {zero_h} zero-H cases: \
             {identity_ok}; zero-init logits bit-exact: {zero_init_ok}"
        ),
    )
}

fn invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut rows, mut classes, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let b = rng.random_range(2..12);
        let c = rng.random_range(2..8);
        let d = rng.random_range(2..16);
        let tau = rng.random_range(0.5..4.0);
        let (zs, zt) = (
            random_matrix(&mut rng, b, c, 3.0),
            random_matrix(&mut rng, b, c, 3.0),
        );
        let (fs, ft) = (
            random_matrix(&mut rng, b, d, 3.0),
            random_matrix(&mut rng, b, d, 3.0),
        );
        let r0 = response_loss(&zs, &zt, tau).unwrap();
        let f0 = feature_loss(&fs, &ft, tau).unwrap();

        let mut perm: Vec<usize> = (0..b).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        rows = rows
            .max(
                (response_loss(&zs.select_rows(&perm), &zt.select_rows(&perm), tau).unwrap() - r0)
                    .abs(),
            )
            .max(
                (feature_loss(&fs.select_rows(&perm), &ft.select_rows(&perm), tau).unwrap() - f0)
                    .abs(),
            );

        let mut cperm: Vec<usize> = (0..c).collect();
        rand::seq::SliceRandom::shuffle(cperm.as_mut_slice(), &mut rng);
        classes = classes.max(
            (response_loss(&zs.select_cols(&cperm), &zt.select_cols(&cperm), tau).unwrap() - r0)
                .abs(),
        );

        let mut scaled = |m: &Matrix| {
            let mut out = m.clone();
            for i in 0..b {
                let s = 10f64.powf(rng.random_range(-2.0..2.0));
                out.row_mut(i).iter_mut().for_each(|x| *x *= s);
            }
            out
        };
        let (fs2, ft2) = (scaled(&fs), scaled(&ft));
        scale = scale.max((feature_loss(&fs2, &ft2, tau).unwrap() - f0).abs());
    }
    Outcome::new(
        rows <= 1e-9 && classes <= 1e-9 && scale <= 1e-9,
        format!(
            "max deviation: row perm {rows:.2e}, class perm {classes:.2e}, row scale {scale:.2e}"
        ),
    )
}

fn kd_trend() -> Outcome {
    let start = Instant::now();
    let scores = per_seed(&SEEDS, |seed| {
        let cfg = PipelineConfig::default().with_seed(seed);
        let data = generate(&cfg.data).unwrap();
        let teacher = train_teacher(&data, &cfg).unwrap().model;
        let mut ce_only = cfg.clone();
        ce_only.kd.alpha = 0.0;
        ce_only.kd.beta = 0.0;
        let score = |cfg: &PipelineConfig| -> BTreeMap<Modality, f64> {
            distill_students(&data, &teacher, cfg)
                .unwrap()
                .iter()
                .map(|s| {
                    let f1 = evaluate_encoder(&s.model, &data.test, data.num_classes)
                        .unwrap()
                        .weighted_f1;
                    (s.model.modality(), f1)
                })
                .collect()
        };
        (score(&cfg), score(&ce_only))
    });
    let (fast, time) = within(start.elapsed(), 180);
    let mut ok = fast;
    let mut parts = Vec::new();
    for m in [Modality::Audio, Modality::Visual] {
        let mean = |kd: bool| {
            scores
                .iter()
                .map(|(with, without)| if kd { with[&m] } else { without[&m] })
                .sum::<f64>()
                / SEEDS.len() as f64
        };
        let (with, without) = (mean(true), mean(false));
        ok &= with - without > 0.0;
        parts.push(format!(
            "{m}: with KD {with:.4} vs CE only {without:.4} ({:+.4})",
            with - without
        ));
    }
    Outcome::new(ok, format!("{}; {time}", parts.join(", ")))
}

fn fusion_trend() -> Outcome {
    let scores = per_seed(&SEEDS, |seed| {
        let cfg = PipelineConfig::default().with_seed(seed);
        let data = generate(&cfg.data).unwrap();
        let run = run_pipeline(&data, &cfg).unwrap();
        let teacher = evaluate_encoder(&run.teacher.model, &data.test, data.num_classes)
            .unwrap()
            .weighted_f1;
        let students: Vec<_> = run.students.iter().map(|s| &s.model).collect();
        let fused = evaluate_fusion(
            &run.fusion.model,
            &run.teacher.model,
            &students,
            &data.test,
            data.num_classes,
        )
        .unwrap()
        .weighted_f1;
        (fused, teacher)
    });
    let wins = scores.iter().filter(|(f, t)| f >= t).count();
    let detail = scores
        .iter()
        .map(|(f, t)| format!("{f:.4}/{t:.4}"))
        .collect::<Vec<_>>()
        .join(" ");
    Outcome::new(
        wins >= 4,
        format!("fused >= teacher-only in {wins}/5 seeds (fused/teacher: {detail})"),
    )
}

fn teacher_modality() -> Outcome {
    let spec = GridSpec {
        seeds: vec![0, 1, 2],
        toggles: vec![],
        subsets: vec![],
        teachers: vec![Modality::Audio, Modality::Visual, Modality::Text],
    };
    let grid = run_ablation(&spec, &PipelineConfig::default(), 3).unwrap();
    let means: Vec<(Modality, f64)> = grid
        .group("teacher")
        .map(|c| match &c.cell {
            kdfusion::evaluation::Cell::Teacher(m) => (*m, c.mean_f1()),
            _ => unreachable!("teacher group holds teacher cells"),
        })
        .collect();
    let text = means
        .iter()
        .find(|(m, _)| *m == Modality::Text)
        .expect("text cell")
        .1;
    let best = means.iter().all(|&(m, f)| m == Modality::Text || f < text);
    let detail = means
        .iter()
        .map(|(m, f)| format!("{m} {f:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(best, format!("mean fused F1 by teacher: {detail}"))
}

/// Data rows per cell of an ablation CSV, up to the summary block.
fn cells_in(csv: &str) -> Result<BTreeMap<String, Vec<u64>>, String> {
    let mut lines = csv.lines();
    if lines.next() != Some("group,cell,seed,weighted_f1") {
        return Err("bad header".into());
    }
    let mut cells: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for line in lines.take_while(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let [_, cell, seed, f1] = fields[..] else {
            return Err(format!("malformed row '{line}'"));
        };
        let f1: f64 = f1.parse().map_err(|_| format!("bad metric in '{line}'"))?;
        if !(0.0..=1.0).contains(&f1) {
            return Err(format!("metric out of range in '{line}'"));
        }
        cells
            .entry(cell.to_string())
            .or_default()
            .push(seed.parse().map_err(|_| "bad seed")?);
    }
    Ok(cells)
}

fn ablation_grid() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(SEEDS.len());
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_kdfusion"))
        .args(["ablate", "--threads", &threads.to_string(), "--out-dir"])
        .arg(dir.path())
        .env_remove("KDFUSION_CONFIG")
        .output()
        .expect("binary runs");
    let (fast, time) = within(start.elapsed(), 600);
    if !status.status.success() {
        return Outcome::new(
            false,
            format!("ablate failed: {}", String::from_utf8_lossy(&status.stderr)),
        );
    }
    let mut ok = fast;
    let mut parts = Vec::new();
    for (group, rows) in [("toggles", 4), ("modalities", 6)] {
        let csv = std::fs::read_to_string(dir.path().join(format!("ablation_{group}.csv")))
            .unwrap_or_default();
        match cells_in(&csv) {
            Ok(cells) => {
                let complete = cells.len() == rows && cells.values().all(|s| s.as_slice() == SEEDS);
                ok &= complete;
                parts.push(format!(
                    "{group}: {} cells x {:?} seeds",
                    cells.len(),
                    cells.values().next().map(Vec::len)
                ));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{group}: {e}"));
            }
        }
    }
    Outcome::new(
        ok,
        format!("{}; {threads} threads, {time}", parts.join(", ")),
    )
}

fn run_cli_pipeline(dir: &Path) -> Result<(), String> {
    for cmd in [
        "gen-data",
        "train-teacher",
        "distill",
        "train-fusion",
        "evaluate",
    ] {
        let out = Command::new(env!("CARGO_BIN_EXE_kdfusion"))
            .args([cmd, "--threads", "1", "--out-dir"])
            .arg(dir)
            .env_remove("KDFUSION_CONFIG")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{cmd}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

/// Every artifact except manifests, which record their own directory.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.to_string_lossy().ends_with(".manifest.json") {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if let Err(e) = run_cli_pipeline(a.path()).and_then(|()| run_cli_pipeline(b.path())) {
        return Outcome::new(false, e);
    }
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    let metrics = fa.keys().filter(|k| k.ends_with("_metrics.csv")).count();
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    Outcome::new(
        differing.is_empty() && fa.len() == fb.len() && metrics == 3,
        format!(
            "{} artifacts ({metrics} metrics files) compared, differing: {differing:?}",
            fa.len()
        ),
    )
}

#[derive(Deserialize)]
struct OracleCase {
    num_classes: usize,
    labels: Vec<usize>,
    predictions: Vec<usize>,
    weighted_f1: f64,
    confusion: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
struct OracleFile {
    reference: String,
    cases: Vec<OracleCase>,
}

fn metric_oracle() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics_oracle.json");
    let file: OracleFile = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let (mut count_mismatches, mut max_f1_err) = (0, 0.0f64);
    for case in &file.cases {
        let f1 = weighted_f1(&case.predictions, &case.labels, case.num_classes).unwrap();
        max_f1_err = max_f1_err.max((f1 - case.weighted_f1).abs());
        let cm = confusion_matrix(&case.predictions, &case.labels, case.num_classes).unwrap();
        count_mismatches += usize::from(cm.counts != case.confusion);
    }
    Outcome::new(
        file.cases.len() == 100 && count_mismatches == 0 && max_f1_err <= 1e-9,
        format!(
            "{} cases vs {}: confusion mismatches {count_mismatches}, max F1 error {max_f1_err:.2e}",
            file.cases.len(),
            file.reference
        ),
    )
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 10] = [
        ("gradients", gradients),
        ("loss-identities", loss_identities),
        ("shift-contract", shift_contract),
        ("invariances", invariances),
        ("kd-trend", kd_trend),
        ("fusion-trend", fusion_trend),
        ("teacher-modality", teacher_modality),
        ("ablation-grid", ablation_grid),
        ("determinism", determinism),
        ("metric-oracle", metric_oracle),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (name, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let outcome = check();
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {}", outcome.detail);
        if !outcome.passed {
            failed.push(name);
        }
    }
    println!("acceptance: {}/{ran} passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
