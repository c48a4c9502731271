use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use kdfusion::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use kdfusion::dataset::{generate, load_features, save_features, DatasetSplit, Split};
use kdfusion::encoders::EncoderModel;
use kdfusion::evaluation::{evaluate_encoder, evaluate_fusion, run_ablation, EvalReport, GridSpec};
use kdfusion::training::{
    distill_students, gradient_check, metrics_csv, train_fusion, train_teacher, FusionModel,
    LossId, PipelineConfig,
};
use kdfusion::Modality;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

const TEACHER: &str = "teacher";
const STUDENT: &str = "student";
const FUSION: &str = "fusion";

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    versions: Versions,
    outputs: Vec<String>,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct Versions {
    kdfusion: &'static str,
    checkpoint_format: u32,
}

/// Collects written files so the manifest can list them.
struct Outputs<'a> {
    cfg: &'a RunConfig,
    command: &'a str,
    manifest: String,
    files: Vec<PathBuf>,
}

impl<'a> Outputs<'a> {
    fn new(cfg: &'a RunConfig, command: &'a str) -> Self {
        Self {
            cfg,
            command,
            manifest: format!("{command}.manifest.json"),
            files: Vec::new(),
        }
    }

    /// For commands whose variants write side by side.
    fn named(mut self, manifest_stem: &str) -> Self {
        self.manifest = format!("{manifest_stem}.manifest.json");
        self
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.cfg.output_dir().join(name);
        write_file(&path, contents)?;
        self.files.push(path);
        Ok(())
    }

    fn record(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    fn finish(self) -> Result<(), CliError> {
        let dir = self.cfg.output_dir();
        let manifest = Manifest {
            command: self.command,
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            versions: Versions {
                kdfusion: env!("CARGO_PKG_VERSION"),
                checkpoint_format: CHECKPOINT_VERSION,
            },
            outputs: self
                .files
                .iter()
                .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
                .collect(),
            config: self.cfg,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&dir.join(&self.manifest), &(text + "\n"))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    let io = |e: std::io::Error| {
        CliError::Core(kdfusion::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

fn student_name(m: Modality) -> String {
    format!("{STUDENT}_{m}")
}

/// Refuses artifacts trained under a different configuration unless told otherwise.
fn check_hash<T>(
    ckpt: &Checkpoint<T>,
    path: &Path,
    cfg: &RunConfig,
    allow_mismatch: bool,
) -> Result<(), CliError> {
    let expected = cfg.hash();
    if ckpt.config_hash != expected && !allow_mismatch {
        return Err(CliError::Usage(format!(
            "{} was trained under config {} but the active config is {}; pass --allow-config-mismatch to use it anyway",
            path.display(),
            ckpt.config_hash,
            expected
        )));
    }
    Ok(())
}

struct Loaded {
    teacher: EncoderModel,
    students: Vec<EncoderModel>,
    fusion: FusionModel,
}

fn load_teacher(cfg: &RunConfig, allow_mismatch: bool) -> Result<EncoderModel, CliError> {
    let path = cfg.checkpoint(TEACHER);
    let ckpt = Checkpoint::<EncoderModel>::load(&path, TEACHER)?;
    check_hash(&ckpt, &path, cfg, allow_mismatch)?;
    if ckpt.model.modality() != cfg.teacher {
        return Err(CliError::Usage(format!(
            "{} holds a {} encoder but the config names {} as teacher",
            path.display(),
            ckpt.model.modality(),
            cfg.teacher
        )));
    }
    Ok(ckpt.model)
}

fn load_students(cfg: &RunConfig, allow_mismatch: bool) -> Result<Vec<EncoderModel>, CliError> {
    cfg.pipeline()
        .students()
        .into_iter()
        .map(|m| {
            let path = cfg.checkpoint(&student_name(m));
            let ckpt = Checkpoint::<EncoderModel>::load(&path, STUDENT)?;
            check_hash(&ckpt, &path, cfg, allow_mismatch)?;
            Ok(ckpt.model)
        })
        .collect()
}

pub fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let path = out.unwrap_or_else(|| cfg.data_file());
    let data = generate(&cfg.data)?;
    save_features(&data, &path)?;
    let mut outputs = Outputs::new(cfg, "gen-data");
    outputs.record(path.clone());
    outputs.finish()?;
    println!(
        "wrote {} ({} train / {} dev / {} test records)",
        path.display(),
        data.train.len(),
        data.dev.len(),
        data.test.len()
    );
    Ok(())
}

pub fn train_teacher_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_features(&cfg.data_file())?;
    let trained = train_teacher(&data, &cfg.pipeline())?;
    let path = cfg.checkpoint(TEACHER);
    Checkpoint::new(TEACHER, cfg.seed, cfg.hash(), trained.model).save(&path)?;
    let mut outputs = Outputs::new(cfg, "train-teacher");
    outputs.record(path);
    outputs.write("teacher_metrics.csv", &metrics_csv(&trained.history))?;
    outputs.finish()?;
    println!(
        "teacher ({}): best dev weighted F1 {:.4} at epoch {}",
        cfg.teacher, trained.best_dev_f1, trained.best_epoch
    );
    Ok(())
}

pub fn distill(cfg: &RunConfig, allow_mismatch: bool) -> Result<(), CliError> {
    let data = load_features(&cfg.data_file())?;
    let teacher = load_teacher(cfg, allow_mismatch)?;
    let students = distill_students(&data, &teacher, &cfg.pipeline())?;
    let mut outputs = Outputs::new(cfg, "distill");
    let mut history = Vec::new();
    for s in students {
        let m = s.model.modality();
        let path = cfg.checkpoint(&student_name(m));
        Checkpoint::new(STUDENT, cfg.seed, cfg.hash(), s.model).save(&path)?;
        outputs.record(path);
        println!(
            "student ({m}): best dev weighted F1 {:.4} at epoch {}",
            s.best_dev_f1, s.best_epoch
        );
        history.extend(s.history);
    }
    outputs.write("distill_metrics.csv", &metrics_csv(&history))?;
    outputs.finish()
}

pub fn train_fusion_cmd(cfg: &RunConfig, allow_mismatch: bool) -> Result<(), CliError> {
    let data = load_features(&cfg.data_file())?;
    let teacher = load_teacher(cfg, allow_mismatch)?;
    let students = load_students(cfg, allow_mismatch)?;
    let refs: Vec<&EncoderModel> = students.iter().collect();
    let trained = train_fusion(&data, &teacher, &refs, &cfg.pipeline())?;
    let path = cfg.checkpoint(FUSION);
    Checkpoint::new(FUSION, cfg.seed, cfg.hash(), trained.model).save(&path)?;
    let mut outputs = Outputs::new(cfg, "train-fusion");
    outputs.record(path);
    outputs.write("fusion_metrics.csv", &metrics_csv(&trained.history))?;
    outputs.finish()?;
    println!(
        "fusion: best dev weighted F1 {:.4} at epoch {}",
        trained.best_dev_f1, trained.best_epoch
    );
    Ok(())
}

/// Initial weights of every phase, exactly as training would start them.
fn untrained(data: &DatasetSplit, cfg: &RunConfig) -> Result<Loaded, CliError> {
    let mut p: PipelineConfig = cfg.pipeline();
    p.train.teacher_epochs = 0;
    p.train.student_epochs = 0;
    p.train.fusion_epochs = 0;
    let teacher = train_teacher(data, &p)?.model;
    let students: Vec<EncoderModel> = distill_students(data, &teacher, &p)?
        .into_iter()
        .map(|s| s.model)
        .collect();
    let refs: Vec<&EncoderModel> = students.iter().collect();
    let fusion = train_fusion(data, &teacher, &refs, &p)?.model;
    Ok(Loaded {
        teacher,
        students,
        fusion,
    })
}

fn trained(cfg: &RunConfig, allow_mismatch: bool) -> Result<Loaded, CliError> {
    let teacher = load_teacher(cfg, allow_mismatch)?;
    let students = load_students(cfg, allow_mismatch)?;
    let path = cfg.checkpoint(FUSION);
    let ckpt = Checkpoint::<FusionModel>::load(&path, FUSION)?;
    check_hash(&ckpt, &path, cfg, allow_mismatch)?;
    Ok(Loaded {
        teacher,
        students,
        fusion: ckpt.model,
    })
}

pub struct EvaluateArgs {
    pub split: Split,
    pub untrained: bool,
    pub allow_config_mismatch: bool,
}

pub fn evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<(), CliError> {
    let data = load_features(&cfg.data_file())?;
    let models = if args.untrained {
        untrained(&data, cfg)?
    } else {
        trained(cfg, args.allow_config_mismatch)?
    };
    let records = data.split(args.split);
    let classes = data.num_classes;
    let mut reports: Vec<(String, EvalReport)> = vec![(
        TEACHER.to_string(),
        evaluate_encoder(&models.teacher, records, classes)?,
    )];
    for s in &models.students {
        reports.push((
            student_name(s.modality()),
            evaluate_encoder(s, records, classes)?,
        ));
    }
    let refs: Vec<&EncoderModel> = models.students.iter().collect();
    reports.push((
        FUSION.to_string(),
        evaluate_fusion(&models.fusion, &models.teacher, &refs, records, classes)?,
    ));

    let prefix = if args.untrained { "untrained_" } else { "" };
    let split = args.split.name();
    let mut outputs = Outputs::new(cfg, "evaluate").named(&format!("{prefix}evaluate_{split}"));
    let mut summary = String::from("component,weighted_f1\n");
    for (name, report) in &reports {
        outputs.write(
            &format!("{prefix}eval_{split}_{name}.txt"),
            &report.to_text(),
        )?;
        outputs.write(
            &format!("{prefix}confusion_{split}_{name}.csv"),
            &report.confusion_csv(),
        )?;
        writeln!(summary, "{name},{:.12}", report.weighted_f1).expect("string write");
        println!("{name:>16}  {split} weighted F1 {:.4}", report.weighted_f1);
    }
    outputs.write(&format!("{prefix}eval_{split}_summary.csv"), &summary)?;
    outputs.finish()
}

pub fn ablate(cfg: &RunConfig, grid: Option<&Path>, threads: usize) -> Result<(), CliError> {
    let spec: GridSpec = match grid {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read grid spec {}: {e}", path.display()))
            })?;
            let de = toml::Deserializer::parse(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            serde_path_to_error::deserialize(de).map_err(|e| {
                CliError::Usage(format!(
                    "{}: key {}: {}",
                    path.display(),
                    e.path(),
                    e.inner().message()
                ))
            })?
        }
        None => GridSpec::default(),
    };
    let base = cfg.pipeline();
    let result = run_ablation(&spec, &base, threads)?;
    let mut outputs = Outputs::new(cfg, "ablate");
    for group in ["toggles", "modalities", "teacher"] {
        outputs.write(
            &format!("ablation_{group}.csv"),
            &result.to_csv(Some(group)),
        )?;
    }
    outputs.write("ablation_students.csv", &result.students_csv())?;
    let mut trends = String::new();
    for t in result.trends(&base) {
        let status = if t.holds { "holds" } else { "does not hold" };
        writeln!(trends, "{}: {status} ({})", t.name, t.detail).expect("string write");
    }
    outputs.write("ablation_trends.txt", &trends)?;
    outputs.finish()?;
    print!("{}", result.to_csv(None));
    print!("{trends}");
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, loss: &str, seeds: u64) -> Result<(), CliError> {
    let losses: Vec<LossId> = if loss == "all" {
        LossId::ALL.to_vec()
    } else {
        vec![loss.parse()?]
    };
    let mut report = String::from("loss,seed,max_rel_err,passed\n");
    let mut failures = Vec::new();
    for id in losses {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let err = gradient_check(id, seed)?;
            let ok = err <= kdfusion::training::gradcheck::TOLERANCE;
            writeln!(report, "{},{seed},{err:.3e},{ok}", id.name()).expect("string write");
            if !ok {
                failures.push(format!("{} seed {seed}: {err:.3e}", id.name()));
            }
            worst = worst.max(err);
        }
        println!(
            "{:>16}  {seeds} seeds  max relative error {worst:.3e}",
            id.name()
        );
    }
    let mut outputs = Outputs::new(cfg, "gradcheck");
    outputs.write("gradcheck.csv", &report)?;
    outputs.finish()?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "relative error above {:e}: {}",
            kdfusion::training::gradcheck::TOLERANCE,
            failures.join("; ")
        )))
    }
}

/// toml errors repeat the key path on a second line.
pub(crate) fn first_line(e: &impl std::fmt::Display) -> String {
    e.to_string().lines().next().unwrap_or_default().to_string()
}
