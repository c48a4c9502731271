//! Ablation grid: fusion/distillation toggles, modality subsets and teacher
//! choice, each trained per seed. Within a seed, every cell draws its random
//! streams from keys that name the phase and modality (not the cell), so a
//! component shared between cells is trained once and reused, and the
//! results do not depend on thread count or cell order.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{generate, DatasetSplit};
use crate::encoders::EncoderModel;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_encoder, evaluate_fusion};
use crate::training::{
    distill_students, train_fusion, train_teacher, PipelineConfig, TrainedEncoder, TrainedFusion,
};
use crate::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggle {
    pub asf: bool,
    pub response: bool,
    pub feature: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Toggle(Toggle),
    /// Modalities fed to the classifier; the configured teacher must be among
    /// them whenever there is more than one.
    Subset(Vec<Modality>),
    Teacher(Modality),
}

impl Cell {
    pub fn group(&self) -> &'static str {
        match self {
            Cell::Toggle(_) => "toggles",
            Cell::Subset(_) => "modalities",
            Cell::Teacher(_) => "teacher",
        }
    }

    pub fn key(&self) -> String {
        let flag = |b: bool| if b { "on" } else { "off" };
        match self {
            Cell::Toggle(t) => format!(
                "asf={}|response={}|feature={}",
                flag(t.asf),
                flag(t.response),
                flag(t.feature)
            ),
            Cell::Subset(ms) => ms
                .iter()
                .map(|m| m.letter().to_string())
                .collect::<Vec<_>>()
                .join("+"),
            Cell::Teacher(m) => m.name().to_string(),
        }
    }
}

/// Which cells to run and on which seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub seeds: Vec<u64>,
    pub toggles: Vec<Toggle>,
    pub subsets: Vec<Vec<Modality>>,
    pub teachers: Vec<Modality>,
}

impl Default for GridSpec {
    fn default() -> Self {
        use Modality::{Audio, Text, Visual};
        let t = |asf, response, feature| Toggle {
            asf,
            response,
            feature,
        };
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            toggles: vec![
                t(false, false, false),
                t(true, false, false),
                t(true, true, false),
                t(true, true, true),
            ],
            subsets: vec![
                vec![Audio],
                vec![Visual],
                vec![Text],
                vec![Text, Visual],
                vec![Text, Audio],
                vec![Text, Audio, Visual],
            ],
            teachers: vec![Audio, Visual, Text],
        }
    }
}

impl GridSpec {
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells: Vec<Cell> = self.toggles.iter().copied().map(Cell::Toggle).collect();
        cells.extend(self.subsets.iter().cloned().map(Cell::Subset));
        cells.extend(self.teachers.iter().copied().map(Cell::Teacher));
        cells
    }

    pub fn validate(&self, base: &PipelineConfig) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for cell in self.cells() {
            if !seen.insert((cell.group(), cell.key())) {
                return Err(Error::Config(format!(
                    "duplicate ablation cell {}/{}",
                    cell.group(),
                    cell.key()
                )));
            }
            if let Cell::Subset(ms) = &cell {
                let mut sorted = ms.clone();
                sorted.sort_by_key(|m| *m as u8);
                sorted.dedup();
                if ms.is_empty() || sorted.len() != ms.len() {
                    return Err(Error::Config(format!(
                        "modality subset '{}' is empty or repeats a modality",
                        cell.key()
                    )));
                }
                if ms.len() > 1 && !ms.contains(&base.teacher) {
                    return Err(Error::Config(format!(
                        "modality subset '{}' combines modalities without the teacher ({})",
                        cell.key(),
                        base.teacher
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Test-split scores of one cell on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub weighted_f1: f64,
    /// Student test F1 by modality, for cells that train students.
    pub students: BTreeMap<Modality, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub per_seed: Vec<SeedOutcome>,
}

impl CellResult {
    pub fn mean_f1(&self) -> f64 {
        self.per_seed.iter().map(|s| s.weighted_f1).sum::<f64>() / self.per_seed.len() as f64
    }

    pub fn mean_student_f1(&self, m: Modality) -> Option<f64> {
        let v: Vec<f64> = self
            .per_seed
            .iter()
            .filter_map(|s| s.students.get(&m).copied())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Direction and margin of an expected ordering. The runner only reports;
/// it never fails a run over a trend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
}

impl AblationGrid {
    pub fn find(&self, cell: &Cell) -> Option<&CellResult> {
        self.cells.iter().find(|c| &c.cell == cell)
    }

    pub fn group(&self, group: &str) -> impl Iterator<Item = &CellResult> + '_ {
        let group = group.to_string();
        self.cells.iter().filter(move |c| c.cell.group() == group)
    }

    /// One row per (cell, seed), then a summary block of per-cell means.
    pub fn to_csv(&self, group: Option<&str>) -> String {
        let cells: Vec<&CellResult> = self
            .cells
            .iter()
            .filter(|c| group.is_none_or(|g| c.cell.group() == g))
            .collect();
        let mut out = String::from("group,cell,seed,weighted_f1\n");
        for c in &cells {
            for s in &c.per_seed {
                writeln!(
                    out,
                    "{},{},{},{:.10}",
                    c.cell.group(),
                    c.cell.key(),
                    s.seed,
                    s.weighted_f1
                )
                .expect("String");
            }
        }
        out.push_str("\n# summary\ngroup,cell,mean_weighted_f1\n");
        for c in &cells {
            writeln!(
                out,
                "{},{},{:.10}",
                c.cell.group(),
                c.cell.key(),
                c.mean_f1()
            )
            .expect("String");
        }
        out
    }

    /// Student test F1 per (cell, seed, modality) for the toggle rows.
    pub fn students_csv(&self) -> String {
        let mut out = String::from("group,cell,seed,modality,weighted_f1\n");
        for c in &self.cells {
            for s in &c.per_seed {
                for (m, f) in &s.students {
                    writeln!(
                        out,
                        "{},{},{},{},{:.10}",
                        c.cell.group(),
                        c.cell.key(),
                        s.seed,
                        m,
                        f
                    )
                    .expect("String");
                }
            }
        }
        out
    }

    pub fn trends(&self, base: &PipelineConfig) -> Vec<TrendReport> {
        let mut reports = Vec::new();
        let toggles: Vec<&CellResult> = self.group("toggles").collect();
        if toggles.len() >= 2 {
            let means: Vec<f64> = toggles.iter().map(|c| c.mean_f1()).collect();
            let holds = means.windows(2).all(|w| w[1] >= w[0]);
            let detail = toggles
                .iter()
                .map(|c| format!("{} {:.4}", c.cell.key(), c.mean_f1()))
                .collect::<Vec<_>>()
                .join(" -> ");
            reports.push(TrendReport {
                name: "toggle rows non-decreasing".into(),
                holds,
                detail,
            });
        }

        let none = Cell::Toggle(Toggle {
            asf: true,
            response: false,
            feature: false,
        });
        let both = Cell::Toggle(Toggle {
            asf: true,
            response: true,
            feature: true,
        });
        if let (Some(a), Some(b)) = (self.find(&none), self.find(&both)) {
            for m in base.students() {
                if let (Some(x), Some(y)) = (a.mean_student_f1(m), b.mean_student_f1(m)) {
                    reports.push(TrendReport {
                        name: format!(
                            "{m} student: both distillation losses >= cross entropy only"
                        ),
                        holds: y >= x && y - x > 0.0,
                        detail: format!("{x:.4} -> {y:.4} (margin {:+.4})", y - x),
                    });
                }
            }
        }

        let alone = self.find(&Cell::Subset(vec![base.teacher]));
        let mut all = vec![base.teacher];
        all.extend(base.students());
        let fused = self
            .group("modalities")
            .find(|c| matches!(&c.cell, Cell::Subset(ms) if ms.len() == 3));
        if let (Some(a), Some(f)) = (alone, fused) {
            let wins = a
                .per_seed
                .iter()
                .zip(&f.per_seed)
                .filter(|(x, y)| y.weighted_f1 >= x.weighted_f1)
                .count();
            reports.push(TrendReport {
                name: "all modalities >= teacher alone".into(),
                holds: f.mean_f1() >= a.mean_f1(),
                detail: format!(
                    "{:.4} vs {:.4}; fused >= teacher on {wins}/{} seeds",
                    f.mean_f1(),
                    a.mean_f1(),
                    a.per_seed.len()
                ),
            });
        }

        let teachers: Vec<&CellResult> = self.group("teacher").collect();
        if let Some(best) = teachers
            .iter()
            .max_by(|a, b| a.mean_f1().total_cmp(&b.mean_f1()))
        {
            reports.push(TrendReport {
                name: format!("{} teacher is best", base.teacher),
                holds: best.cell == Cell::Teacher(base.teacher),
                detail: teachers
                    .iter()
                    .map(|c| format!("{} {:.4}", c.cell.key(), c.mean_f1()))
                    .collect::<Vec<_>>()
                    .join(", "),
            });
        }
        reports
    }
}

/// Memoized components for one seed.
struct SeedRunner {
    cfg: PipelineConfig,
    data: DatasetSplit,
    teachers: HashMap<Modality, TrainedEncoder>,
    /// Keyed by (teacher, alpha bits, beta bits); with both weights zero the
    /// teacher is irrelevant and recorded as `None`.
    students: HashMap<(Option<Modality>, u64, u64), Vec<TrainedEncoder>>,
    fusions: HashMap<String, TrainedFusion>,
}

impl SeedRunner {
    fn new(base: &PipelineConfig, seed: u64) -> Result<Self> {
        let cfg = base.clone().with_seed(seed);
        Ok(Self {
            data: generate(&cfg.data)?,
            cfg,
            teachers: HashMap::new(),
            students: HashMap::new(),
            fusions: HashMap::new(),
        })
    }

    fn teacher(&mut self, m: Modality) -> Result<&TrainedEncoder> {
        if !self.teachers.contains_key(&m) {
            let cfg = PipelineConfig {
                teacher: m,
                ..self.cfg.clone()
            };
            let trained = train_teacher(&self.data, &cfg)?;
            self.teachers.insert(m, trained);
        }
        Ok(&self.teachers[&m])
    }

    fn students(&mut self, cfg: &PipelineConfig) -> Result<Vec<TrainedEncoder>> {
        let kd_on = cfg.kd.alpha != 0.0 || cfg.kd.beta != 0.0;
        let key = (
            kd_on.then_some(cfg.teacher),
            cfg.kd.alpha.to_bits(),
            cfg.kd.beta.to_bits(),
        );
        if !self.students.contains_key(&key) {
            let teacher = self.teacher(cfg.teacher)?.model.clone();
            let trained = distill_students(&self.data, &teacher, cfg)?;
            self.students.insert(key, trained);
        }
        Ok(self.students[&key].clone())
    }

    /// Fused test F1 and student test F1s for a configuration; `keep`
    /// restricts which students feed the fusion head.
    fn fused(&mut self, cfg: &PipelineConfig, keep: &[Modality]) -> Result<SeedOutcome> {
        let students = self.students(cfg)?;
        let teacher = self.teacher(cfg.teacher)?.model.clone();
        let chosen: Vec<&EncoderModel> = students
            .iter()
            .map(|s| &s.model)
            .filter(|m| keep.contains(&m.modality()))
            .collect();
        let key = format!(
            "{}|{:?}|{}|{}|{}",
            cfg.teacher,
            chosen.iter().map(|m| m.modality()).collect::<Vec<_>>(),
            cfg.kd.alpha.to_bits(),
            cfg.kd.beta.to_bits(),
            cfg.fusion.asf
        );
        if !self.fusions.contains_key(&key) {
            let trained = train_fusion(&self.data, &teacher, &chosen, cfg)?;
            self.fusions.insert(key.clone(), trained);
        }
        let fusion = &self.fusions[&key];
        let classes = self.data.num_classes;
        let report = evaluate_fusion(&fusion.model, &teacher, &chosen, &self.data.test, classes)?;
        let mut student_f1 = BTreeMap::new();
        for s in &students {
            student_f1.insert(
                s.model.modality(),
                evaluate_encoder(&s.model, &self.data.test, classes)?.weighted_f1,
            );
        }
        Ok(SeedOutcome {
            seed: self.cfg.seed,
            weighted_f1: report.weighted_f1,
            students: student_f1,
        })
    }

    fn run(&mut self, cell: &Cell) -> Result<SeedOutcome> {
        let base = self.cfg.clone();
        let classes = self.data.num_classes;
        match cell {
            Cell::Toggle(t) => {
                let mut cfg = base.clone();
                cfg.kd.alpha = if t.response { base.kd.alpha } else { 0.0 };
                cfg.kd.beta = if t.feature { base.kd.beta } else { 0.0 };
                cfg.fusion.asf = t.asf;
                self.fused(&cfg, &base.students())
            }
            Cell::Subset(ms) if ms.len() == 1 => {
                let m = ms[0];
                let model = if m == base.teacher {
                    self.teacher(m)?.model.clone()
                } else {
                    let students = self.students(&base)?;
                    students
                        .into_iter()
                        .find(|s| s.model.modality() == m)
                        .expect("student exists")
                        .model
                };
                let f1 = evaluate_encoder(&model, &self.data.test, classes)?.weighted_f1;
                Ok(SeedOutcome {
                    seed: base.seed,
                    weighted_f1: f1,
                    students: BTreeMap::new(),
                })
            }
            Cell::Subset(ms) => {
                let mut cfg = base.clone();
                cfg.fusion.asf = true;
                self.fused(&cfg, ms)
            }
            Cell::Teacher(m) => {
                let cfg = PipelineConfig {
                    teacher: *m,
                    ..base.clone()
                };
                self.fused(&cfg, &cfg.students())
            }
        }
    }
}

fn run_seed(base: &PipelineConfig, cells: &[Cell], seed: u64) -> Result<Vec<SeedOutcome>> {
    let mut runner = SeedRunner::new(base, seed)?;
    cells.iter().map(|c| runner.run(c)).collect()
}

/// Trains every cell of `spec` on every seed. Seeds are spread over
/// `threads` workers; the result does not depend on the thread count.
pub fn run_ablation(
    spec: &GridSpec,
    base: &PipelineConfig,
    threads: usize,
) -> Result<AblationGrid> {
    base.validate()?;
    spec.validate(base)?;
    let cells = spec.cells();
    let threads = threads.clamp(1, spec.seeds.len());
    let per_seed: Vec<Result<Vec<SeedOutcome>>> = if threads == 1 {
        spec.seeds
            .iter()
            .map(|&s| run_seed(base, &cells, s))
            .collect()
    } else {
        let chunks: Vec<&[u64]> = spec
            .seeds
            .chunks(spec.seeds.len().div_ceil(threads))
            .collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    let cells = &cells;
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|&s| run_seed(base, cells, s))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        })
    };
    let per_seed: Vec<Vec<SeedOutcome>> = per_seed.into_iter().collect::<Result<_>>()?;
    let cells = cells
        .into_iter()
        .enumerate()
        .map(|(i, cell)| CellResult {
            cell,
            per_seed: per_seed
                .iter()
                .map(|outcomes| outcomes[i].clone())
                .collect(),
        })
        .collect();
    Ok(AblationGrid {
        seeds: spec.seeds.clone(),
        cells,
    })
}
