//! Synthetic multimodal conversations and the JSON-lines feature file.
//!
//! Every utterance carries one feature vector per modality. The generator
//! draws each as a class mean scaled by a per-modality separation strength
//! plus isotropic Gaussian noise. Text additionally blends in the running
//! mean of earlier turns' raw text features and ends with a one-hot speaker
//! block, a numeric stand-in for conditioning on dialogue context and the
//! current speaker.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;

pub const FEATURE_SCHEMA: &str = "kdfusion.features";
pub const FEATURE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub speaker_id: String,
    pub label: usize,
    pub text_feat: Vec<f64>,
    pub audio_feat: Vec<f64>,
    pub visual_feat: Vec<f64>,
}

impl FeatureRecord {
    pub fn features(&self, modality: Modality) -> &[f64] {
        match modality {
            Modality::Text => &self.text_feat,
            Modality::Audio => &self.audio_feat,
            Modality::Visual => &self.visual_feat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub text: usize,
    pub audio: usize,
    pub visual: usize,
}

impl FeatureDims {
    pub fn get(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }
}

/// Train/dev/test records plus the metadata needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub num_classes: usize,
    pub dims: FeatureDims,
    pub train: Vec<FeatureRecord>,
    pub dev: Vec<FeatureRecord>,
    pub test: Vec<FeatureRecord>,
}

impl DatasetSplit {
    pub fn split(&self, split: Split) -> &[FeatureRecord] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<FeatureRecord> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub train_dialogues: usize,
    pub dev_dialogues: usize,
    pub test_dialogues: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub text_dim: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    /// Size of the speaker one-hot block appended to text features.
    pub num_speakers: usize,
    pub sep_text: f64,
    pub sep_audio: f64,
    pub sep_visual: f64,
    /// Weight on the mean of earlier turns' raw text features, in `[0, 1)`.
    pub context_mix: f64,
    /// Probability that a turn repeats the previous turn's label.
    pub label_persistence: f64,
    pub noise: f64,
    /// Uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probs: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            train_dialogues: 200,
            dev_dialogues: 40,
            test_dialogues: 60,
            min_utterances: 4,
            max_utterances: 8,
            text_dim: 16,
            audio_dim: 16,
            visual_dim: 16,
            num_speakers: 2,
            sep_text: 2.0,
            sep_audio: 0.8,
            sep_visual: 0.3,
            context_mix: 0.2,
            label_persistence: 0.0,
            noise: 1.0,
            class_probs: None,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn class_probabilities(&self) -> Vec<f64> {
        self.class_probs
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.num_classes as f64; self.num_classes])
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            text: self.text_dim + self.num_speakers,
            audio: self.audio_dim,
            visual: self.visual_dim,
        }
    }

    fn separation(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Text => self.sep_text,
            Modality::Audio => self.sep_audio,
            Modality::Visual => self.sep_visual,
        }
    }

    fn raw_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.text_dim,
            Modality::Audio => self.audio_dim,
            Modality::Visual => self.visual_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.train_dialogues == 0 || self.dev_dialogues == 0 || self.test_dialogues == 0 {
            return bad("every split needs at least one dialogue".into());
        }
        if self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return bad(format!(
                "utterance range {}..={} is empty or starts at zero",
                self.min_utterances, self.max_utterances
            ));
        }
        if self.text_dim == 0 || self.audio_dim == 0 || self.visual_dim == 0 {
            return bad("feature dimensions must be positive".into());
        }
        if self.num_speakers == 0 {
            return bad("num_speakers must be at least 1".into());
        }
        for (name, v) in [
            ("sep_text", self.sep_text),
            ("sep_audio", self.sep_audio),
            ("sep_visual", self.sep_visual),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.context_mix) {
            return bad(format!(
                "context_mix must lie in [0, 1), got {}",
                self.context_mix
            ));
        }
        if !(0.0..=1.0).contains(&self.label_persistence) {
            return bad(format!(
                "label_persistence must lie in [0, 1], got {}",
                self.label_persistence
            ));
        }
        let probs = self.class_probabilities();
        if probs.len() != self.num_classes {
            return bad(format!(
                "class_probs has {} entries for {} classes",
                probs.len(),
                self.num_classes
            ));
        }
        if probs.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return bad("class_probs must be finite and nonnegative".into());
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("class_probs sum to {total}, not 1"));
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generates train/dev/test conversations. Pure function of `config`.
pub fn generate(config: &GeneratorConfig) -> Result<DatasetSplit> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let classes = config.num_classes;

    // Unit-norm class means per modality, drawn text → audio → visual.
    let means: HashMap<Modality, Vec<Vec<f64>>> = Modality::ALL
        .iter()
        .map(|&m| {
            let dim = config.raw_dim(m);
            (
                m,
                (0..classes).map(|_| unit_gaussian(&mut rng, dim)).collect(),
            )
        })
        .collect();
    let label_dist = WeightedIndex::new(config.class_probabilities())
        .map_err(|e| Error::Config(format!("class_probs: {e}")))?;

    let draw = |rng: &mut ChaCha8Rng, m: Modality, label: usize| -> Vec<f64> {
        let sep = config.separation(m);
        means[&m][label]
            .iter()
            .map(|mu| sep * mu + config.noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let mut out = DatasetSplit {
        num_classes: classes,
        dims: config.dims(),
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    let mut dialogue_counter = 0usize;
    for split in Split::ALL {
        let count = match split {
            Split::Train => config.train_dialogues,
            Split::Dev => config.dev_dialogues,
            Split::Test => config.test_dialogues,
        };
        for _ in 0..count {
            let dialogue_id = format!("d{dialogue_counter:05}");
            dialogue_counter += 1;
            let turns = rng.random_range(config.min_utterances..=config.max_utterances);
            let mut history_sum = vec![0.0; config.text_dim];
            let mut prev_label = None;
            for turn in 0..turns {
                let speaker = rng.random_range(0..config.num_speakers);
                let label = match prev_label {
                    Some(l) if rng.random::<f64>() < config.label_persistence => l,
                    _ => label_dist.sample(&mut rng),
                };
                prev_label = Some(label);

                let raw_text = draw(&mut rng, Modality::Text, label);
                let audio_feat = draw(&mut rng, Modality::Audio, label);
                let visual_feat = draw(&mut rng, Modality::Visual, label);

                let mut text_feat: Vec<f64> = if turn == 0 {
                    raw_text.clone()
                } else {
                    let w = config.context_mix;
                    raw_text
                        .iter()
                        .zip(&history_sum)
                        .map(|(x, h)| (1.0 - w) * x + w * h / turn as f64)
                        .collect()
                };
                for (h, x) in history_sum.iter_mut().zip(&raw_text) {
                    *h += x;
                }
                text_feat.extend((0..config.num_speakers).map(|s| {
                    if s == speaker {
                        1.0
                    } else {
                        0.0
                    }
                }));

                out.split_mut(split).push(FeatureRecord {
                    dialogue_id: dialogue_id.clone(),
                    turn,
                    speaker_id: format!("s{speaker}"),
                    label,
                    text_feat,
                    audio_feat,
                    visual_feat,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    schema: String,
    version: u32,
    num_classes: usize,
    text_dim: usize,
    audio_dim: usize,
    visual_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRecord {
    dialogue_id: String,
    turn: usize,
    speaker_id: String,
    label: usize,
    split: Split,
    text_feat: Vec<f64>,
    audio_feat: Vec<f64>,
    visual_feat: Vec<f64>,
}

/// Writes the header line followed by one record per line, splits in
/// train/dev/test order.
pub fn save_features(data: &DatasetSplit, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = FileHeader {
        schema: FEATURE_SCHEMA.into(),
        version: FEATURE_SCHEMA_VERSION,
        num_classes: data.num_classes,
        text_dim: data.dims.text,
        audio_dim: data.dims.audio,
        visual_dim: data.dims.visual,
    };
    let io = |e: std::io::Error| Error::io(path, e);
    writeln!(
        w,
        "{}",
        serde_json::to_string(&header).expect("header serializes")
    )
    .map_err(io)?;
    for split in Split::ALL {
        for r in data.split(split) {
            let line = serde_json::to_string(&FileRecord {
                dialogue_id: r.dialogue_id.clone(),
                turn: r.turn,
                speaker_id: r.speaker_id.clone(),
                label: r.label,
                split,
                text_feat: r.text_feat.clone(),
                audio_feat: r.audio_feat.clone(),
                visual_feat: r.visual_feat.clone(),
            })
            .expect("record serializes");
            writeln!(w, "{line}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads and validates a feature file; a missing file is a dependency error.
pub fn load_features(path: &Path) -> Result<DatasetSplit> {
    if !path.exists() {
        return Err(Error::Dependency {
            path: path.to_path_buf(),
        });
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_features(BufReader::new(file))
}

pub fn parse_features<R: BufRead>(reader: R) -> Result<DatasetSplit> {
    let mut lines = reader.lines().enumerate();
    let header: FileHeader = loop {
        match lines.next() {
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header line".into(),
                })
            }
            Some((i, line)) => {
                let line = line.map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("bad header: {e}"),
                })?;
            }
        }
    };
    if header.schema != FEATURE_SCHEMA || header.version != FEATURE_SCHEMA_VERSION {
        return Err(Error::Schema {
            line: 1,
            message: format!(
                "unsupported schema {} v{} (expected {FEATURE_SCHEMA} v{FEATURE_SCHEMA_VERSION})",
                header.schema, header.version
            ),
        });
    }
    if header.num_classes == 0 {
        return Err(Error::Schema {
            line: 1,
            message: "num_classes must be positive".into(),
        });
    }
    let mut data = DatasetSplit {
        num_classes: header.num_classes,
        dims: FeatureDims {
            text: header.text_dim,
            audio: header.audio_dim,
            visual: header.visual_dim,
        },
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    // dialogue id -> (split, turns seen, first line)
    let mut dialogues: BTreeMap<String, (Split, Vec<usize>, usize)> = BTreeMap::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FileRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let schema = |message: String| Error::Schema {
            line: lineno,
            message,
        };
        if rec.label >= data.num_classes {
            return Err(schema(format!(
                "label {} out of range for {} classes",
                rec.label, data.num_classes
            )));
        }
        for (m, v) in [
            (Modality::Text, &rec.text_feat),
            (Modality::Audio, &rec.audio_feat),
            (Modality::Visual, &rec.visual_feat),
        ] {
            if v.len() != data.dims.get(m) {
                return Err(schema(format!(
                    "{m} feature has {} entries, header declares {}",
                    v.len(),
                    data.dims.get(m)
                )));
            }
        }
        let entry =
            dialogues
                .entry(rec.dialogue_id.clone())
                .or_insert((rec.split, Vec::new(), lineno));
        if entry.0 != rec.split {
            return Err(schema(format!(
                "dialogue {} appears in both {} and {}",
                rec.dialogue_id,
                entry.0.name(),
                rec.split.name()
            )));
        }
        entry.1.push(rec.turn);
        data.split_mut(rec.split).push(FeatureRecord {
            dialogue_id: rec.dialogue_id,
            turn: rec.turn,
            speaker_id: rec.speaker_id,
            label: rec.label,
            text_feat: rec.text_feat,
            audio_feat: rec.audio_feat,
            visual_feat: rec.visual_feat,
        });
    }
    for (id, (_, mut turns, first_line)) in dialogues {
        turns.sort_unstable();
        if turns.iter().enumerate().any(|(k, t)| k != *t) {
            return Err(Error::Schema {
                line: first_line,
                message: format!("dialogue {id} turns are not contiguous from 0"),
            });
        }
    }
    Ok(data)
}

/// Shuffles `0..len` and cuts it into batches of `batch_size`. A trailing
/// batch with fewer than two records is dropped.
pub fn make_batches(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}
