//! Synthetic multi-task, multi-era classification data.
//!
//! Each task owns a random linear generator `G_t` mapping features to
//! class logits. Even eras use `G_t`; odd eras use `(1 − 2·conflict)·G_t`,
//! so `conflict = 1` flips every decision boundary between eras while
//! `conflict = 0` makes eras indistinguishable. Features are `N(0, I)` and
//! labels are `argmax(G x + ε)` with Gaussian logit noise.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::tensor::{self, Tensor};

/// Largest share any class may take within one cell.
pub const MAX_CLASS_SHARE: f64 = 0.7;
const MAX_REDRAWS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_tasks: usize,
    pub n_eras: usize,
    pub d_in: usize,
    /// Class count per task; a single entry applies to every task.
    pub classes: Vec<usize>,
    pub train_per_cell: usize,
    pub dev_per_cell: usize,
    pub test_per_cell: usize,
    pub conflict: f64,
    pub noise_std: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_tasks: 4,
            n_eras: 2,
            d_in: 16,
            classes: vec![2, 2, 3, 3],
            train_per_cell: 500,
            dev_per_cell: 100,
            test_per_cell: 100,
            conflict: 1.0,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_tasks == 0 || self.n_eras == 0 || self.d_in == 0 {
            return bad("n_tasks, n_eras and d_in must be positive".into());
        }
        if self.classes.is_empty()
            || (self.classes.len() != 1 && self.classes.len() != self.n_tasks)
        {
            return bad(format!(
                "classes must hold 1 or {} entries, got {}",
                self.n_tasks,
                self.classes.len()
            ));
        }
        if self.classes.iter().any(|&c| c < 2) {
            return bad("every task needs at least 2 classes".into());
        }
        if self.train_per_cell == 0 || self.dev_per_cell == 0 || self.test_per_cell == 0 {
            return bad("every split needs at least one sample per cell".into());
        }
        if !(0.0..=1.0).contains(&self.conflict) {
            return bad(format!(
                "conflict must lie in [0, 1], got {}",
                self.conflict
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            ));
        }
        Ok(())
    }

    pub fn classes_for(&self, task: usize) -> usize {
        if self.classes.len() == 1 {
            self.classes[0]
        } else {
            self.classes[task]
        }
    }

    /// Head width per task.
    pub fn head_widths(&self) -> Vec<usize> {
        (0..self.n_tasks).map(|t| self.classes_for(t)).collect()
    }

    pub fn n_cells(&self) -> usize {
        self.n_tasks * self.n_eras
    }

    /// Generator scale applied in a given era.
    pub fn era_scale(&self, era: usize) -> f64 {
        if era % 2 == 1 {
            1.0 - 2.0 * self.conflict
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub task_id: usize,
    pub era_id: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
    /// `G_t` per task, `classes × d_in`.
    pub generators: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl Splits {
    pub fn get(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Restricts every split to one `(task, era)` cell.
    pub fn cell(&self, task: usize, era: usize) -> Splits {
        let keep = |v: &[Sample]| {
            v.iter()
                .filter(|s| s.task_id == task && s.era_id == era)
                .cloned()
                .collect()
        };
        Splits {
            train: keep(&self.train),
            dev: keep(&self.dev),
            test: keep(&self.test),
            generators: self.generators.clone(),
        }
    }
}

fn draw_cell(
    g: &Tensor,
    scale: f64,
    n: usize,
    (task, era): (usize, usize),
    noise: &Normal<f64>,
    rng: &mut Rng,
) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..g.cols()).map(|_| StandardNormal.sample(rng)).collect();
            let logits: Vec<f64> = (0..g.rows())
                .map(|c| {
                    let dot: f64 = g.row(c).iter().zip(&x).map(|(w, v)| w * v).sum();
                    scale * dot + noise.sample(rng)
                })
                .collect();
            Sample {
                x,
                task_id: task,
                era_id: era,
                label: argmax(&logits),
            }
        })
        .collect()
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

fn max_class_share(samples: &[Sample], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    for s in samples {
        counts[s.label] += 1;
    }
    *counts.iter().max().unwrap() as f64 / samples.len() as f64
}

/// Generates train/dev/test splits; fully determined by `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = seed::rng_for(spec.seed, "data");
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let mut splits = Splits {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        generators: Vec::new(),
    };
    let sizes = [spec.train_per_cell, spec.dev_per_cell, spec.test_per_cell];

    for task in 0..spec.n_tasks {
        let classes = spec.classes_for(task);
        let mut accepted = None;
        for _ in 0..MAX_REDRAWS {
            let g = Tensor::randn(&[classes, spec.d_in], 1.0, &mut rng);
            let mut cells: Vec<[Vec<Sample>; 3]> = Vec::with_capacity(spec.n_eras);
            for era in 0..spec.n_eras {
                let scale = spec.era_scale(era);
                let drawn = sizes.map(|n| draw_cell(&g, scale, n, (task, era), &noise, &mut rng));
                cells.push(drawn);
            }
            let balanced = cells.iter().all(|c| {
                let all: Vec<Sample> = c.iter().flatten().cloned().collect();
                max_class_share(&all, classes) <= MAX_CLASS_SHARE
            });
            if balanced {
                accepted = Some((g, cells));
                break;
            }
        }
        let (g, cells) = accepted.ok_or_else(|| {
            Error::Config(format!(
                "task {task}: no class-balanced generator after {MAX_REDRAWS} draws"
            ))
        })?;
        for [train, dev, test] in cells {
            splits.train.extend(train);
            splits.dev.extend(dev);
            splits.test.extend(test);
        }
        splits.generators.push(g);
    }
    Ok(splits)
}

/// A metadata-homogeneous batch, referencing samples by index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub task_id: usize,
    pub era_id: usize,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn features(&self, samples: &[Sample]) -> Tensor {
        let d = samples[self.indices[0]].x.len();
        let data = self
            .indices
            .iter()
            .flat_map(|&i| samples[i].x.iter().copied())
            .collect();
        Tensor::matrix(self.indices.len(), d, data).expect("non-empty batch")
    }

    pub fn labels(&self, samples: &[Sample]) -> Vec<usize> {
        self.indices.iter().map(|&i| samples[i].label).collect()
    }
}

/// Groups samples by cell without shuffling, in sorted cell order.
pub fn cell_batches(samples: &[Sample], batch_size: usize) -> Result<Vec<Batch>> {
    batch_impl(samples, batch_size, None)
}

/// One epoch of shuffled, `(task, era)`-homogeneous batches covering every
/// sample exactly once.
pub fn batch_iter(samples: &[Sample], batch_size: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
    batch_impl(samples, batch_size, Some(rng))
}

fn batch_impl(
    samples: &[Sample],
    batch_size: usize,
    mut rng: Option<&mut Rng>,
) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry((s.task_id, s.era_id)).or_default().push(i);
    }
    let mut batches = Vec::new();
    for ((task_id, era_id), mut idx) in groups {
        if let Some(r) = rng.as_deref_mut() {
            idx.shuffle(r);
        }
        batches.extend(idx.chunks(batch_size).map(|c| Batch {
            task_id,
            era_id,
            indices: c.to_vec(),
        }));
    }
    if let Some(r) = rng {
        batches.shuffle(r);
    }
    Ok(batches)
}

#[derive(Serialize, Deserialize)]
struct Record {
    split: Split,
    task: usize,
    era: usize,
    label: usize,
    x: Vec<f64>,
}

/// Writes one JSON record per line: split, ids, label, features.
pub fn write_records(splits: &Splits, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for split in [Split::Train, Split::Dev, Split::Test] {
        for s in splits.get(split) {
            let rec = Record {
                split,
                task: s.task_id,
                era: s.era_id,
                label: s.label,
                x: s.x.clone(),
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a record file back; generators are not stored and come back empty.
pub fn read_records(path: &Path) -> Result<Splits> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut splits = Splits {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        generators: Vec::new(),
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let s = Sample {
            x: rec.x,
            task_id: rec.task,
            era_id: rec.era,
            label: rec.label,
        };
        match rec.split {
            Split::Train => splits.train.push(s),
            Split::Dev => splits.dev.push(s),
            Split::Test => splits.test.push(s),
        }
    }
    Ok(splits)
}

/// Noise-free label of `x` under a task's generator in a given era.
pub fn bayes_label(spec: &SynthSpec, splits: &Splits, task: usize, era: usize, x: &[f64]) -> usize {
    let g = &splits.generators[task];
    let xt = Tensor::matrix(x.len(), 1, x.to_vec()).expect("non-empty x");
    let logits = tensor::matmul(g, &xt).expect("matching width");
    let scaled: Vec<f64> = logits
        .data()
        .iter()
        .map(|v| v * spec.era_scale(era))
        .collect();
    argmax(&scaled)
}
