//! Two-stage decision pipeline: binary triage, then family assignment for
//! samples the first stage calls malign.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use levitmc_tensor::Tensor;
use rayon::prelude::*;
use serde::Serialize;

use crate::bin2img::{stack_images, ImageTensor, IMAGE_SIDE};
use crate::data::ClassIndex;
use crate::error::{Error, Result};
use crate::levit::NUM_FAMILIES;
use crate::model::ModelGraph;
use crate::train::Checkpoint;

/// Anything that maps an `(N, 3, S, S)` batch to `(N, C)` logits.
pub trait StageModel: Send + Sync {
    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn num_classes(&self) -> usize;
    fn input_size(&self) -> usize {
        IMAGE_SIDE
    }
}

impl StageModel for ModelGraph {
    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.infer(batch)
    }

    fn num_classes(&self) -> usize {
        ModelGraph::num_classes(self)
    }

    fn input_size(&self) -> usize {
        self.arch.input_size()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictKind {
    Benign,
    Malign,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub kind: VerdictKind,
    /// Family index in `0..25`, present exactly for malign verdicts.
    pub family: Option<usize>,
    pub confidence: f64,
    pub stage1_prob_malign: f64,
}

#[derive(Serialize)]
struct VerdictLine<'a> {
    id: &'a str,
    verdict: VerdictKind,
    family: Option<&'a str>,
    confidence: f64,
    p_malign: f64,
}

impl Verdict {
    /// Label in the 26-entry class table.
    pub fn label(&self, classes: &ClassIndex) -> usize {
        match self.family {
            Some(f) => classes.label_of_family(f).expect("family below 25"),
            None => classes.benign_index(),
        }
    }

    pub fn to_json(&self, id: &str, classes: &ClassIndex) -> String {
        let line = VerdictLine {
            id,
            verdict: self.kind,
            family: self.family.and_then(|f| classes.family_name(f)),
            confidence: self.confidence,
            p_malign: self.stage1_prob_malign,
        };
        serde_json::to_string(&line).expect("verdict serializes")
    }
}

fn softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn rows(logits: &Tensor<f32>, n: usize, classes: usize, stage: &str) -> Result<Vec<Vec<f64>>> {
    if logits.shape() != [n, classes] {
        return Err(Error::Config(format!(
            "{stage} returned logits of shape {:?}, expected [{n}, {classes}]",
            logits.shape()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric(format!("{stage} produced non-finite logits")));
    }
    Ok(logits.data().chunks(classes).map(softmax_row).collect())
}

pub struct CascadeModel {
    binary: Box<dyn StageModel>,
    family: Box<dyn StageModel>,
    benign_threshold: f64,
    classes: ClassIndex,
    stage2_calls: AtomicU64,
}

impl std::fmt::Debug for CascadeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CascadeModel")
            .field("benign_threshold", &self.benign_threshold)
            .field("classes", &self.classes)
            .finish_non_exhaustive()
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// File names inside a cascade directory.
pub const STAGE1_FILE: &str = "stage1.lmck";
pub const STAGE2_FILE: &str = "stage2.lmck";
/// Largest batch a worker sends through the models at once.
pub const MAX_WORKER_BATCH: usize = 32;

impl CascadeModel {
    pub fn new(
        binary: Box<dyn StageModel>,
        family: Box<dyn StageModel>,
        classes: ClassIndex,
        benign_threshold: f64,
    ) -> Result<Self> {
        if binary.num_classes() != 2 {
            return Err(Error::Config(format!(
                "stage 1 must have 2 outputs, has {}",
                binary.num_classes()
            )));
        }
        if family.num_classes() != NUM_FAMILIES {
            return Err(Error::Config(format!(
                "stage 2 must have {NUM_FAMILIES} outputs, has {}",
                family.num_classes()
            )));
        }
        if binary.input_size() != IMAGE_SIDE || family.input_size() != IMAGE_SIDE {
            return Err(Error::Config(format!("both stages must accept {IMAGE_SIDE}×{IMAGE_SIDE} images")));
        }
        if !(benign_threshold > 0.0 && benign_threshold < 1.0) {
            return Err(Error::Config(format!("threshold {benign_threshold} is outside (0, 1)")));
        }
        Ok(Self {
            binary,
            family,
            benign_threshold,
            classes,
            stage2_calls: AtomicU64::new(0),
        })
    }

    pub fn from_models(binary: ModelGraph, family: ModelGraph, classes: ClassIndex) -> Result<Self> {
        Self::new(Box::new(binary), Box::new(family), classes, DEFAULT_THRESHOLD)
    }

    pub fn class_index(&self) -> &ClassIndex {
        &self.classes
    }

    pub fn benign_threshold(&self) -> f64 {
        self.benign_threshold
    }

    /// Number of samples the family model has been run on.
    pub fn stage2_invocations(&self) -> u64 {
        self.stage2_calls.load(Ordering::Relaxed)
    }

    pub fn classify(&self, image: &ImageTensor) -> Result<Verdict> {
        let batch = stack_images(&[image])?;
        Ok(self.classify_tensor(&batch)?.remove(0))
    }

    /// Classifies an `(N, 3, 224, 224)` batch on the calling thread. Stage 2
    /// runs once on the malign subset.
    pub fn classify_tensor(&self, batch: &Tensor<f32>) -> Result<Vec<Verdict>> {
        let n = batch.shape()[0];
        let p1 = rows(&self.binary.logits(batch)?, n, 2, "stage 1")?;
        let malign: Vec<usize> = (0..n).filter(|&i| p1[i][1] >= self.benign_threshold).collect();
        let mut verdicts: Vec<Verdict> = p1
            .iter()
            .map(|p| Verdict {
                kind: VerdictKind::Benign,
                family: None,
                confidence: 1.0 - p[1],
                stage1_prob_malign: p[1],
            })
            .collect();
        if malign.is_empty() {
            return Ok(verdicts);
        }
        let sub = if malign.len() == n { batch.clone() } else { batch.gather_axis0(&malign)? };
        self.stage2_calls.fetch_add(malign.len() as u64, Ordering::Relaxed);
        let p2 = rows(&self.family.logits(&sub)?, malign.len(), NUM_FAMILIES, "stage 2")?;
        for (&i, probs) in malign.iter().zip(&p2) {
            // first maximum wins ties
            let (family, &conf) = probs
                .iter()
                .enumerate()
                .fold((0, &probs[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
            verdicts[i] = Verdict {
                kind: VerdictKind::Malign,
                family: Some(family),
                confidence: conf,
                stage1_prob_malign: verdicts[i].stage1_prob_malign,
            };
        }
        Ok(verdicts)
    }

    /// Order-preserving classification spread over `workers` threads.
    pub fn classify_batch(&self, images: &[ImageTensor], workers: usize) -> Result<Vec<Verdict>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let workers = workers.max(1);
        let chunk = images.len().div_ceil(workers).clamp(1, MAX_WORKER_BATCH);
        let run = |part: &[ImageTensor]| {
            let refs: Vec<&ImageTensor> = part.iter().collect();
            self.classify_tensor(&stack_images(&refs)?)
        };
        let parts: Vec<Vec<Verdict>> = if workers == 1 {
            images.chunks(chunk).map(run).collect::<Result<_>>()?
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| images.par_chunks(chunk).map(run).collect::<Result<_>>())?
        };
        Ok(parts.into_iter().flatten().collect())
    }
}

/// Loads `dir/stage1.lmck` and `dir/stage2.lmck`. The class table comes
/// from the stage-2 checkpoint, falling back to stage 1.
pub fn load_cascade(dir: impl AsRef<Path>, benign_threshold: f64) -> Result<CascadeModel> {
    let dir = dir.as_ref();
    let s1 = Checkpoint::load(dir.join(STAGE1_FILE))?;
    let s2 = Checkpoint::load(dir.join(STAGE2_FILE))?;
    let classes = s2
        .class_index
        .or(s1.class_index)
        .ok_or_else(|| Error::Config(format!("no class table in the checkpoints under {}", dir.display())))?;
    CascadeModel::new(Box::new(s1.model), Box::new(s2.model), classes, benign_threshold)
}
