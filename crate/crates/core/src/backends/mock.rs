use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    AdapterCheckpoint, Backend, BackendCapabilities, BackendError, ImageRef, LineageEntry, LoraConfig, TrainItem,
    ADAPTER_WEIGHTS_FILE,
};
use crate::corpus::GroundingExample;
use crate::trainer::{format_example, PromptTemplate};

/// Answer for queries the mock never trained on.
pub const FALLBACK_ANSWER: &str = "(0, 0)";

/// One `train_step` call as seen by the mock.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainCall {
    /// Optimizer step the micro-batch accumulates into.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub targets: Vec<String>,
    pub image_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadRecord {
    pub path: PathBuf,
    pub lineage_len: usize,
    pub table_len: usize,
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    image_ref: String,
    prompt: String,
    target: String,
}

/// Trainable mock that memorizes `(image, prompt) -> target` pairs.
///
/// Prediction renders the instruction through the same template the trainer
/// used and looks the pair up; unseen queries answer [`FALLBACK_ANSWER`].
/// Loss for the n-th training call (0-based) is `1 / (1 + n)`.
#[derive(Debug, Clone)]
pub struct MemorizingBackend {
    lora: LoraConfig,
    template: PromptTemplate,
    max_image_pixels: Option<u64>,
    table: BTreeMap<(String, String), String>,
    lineage: Vec<LineageEntry>,
    step: u64,
    calls: Vec<TrainCall>,
    loads: Vec<LoadRecord>,
}

impl MemorizingBackend {
    pub fn new(lora: LoraConfig, template: PromptTemplate) -> Self {
        Self {
            lora,
            template,
            max_image_pixels: None,
            table: BTreeMap::new(),
            lineage: Vec::new(),
            step: 0,
            calls: Vec::new(),
            loads: Vec::new(),
        }
    }

    pub fn with_max_image_pixels(mut self, max: u64) -> Self {
        self.max_image_pixels = Some(max);
        self
    }

    /// Memorize examples directly, outside any training stage. Records a
    /// `fit` lineage entry so the adapter can be saved.
    pub fn fit(&mut self, examples: &[GroundingExample]) {
        for ex in examples {
            let (prompt, target) = format_example(ex, &self.template);
            self.table.insert((ex.image_ref.clone(), prompt), target);
        }
        let ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
        self.lineage.push(LineageEntry {
            stage: "fit".into(),
            recipe_digest: crate::recipe::ids_digest(&ids),
            config_digest: String::new(),
        });
    }

    pub fn call_log(&self) -> &[TrainCall] {
        &self.calls
    }

    pub fn loads(&self) -> &[LoadRecord] {
        &self.loads
    }

    pub fn lineage(&self) -> &[LineageEntry] {
        &self.lineage
    }

    pub fn memorized(&self) -> usize {
        self.table.len()
    }

    pub fn knows(&self, image_ref: &str, instruction: &str) -> bool {
        self.table
            .contains_key(&(image_ref.to_string(), self.template.render(instruction)))
    }
}

impl Backend for MemorizingBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            trainable: true,
            supports_adapter_merge: true,
            max_image_pixels: self.max_image_pixels,
        }
    }

    fn predict(&self, image: &ImageRef<'_>, instruction: &str) -> Result<String, BackendError> {
        self.check_image(image)?;
        let key = (image.uri.to_string(), self.template.render(instruction));
        Ok(self
            .table
            .get(&key)
            .cloned()
            .unwrap_or_else(|| FALLBACK_ANSWER.to_string()))
    }

    fn train_step(&mut self, batch: &[TrainItem], lr: f64) -> Result<f64, BackendError> {
        let loss = 1.0 / (1.0 + self.calls.len() as f64);
        for item in batch {
            self.table
                .insert((item.image_ref.clone(), item.prompt.clone()), item.target.clone());
        }
        self.calls.push(TrainCall {
            step: self.step,
            lr,
            loss,
            targets: batch.iter().map(|i| i.target.clone()).collect(),
            image_refs: batch.iter().map(|i| i.image_ref.clone()).collect(),
        });
        Ok(loss)
    }

    fn commit_step(&mut self) -> Result<u64, BackendError> {
        self.step += 1;
        Ok(self.step)
    }

    fn step_count(&self) -> u64 {
        self.step
    }

    fn record_stage(&mut self, entry: LineageEntry) -> Result<(), BackendError> {
        self.lineage.push(entry);
        Ok(())
    }

    fn save_adapter(&self, dir: &Path) -> Result<AdapterCheckpoint, BackendError> {
        if self.lineage.is_empty() {
            return Err(BackendError::Format("adapter has no training lineage".into()));
        }
        fs::create_dir_all(dir).map_err(|source| BackendError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let entries: Vec<WeightEntry> = self
            .table
            .iter()
            .map(|((image_ref, prompt), target)| WeightEntry {
                image_ref: image_ref.clone(),
                prompt: prompt.clone(),
                target: target.clone(),
            })
            .collect();
        let mut bytes = serde_json::to_vec_pretty(&entries).expect("weights serialize");
        bytes.push(b'\n');
        let weights = dir.join(ADAPTER_WEIGHTS_FILE);
        fs::write(&weights, bytes).map_err(|source| BackendError::Io { path: weights, source })?;
        let ckpt = AdapterCheckpoint {
            path: dir.to_path_buf(),
            backend: self.name().into(),
            lora: self.lora.clone(),
            lineage: self.lineage.clone(),
            step_count: self.step,
        };
        ckpt.write_meta()?;
        Ok(ckpt)
    }

    fn load_adapter(&mut self, ckpt: &AdapterCheckpoint) -> Result<(), BackendError> {
        if let Some(field) = self.lora.first_difference(&ckpt.lora) {
            return Err(BackendError::ConfigMismatch { field });
        }
        let path = ckpt.weights_path();
        let bytes = fs::read(&path).map_err(|source| BackendError::Io {
            path: path.clone(),
            source,
        })?;
        let entries: Vec<WeightEntry> =
            serde_json::from_slice(&bytes).map_err(|e| BackendError::Format(format!("{}: {e}", path.display())))?;
        self.table = entries
            .into_iter()
            .map(|e| ((e.image_ref, e.prompt), e.target))
            .collect();
        self.lineage = ckpt.lineage.clone();
        self.step = ckpt.step_count;
        self.loads.push(LoadRecord {
            path: ckpt.path.clone(),
            lineage_len: self.lineage.len(),
            table_len: self.table.len(),
        });
        Ok(())
    }

    fn lora(&self) -> Option<&LoraConfig> {
        Some(&self.lora)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::{generate, SyntheticSource};
    use crate::corpus::Platform;

    fn mock() -> MemorizingBackend {
        MemorizingBackend::new(LoraConfig::default(), PromptTemplate::default())
    }

    fn image(ex: &GroundingExample) -> ImageRef<'_> {
        ImageRef {
            uri: &ex.image_ref,
            width: ex.image_width,
            height: ex.image_height,
        }
    }

    #[test]
    fn seen_examples_answer_center_unseen_fallback() {
        let c = generate(&[SyntheticSource::new("w", Platform::Web, 2)], 0);
        let mut m = mock();
        m.fit(&c.examples()[..1]);
        let ex = &c.examples()[0];
        let center = ex.bbox.floor_center();
        assert_eq!(
            m.predict(&image(ex), &ex.instruction).unwrap(),
            format!("({}, {})", center.x, center.y)
        );
        let other = &c.examples()[1];
        assert_eq!(m.predict(&image(other), &other.instruction).unwrap(), FALLBACK_ANSWER);
    }

    #[test]
    fn loss_sequence_and_step_grouping() {
        let mut m = mock();
        let item = TrainItem {
            prompt: "p".into(),
            target: "(1, 1)".into(),
            image_ref: "i".into(),
        };
        let l0 = m.train_step(std::slice::from_ref(&item), 1e-4).unwrap();
        let l1 = m.train_step(std::slice::from_ref(&item), 1e-4).unwrap();
        m.commit_step().unwrap();
        let l2 = m.train_step(&[item], 1e-4).unwrap();
        assert_eq!((l0, l1, l2), (1.0, 0.5, 1.0 / 3.0));
        let steps: Vec<u64> = m.call_log().iter().map(|c| c.step).collect();
        assert_eq!(steps, [0, 0, 1]);
    }

    #[test]
    fn save_load_round_trip() {
        let c = generate(&[SyntheticSource::new("w", Platform::Web, 5)], 1);
        let mut m = mock();
        m.fit(c.examples());
        let dir = tempfile::tempdir().unwrap();
        let ckpt = m.save_adapter(&dir.path().join("a")).unwrap();
        let mut fresh = mock();
        fresh.load_adapter(&ckpt).unwrap();
        for ex in c.examples() {
            assert_eq!(
                fresh.predict(&image(ex), &ex.instruction).unwrap(),
                m.predict(&image(ex), &ex.instruction).unwrap()
            );
        }
        // save -> load -> save is byte-identical
        let again = fresh.save_adapter(&dir.path().join("b")).unwrap();
        for f in [ADAPTER_WEIGHTS_FILE, super::super::ADAPTER_META_FILE] {
            assert_eq!(
                fs::read(ckpt.path.join(f)).unwrap(),
                fs::read(again.path.join(f)).unwrap()
            );
        }
        assert_eq!(AdapterCheckpoint::read(&ckpt.path).unwrap(), ckpt);
    }

    #[test]
    fn rank_mismatch_rejected() {
        let c = generate(&[SyntheticSource::new("w", Platform::Web, 1)], 1);
        let mut big = MemorizingBackend::new(
            LoraConfig {
                rank: 16,
                ..LoraConfig::default()
            },
            PromptTemplate::default(),
        );
        big.fit(c.examples());
        let dir = tempfile::tempdir().unwrap();
        let ckpt = big.save_adapter(dir.path()).unwrap();
        let err = mock().load_adapter(&ckpt).unwrap_err();
        assert!(matches!(err, BackendError::ConfigMismatch { field: "rank" }));
        assert!(err.to_string().contains("rank"));
    }

    #[test]
    fn oversized_image_is_capability_error() {
        let m = mock().with_max_image_pixels(100);
        let err = m
            .predict(
                &ImageRef {
                    uri: "x",
                    width: 20,
                    height: 20,
                },
                "go",
            )
            .unwrap_err();
        assert!(matches!(err, BackendError::Capability(_)));
    }

    #[test]
    fn empty_lineage_cannot_be_saved() {
        let dir = tempfile::tempdir().unwrap();
        assert!(mock().save_adapter(dir.path()).is_err());
    }
}
