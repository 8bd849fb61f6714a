//! Content-addressed artifact cache. Keys hash the full configuration plus
//! the content hash of every input dataset; eviction is manual.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{train_attack, EsmaSetup, TrainedAttack};
use crate::dataset::LabeledDataset;
use crate::embeddings::EmbeddingBank;
use crate::error::Result;
use crate::generator::{Generator, GeneratorTrainLog};
use crate::nn::{train_classifier, ArchSpec, Classifier, Model, TrainConfig, TrainReport};
use crate::screening::AnchorSet;
use crate::watermark::{HiddenConfig, HiddenLike, HiddenTrainReport};

#[derive(Debug, Clone, Default)]
pub struct ArtifactCache {
    root: Option<PathBuf>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Hex SHA-256 over length-prefixed parts.
pub fn content_key(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

impl ArtifactCache {
    pub fn new(root: Option<PathBuf>) -> Self {
        Self { root }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Directory for an artifact, `None` when caching is off.
    pub fn dir(&self, kind: &str, key: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(kind).join(&key[..16.min(key.len())]))
    }

    fn complete(dir: &Path) -> bool {
        dir.join("complete").exists()
    }

    fn seal(dir: &Path) -> Result<()> {
        std::fs::write(dir.join("complete"), b"")?;
        Ok(())
    }

    /// Cache key of a trained classifier.
    pub fn classifier_key(
        spec: &ArchSpec,
        num_classes: usize,
        train: &LabeledDataset,
        validation: Option<&LabeledDataset>,
        config: &TrainConfig,
        seed: u64,
    ) -> String {
        content_key(&[
            "classifier",
            &serde_json::to_string(spec).expect("spec serialises"),
            &format!("{:?}/{num_classes}/{seed}", train.shape()),
            &train.content_hash(),
            &validation.map(|v| v.content_hash()).unwrap_or_default(),
            &serde_json::to_string(config).expect("config serialises"),
        ])
    }

    /// Loads the classifier if cached, else trains and stores it.
    pub fn classifier(
        &self,
        spec: &ArchSpec,
        num_classes: usize,
        train: &LabeledDataset,
        validation: Option<&LabeledDataset>,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<(Model, TrainReport)> {
        let key = Self::classifier_key(spec, num_classes, train, validation, config, seed);
        let mut model = Model::new(spec.clone(), train.shape(), num_classes, DType::F32, seed)?;
        if let Some(dir) = self.dir("classifiers", &key) {
            if Self::complete(&dir) {
                model.load(&dir.join("model.safetensors"))?;
                return Ok((model, read_json(&dir.join("train.json"))?));
            }
            let report = train_classifier(&model, train, validation, config)?;
            std::fs::create_dir_all(&dir)?;
            model.save(&dir.join("model.safetensors"))?;
            write_json(&dir.join("train.json"), &report)?;
            Self::seal(&dir)?;
            return Ok((model, report));
        }
        let report = train_classifier(&model, train, validation, config)?;
        Ok((model, report))
    }

    pub fn hidden(
        &self,
        config: &HiddenConfig,
        covers: &LabeledDataset,
        validation: &LabeledDataset,
    ) -> Result<(HiddenLike, HiddenTrainReport)> {
        let key = content_key(&["hidden", &config.hash(), &covers.content_hash(), &validation.content_hash()]);
        let dir = self.dir("watermark", &key);
        if let Some(dir) = &dir {
            if Self::complete(dir) {
                return Ok((HiddenLike::load(dir, DType::F32)?, read_json(&dir.join("train.json"))?));
            }
        }
        let model = HiddenLike::new(config, covers.shape(), DType::F32)?;
        let report = model.train(covers, validation)?;
        if let Some(dir) = &dir {
            std::fs::create_dir_all(dir)?;
            model.save(dir)?;
            write_json(&dir.join("train.json"), &report)?;
            Self::seal(dir)?;
        }
        Ok((model, report))
    }

    /// Trained attack keyed by the surrogate key, both datasets and the setup.
    pub fn attack(
        &self,
        surrogate_key: &str,
        surrogate: &dyn Classifier,
        screening: &LabeledDataset,
        generator_set: &LabeledDataset,
        setup: &EsmaSetup,
    ) -> Result<TrainedAttack> {
        let key = content_key(&[
            "attack",
            surrogate_key,
            &screening.content_hash(),
            &generator_set.content_hash(),
            &serde_json::to_string(setup).expect("setup serialises"),
        ]);
        let dir = self.dir("attacks", &key);
        if let Some(dir) = &dir {
            if Self::complete(dir) {
                let anchors = AnchorSet::load(&dir.join("anchors.json"))?;
                let bank = EmbeddingBank::load(&dir.join("embeddings.json"))?;
                let embedding_losses: Vec<f64> = read_json(&dir.join("embedding_losses.json"))?;
                let log: GeneratorTrainLog = read_json(&dir.join("log.json"))?;
                let generator = Generator::load_checkpoint(&dir.join("generator"), Some(&setup.generator), surrogate.dtype())?;
                return Ok(TrainedAttack {
                    anchors,
                    bank,
                    embedding_losses,
                    generator,
                    log,
                });
            }
        }
        let trained = train_attack(surrogate, screening, generator_set, setup)?;
        if let Some(dir) = &dir {
            std::fs::create_dir_all(dir)?;
            trained.anchors.save(&dir.join("anchors.json"))?;
            trained.bank.save(&dir.join("embeddings.json"))?;
            write_json(&dir.join("embedding_losses.json"), &trained.embedding_losses)?;
            write_json(&dir.join("log.json"), &trained.log)?;
            trained.generator.save_checkpoint(&dir.join("generator"))?;
            Self::seal(dir)?;
        }
        Ok(trained)
    }
}
