use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autograd::Tensor;
use crate::checkpoint;
use crate::corpus::{
    build_vocabulary, load_studies, parse_manifest, split_dataset, tokenize_report, DatasetSplit, LoadedStudy, Report,
    Vocabulary,
};
use crate::encoder::{init_encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::gan::{DiscriminatorParams, GeneratorParams};
use crate::nn::{load_named, named_tensors, Adam};

const KIND: &[u8; 8] = b"TRAIN\0\0\0";

/// Studies plus their tokenized reports and the fixed split.
pub struct TrainData {
    pub studies: Vec<LoadedStudy>,
    pub vocab: Vocabulary,
    pub split: DatasetSplit,
    pub reports: HashMap<String, Report>,
}

impl TrainData {
    /// Loads a manifest, splits it by patient and builds the vocabulary from the training split.
    pub fn from_manifest(path: &Path, config: &TrainConfig) -> Result<Self> {
        let records = parse_manifest(path)?;
        Self::from_studies(load_studies(&records)?, config)
    }

    pub fn from_studies(studies: Vec<LoadedStudy>, config: &TrainConfig) -> Result<Self> {
        if studies.is_empty() {
            return Err(Error::Dataset("no studies".into()));
        }
        let records: Vec<_> = studies.iter().map(|s| s.record.clone()).collect();
        let [a, b, c] = config.split;
        let split = split_dataset(&records, (a, b, c), config.seed)?;
        let train_text: Vec<&str> = studies
            .iter()
            .filter(|s| split.train.contains(&s.record.study_id))
            .map(|s| s.record.report_text.as_str())
            .collect();
        let vocab = build_vocabulary(&train_text, config.min_token_freq);
        Self::with_vocab(studies, vocab, split, config)
    }

    /// Rebuilds the data view of a checkpointed run.
    pub fn with_vocab(
        studies: Vec<LoadedStudy>,
        vocab: Vocabulary,
        split: DatasetSplit,
        config: &TrainConfig,
    ) -> Result<Self> {
        let side = config.gan().final_resolution();
        let mut reports = HashMap::new();
        for s in &studies {
            for view in crate::corpus::View::BOTH {
                let img = s.image(view);
                if img.shape()[0] != img.shape()[1] || img.shape()[0] < side {
                    return Err(Error::Dataset(format!(
                        "study {}: {} image is {:?}, need square >= {side}",
                        s.record.study_id,
                        view.name(),
                        img.shape()
                    )));
                }
            }
            let r = tokenize_report(&s.record.report_text, &vocab, &config.tokenizer)
                .map_err(|e| Error::Dataset(format!("study {}: {e}", s.record.study_id)))?;
            reports.insert(s.record.study_id.clone(), r);
        }
        Ok(Self {
            studies,
            vocab,
            split,
            reports,
        })
    }

    pub fn study(&self, id: &str) -> Result<&LoadedStudy> {
        self.studies
            .iter()
            .find(|s| s.record.study_id == id)
            .ok_or_else(|| Error::Dataset(format!("study {id} not loaded")))
    }

    pub fn train(&self) -> Result<Vec<&LoadedStudy>> {
        self.split.train.iter().map(|id| self.study(id)).collect()
    }

    pub fn val(&self) -> Result<Vec<&LoadedStudy>> {
        self.split.val.iter().map(|id| self.study(id)).collect()
    }
}

/// Next unit of work: `epoch` of `stage`. After the last stage, `stage == n_stages + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: usize,
    pub epoch: usize,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub split: DatasetSplit,
    pub encoder: EncoderParams,
    pub generators: GeneratorParams,
    pub discriminators: DiscriminatorParams,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub progress: Progress,
    /// Generator updates so far, over all stages.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig, vocab: Vocabulary, split: DatasetSplit) -> Result<Self> {
        config.validate()?;
        let enc = EncoderConfig {
            vocab_size: vocab.len(),
            embed_dim: config.encoder.embed_dim,
            hidden_dim: config.encoder.hidden_dim,
            attention_dim: config.encoder.attention_dim,
        };
        let seed = config.seed;
        let encoder = init_encoder(enc, seed.wrapping_add(1))?;
        let generators = GeneratorParams::new(&config.gan(), enc.output_dim(), seed.wrapping_add(2))?;
        let discriminators = DiscriminatorParams::new(&config.gan(), enc.output_dim(), seed.wrapping_add(3))?;
        Ok(Self {
            config: config.clone(),
            vocab,
            split,
            encoder,
            generators,
            discriminators,
            gen_opt: Adam::new(config.adam),
            disc_opt: Adam::new(config.adam),
            progress: Progress { stage: 1, epoch: 0 },
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(4)),
        })
    }

    /// Number of stages whose training has finished.
    pub fn completed_stages(&self) -> usize {
        self.progress.stage - 1
    }

    pub fn is_complete(&self) -> bool {
        self.progress.stage > self.config.n_stages
    }
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    config_hash: String,
    config: TrainConfig,
    vocab: Vocabulary,
    split: DatasetSplit,
    encoder: BTreeMap<String, Tensor>,
    generators: BTreeMap<String, Tensor>,
    discriminators: BTreeMap<String, Tensor>,
    gen_opt: Adam,
    disc_opt: Adam,
    progress: Progress,
    step: u64,
    rng: ChaCha8Rng,
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let file = StateFile {
        config_hash: state.config.hash(),
        config: state.config.clone(),
        vocab: state.vocab.clone(),
        split: state.split.clone(),
        encoder: named_tensors(&state.encoder),
        generators: named_tensors(&state.generators),
        discriminators: named_tensors(&state.discriminators),
        gen_opt: state.gen_opt.clone(),
        disc_opt: state.disc_opt.clone(),
        progress: state.progress,
        step: state.step,
        rng: state.rng.clone(),
    };
    checkpoint::encode(KIND, &file)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    checkpoint::write_atomic(path, &encode_checkpoint(state)?)
}

/// Loads a checkpoint; with `expected`, its config hash must match.
pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<TrainState> {
    let fail = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let file: StateFile = checkpoint::load(KIND, path)?;
    if file.config.hash() != file.config_hash {
        return Err(fail("stored config does not match its hash".into()));
    }
    if let Some(cfg) = expected {
        if cfg.hash() != file.config_hash {
            return Err(fail(format!(
                "config hash mismatch: checkpoint {}, current {}",
                &file.config_hash[..12],
                &cfg.hash()[..12]
            )));
        }
    }
    let mut state = TrainState::new(&file.config, file.vocab, file.split)?;
    let wrap = |e: Error| fail(e.to_string());
    load_named(&mut state.encoder, &file.encoder).map_err(wrap)?;
    load_named(&mut state.generators, &file.generators).map_err(wrap)?;
    load_named(&mut state.discriminators, &file.discriminators).map_err(wrap)?;
    state.gen_opt = file.gen_opt;
    state.disc_opt = file.disc_opt;
    state.progress = file.progress;
    state.step = file.step;
    state.rng = file.rng;
    Ok(state)
}
