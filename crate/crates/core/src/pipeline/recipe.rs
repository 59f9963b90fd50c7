use super::{assemble_moe, train_dense, train_joint, AblationConfig, AssemblySources, TrainConfig, TrainOutcome, Variant};
use crate::backbone::{Checkpoint, ModelConfig};
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::language::Language;

/// Outputs of the dense warm-up stage.
#[derive(Debug, Clone)]
pub struct DenseStage {
    pub base: Checkpoint,
    /// Indexed by [`Language::index`].
    pub languages: Vec<TrainOutcome>,
    pub mixed: TrainOutcome,
}

impl DenseStage {
    pub fn language_checkpoints(&self) -> Vec<Checkpoint> {
        self.languages.iter().map(|o| o.checkpoint.clone()).collect()
    }
}

/// One warm-up run per language plus one on the whole corpus, all from
/// `base` with the same settings.
pub fn run_dense_stage(base: &Checkpoint, train_docs: &[Document], cfg: &TrainConfig) -> Result<DenseStage> {
    let mut languages = Vec::new();
    for lang in Language::ALL {
        let docs: Vec<Document> = train_docs.iter().filter(|d| d.language == lang).cloned().collect();
        if docs.is_empty() {
            return Err(Error::contract(format!("no training documents for {lang}")));
        }
        languages.push(train_dense(base, &docs, cfg)?);
    }
    let mixed = train_dense(base, train_docs, cfg)?;
    Ok(DenseStage { base: base.clone(), languages, mixed })
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub assembled: Checkpoint,
    pub joint: TrainOutcome,
}

/// Assembles `variant` from the dense stage and fine-tunes it jointly on
/// `train_docs`. The router seed is `cfg.seed`.
pub fn run_variant(
    stage: &DenseStage,
    variant: Variant,
    moe_cfg: &ModelConfig,
    train_docs: &[Document],
    cfg: &TrainConfig,
) -> Result<VariantRun> {
    let languages = stage.language_checkpoints();
    let src = AssemblySources { base: &stage.base, languages: &languages, mixed: Some(&stage.mixed.checkpoint) };
    let assembled = assemble_moe(&src, &AblationConfig::for_variant(variant), moe_cfg, cfg.seed)?;
    let joint = train_joint(&assembled, train_docs, cfg)?;
    Ok(VariantRun { assembled, joint })
}
