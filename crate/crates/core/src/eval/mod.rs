//! Evaluation procedures: caption metrics, dropout ablation, deletion and
//! insertion curves, per-layer description statistics and patch coherence.

pub mod ablation;
pub mod coherence;
pub mod deletion;
pub mod metrics;
pub mod scorers;
pub mod stats;

pub use ablation::{generate_captions, mode_label, run_ablation, AblationModel};
pub use coherence::{
    patch_coherence, tally, JointEmbedder, PatchChoice, PatchCoherenceResult, PatchSize,
    DEFAULT_CROPS,
};
pub use deletion::{
    curve_with_order, deletion_curve, insertion_curve, saliency_order, trapezoid_auc, Classifier,
    CurveConfig, CurveKind, DeletionInsertionCurve,
};
pub use metrics::{caption_metrics, CaptionScorer, MetricReport};
pub use scorers::{standard_scorers, tokenize, Bleu, CiderD, CommandScorer, RougeL};
pub use stats::{caption_stats, CaptionStats, LayerTexts, LexiconTagger, PosTag, PosTagger};
