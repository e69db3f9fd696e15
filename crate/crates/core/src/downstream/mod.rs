//! Binary finetuning of the pretrained online encoder and the evaluation
//! metrics (frame and video AUC, HTER).

mod metrics;

pub use metrics::{
    compute_auc, compute_hter, evaluate, rates_at, read_scores, threshold_table, video_auc, video_scores, write_scores,
    EvalReport, HterResult, ScoreRecord, ThresholdPolicy, ThresholdRow, REAL,
};

mod finetune;

pub use finetune::{
    build_classifier, cross_entropy, finetune, predict, score_records, Classifier, EpochRecord, FinetuneConfig,
    FinetuneOutcome, Head, HeadKind, LabeledData, LabeledSample,
};
