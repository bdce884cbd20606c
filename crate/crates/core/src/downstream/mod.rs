//! Supervised fine-tuning and evaluation: CTC, decoding, WER, and the two
//! fine-tuning modes (end-to-end and frozen-backbone probe).

pub mod ctc;
pub mod decode;
pub mod finetune;
pub mod wer;

pub use ctc::{ctc_loss, ctc_loss_and_grad, ctc_loss_on, BLANK};
pub use decode::greedy_decode;
pub use finetune::{
    evaluate, finetune_e2e, frozen_probe, FinetuneConfig, FinetuneMode, FinetunedModel,
    LabeledUtterance, Vocab,
};
pub use wer::{wer, EvalResult};
