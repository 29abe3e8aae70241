pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod infer;
pub mod params;
pub mod position;

pub use config::{FeedForward, ModelConfig};
pub use forward::{eval_loss, teacher_forced_logits, Seq2SeqBatch};
pub use infer::{decode_full, decode_step, encode, encode_padded, EncoderOutput, KvCache};
pub use params::{
    count_params_for, enc_dec_ratio, stack_sizes, total_params_for, Attribution, ModelWeights, ParamTree, StackPart,
};
