//! Frozen decoder-only transformer: byte tokenizer, attention masks, blocks
//! with insertion hooks, and the prompt encoder.

mod decoder;
mod mask;
mod tokenizer;

pub use decoder::{
    add_positions, decoder_forward, embed_tokens, layer_norm, linear, multi_head_attention,
    self_attention_layer, Backbone, BackboneIds, DecoderConfig, LayerHook, LayerIds, LoraIds,
};
pub use mask::{AttentionMask, SequenceLayout, VisibilityMode};
pub use tokenizer::{detokenize, tokenize, BOS, BYTE_VOCAB, EOS, VOCAB_SIZE};
