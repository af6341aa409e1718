//! Layer families, the MHSA pipeline, weight initialization and the weight file.

mod attention;
mod config;
mod forward;
mod io;
mod weights;

pub(crate) use attention::{attend, position_table_for, spec_for, AttnSpec, MapSource};
pub use attention::{
    attention_map, head_maps, mhsa, mhsa_head_sum, project_qkv, relative_position_table,
};
pub use config::{LayerKind, ModelConfig, PRESET_NAMES};
pub use forward::{
    all_attention_layer, conformer_layer, conv_module, feed_forward, transformer_layer, RunOptions,
};
pub use io::{load_weights, read_weights, save_weights, write_weights, FORMAT_VERSION, MAGIC};
pub(crate) use weights::{build, LayerShape};
pub use weights::{
    init_weights, AllAttentionLayer, AttentionWeights, ConformerLayer, ConvWeights,
    FeedForwardWeights, HeadWeights, LayerNormParams, LayerWeights, Linear, ModelWeights, ParamRef,
    TransformerLayer,
};
