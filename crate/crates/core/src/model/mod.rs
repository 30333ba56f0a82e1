//! Causal decoder over token grids with a condition prefix, key masking,
//! per-layer traces and the contrastive projector.

mod checkpoint;
mod config;
mod forward;
mod mask;
mod params;

pub use checkpoint::{Checkpoint, TensorEntry, CHECKPOINT_MAGIC};
pub use config::{MaskScope, ModelConfig};
pub use forward::{
    forward, forward_batch, forward_tape, project, project_tape, push_params, sample_layer_masks, tap,
    validate_sequence, ForwardTrace, LayerMasks, ProjectorMode, TapeForward, TraceLevel,
};
pub use mask::{build_key_mask, causal_mask, KeyMask};
pub use params::{
    final_norm_idx, head_idx, layer_idx, param_specs, proj_idx, LayerIdx, ModelParams, ParamKind, ParamSpec,
    ProjIdx, CLS_EMBED, INIT_STD, PROJECTOR_BLOCKS, TOK_EMBED,
};
