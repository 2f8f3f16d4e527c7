from .checkpoint import CheckpointError, load_checkpoint, params_digest, save_checkpoint
from .gat import GAT_HEAD_DIM, GAT_HEADS, gat_backward, gat_forward, gat_layer, graph_mask, init_gat_params
from .init import glorot_uniform
from .vit import (
    ViTClassifier,
    init_vit_params,
    vit_block_backward,
    vit_block_forward,
    vit_classify,
    vit_embed_patches,
    vit_encode,
    vit_final_representation,
    vit_loss_and_grads,
    vit_roi_embeddings,
)

__all__ = [
    "CheckpointError", "GAT_HEADS", "GAT_HEAD_DIM", "ViTClassifier", "gat_backward", "gat_forward",
    "gat_layer", "glorot_uniform", "graph_mask", "init_gat_params", "init_vit_params",
    "load_checkpoint", "params_digest", "save_checkpoint", "vit_block_backward", "vit_block_forward",
    "vit_classify", "vit_embed_patches", "vit_encode", "vit_final_representation",
    "vit_loss_and_grads", "vit_roi_embeddings",
]
