from .encoding import (
    MAX_VIEW_INDEX,
    OddDimensions,
    closest_to_centroid,
    compute_raymap,
    draw_view_indices,
    patchify,
    positional_encoding_2d,
    unpatchify,
    view_index_encoding,
)
from .layers import MLP, Attention, LayerNorm, Linear, Module, Parameter, TimestepEmbedder, modulate
from .model import CheckpointError, MultiViewBlock, ShapeMismatch, VelocityNet, VelocityNetConfig, load_model, save_model
from .toy import ToyVelocityMLP, energy_distance, train_mlp_flow
from .train import CONDITIONAL, GAUSSIAN, integrate, source_inputs, stack_batches, train_toy, validation_loss
