from .checkpoint import load_checkpoint, save_checkpoint
from .network import (
    Checkpoint,
    ConvSpec,
    FeatureSequence,
    NetworkConfig,
    attach_speaker_input,
    backward,
    backward_batch,
    check_transfer,
    forward,
    forward_batch,
    hidden_parameter_names,
    init_checkpoint,
    param_shapes,
    replace_output_layer,
)

__all__ = [
    "Checkpoint",
    "ConvSpec",
    "FeatureSequence",
    "NetworkConfig",
    "attach_speaker_input",
    "backward",
    "backward_batch",
    "check_transfer",
    "forward",
    "forward_batch",
    "hidden_parameter_names",
    "init_checkpoint",
    "load_checkpoint",
    "param_shapes",
    "replace_output_layer",
    "save_checkpoint",
]
