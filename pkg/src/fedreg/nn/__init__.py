from fedreg.nn.model import (
    Conv,
    Dense,
    Output,
    ModelSpec,
    ModelState,
    ForwardTrace,
    default_cnn_spec,
    init_state,
    forward,
    backward,
    zero_grads,
    state_to_bytes,
    state_from_bytes,
)
from fedreg.nn.losses import cross_entropy
from fedreg.nn.optim import SgdMomentum

__all__ = [
    "Conv",
    "Dense",
    "Output",
    "ModelSpec",
    "ModelState",
    "ForwardTrace",
    "default_cnn_spec",
    "init_state",
    "forward",
    "backward",
    "zero_grads",
    "state_to_bytes",
    "state_from_bytes",
    "cross_entropy",
    "SgdMomentum",
]
