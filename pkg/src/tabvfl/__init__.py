"""Split-TabNet vertical federated learning at desk scale."""

from .autodiff import Parameter, Tensor, check_matrix, sparsemax
from .errors import ConfigError, DataError, ProtocolError
from .nn_core import (
    Adam,
    BatchNorm,
    FeatureTransformer,
    Linear,
    Module,
    cross_entropy,
    fc_forward,
    grad_check,
    load_checkpoint,
    reconstruction_loss,
    save_checkpoint,
    sparsity_loss,
)
from .tabnet import (
    FinalMapping,
    GuestBottom,
    ModelParts,
    MonolithicTabNet,
    PartialDecoder,
    PartialEncoder,
    RandomObfuscator,
    TabNetConfig,
    build_model_parts,
    concat_intermediate,
    le_aggregate,
    partition_uniform,
)

__version__ = "0.1.0"
