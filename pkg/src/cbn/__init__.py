"""Cyclic CNNs with pooling: spectra, representation-cost bounds and explicit constructions."""

__version__ = "0.1.0"

from .te_linalg import (  # noqa: F401
    ConvFilter,
    FreqSVD,
    PoolingSpec,
    TEMatrix,
    circulant_eigenvalues,
    cross_channel_conv,
    cyclic_conv,
    frequency_blocks,
    frequency_svd,
    pooling_operator,
    pseudo_det,
    te_matrix,
)
from .cnn_core import (  # noqa: F401
    NetworkParams,
    TrainConfig,
    forward,
    init_params,
    input_jacobian,
    loss_and_gradients,
    ntk_trace,
    predict,
    train,
)
