"""Learning influence matrices of quantum environments from measurement data."""

from .channels import (
    ImpuritySpec,
    SuperOperator,
    channel_from_kraus,
    devectorize,
    haar_unitary,
    impurity_channel,
    is_cptp,
    unitary_channel,
    vectorize,
)
from .dynamics import (
    ControlSchedule,
    Trajectory,
    current,
    im_norm,
    im_reduce,
    impurity_trajectory,
    infidelity,
    prediction_error,
    steady_current,
    temporal_entanglement,
    transport_trajectory,
)
from .environment import (
    ChainSpec,
    InfluenceMatrix,
    build_im_dense,
    build_im_mps,
    decoupled_im,
    dense_impurity_trajectory,
    dense_protocol_probability,
    depolarizing_im,
    environment_step_superop,
)
from .learn import (
    AdamState,
    AnsatzIM,
    TrainConfig,
    ansatz_to_im,
    euclidean_gradient,
    log_likelihood,
    random_ansatz,
    riemannian_adam_step,
    stiefel_project,
    stiefel_retract,
    train,
)
from .measurement import (
    MeasurementDataset,
    SicPovm,
    mixed_grain_dataset,
    outcome_probabilities,
    outcome_probability,
    sample_dataset,
    sic_povm,
)
from .tensor import TimeMPS, contract, mps_compress, mps_overlap, svd_truncate

__version__ = "0.1.0"

__all__ = [
    "ImpuritySpec",
    "SuperOperator",
    "channel_from_kraus",
    "devectorize",
    "haar_unitary",
    "impurity_channel",
    "is_cptp",
    "unitary_channel",
    "vectorize",
    "ControlSchedule",
    "Trajectory",
    "current",
    "im_norm",
    "im_reduce",
    "impurity_trajectory",
    "infidelity",
    "prediction_error",
    "steady_current",
    "temporal_entanglement",
    "transport_trajectory",
    "ChainSpec",
    "InfluenceMatrix",
    "build_im_dense",
    "build_im_mps",
    "decoupled_im",
    "dense_impurity_trajectory",
    "dense_protocol_probability",
    "depolarizing_im",
    "environment_step_superop",
    "AdamState",
    "AnsatzIM",
    "TrainConfig",
    "ansatz_to_im",
    "euclidean_gradient",
    "log_likelihood",
    "random_ansatz",
    "riemannian_adam_step",
    "stiefel_project",
    "stiefel_retract",
    "train",
    "MeasurementDataset",
    "SicPovm",
    "mixed_grain_dataset",
    "outcome_probabilities",
    "outcome_probability",
    "sample_dataset",
    "sic_povm",
    "TimeMPS",
    "contract",
    "mps_compress",
    "mps_overlap",
    "svd_truncate",
]
