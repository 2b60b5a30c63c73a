"""Relationship recognition with an unrolled mean-field network.

Subject, predicate and object labels are predicted jointly by a stack of
inference units, each a mean-field update of a triplet CRF with learned
weights. The package also carries the exact CRF used as a test oracle, a
synthetic data generator, the detection pipeline and the metrics.
"""

from .drnet import DrNetConfig, ModelConfig, RelationNet, TrainConfig, drnet_train
from .relmodel import CrfPotentials, LabelSpace

__all__ = [
    "CrfPotentials",
    "DrNetConfig",
    "LabelSpace",
    "ModelConfig",
    "RelationNet",
    "TrainConfig",
    "drnet_train",
]

__version__ = "0.1.0"
