"""Ground-deformation nowcasting from gridded InSAR displacement series.

The package turns point-wise displacement time series (EGMS-style L3 CSV
tiles) into regular space-time cubes, derives leakage-safe multimodal
feature stacks, and fits one-step-ahead forecasting models ranging from
closed-form trend baselines to a patch-attention transformer and a
spatio-temporal graph-convolutional network, both trained with a small
reverse-mode autodiff engine included here.
"""

from .features import MultimodalFeaturizer
from .baselines import (
    LinearTrendForecaster,
    SeasonalTrendForecaster,
    PersistenceForecaster,
)
from .transformer import TransformerForecaster
from .stgcn import StgcnForecaster

__version__ = "0.1.0"

__all__ = [
    "MultimodalFeaturizer",
    "LinearTrendForecaster",
    "SeasonalTrendForecaster",
    "PersistenceForecaster",
    "TransformerForecaster",
    "StgcnForecaster",
    "__version__",
]
