"""causalbench - treatment-effect estimators benchmarked against a randomized trial."""

from causalbench.__version__ import __version__
from causalbench.data_model import Arm, CovariateSchema, Dataset, load_csv
from causalbench.effect import EffectEstimate, Estimand
from causalbench.errors import CausalBenchError

__all__ = [
    "Arm",
    "CausalBenchError",
    "CovariateSchema",
    "Dataset",
    "EffectEstimate",
    "Estimand",
    "__version__",
    "load_csv",
]
