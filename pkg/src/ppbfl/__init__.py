"""Privacy-protected blockchain federated learning simulator."""

from .cas import Cid, ContentStore
from .data import Dataset, PartitionPlan
from .dp import LayerGeometry, PrivacyBudget
from .orchestrator import SimConfig, run_experiment, run_round
from .tensornet import ModelParams

__version__ = "0.1.0"

__all__ = [
    "Cid",
    "ContentStore",
    "Dataset",
    "LayerGeometry",
    "ModelParams",
    "PartitionPlan",
    "PrivacyBudget",
    "SimConfig",
    "run_experiment",
    "run_round",
]
