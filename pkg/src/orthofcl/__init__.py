"""`orthofcl`: Federated Class-Incremental Learning with Orthogonal Adapters

`orthofcl` simulates federated class-incremental learning in which clients
fine-tune low-rank key/value adapters of a frozen attention backbone. Each
task's adapter basis is chosen orthogonal to a dual gradient projection
memory of earlier tasks, so merging new adapters leaves old tasks' responses
intact.
"""

__VERSION__ = "1.0.0"

from orthofcl.errors import OrthoFCLError
from orthofcl.model import BackboneConfig, ModelState
from orthofcl.memory import MemoryConfig, SubspaceMemory
from orthofcl.data import Dataset, SyntheticConfig, TaskSchedule
from orthofcl.federated import RoundConfig, run_experiment, run_centralized
from orthofcl.metrics import AccuracyMatrix, faa
from orthofcl.config import ExperimentConfig, load_config
