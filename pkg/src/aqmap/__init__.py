"""AQI maps over an urban grid from sparse sensors.

A hybrid temporal-convolution / graph-convolution regressor trained with a
masked squared error plus a graph smoothness penalty, together with the
dataset plumbing, IDW baseline, evaluation protocol and map rendering.
"""

from .errors import AQMapError
from .grid import GridSpec, Graph, build_graph, node_id
from .model import ModelConfig, ModelParams, forward, init_params
from .training import TrainConfig, train

__all__ = [
    "AQMapError",
    "GridSpec",
    "Graph",
    "build_graph",
    "node_id",
    "ModelConfig",
    "ModelParams",
    "forward",
    "init_params",
    "TrainConfig",
    "train",
]
__version__ = "0.1.0"
