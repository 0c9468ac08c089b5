"""Traffic-flow recovery from limited probe-vehicle data with a
CNN-encoder / selective-SSM / CNN-decoder network (ST-Mamba)."""

from .errors import ContractError, FormatError, SequencingError, ShapeError, ValidationError
from .grid import FlowImage, FlowSnapshot, GridMapConfig, RecordArray, VehicleRecord
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .synth import ScenarioConfig
from .train import EvalReport, TrainConfig

__all__ = [
    "ContractError", "FormatError", "SequencingError", "ShapeError", "ValidationError",
    "FlowImage", "FlowSnapshot", "GridMapConfig", "RecordArray", "VehicleRecord",
    "ModelConfig", "ModelParams", "forward", "init_params", "load_checkpoint", "save_checkpoint",
    "ScenarioConfig", "EvalReport", "TrainConfig",
]
__version__ = "0.1.0"
