from .params import CheckpointError, ModelParams, adamw_step, read_txnn, write_txnn
from .tensor import ShapeError, Tensor, backward

__all__ = ["CheckpointError", "ModelParams", "ShapeError", "Tensor", "adamw_step", "backward", "read_txnn", "write_txnn"]
