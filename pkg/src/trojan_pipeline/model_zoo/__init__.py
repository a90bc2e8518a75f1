from .data import (
    DATA_ENV,
    Dataset,
    IDXError,
    default_data_root,
    held_out_slice,
    load_mnist,
    read_idx,
    synthetic_digits,
)
from .graph import ModelGraph, alexnet_layers, build_alexnet, build_lenet, init_params
from .training import TrainingDiverged, evaluate, loss_and_grads, predict, train
from .weights import ModelFormatError, load_model, save_model

__all__ = [
    "DATA_ENV", "Dataset", "IDXError", "ModelFormatError", "ModelGraph", "TrainingDiverged",
    "alexnet_layers", "build_alexnet", "build_lenet", "default_data_root", "evaluate",
    "held_out_slice", "init_params", "load_mnist", "load_model", "loss_and_grads", "predict",
    "read_idx", "save_model", "synthetic_digits", "train",
]
