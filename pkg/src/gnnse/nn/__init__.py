"""Graph and dense networks with manual reverse-mode gradients."""
from .graph import GraphOperator
from .layers import (Dense, GatLayer, GcnLayer, LinearHead, gat_attention, gat_forward, gcn_forward,
                     linear_head, loss_mse)
from .models import GnnModel, MlpModel, Normalizer, load_model, mlp_forward, save_model
from .training import AdamState, TrainConfig, TrainingDiverged, adam_step, new_model, predict, train

__all__ = [
    "AdamState", "Dense", "GatLayer", "GcnLayer", "GnnModel", "GraphOperator", "LinearHead",
    "MlpModel", "Normalizer", "TrainConfig", "TrainingDiverged", "adam_step", "gat_attention",
    "gat_forward", "gcn_forward", "linear_head", "load_model", "loss_mse", "mlp_forward",
    "new_model", "predict", "save_model", "train",
]
