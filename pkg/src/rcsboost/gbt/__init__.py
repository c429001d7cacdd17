"""Second-order gradient-boosted trees with learned Null directions."""
from .model import (Ensemble, FlatForest, ModelError, SchemaMismatch, Tree, TrainConfig, flatten, log_loss,
                    predict_margin, predict_proba, sigmoid)
from .select import GridCell, GridResult, RFEResult, RFEStep, default_grid, grid_search, rfe, validation_auprc
from .train import Presorted, Split, find_best_split, grow_tree, train

__all__ = [
    "Ensemble", "FlatForest", "GridCell", "GridResult", "ModelError", "Presorted", "RFEResult", "RFEStep",
    "SchemaMismatch", "Split", "Tree", "TrainConfig", "default_grid", "find_best_split", "flatten", "grid_search",
    "grow_tree", "log_loss", "predict_margin", "predict_proba", "rfe", "sigmoid", "train", "validation_auprc",
]
