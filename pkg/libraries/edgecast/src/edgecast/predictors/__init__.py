"""
Forecast branches: the per-node site expert, the shared small model and the
retrieval-conditioned cloud branch.
"""

from edgecast.predictors.base_predictor import BasePredictor
from edgecast.predictors.branches import (
    BranchSuite,
    CloudPredictor,
    ExpertPredictor,
    SmallPredictor,
)
from edgecast.predictors.model_set import ModelConfig, ModelSet, train_model_set
from edgecast.predictors.retrieval import (
    CloudContext,
    QueryEncoder,
    SupportEntry,
    SupportSet,
    build_context,
    form_query,
    retrieve_support,
)
from edgecast.predictors.ridge import (
    ConditionalRegressor,
    ExpertModel,
    SmallModel,
    predict_cloud,
    predict_expert,
    predict_small,
    train_conditional_regressor,
    train_expert,
    train_small,
)

__all__ = [
    "BasePredictor",
    "BranchSuite",
    "CloudContext",
    "CloudPredictor",
    "ConditionalRegressor",
    "ExpertModel",
    "ExpertPredictor",
    "ModelConfig",
    "ModelSet",
    "QueryEncoder",
    "SmallModel",
    "SmallPredictor",
    "SupportEntry",
    "SupportSet",
    "build_context",
    "form_query",
    "predict_cloud",
    "predict_expert",
    "predict_small",
    "retrieve_support",
    "train_conditional_regressor",
    "train_expert",
    "train_model_set",
    "train_small",
]


