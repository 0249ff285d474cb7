"""DeepOSets: in-context learning of regression operators with a DeepSets-pooled DeepONet."""
from .model import (
    BranchCache,
    DeepOSetsModel,
    ModelConfig,
    Prompt,
    branch_features,
    build_paper_config,
    encode_prompt,
    model_gradients,
    predict,
    predict_full,
)

__version__ = "0.1.0"
