"""Mixed-precision quantization policy search with a Gaussian-mixture large-margin objective."""
from .tensor import Tensor, backward, no_grad, test_mode
from .search import BitCandidateSet, LayerShape, Policy, SearchLayerState, extract_policy, policy_bitops
from .models import build_model
from .config import TrainConfig

__version__ = "0.1.0"
