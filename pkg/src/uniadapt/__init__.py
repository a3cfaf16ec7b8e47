"""Language-universal adapters distilled from language-specific ones, with LID prefixes.

A small numpy reverse-mode engine backs a transformer encoder, CTC training,
the adapter bank and the distillation loop, all at toy scale.
"""

from .adapters import prune_for_inference
from .ctc import Vocab, ctc_loss, greedy_decode
from .distill import LossBreakdown, LossWeights, train, train_step
from .lid_prefix import export_prefixes, gamma, prefixed_attention
from .model import ModelConfig, ModelParams, forward, init_params
from .params import params_report
from .tensor import ContractError, ShapeError, Tensor, no_grad

__version__ = "0.1.0"
