"""Learned Meta Pattern extraction with a hierarchical fusion network, in numpy.

Submodules: ``tensor`` (autodiff), ``layers``, ``models``, ``data``,
``trainer``, ``checkpoint``, ``metrics``, ``protocol``, ``config``,
``gradcheck``, ``plotting`` and ``cli``.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .data import (
    BalancedSampler,
    DomainData,
    DomainSpec,
    generate_domain,
    generate_domains,
    load_manifest,
    make_domain_specs,
)
from .metrics import EvalReport, auc, eer_threshold, hter, score
from .models import (
    ExtractorSpec,
    HfnSpec,
    ParameterSet,
    Prediction,
    build_extractor,
    build_hfn,
    color_lbp_map,
    compute_loss,
    extract_pattern,
    hfm_fuse,
    hfn_forward,
)
from .protocol import evaluate_model, run_protocol
from .tensor import SgdState, Tape, Tensor, backward, sgd_step
from .trainer import Trainer, erm_step, inner_update, meta_train_step, split_domains, train

__version__ = "0.1.0"
