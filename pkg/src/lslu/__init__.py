"""Learnable series activations for small CNNs.

Core pieces: a numpy reverse-mode autodiff engine (:mod:`lslu.tensor`), layers
and graphs (:mod:`lslu.layers`, :mod:`lslu.networks`), the series activation
(:mod:`lslu.series`), deploy-time fusion (:mod:`lslu.fusion`), optimizers,
data loading, checkpoints, analysis tools and a scikit-learn style
:class:`LSLUClassifier`.
"""
from .config import RunConfig
from .estimator import LSLUClassifier, load_split
from .fusion import fuse_network
from .gradcheck import gradcheck_graph
from .networks import LayerGraph, build_mini_resnet, build_mini_vanillanet, count_params_flops
from .series import LSLU, init_lslu, lslu_forward
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "LSLU",
    "LSLUClassifier",
    "LayerGraph",
    "RunConfig",
    "Tensor",
    "build_mini_resnet",
    "build_mini_vanillanet",
    "count_params_flops",
    "fuse_network",
    "gradcheck_graph",
    "init_lslu",
    "load_split",
    "lslu_forward",
    "no_grad",
]
