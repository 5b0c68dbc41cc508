"""msdet: lightweight multi-scale object detection toolkit.

A from-scratch numpy-backed stack: dense-tensor autodiff engine, separable
large-kernel attention, gather-distribute feature fusion, multi-patch mixing
detection heads, six assembled ablation variants, a PR-curve evaluation
suite, dataset plumbing and a desk-scale training harness.
"""

from .boxes import DetBox, GtBox, iou
from .evaluation import EvalReport, evaluate
from .tensor import Tensor, no_grad
from .zoo import VARIANTS, ModelConfig, build

__all__ = [
    "DetBox",
    "EvalReport",
    "GtBox",
    "ModelConfig",
    "Tensor",
    "VARIANTS",
    "build",
    "evaluate",
    "iou",
    "no_grad",
]

__version__ = "0.1.0"
