"""Desk-scale video diffusion with trainable frame-capacity extension.

A small numpy-backed tensor engine with reverse-mode autodiff powers a
miniature first-frame-conditioned video UNet. The library's point is the
extension surgery: cyclically tiled trainable positional embeddings plus an
identity-initialized 3d conv adapter grow a model's frame capacity without
changing its function at the original length, after which a freezing
post-tuning loop trains only the temporal pieces.

The ``EXVIDEO_THREADS`` environment variable (default 1) caps BLAS
intra-op parallelism; it must be decided before numpy loads, which is why
this module sets the knobs first. Importing numpy before exvid bypasses
the cap.
"""

import os as _os

_threads = _os.environ.get("EXVIDEO_THREADS", "1")
try:
    if int(_threads) < 1:
        raise ValueError
except ValueError:
    raise RuntimeError(f"EXVIDEO_THREADS must be a positive integer, got {_threads!r}") from None
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    _os.environ.setdefault(_var, _threads)

from . import checkpoint, data, diffusion, model, surgery, tensor, trainer  # noqa: E402
from .model import ModelConfig, VideoModel, build_model  # noqa: E402
from .surgery import ExtensionPlan, extend_model, verify_identity  # noqa: E402
from .tensor import Tensor  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "VideoModel",
    "build_model",
    "ExtensionPlan",
    "extend_model",
    "verify_identity",
    "Tensor",
    "checkpoint",
    "data",
    "diffusion",
    "model",
    "surgery",
    "tensor",
    "trainer",
]
