"""headsim: hierarchical whole-head similarity learning at desk scale.

Subpackages and modules:

- ``synthworld``: deterministic factor-controlled head renderer + frozen
  oracle teacher.
- ``relations``: pair-relation tiers, quadruplet mining, mixed batches.
- ``model``: dual-CLS transformer encoder (numpy forward/backward).
- ``objectives``: alignment + hierarchical ranking losses with analytic
  gradients.
- ``pipeline``: shot segmentation, IoU tracking, segment filtering and
  identity clustering over frame manifests.
- ``metrics``: ROC / AUC / VR@FAR, ordering satisfaction, retrieval.
- ``runner`` / ``cli``: seeded experiment orchestration.

Hot numeric kernels live in :mod:`headsim.kernels` with a numba backend and
a pure-numpy fallback selected by the ``HEADSIM_BACKEND`` env var.
"""

__version__ = "0.1.0"
