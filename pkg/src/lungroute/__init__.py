"""lungroute: two-stage, demographically routed classification for imbalanced
volumetric-scan cohorts.

A first-stage subgroup classifier routes each sample to one of two
subgroup-specific disease classifiers; both stages are plain dense networks
trained in-repo (no autodiff framework) with weighted cross-entropy, Adam,
and a warmup+cosine schedule.  Includes a synthetic cohort generator, the
evaluation metric suite, and a CLI (``lungroute --help``).
"""

__version__ = "0.1.0"

from lungroute.errors import (  # noqa: F401
    DivergenceError,
    FormatError,
    LungRouteError,
    ValidationError,
)
