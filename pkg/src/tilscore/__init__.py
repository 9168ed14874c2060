"""Slide-level TIL scoring from precomputed tile features.

Subpackages cover the full desk-scale pipeline: tissue foreground masking
and tile grids (``foreground``), feature-bag and clinical-table I/O plus a
synthetic cohort generator (``bagio``), the gated attention-MIL regressor
with hand-written gradients (``milnet``), grouped cross-validation and
ensembling (``folds``), the concordance/calibration metric panel
(``concord``), and survival statistics (``survstats``).  ``cli`` ties the
stages together into one command-line tool.
"""

__version__ = "0.1.0"
