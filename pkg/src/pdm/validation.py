"""Input checks shared by the estimator front end."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from pdm.errors import ContractViolation

VIS, IR = 0, 1


def check_maps(X, channels: int | None = None) -> np.ndarray:
    """Finite float64 array of shape (N, C, H, W)."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False, ensure_all_finite=True)
    if X.ndim != 4:
        raise ContractViolation(f"expected feature maps of shape (N, C, H, W), got {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise ContractViolation(f"expected {channels} channels, got {X.shape[1]}")
    return X


def check_modalities(modalities, n: int) -> np.ndarray:
    if modalities is None:
        raise ContractViolation("modalities are required (0 = visible, 1 = infrared)")
    m = np.asarray(modalities)
    if m.shape != (n,):
        raise ContractViolation(f"need one modality label per sample, got shape {m.shape}")
    if not np.isin(m, (VIS, IR)).all():
        raise ContractViolation("modality labels must be 0 (visible) or 1 (infrared)")
    return m.astype(np.int64)


def check_training_data(X, y, modalities):
    X = check_maps(X)
    if y is None:
        raise ContractViolation("identity labels are required")
    y = np.asarray(y)
    check_consistent_length(X, y)
    if y.ndim != 1:
        raise ContractViolation("identity labels must be one-dimensional")
    return X, y, check_modalities(modalities, len(X))
