"""Input validation for image arrays passed to the estimator."""
import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length, column_or_1d


def check_images(X) -> np.ndarray:
    """Finite float array of shape ``(n, C, H, W)``."""
    X = check_array(X, allow_nd=True, dtype=[np.float32, np.float64], ensure_all_finite=True, ensure_min_samples=0)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, C, H, W), got {X.shape}")
    return X


def check_images_labels(X, y) -> tuple:
    X = check_images(X)
    y = column_or_1d(y)
    check_consistent_length(X, y)
    return X, y
