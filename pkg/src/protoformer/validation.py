"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .exceptions import ContractError, DimensionError, NotFittedError


def check_image(image, name: str = "image") -> np.ndarray:
    """Return ``image`` as float32 ``[3, H, W]`` with ``H, W`` divisible by 8.

    Channel-last ``[H, W, 3]`` input is transposed.
    """
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[0] != 3 and arr.shape[-1] == 3:
        arr = np.ascontiguousarray(arr.transpose(2, 0, 1))
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"{name} must be [3, H, W], got shape {arr.shape}")
    h, w = arr.shape[1:]
    if h % 8 or w % 8:
        raise DimensionError(f"{name} size {h}x{w} must be divisible by 8")
    if not np.isfinite(arr).all():
        raise ContractError(f"{name} contains non-finite values")
    return arr


def check_mask(mask, shape: tuple[int, int] | None = None, name: str = "mask") -> np.ndarray:
    """Return a binary mask as float32 ``[1, H, W]``."""
    arr = np.asarray(mask)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] != 1:
        raise DimensionError(f"{name} must be [H, W] or [1, H, W], got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ContractError(f"{name} must be binary {{0, 1}}")
    if shape is not None and arr.shape[1:] != tuple(shape):
        raise DimensionError(f"{name} size {arr.shape[1:]} does not match image size {tuple(shape)}")
    return arr.astype(np.float32)


def check_support(support_images, support_masks) -> list[tuple[np.ndarray, np.ndarray]]:
    """Validate ``k`` support pairs sharing one image size."""
    images = list(support_images)
    masks = list(support_masks)
    if not images:
        raise ContractError("at least one support image is required")
    if len(images) != len(masks):
        raise ContractError(f"{len(images)} support images but {len(masks)} masks")
    pairs = []
    size = None
    for i, (img, m) in enumerate(zip(images, masks)):
        img = check_image(img, f"support image {i}")
        size = size or img.shape[1:]
        if img.shape[1:] != size:
            raise DimensionError(f"support image {i} size {img.shape[1:]} differs from {size}")
        pairs.append((img, check_mask(m, size, f"support mask {i}")))
    return pairs


def check_is_fitted(estimator, attribute: str = "net_"):
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit() or load() first")
