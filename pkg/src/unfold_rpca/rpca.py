"""
Classical low-rank + sparse machinery.

Proximal operators (soft thresholding, singular value thresholding), a
principal component pursuit solver based on the inexact augmented Lagrange
multiplier method, infrared patch-image construction, and a white top-hat
filter. These serve as baselines and as independent references for the
learned network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import NumericalError, ShapeError

log = logging.getLogger(__name__)


def _as_matrix(x, name: str = "matrix") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{name} contains non-finite entries")
    return x


def soft_threshold(x, tau: float) -> np.ndarray:
    """Elementwise ``sign(x) * max(|x| - tau, 0)``."""
    if tau < 0:
        raise ValueError(f"threshold must be non-negative, got {tau}")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def svt(x, tau: float) -> np.ndarray:
    """Singular value thresholding: shrink every singular value of ``x`` by ``tau``."""
    if tau < 0:
        raise ValueError(f"threshold must be non-negative, got {tau}")
    x = _as_matrix(x)
    try:
        u, s, vt = np.linalg.svd(x, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD of a {x.shape} matrix failed: {exc}") from exc
    s = np.maximum(s - tau, 0.0)
    keep = s > 0
    return (u[:, keep] * s[keep]) @ vt[keep]


def nuclear_norm(x) -> float:
    return float(np.linalg.svd(np.asarray(x, dtype=np.float64), compute_uv=False).sum())


@dataclass
class PcpSettings:
    """
    Parameters of the inexact ALM solver.

    ``lam`` and ``mu0`` default to ``1/sqrt(max(m, n))`` and ``1.25/||D||_2``
    when left as ``None``.
    """

    lam: float | None = None
    mu0: float | None = None
    rho: float = 1.5
    mu_max_factor: float = 1e7
    tol: float = 1e-7
    max_iters: int = 500

    def __post_init__(self):
        if self.lam is not None and self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.mu0 is not None and self.mu0 <= 0:
            raise ValueError("mu0 must be positive")
        if self.rho <= 1:
            raise ValueError("rho must exceed 1")
        if self.tol <= 0 or self.max_iters < 1:
            raise ValueError("tol and max_iters must be positive")


@dataclass
class PcpResult:
    background: np.ndarray
    target: np.ndarray
    iterations: int
    converged: bool
    residual: float


def pcp_decompose(d, settings: PcpSettings | None = None) -> PcpResult:
    """
    Split ``d`` into low-rank ``background`` plus sparse ``target``.

    Minimizes ``||B||_* + lam * ||T||_1`` subject to ``D = B + T``.
    Stops once ``||D - B - T||_F / ||D||_F <= tol``. If ``max_iters`` runs out
    first, the iterate with the smallest residual is returned with
    ``converged=False``.
    """
    settings = settings or PcpSettings()
    d = _as_matrix(d, "D")
    m, n = d.shape
    lam = settings.lam if settings.lam is not None else 1.0 / np.sqrt(max(m, n))

    d_fro = np.linalg.norm(d)
    if d_fro == 0:
        return PcpResult(np.zeros_like(d), np.zeros_like(d), 0, True, 0.0)
    spectral = np.linalg.norm(d, 2)
    mu = settings.mu0 if settings.mu0 is not None else 1.25 / spectral
    mu_max = mu * settings.mu_max_factor
    y = d / max(spectral, np.abs(d).max() / lam)

    b = np.zeros_like(d)
    t = np.zeros_like(d)
    best = (np.inf, b, t, 0)
    for it in range(1, settings.max_iters + 1):
        b = svt(d - t + y / mu, 1.0 / mu)
        t = soft_threshold(d - b + y / mu, lam / mu)
        resid = d - b - t
        rel = np.linalg.norm(resid) / d_fro
        if rel < best[0]:
            best = (rel, b, t, it)
        if rel <= settings.tol:
            return PcpResult(b, t, it, True, float(rel))
        y = y + mu * resid
        mu = min(settings.rho * mu, mu_max)

    rel, b, t, it = best
    log.warning("PCP did not reach tol %.1e in %d iterations (best %.3e)", settings.tol, settings.max_iters, rel)
    return PcpResult(b, t, settings.max_iters, False, float(rel))


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int = 50
    slide_step: int = 10

    def validate(self, shape: tuple[int, int]) -> None:
        if not 1 <= self.slide_step <= self.patch_size:
            raise ValueError(f"need 1 <= slide_step <= patch_size, got {self.slide_step}, {self.patch_size}")
        if self.patch_size > min(shape):
            raise ShapeError(f"patch size {self.patch_size} exceeds image dims {shape}")


def _positions(length: int, size: int, step: int) -> list[int]:
    pos = list(range(0, length - size + 1, step))
    if pos[-1] != length - size:
        pos.append(length - size)  # cover the trailing border
    return pos


def patch_construct(image, cfg: PatchConfig = PatchConfig()) -> np.ndarray:
    """Stack every sliding ``patch_size`` window of ``image`` as a column."""
    image = _as_matrix(image, "image")
    cfg.validate(image.shape)
    p = cfg.patch_size
    cols = [
        image[r : r + p, c : c + p].reshape(-1)
        for r in _positions(image.shape[0], p, cfg.slide_step)
        for c in _positions(image.shape[1], p, cfg.slide_step)
    ]
    return np.stack(cols, axis=1)


def patch_reconstruct(patch_image, cfg: PatchConfig, original_dims: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`patch_construct`, averaging overlapping pixels."""
    patch_image = _as_matrix(patch_image, "patch image")
    cfg.validate(original_dims)
    p = cfg.patch_size
    rows = _positions(original_dims[0], p, cfg.slide_step)
    cols = _positions(original_dims[1], p, cfg.slide_step)
    if patch_image.shape != (p * p, len(rows) * len(cols)):
        raise ShapeError(
            f"patch image shape {patch_image.shape} does not match {original_dims} with {cfg}"
        )
    acc = np.zeros(original_dims)
    hits = np.zeros(original_dims)
    k = 0
    for r in rows:
        for c in cols:
            acc[r : r + p, c : c + p] += patch_image[:, k].reshape(p, p)
            hits[r : r + p, c : c + p] += 1.0
            k += 1
    return acc / hits


def ipi_detect(image, cfg: PatchConfig = PatchConfig(), settings: PcpSettings | None = None):
    """Patch-image PCP; returns (background, target) maps of the image's size."""
    image = _as_matrix(image, "image")
    result = pcp_decompose(patch_construct(image, cfg), settings)
    background = patch_reconstruct(result.background, cfg, image.shape)
    target = patch_reconstruct(result.target, cfg, image.shape)
    return background, target


def tophat_detect(image, se_radius: int = 1) -> np.ndarray:
    """White top-hat with a square structuring element of side ``2 * se_radius + 1``."""
    if se_radius < 1:
        raise ValueError(f"se_radius must be >= 1, got {se_radius}")
    image = _as_matrix(image, "image")
    side = 2 * se_radius + 1
    return image - ndimage.grey_opening(image, size=(side, side))


def minmax_normalize(x) -> np.ndarray:
    """Scale to [0, 1]; a constant map becomes all zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)
