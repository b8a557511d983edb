"""Reconstruction quality metrics on mesh-based conductivity fields."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .mesh import Mesh

RASTER_SIZE = 64
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
K1, K2 = 0.01, 0.03

BACKGROUND, ARTIFACT, ANOMALY = 1, 2, 3


class DegenerateRangeWarning(RuntimeWarning):
    """The reference raster is constant, so SSIM falls back to ``L = 1``."""


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError(f"pred and truth must be equal-length vectors, got {pred.shape} and {truth.shape}")
    return pred, truth


def mse(pred, truth) -> float:
    """``‖truth − pred‖² / n_T``."""
    pred, truth = _pair(pred, truth)
    return float(np.mean((truth - pred) ** 2))


def locate_pixels(mesh: Mesh, size: int = RASTER_SIZE) -> np.ndarray:
    """Containing triangle of each pixel centre on ``[-1, 1]²`` (``-1`` outside).

    Returns an array of shape ``(size, size)`` indexed ``[row, col]`` with
    row 0 at ``y = -1``.  Pixels outside the unit disk are always ``-1``.
    """
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    X, Y = np.meshgrid(c, c)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    tri = mesh.nodes[mesh.triangles]
    a, b, d = tri[:, 0], tri[:, 1], tri[:, 2]
    det = (b[:, 0] - a[:, 0]) * (d[:, 1] - a[:, 1]) - (d[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    owner = np.full(len(pts), -1, dtype=np.int64)
    tol = 1e-12
    for start in range(0, len(pts), 512):
        p = pts[start:start + 512, None, :]
        l1 = ((b[:, 0] - p[..., 0]) * (d[:, 1] - p[..., 1]) - (d[:, 0] - p[..., 0]) * (b[:, 1] - p[..., 1])) / det
        l2 = ((d[:, 0] - p[..., 0]) * (a[:, 1] - p[..., 1]) - (a[:, 0] - p[..., 0]) * (d[:, 1] - p[..., 1])) / det
        l3 = 1.0 - l1 - l2
        inside = (l1 >= -tol) & (l2 >= -tol) & (l3 >= -tol)
        hit = inside.any(axis=1)
        owner[start:start + 512][hit] = inside[hit].argmax(axis=1)
    owner[np.hypot(pts[:, 0], pts[:, 1]) > 1.0] = -1
    return owner.reshape(size, size)


def rasterize_field(values, mesh: Mesh, size: int = RASTER_SIZE, owner=None):
    """Piecewise-constant raster of element values; returns ``(image, mask)``."""
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_T,):
        raise ValueError(f"field must have {mesh.n_T} entries")
    owner = locate_pixels(mesh, size) if owner is None else owner
    mask = owner >= 0
    img = np.zeros(owner.shape)
    img[mask] = values[owner[mask]]
    return img, mask


def _masked_ssim(x, y, mask, L):
    m = mask.astype(float)
    kw = dict(sigma=SSIM_SIGMA, truncate=SSIM_RADIUS / SSIM_SIGMA, mode="constant")
    W = gaussian_filter(m, **kw)
    valid = mask & (W > 1e-12)
    Ws = np.where(W > 1e-12, W, 1.0)

    def blur(a):
        return gaussian_filter(a * m, **kw) / Ws

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx ** 2
    vy = blur(y * y) - my ** 2
    cxy = blur(x * y) - mx * my
    C1, C2 = (K1 * L) ** 2, (K2 * L) ** 2
    smap = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx ** 2 + my ** 2 + C1) * (vx + vy + C2))
    return float(np.mean(smap[valid]))


def ssim_mesh(pred, truth, mesh: Mesh, size: int = RASTER_SIZE, owner=None) -> float:
    """Structural similarity of two element fields via a masked raster.

    Both fields are rasterised on a ``size x size`` grid over ``[-1, 1]²``;
    pixels outside the mesh are excluded from the Gaussian window
    statistics (11x11, σ = 1.5).  The dynamic range ``L`` is the range of
    the truth raster.  A constant truth gives 1 for identical rasters and
    otherwise uses ``L = 1`` with a :class:`DegenerateRangeWarning`.
    """
    pred, truth = _pair(pred, truth)
    owner = locate_pixels(mesh, size) if owner is None else owner
    x, mask = rasterize_field(pred, mesh, size, owner)
    y, _ = rasterize_field(truth, mesh, size, owner)
    ym = y[mask]
    L = float(ym.max() - ym.min())
    if L == 0:
        if np.array_equal(x[mask], ym):
            return 1.0
        warnings.warn("truth raster is constant; using L = 1", DegenerateRangeWarning, stacklevel=2)
        L = 1.0
    return _masked_ssim(x, y, mask, L)


@dataclass(frozen=True)
class EieiBreakdown:
    """Class counts, spreads, weights and terms of the EIEI score.

    ``labels`` uses 1 = background, 2 = artifact, 3 = anomaly.
    """

    labels: np.ndarray
    n1: int
    n2: int
    n3: int
    delta1: float
    delta2: float
    delta3: float
    w1: float
    w2: float
    T1: float
    T2: float
    value: float

    @property
    def n_T(self) -> int:
        return self.labels.size

    def recompute(self) -> float:
        return self.w1 * self.T1 + self.w2 * self.T2


def _spread(vals: np.ndarray) -> float:
    return float(np.mean(np.abs(vals - vals.mean()))) if vals.size else 0.0


def classify(pred, truth, sigma0: float = 1.0, tau: float = 0.25) -> np.ndarray:
    """Three-class map against the truth geometry.

    An element is flagged when ``|pred − σ0| > τ · max|truth − σ0|``.
    Flagged elements inside a true anomaly are anomalies, other flagged
    elements are artifacts, the rest is background.  If the truth has no
    anomaly every flagged element is an artifact.
    """
    pred, truth = _pair(pred, truth)
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    dev = np.abs(truth - sigma0)
    flagged = np.abs(pred - sigma0) > tau * dev.max()
    is_anom = dev > 0
    labels = np.full(pred.size, BACKGROUND, dtype=np.int8)
    labels[flagged & is_anom] = ANOMALY
    labels[flagged & ~is_anom] = ARTIFACT
    return labels


def eiei(pred, truth, mesh: Mesh | None = None, sigma0: float = 1.0, tau: float = 0.25) -> EieiBreakdown:
    """EIEI score of a reconstruction, with its per-class breakdown.

    Class statistics use the reconstructed values.  With no artifact
    elements, ``w1 = 0`` and ``T1 = 1``.
    """
    pred, truth = _pair(pred, truth)
    if mesh is not None and pred.size != mesh.n_T:
        raise ValueError("field length does not match the mesh")
    labels = classify(pred, truth, sigma0, tau)
    parts = [pred[labels == c] for c in (BACKGROUND, ARTIFACT, ANOMALY)]
    n1, n2, n3 = (p.size for p in parts)
    nT = pred.size
    d1, d2, d3 = (_spread(p) for p in parts)
    w1 = float(parts[1].mean()) if n2 else 0.0
    T1 = 1.0 - n2 / nT
    bg_an = np.concatenate([parts[0], parts[2]])
    w2 = float(bg_an.mean()) if bg_an.size else 0.0
    T2 = 1.0 - (d1 * n1 / nT + d3 * n3 / nT)
    return EieiBreakdown(labels, n1, n2, n3, d1, d2, d3, w1, w2, T1, T2, w1 * T1 + w2 * T2)


def dr(pred, truth) -> float:
    """Dynamic range of ``pred`` relative to ``truth``, in percent."""
    pred, truth = _pair(pred, truth)
    span = truth.max() - truth.min()
    if span == 0:
        raise ValueError("dynamic range is undefined for a constant truth")
    return float((pred.max() - pred.min()) / span * 100.0)


def evaluate(pred, truth, mesh: Mesh, sigma0: float = 1.0, tau: float = 0.25, owner=None) -> dict:
    """All metrics of one sample as a flat dict."""
    b = eiei(pred, truth, mesh, sigma0, tau)
    out = {"mse": mse(pred, truth), "ssim": ssim_mesh(pred, truth, mesh, owner=owner), "eiei": b.value}
    try:
        out["dr"] = dr(pred, truth)
    except ValueError:
        out["dr"] = float("nan")
    return out
