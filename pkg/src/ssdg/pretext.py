"""Rotation expansion, Sobel preprocessing and k-means pseudo-labelling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, SSDGError
from .gabor import to_gray

log = logging.getLogger(__name__)

N_ROTATIONS = 4

SOBEL_X = ((-1.0, 0.0, 1.0),
           (-2.0, 0.0, 2.0),
           (-1.0, 0.0, 1.0))
SOBEL_Y = tuple(zip(*SOBEL_X))


class RotationBatch(NamedTuple):
    images: torch.Tensor
    labels: torch.Tensor


def rotate(images: torch.Tensor, label: int) -> torch.Tensor:
    """Rotate ``(..., H, W)`` images counter-clockwise by ``label * 90`` degrees."""
    return torch.rot90(images, k=int(label) % N_ROTATIONS, dims=(-2, -1))


def expand_rotations(images: torch.Tensor) -> RotationBatch:
    """All four rotations of every image, image-major then label 0..3.

    ``images`` is ``(B, C, H, W)`` with ``H == W``; output has ``4B`` entries.
    """
    if images.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(images.shape)}")
    if images.shape[-1] != images.shape[-2]:
        raise ShapeError(f"rotation needs square images, got {tuple(images.shape[-2:])}")
    rotated = torch.stack([rotate(images, k) for k in range(N_ROTATIONS)], dim=1)
    labels = torch.arange(N_ROTATIONS).repeat(images.shape[0])
    return RotationBatch(rotated.flatten(0, 1), labels)


def _sobel_weight(dtype) -> torch.Tensor:
    return torch.tensor([SOBEL_X, SOBEL_Y], dtype=dtype).unsqueeze(1)


def sobel_preprocess(images: torch.Tensor) -> torch.Tensor:
    """Grayscale then 3x3 Sobel; ``(B, 3, H, W)`` -> ``(B, 2, H, W)`` as (d/dx, d/dy).

    A single ``(3, H, W)`` image is accepted and returns ``(2, H, W)``.
    """
    single = images.dim() == 3
    x = images[None] if single else images
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected RGB input with 3 channels, got {tuple(images.shape)}")
    if min(x.shape[-2:]) < 2:
        raise ShapeError("Sobel needs images of at least 2x2")
    gray = F.pad(to_gray(x), (1, 1, 1, 1), mode="reflect")
    out = F.conv2d(gray, _sobel_weight(x.dtype).to(x.device))
    return out[0] if single else out


def sobel_view(images: torch.Tensor) -> torch.Tensor:
    """Sobel gradients zero-padded to three channels so an RGB stem can consume them."""
    g = sobel_preprocess(images)
    return torch.cat([g, torch.zeros_like(g[:, :1])], dim=1)


# --------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------

@dataclass
class ClusterState:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    epoch: int = 0
    history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def inertia_of(x: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    diff = x - centroids[assignments]
    return float((diff * diff).sum())


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [int(rng.integers(n))]
    closest = ((x - x[centers[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        centers.append(idx)
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return x[centers].copy()


def _repair_empty(x, centroids, assignments):
    """Move the point farthest from its centroid into each empty cluster."""
    k = centroids.shape[0]
    counts = np.bincount(assignments, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        dist = ((x - centroids[assignments]) ** 2).sum(1)
        # never strip the last member from a cluster
        dist[counts[assignments] <= 1] = -1.0
        far = int(np.argmax(dist))
        if dist[far] < 0:
            break
        counts[assignments[far]] -= 1
        assignments[far] = empty
        counts[empty] = 1
        centroids[empty] = x[far]
    return assignments


def _lloyd(x, k, rng, max_iters):
    centroids = kmeans_plusplus(x, k, rng)
    assignments = np.full(x.shape[0], -1)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new = np.argmin(_sq_dists(x, centroids), axis=1)
        new = _repair_empty(x, centroids, new)
        changed = not np.array_equal(new, assignments)
        assignments = new
        for j in range(k):
            centroids[j] = x[assignments == j].mean(0)
        history.append(inertia_of(x, centroids, assignments))
        if not changed:
            break
    return centroids, assignments, history, n_iter


def kmeans(features, k: int, seed: int = 0, max_iters: int = 100,
           n_init: int = 1) -> ClusterState:
    """Lloyd's algorithm with k-means++ seeding; the best of ``n_init`` restarts is kept.

    ``history`` records the inertia after every iteration of the kept restart
    and is non-increasing.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be (N, d), got shape {x.shape}")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise SSDGError(f"k-means needs 1 <= k <= N, got k={k}, N={n}")
    if not np.isfinite(x).all():
        raise SSDGError("k-means features contain non-finite values")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        run = _lloyd(x, k, rng, max_iters)
        if best is None or run[2][-1] < best[2][-1]:
            best = run
    centroids, assignments, history, n_iter = best
    return ClusterState(centroids=centroids, assignments=assignments.astype(np.int64),
                        inertia=history[-1], history=history, n_iter=n_iter)


def pca_project(x: np.ndarray, dim: int) -> np.ndarray:
    """Project rows onto the top ``dim`` principal directions (deterministic signs)."""
    centred = x - x.mean(0, keepdims=True)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    vt = vt[:dim]
    # fix the sign of each component so results do not depend on LAPACK
    signs = np.sign(vt[np.arange(vt.shape[0]), np.abs(vt).argmax(1)])
    signs[signs == 0] = 1.0
    return centred @ (vt * signs[:, None]).T


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


@torch.no_grad()
def extract_features(extractor: nn.Module, images: torch.Tensor,
                     transform: Callable | None = sobel_view,
                     batch_size: int = 256) -> np.ndarray:
    was_training = extractor.training
    extractor.eval()
    out = []
    for start in range(0, images.shape[0], batch_size):
        x = images[start:start + batch_size]
        if transform is not None:
            x = transform(x)
        out.append(extractor(x).double().cpu().numpy())
    extractor.train(was_training)
    return np.concatenate(out, 0)


def reassign_pseudolabels(extractor: nn.Module, images: torch.Tensor, k: int, seed: int = 0,
                          pca_dim: int | None = 256, normalize: bool = True,
                          transform: Callable | None = sobel_view, max_iters: int = 100,
                          batch_size: int = 256) -> tuple[np.ndarray, ClusterState]:
    """Cluster the current representation of ``images`` and return the assignments.

    Features are optionally PCA-reduced (only when wider than ``pca_dim``) and
    L2-normalized before k-means.
    """
    if images.shape[0] == 0:
        raise SSDGError("cannot cluster an empty dataset")
    feats = extract_features(extractor, images, transform, batch_size)
    if pca_dim is not None and feats.shape[1] > pca_dim:
        feats = pca_project(feats, min(pca_dim, feats.shape[0]))
    if normalize:
        feats = l2_normalize(feats)
    state = kmeans(feats, k, seed=seed, max_iters=max_iters)
    counts = np.bincount(state.assignments, minlength=k)
    log.debug("k-means: inertia %.4f after %d iterations, smallest cluster %d",
              state.inertia, state.n_iter, counts.min())
    return state.assignments.copy(), state
