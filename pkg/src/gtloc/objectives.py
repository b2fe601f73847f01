"""Training objectives.

``loc_contrastive_loss`` is an InfoNCE over the batch plus a FIFO queue of
recent location embeddings. ``tml_loss`` is the temporal metric-learning
loss: image-to-time similarity rows are matched, by cross-entropy, against
soft targets built from pairwise toroidal time distances.

Both return the loss together with its gradients with respect to the
(normalized) embeddings and the log-temperature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffnet import log_softmax_rows, soft_cross_entropy
from .errors import InvalidInputError
from .geotime import euclidean_distance_matrix, toroidal_distance_matrix

UNIT_NORM_TOL = 1e-3


class LocationQueue:
    """Fixed-capacity FIFO of detached location embeddings."""

    def __init__(self, capacity: int = 4096, dim: int = 512, dtype=np.float32):
        if capacity < 0:
            raise InvalidInputError("queue capacity must be non-negative", "objectives")
        self.capacity = capacity
        self.dim = dim
        self._buf = np.zeros((capacity, dim), dtype=dtype)
        self._start = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, embs: np.ndarray):
        embs = np.atleast_2d(np.asarray(embs))
        if embs.shape[-1] != self.dim:
            raise InvalidInputError(
                f"queue expects {self.dim}-d entries, got {embs.shape[-1]}", "objectives"
            )
        if self.capacity == 0:
            return
        embs = embs[-self.capacity:]
        for row in embs:
            end = (self._start + self.size) % self.capacity
            self._buf[end] = row
            if self.size < self.capacity:
                self.size += 1
            else:
                self._start = (self._start + 1) % self.capacity

    def entries(self) -> np.ndarray:
        """Current contents, oldest first (a copy)."""
        idx = (self._start + np.arange(self.size)) % max(self.capacity, 1)
        return self._buf[idx].copy()

    def clear(self):
        self._start = 0
        self.size = 0


@dataclass
class LossResult:
    loss: float
    d_image: np.ndarray
    d_other: np.ndarray
    d_log_tau: float


def _check_unit(x: np.ndarray, what: str):
    norms = np.linalg.norm(x, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise InvalidInputError(f"{what} embeddings are not unit-norm", "objectives")


def loc_contrastive_loss(
    image_embs: np.ndarray,
    loc_embs: np.ndarray,
    queue: LocationQueue | np.ndarray | None,
    log_tau: float,
    update_queue: bool = False,
    push: np.ndarray | None = None,
) -> LossResult:
    """Image-to-location InfoNCE with queued negatives.

    ``image_embs`` and ``loc_embs`` are ``(B, D)`` or ``(B, P, D)`` for P views.
    For each view, anchor image ``i`` is scored against all B batch locations
    of that view and every queued entry; the positive is location ``i``. The
    per-sample loss sums over views and the result is averaged over the batch.

    With ``update_queue`` the queue receives ``push`` (default: view 0 of
    ``loc_embs``) after the loss is computed.
    """
    V = np.asarray(image_embs)
    L = np.asarray(loc_embs)
    squeeze = V.ndim == 2
    if squeeze:
        V, L = V[:, None, :], L[:, None, :]
    if V.shape[0] == 0:
        raise InvalidInputError("empty batch", "objectives")
    if V.shape != L.shape:
        raise InvalidInputError(f"image {V.shape} and location {L.shape} shapes differ", "objectives")
    B, P, D = V.shape
    if isinstance(queue, LocationQueue):
        Q = queue.entries()
    elif queue is None:
        Q = np.zeros((0, D), dtype=V.dtype)
    else:
        Q = np.atleast_2d(np.asarray(queue))
    if Q.size and Q.shape[-1] != D:
        raise InvalidInputError(f"queue entries are {Q.shape[-1]}-d, expected {D}", "objectives")
    Q = Q.reshape(-1, D).astype(V.dtype, copy=False)

    tau = float(np.exp(log_tau))
    loss = 0.0
    dV = np.zeros_like(V)
    dL = np.zeros_like(L)
    d_log_tau = 0.0
    eye = np.eye(B, B + len(Q), dtype=V.dtype)
    for j in range(P):
        Vj, Lj = V[:, j], L[:, j]
        keys = np.concatenate([Lj, Q], axis=0)
        logits = (Vj @ keys.T) / tau
        logp = log_softmax_rows(logits)
        loss -= float(np.trace(logp[:, :B])) / B
        dlogits = (np.exp(logp) - eye) / B
        ds = dlogits / tau
        dV[:, j] = ds @ keys
        dL[:, j] = ds[:, :B].T @ Vj
        d_log_tau -= float(np.sum(dlogits * logits))

    if update_queue and isinstance(queue, LocationQueue):
        queue.push(L[:, 0] if push is None else push)

    if squeeze:
        dV, dL = dV[:, 0], dL[:, 0]
    return LossResult(loss, dV, dL, d_log_tau)


@dataclass
class SoftTargets:
    q: np.ndarray
    delta: np.ndarray


def tml_targets(times: np.ndarray, distance: str = "cyclic", renormalize: bool = False) -> SoftTargets:
    """Soft targets ``q[i, j] = 1 - softmax_j(delta[i, j])``.

    ``delta`` is the toroidal distance between the ``(theta, phi)`` rows of
    ``times`` (or the plain l2 distance when ``distance='l2'``). As written,
    each row of ``q`` sums to ``B - 1``; ``renormalize`` rescales rows to one.
    """
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 2 or times.shape[0] < 2:
        raise InvalidInputError("temporal targets need a batch of at least 2 times", "objectives")
    if distance == "cyclic":
        delta = toroidal_distance_matrix(times)
    elif distance == "l2":
        delta = euclidean_distance_matrix(times)
    else:
        raise InvalidInputError(f"unknown distance {distance!r}", "objectives")
    e = np.exp(delta - delta.max(axis=1, keepdims=True))
    q = 1.0 - e / e.sum(axis=1, keepdims=True)
    if renormalize:
        q = q / q.sum(axis=1, keepdims=True)
    return SoftTargets(q, delta)


def tml_loss(image_embs: np.ndarray, time_embs: np.ndarray, targets: SoftTargets, log_tau: float) -> LossResult:
    """Mean over anchors of ``CE(p_i, q_i) = -sum_j q_i[j] log p_i[j]``.

    ``p_i`` is the softmax of ``V_i . T_j / tau`` over the batch.
    """
    V = np.asarray(image_embs)
    T = np.asarray(time_embs)
    if V.shape != T.shape or V.ndim != 2:
        raise InvalidInputError(f"image {V.shape} and time {T.shape} shapes differ", "objectives")
    if targets.q.shape != (V.shape[0], V.shape[0]):
        raise InvalidInputError("target matrix does not match the batch", "objectives")
    _check_unit(V, "image")
    _check_unit(T, "time")
    tau = float(np.exp(log_tau))
    logits = (V @ T.T) / tau
    q = targets.q.astype(V.dtype, copy=False)
    loss, dlogits = soft_cross_entropy(logits, q)
    ds = dlogits / tau
    return LossResult(loss, ds @ T, ds.T @ V, -float(np.sum(dlogits * logits)))


def total_loss(loss_loc: float | None, loss_time: float | None) -> float:
    """Unweighted sum; a missing term (mode without that encoder) counts as zero."""
    return (loss_loc or 0.0) + (loss_time or 0.0)
