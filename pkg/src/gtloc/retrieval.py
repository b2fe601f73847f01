"""Galleries, nearest-neighbour retrieval and evaluation metrics.

A gallery is a list of raw labels (GPS points, cyclic times, or images with
their ground truth) together with their unit-norm embeddings under one
checkpoint. Predictions are the labels of the highest-scoring entries.

Scores in :func:`retrieve` are computed row by row as ``sum(g_i * q)``, never
through a matrix product, so the result does not depend on how the gallery
is chunked or how many threads are available.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datastore import Dataset, read_embeddings, write_embeddings
from .diffnet import l2_normalize
from .encoders import GTLocModel
from .errors import DataError, InvalidInputError
from .geotime import (
    CyclicTime,
    GeoCoord,
    cyclic_abs_error_array,
    geodesic_km_array,
    tps,
)

KINDS = ("gps", "time", "image")
DEFAULT_THRESHOLDS_KM = (1.0, 25.0, 200.0, 750.0, 2500.0)
UNIT_NORM_TOL = 1e-3
SCORE_CHUNK = 65536


@dataclass
class Gallery:
    """Labels and embeddings; ``items`` is ``(N, 2)``: lat/lon or theta/phi.

    Image galleries keep the ground-truth location in ``items`` and the
    ground-truth time in ``times``.
    """

    kind: str
    items: np.ndarray
    emb: np.ndarray
    ckpt_hash: str = ""
    ids: list | None = None
    times: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"gallery kind must be one of {KINDS}, got {self.kind!r}", "retrieval")
        if len(self.items) != len(self.emb):
            raise DataError(f"gallery has {len(self.items)} labels but {len(self.emb)} embeddings", "retrieval")
        if self.times is not None and len(self.times) != len(self.items):
            raise DataError("gallery times do not match its labels", "retrieval")

    def __len__(self):
        return len(self.items)

    def label(self, i: int):
        a, b = (float(v) for v in self.items[i])
        if self.kind == "time":
            return CyclicTime(a, b)
        return GeoCoord(a, b)


@dataclass
class RetrievalResult:
    indices: np.ndarray
    similarities: np.ndarray
    labels: list = field(default_factory=list)


def _encode(kind: str, labels: np.ndarray, model: GTLocModel) -> np.ndarray:
    if kind == "gps":
        return model.embed_locations(labels)
    if kind == "time":
        return model.embed_times(labels)
    raise InvalidInputError(f"cannot encode labels of kind {kind!r}", "retrieval")


def _check_labels(kind: str, labels: np.ndarray):
    if labels.ndim != 2 or labels.shape[1] != 2:
        raise InvalidInputError(f"{kind} labels must be an (N, 2) array, got {labels.shape}", "retrieval")
    if not np.all(np.isfinite(labels)):
        raise InvalidInputError(f"{kind} labels contain non-finite values", "retrieval")
    if kind == "gps":
        if np.any(np.abs(labels[:, 0]) > 90) or np.any(np.abs(labels[:, 1]) > 180):
            raise InvalidInputError("gps labels outside lat [-90, 90] / lon [-180, 180]", "retrieval")
    elif np.any(labels < 0) or np.any(labels >= 1):
        raise InvalidInputError("time labels must lie in [0, 1)", "retrieval")


def build_gallery(kind: str, labels, model: GTLocModel, ckpt_hash: str = "") -> Gallery:
    """Encode every label once with the location or time encoder."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise InvalidInputError("empty gallery", "retrieval")
    labels = np.atleast_2d(labels)
    _check_labels(kind, labels)
    return Gallery(kind, labels, _encode(kind, labels, model), ckpt_hash)


def build_image_gallery(model: GTLocModel, ds: Dataset, scale: str = "monthly", ckpt_hash: str = "") -> Gallery:
    """Image embeddings of ``ds`` with their ground-truth labels attached."""
    if len(ds) == 0:
        raise InvalidInputError("empty gallery", "retrieval")
    return Gallery(
        "image", np.asarray(ds.latlon, dtype=np.float64), model.embed_images(ds.backbone),
        ckpt_hash, list(ds.ids), ds.times(scale),
    )


def refresh_gallery(g: Gallery, model: GTLocModel, ckpt_hash: str) -> Gallery:
    """Re-encode ``g`` if it was built under a different checkpoint."""
    if g.ckpt_hash == ckpt_hash:
        return g
    if g.kind == "image":
        raise DataError("image gallery is stale; rebuild it from the dataset", "retrieval")
    return Gallery(g.kind, g.items, _encode(g.kind, g.items, model), ckpt_hash)


def sample_gallery_labels(ds: Dataset, kind: str, size: int, seed: int = 0, scale: str = "monthly") -> np.ndarray:
    """Seeded draw of ``size`` labels from ``ds``.

    Sampling is without replacement when the dataset is large enough and with
    replacement otherwise.
    """
    if len(ds) == 0 or size < 1:
        raise InvalidInputError("empty gallery", "retrieval")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(ds), size=size, replace=size > len(ds))
    if kind == "gps":
        return np.asarray(ds.latlon, dtype=np.float64)[idx]
    if kind == "time":
        return ds.times(scale)[idx]
    raise InvalidInputError(f"cannot sample labels of kind {kind!r}", "retrieval")


# ---------------------------------------------------------------------------
# gallery files: embedding blob plus a label sidecar
# ---------------------------------------------------------------------------

def _sidecar(path) -> Path:
    return Path(str(path) + ".csv")


def save_gallery(g: Gallery, path) -> None:
    write_embeddings(path, g.emb)
    with open(_sidecar(path), "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# kind={g.kind} ckpt={g.ckpt_hash}\n")
        w = csv.writer(fh)
        if g.kind == "image":
            w.writerow(["id", "lat", "lon", "theta", "phi"])
            for i in range(len(g)):
                w.writerow([g.ids[i], *(repr(float(v)) for v in (*g.items[i], *g.times[i]))])
        else:
            w.writerow(["lat", "lon"] if g.kind == "gps" else ["theta", "phi"])
            for a, b in g.items:
                w.writerow([repr(float(a)), repr(float(b))])


def load_gallery(path) -> Gallery:
    emb = read_embeddings(path)
    side = _sidecar(path)
    try:
        lines = side.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read gallery labels {side}: {exc.strerror}", "retrieval") from exc
    if not lines or not lines[0].startswith("# "):
        raise DataError(f"{side}: missing gallery header line", "retrieval")
    head = dict(tok.split("=", 1) for tok in lines[0][2:].split() if "=" in tok)
    kind = head.get("kind", "")
    rows = list(csv.reader(lines[2:]))
    try:
        if kind == "image":
            ids = [r[0] for r in rows]
            items = np.array([[float(r[1]), float(r[2])] for r in rows]).reshape(-1, 2)
            times = np.array([[float(r[3]), float(r[4])] for r in rows]).reshape(-1, 2)
        else:
            ids, times = None, None
            items = np.array([[float(r[0]), float(r[1])] for r in rows]).reshape(-1, 2)
    except (IndexError, ValueError) as exc:
        raise DataError(f"{side}: malformed label row ({exc})", "retrieval") from exc
    if len(items) == 0:
        raise DataError("empty gallery", "retrieval")
    try:
        return Gallery(kind, items, emb, head.get("ckpt", ""), ids, times)
    except InvalidInputError as exc:
        raise DataError(f"{side}: {exc.message}", "retrieval") from exc


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

def _check_query(q: np.ndarray, dim: int) -> np.ndarray:
    q = np.asarray(q)
    if q.ndim != 1 or q.shape[0] != dim:
        raise InvalidInputError(f"query must be a {dim}-d vector, got shape {q.shape}", "retrieval")
    if abs(float(np.linalg.norm(q)) - 1.0) > UNIT_NORM_TOL:
        raise InvalidInputError("query embedding is not unit-norm", "retrieval")
    return q


def gallery_scores(q: np.ndarray, emb: np.ndarray, chunk: int = SCORE_CHUNK) -> np.ndarray:
    """Dot product of ``q`` with every gallery row, one row at a time."""
    q = np.asarray(q, dtype=emb.dtype)
    out = np.empty(len(emb), dtype=emb.dtype)
    for s in range(0, len(emb), chunk):
        out[s:s + chunk] = (emb[s:s + chunk] * q).sum(axis=1)
    return out


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, descending, ties to the lower index."""
    n = len(scores)
    if k < n:
        thresh = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= thresh)
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]]


def retrieve(query_emb, g: Gallery, k: int = 1, chunk: int = SCORE_CHUNK) -> RetrievalResult:
    if not 1 <= k <= len(g):
        raise InvalidInputError(f"k={k} outside [1, {len(g)}] for this gallery", "retrieval")
    q = _check_query(query_emb, g.emb.shape[1])
    scores = gallery_scores(q, g.emb, chunk)
    idx = top_k(scores, k)
    return RetrievalResult(idx, scores[idx], [g.label(int(i)) for i in idx])


def batch_top1(queries: np.ndarray, g: Gallery, chunk: int = 1024) -> np.ndarray:
    """Top-1 gallery index for each query row (ties to the lower index).

    Uses a matrix product for speed, so near-ties may resolve differently
    from :func:`retrieve` in the last bit; results are reproducible for a
    fixed thread count.
    """
    Q = np.atleast_2d(np.asarray(queries, dtype=g.emb.dtype))
    if Q.shape[1] != g.emb.shape[1]:
        raise InvalidInputError("query and gallery dimensions differ", "retrieval")
    out = np.empty(len(Q), dtype=np.int64)
    for s in range(0, len(Q), chunk):
        out[s:s + chunk] = np.argmax(Q[s:s + chunk] @ g.emb.T, axis=1)
    return out


def predict_time(image_emb, time_gallery: Gallery) -> CyclicTime:
    _require_kind(time_gallery, "time")
    return retrieve(image_emb, time_gallery, 1).labels[0]


def predict_geo(image_emb, gps_gallery: Gallery) -> GeoCoord:
    _require_kind(gps_gallery, "gps")
    return retrieve(image_emb, gps_gallery, 1).labels[0]


def _require_kind(g: Gallery, kind: str):
    if g.kind != kind:
        raise InvalidInputError(f"expected a {kind} gallery, got {g.kind}", "retrieval")


def compose_query(time_emb, loc_emb) -> np.ndarray:
    """Mean of two unit embeddings, re-normalized."""
    t = np.asarray(time_emb)
    l = np.asarray(loc_emb)
    if t.shape != l.shape:
        raise InvalidInputError("time and location embeddings differ in shape", "retrieval")
    mean = (t + l) / 2
    if float(np.linalg.norm(mean)) < 1e-6:
        raise InvalidInputError("degenerate composition", "retrieval")
    return l2_normalize(mean[None, :])[0][0]


def composed_retrieval(time: CyclicTime, geo: GeoCoord, model: GTLocModel,
                       image_gallery: Gallery, k: int = 1) -> RetrievalResult:
    """Images whose embeddings best match the averaged time and location query."""
    _require_kind(image_gallery, "image")
    t = model.embed_times(np.array([[time.theta, time.phi]]))[0]
    l = model.embed_locations(np.array([[geo.lat, geo.lon]]))[0]
    return retrieve(compose_query(t, l), image_gallery, k)


# ---------------------------------------------------------------------------
# histograms
# ---------------------------------------------------------------------------

def _bin(x: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((np.asarray(x) * bins).astype(np.int64), bins - 1)


def time_histogram(image_emb, time_gallery: Gallery, bins_month: int = 12, bins_hour: int = 24,
                   topk: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Similarity-weighted month and hour histograms of the top-k retrieved times.

    Bins are left-closed and uniform over [0, 1) on each axis.
    """
    _require_kind(time_gallery, "time")
    r = retrieve(image_emb, time_gallery, topk)
    items = time_gallery.items[r.indices]
    w = r.similarities.astype(np.float64)
    hm = np.bincount(_bin(items[:, 0], bins_month), weights=w, minlength=bins_month)
    hh = np.bincount(_bin(items[:, 1], bins_hour), weights=w, minlength=bins_hour)
    return hm, hh


def write_histogram_csv(path, rows: list[tuple[str, np.ndarray, np.ndarray]]):
    """One row per (query, axis, bin) for external plotting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "axis", "bin", "weight"])
        for qid, hm, hh in rows:
            for axis, h in (("month", hm), ("hour", hh)):
                for b, v in enumerate(h):
                    w.writerow([qid, axis, b, repr(float(v))])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class TimeMetrics:
    month_error: float
    hour_error: float
    tps: float
    n: int

    def rows(self) -> list[tuple[str, float]]:
        return [("month_error", self.month_error), ("hour_error", self.hour_error),
                ("tps", self.tps), ("n_time", self.n)]


@dataclass
class GeoMetrics:
    accuracy: dict
    median_km: float
    n: int

    def rows(self) -> list[tuple[str, float]]:
        out = [(f"acc_{_km(t)}km", a) for t, a in self.accuracy.items()]
        return out + [("median_km", self.median_km), ("n_geo", self.n)]


def _km(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def _nonempty(ds: Dataset):
    if len(ds) == 0:
        raise InvalidInputError("empty evaluation set", "retrieval")


def time_errors(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return cyclic_abs_error_array(pred, truth)


def eval_time(model: GTLocModel, eval_set: Dataset, time_gallery: Gallery, scale: str = "monthly") -> TimeMetrics:
    """Mean cyclic month and hour errors of top-1 time retrieval, and their TPS."""
    _nonempty(eval_set)
    _require_kind(time_gallery, "time")
    V = model.embed_images(eval_set.backbone)
    pred = time_gallery.items[batch_top1(V, time_gallery)]
    me, he = time_errors(pred, eval_set.times(scale))
    m, h = float(me.mean()), float(he.mean())
    return TimeMetrics(m, h, tps(m, h), len(eval_set))


def eval_geo(model: GTLocModel, eval_set: Dataset, gps_gallery: Gallery,
             thresholds_km=DEFAULT_THRESHOLDS_KM) -> GeoMetrics:
    """Fraction of top-1 GPS predictions within each threshold, plus the median error."""
    _nonempty(eval_set)
    _require_kind(gps_gallery, "gps")
    V = model.embed_images(eval_set.backbone)
    pred = gps_gallery.items[batch_top1(V, gps_gallery)]
    d = geodesic_km_array(pred, eval_set.latlon)
    acc = {float(t): float(np.mean(d <= t)) for t in thresholds_km}
    return GeoMetrics(acc, float(np.median(d)), len(eval_set))


def composed_hits(q_latlon, q_times, g: Gallery, idx: np.ndarray,
                  month_tol: float = 1.0, hour_tol: float = 1.0, km_tol: float = 25.0) -> np.ndarray:
    """Whether each retrieved image's ground truth is close enough to its query."""
    n = len(idx)
    me, he = cyclic_abs_error_array(g.times[idx], np.broadcast_to(q_times, (n, 2)))
    d = geodesic_km_array(g.items[idx], np.broadcast_to(q_latlon, (n, 2)))
    return (me <= month_tol) & (he <= hour_tol) & (d <= km_tol)


def eval_composed(model: GTLocModel, image_gallery: Gallery, query_latlon, query_times,
                  ranks=(1, 5, 10)) -> dict:
    """Recall at each rank for joint time + location queries."""
    _require_kind(image_gallery, "image")
    q_ll = np.atleast_2d(np.asarray(query_latlon, dtype=np.float64))
    q_t = np.atleast_2d(np.asarray(query_times, dtype=np.float64))
    kmax = min(max(ranks), len(image_gallery))
    T = model.embed_times(q_t)
    L = model.embed_locations(q_ll)
    hits = np.zeros((len(q_ll), kmax), dtype=bool)
    for i in range(len(q_ll)):
        r = retrieve(compose_query(T[i], L[i]), image_gallery, kmax)
        hits[i] = composed_hits(q_ll[i], q_t[i], image_gallery, r.indices)
    return {f"R@{k}": float(np.mean(hits[:, :min(k, kmax)].any(axis=1))) if len(hits) else 0.0
            for k in ranks}


def write_metrics_csv(path, rows: list[tuple[str, float]]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, repr(float(v)) if not isinstance(v, (int, np.integer)) else int(v)])


def format_table(rows: list[tuple[str, float]]) -> str:
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}"
                     for k, v in rows)
