"""Binary-classifier baseline re-ranker.

Instead of attending, the baseline concatenates probe and candidate maps
into a 2s x d block, flattens it, and scores the pair with a two-layer
MLP trained under binary cross-entropy on same/different-identity
labels. Candidates are then re-ordered by descending positive score.
Note the concatenation order makes the score asymmetric in its
arguments; the probe always occupies the first block.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import training as tr
from .errors import DataError, FormatError, MissingIdError, ShapeError
from .feature_store import FeatureMap, FeatureSet
from .inference import splice_reordered
from .ranking import RankedList
from .reranker import _stable_sigmoid

BASELINE_MAGIC = b"CGBL"
BASELINE_VERSION = 1

_HEADER = struct.Struct("<4sII3I")
_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass(frozen=True)
class BaselineConfig:
    s: int
    d: int
    hidden: int = 256

    def __post_init__(self) -> None:
        for name in ("s", "d", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def in_dim(self) -> int:
        return 2 * self.s * self.d


@dataclass
class BaselineWeights:
    config: BaselineConfig
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @property
    def dtype(self) -> np.dtype:
        return self.w1.dtype

    def copy(self) -> "BaselineWeights":
        return BaselineWeights(
            self.config, self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy()
        )


def init_baseline(
    config: BaselineConfig, seed: int, dtype=np.float32
) -> BaselineWeights:
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)

    return BaselineWeights(
        config=config,
        w1=glorot(config.in_dim, config.hidden),
        b1=np.zeros(config.hidden, dtype=dtype),
        w2=glorot(config.hidden, 1),
        b2=np.zeros(1, dtype=dtype),
    )


def _flatten_pairs(a: np.ndarray, b: np.ndarray, cfg: BaselineConfig) -> np.ndarray:
    # (B, s, d) x 2 -> (B, 2sd), candidate block after the probe block
    if a.shape != b.shape or a.shape[1:] != (cfg.s, cfg.d):
        raise ShapeError(
            f"pair shapes {a.shape} / {b.shape} do not match config ({cfg.s}, {cfg.d})"
        )
    return np.concatenate([a, b], axis=1).reshape(a.shape[0], cfg.in_dim)


def baseline_scores(
    probe_map: np.ndarray, candidate_maps: np.ndarray, weights: BaselineWeights
) -> np.ndarray:
    """Logits for one probe against M candidates; (M,) float64."""
    cfg = weights.config
    cands = np.asarray(candidate_maps, dtype=weights.dtype)
    if cands.ndim != 3:
        raise ShapeError(f"candidate_maps must be (M, s, d), got {cands.shape}")
    probe = np.asarray(probe_map, dtype=weights.dtype)
    tiled = np.broadcast_to(probe, cands.shape)
    x = _flatten_pairs(tiled, cands, cfg)
    h = np.tanh(x @ weights.w1 + weights.b1)
    return (h @ weights.w2 + weights.b2)[:, 0].astype(np.float64)


def baseline_score(f_p: np.ndarray, f_c: np.ndarray, weights: BaselineWeights) -> float:
    """Pair logit; positive means same-identity."""
    return float(baseline_scores(f_p, np.asarray(f_c)[None], weights)[0])


def bce_forward_backward(
    a: np.ndarray,
    b: np.ndarray,
    labels: np.ndarray,
    weights: BaselineWeights,
    want_grads: bool = True,
):
    """Mean binary cross-entropy of pair logits against 0/1 labels.

    Stable form: max(z, 0) - y*z + log1p(exp(-|z|)).
    """
    cfg = weights.config
    dtype = weights.dtype
    a = np.ascontiguousarray(a, dtype=dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (a.shape[0],):
        raise ShapeError(f"labels must be ({a.shape[0]},), got {y.shape}")
    x = _flatten_pairs(a, b, cfg)
    h_pre = x @ weights.w1 + weights.b1
    h = np.tanh(h_pre)
    z = (h @ weights.w2 + weights.b2)[:, 0].astype(np.float64)
    loss = float(np.mean(np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))))
    if not want_grads:
        return loss, None
    dz = ((_stable_sigmoid(z) - y) / len(y)).astype(dtype)
    grads = {
        "w2": h.T @ dz[:, None],
        "b2": np.array([dz.sum()], dtype=dtype),
    }
    dh = dz[:, None] @ weights.w2.T
    dpre = dh * (1.0 - h * h)
    grads["w1"] = x.T @ dpre
    grads["b1"] = dpre.sum(axis=0)
    return loss, grads


def baseline_rerank(
    probe: FeatureMap,
    initial: RankedList,
    features,
    weights: BaselineWeights,
    k: int = 10,
) -> RankedList:
    """Re-order the top-k by descending pair score; same tail and
    set-preservation rules as the attention re-ranker."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if probe.sequence_id != initial.probe_id:
        raise DataError(
            f"initial list is for probe {initial.probe_id!r}, "
            f"got features for {probe.sequence_id!r}"
        )
    if not initial.items:
        raise DataError(f"probe {initial.probe_id!r}: empty initial list")
    lookup = (
        {e.sequence_id: e.strips for e in features.entries}
        if isinstance(features, FeatureSet)
        else features
    )
    kk = min(k, len(initial.items))
    try:
        cand = np.stack(
            [np.asarray(lookup[cid], dtype=np.float32) for cid, _ in initial.items[:kk]]
        )
    except KeyError as exc:
        raise MissingIdError(f"no features for candidate {exc.args[0]!r}") from exc
    scores = baseline_scores(probe.strips, cand, weights)
    neg = -scores
    return splice_reordered(initial, kk, neg - neg.min())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class BaselineTrainResult:
    weights: BaselineWeights
    best_iteration: int
    best_val_loss: float
    history: list


def _triplet_pairs(batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # each triplet yields one positive and one negative pair, so labels
    # stay balanced 1:1 by construction
    b = len(batch)
    a = np.concatenate([batch.probe, batch.probe])
    c = np.concatenate([batch.pos, batch.neg])
    y = np.concatenate([np.ones(b), np.zeros(b)])
    return a, c, y


def train_baseline(
    train_ts,
    val_ts,
    features: FeatureSet,
    cfg,
    hidden: int = 256,
    weights: BaselineWeights | None = None,
    progress=None,
) -> BaselineTrainResult:
    """Same sampling, optimizer and argmin stopping rule as the main
    trainer, with mean pair BCE as both the training and validation loss."""
    strips = {e.sequence_id: np.ascontiguousarray(e.strips) for e in features.entries}
    zeros = {e.sequence_id: 0 for e in features.entries}

    ss = np.random.SeedSequence(cfg.seed)
    init_seed, batch_seed, val_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    if weights is None:
        weights = init_baseline(
            BaselineConfig(s=features.s, d=features.d, hidden=hidden), seed=init_seed
        )
    batch_rng = np.random.default_rng(batch_seed)
    val_batch = tr._fixed_val_batch(val_ts, cfg, strips, np.random.default_rng(val_seed))
    va, vb, vy = _triplet_pairs(val_batch)

    state = tr.init_adamw(weights)
    history: list[tr.LogRow] = []
    start = time.monotonic()

    def evaluate(iteration: int, train_loss: float) -> float:
        vl, _ = bce_forward_backward(va, vb, vy, weights, want_grads=False)
        row = tr.LogRow(
            iteration=iteration,
            train_loss=train_loss,
            val_loss=vl,
            wall_time_ms=(time.monotonic() - start) * 1e3,
        )
        history.append(row)
        if progress is not None:
            progress(row)
        return vl

    best_val = evaluate(0, float("nan"))
    best_weights = weights.copy()
    best_iteration = 0

    for it in range(1, cfg.iterations + 1):
        triplets = tr.sample_triplets(train_ts, cfg, batch_rng)
        batch = tr.make_batch(triplets, strips, zeros)
        a, b, y = _triplet_pairs(batch)
        loss, grads = bce_forward_backward(a, b, y, weights)
        tr.adamw_step(weights, grads, state, cfg)
        if it % cfg.t_val == 0 or it == cfg.iterations:
            vl = evaluate(it, loss)
            if vl < best_val:
                best_val = vl
                best_weights = weights.copy()
                best_iteration = it
        else:
            history.append(
                tr.LogRow(
                    iteration=it,
                    train_loss=loss,
                    val_loss=None,
                    wall_time_ms=(time.monotonic() - start) * 1e3,
                )
            )

    return BaselineTrainResult(
        weights=best_weights,
        best_iteration=best_iteration,
        best_val_loss=best_val,
        history=history,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_baseline(weights: BaselineWeights, path, metadata: dict | None = None) -> None:
    cfg = weights.config
    code = weights.dtype.itemsize
    if code not in _DTYPE_CODES:
        raise FormatError(f"unsupported parameter dtype {weights.dtype}")
    blob = bytearray(
        _HEADER.pack(BASELINE_MAGIC, BASELINE_VERSION, code, cfg.s, cfg.d, cfg.hidden)
    )
    for arr in weights.params().values():
        blob += np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    Path(path).write_bytes(bytes(blob))
    Path(str(path) + ".meta.json").write_text(
        json.dumps(metadata or {}, indent=2, sort_keys=True) + "\n"
    )


def load_baseline(path) -> tuple[BaselineWeights, BaselineConfig, dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    blob = p.read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{p}: truncated checkpoint header")
    magic, version, code, s, d, hidden = _HEADER.unpack_from(blob, 0)
    if magic != BASELINE_MAGIC:
        raise FormatError(f"{p}: bad magic {magic!r}")
    if version != BASELINE_VERSION:
        raise FormatError(f"{p}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{p}: unknown dtype code {code}")
    try:
        cfg = BaselineConfig(s=s, d=d, hidden=hidden)
    except ValueError as exc:
        raise FormatError(f"{p}: invalid stored config ({exc})") from exc
    dt = _DTYPE_CODES[code]
    shapes = {
        "w1": (cfg.in_dim, cfg.hidden),
        "b1": (cfg.hidden,),
        "w2": (cfg.hidden, 1),
        "b2": (1,),
    }
    offset = _HEADER.size
    arrays = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        nbytes = n * dt.itemsize
        if offset + nbytes > len(blob):
            raise FormatError(f"{p}: truncated at parameter {name}")
        arrays[name] = np.frombuffer(blob, dtype=dt, count=n, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{p}: {len(blob) - offset} trailing bytes")
    meta = {}
    mp = Path(str(p) + ".meta.json")
    if mp.exists():
        try:
            meta = json.loads(mp.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{mp}: invalid JSON ({exc})") from exc
    return BaselineWeights(config=cfg, **arrays), cfg, meta
