"""Cross-attention re-ranker: model, exact gradients, checkpoints.

The model conditions each feature map on its pair partner through
strip-wise multi-head cross-attention with a residual connection, then
measures the strip-averaged Euclidean distance between the two
conditioned maps. A small MLP head classifies conditioned maps into
training identities for the cross-entropy regularizer.

All forward and backward passes are plain numpy with a fixed operation
order, so results are deterministic for a given platform and dtype.
Parameters live in float32 for production use; float64 is used by the
gradient-check tests.

Canonical parameter order (checkpoint layout and gradient dict keys):
per block ``block{i}.w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o``, then
``cls.w1, cls.b1, cls.w2, cls.b2``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NonFiniteError, ShapeError
from .ranking import strip_mean_distance

CHECKPOINT_MAGIC = b"CGRK"
CHECKPOINT_VERSION = 1

_CKPT_HEADER = struct.Struct("<4sII7I")
_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass(frozen=True)
class RerankerConfig:
    """Model dimensions. ``hidden`` is the total attention width across
    heads; input projections map d -> hidden and the output projection
    maps hidden -> d so the residual add is well-formed."""

    s: int
    d: int
    num_classes: int
    heads: int = 8
    hidden: int = 256
    blocks: int = 1
    mlp_hidden: int = 256

    def __post_init__(self) -> None:
        for name in ("s", "d", "num_classes", "heads", "hidden", "blocks", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden % self.heads != 0:
            raise ValueError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class AttentionBlock:
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray


@dataclass
class RerankerWeights:
    config: RerankerConfig
    blocks: list[AttentionBlock]
    cls_w1: np.ndarray
    cls_b1: np.ndarray
    cls_w2: np.ndarray
    cls_b2: np.ndarray

    def params(self) -> dict[str, np.ndarray]:
        """All parameter arrays keyed by canonical name, in canonical order."""
        out: dict[str, np.ndarray] = {}
        for i, blk in enumerate(self.blocks):
            for name in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"):
                out[f"block{i}.{name}"] = getattr(blk, name)
        out["cls.w1"] = self.cls_w1
        out["cls.b1"] = self.cls_b1
        out["cls.w2"] = self.cls_w2
        out["cls.b2"] = self.cls_b2
        return out

    @property
    def dtype(self) -> np.dtype:
        return self.blocks[0].w_q.dtype

    def copy(self) -> "RerankerWeights":
        return _weights_from_params(self.config, {k: v.copy() for k, v in self.params().items()})

    def zero_attention(self) -> "RerankerWeights":
        """Copy with all attention projections and biases zeroed; the model
        then degenerates to the identity map on feature maps."""
        out = self.copy()
        for blk in out.blocks:
            for name in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"):
                getattr(blk, name)[:] = 0
        return out


def _param_shapes(config: RerankerConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(config.blocks):
        shapes[f"block{i}.w_q"] = (config.d, config.hidden)
        shapes[f"block{i}.b_q"] = (config.hidden,)
        shapes[f"block{i}.w_k"] = (config.d, config.hidden)
        shapes[f"block{i}.b_k"] = (config.hidden,)
        shapes[f"block{i}.w_v"] = (config.d, config.hidden)
        shapes[f"block{i}.b_v"] = (config.hidden,)
        shapes[f"block{i}.w_o"] = (config.hidden, config.d)
        shapes[f"block{i}.b_o"] = (config.d,)
    shapes["cls.w1"] = (config.d, config.mlp_hidden)
    shapes["cls.b1"] = (config.mlp_hidden,)
    shapes["cls.w2"] = (config.mlp_hidden, config.num_classes)
    shapes["cls.b2"] = (config.num_classes,)
    return shapes


def _weights_from_params(
    config: RerankerConfig, params: dict[str, np.ndarray]
) -> RerankerWeights:
    blocks = []
    for i in range(config.blocks):
        blocks.append(
            AttentionBlock(
                **{name: params[f"block{i}.{name}"] for name in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")}
            )
        )
    return RerankerWeights(
        config=config,
        blocks=blocks,
        cls_w1=params["cls.w1"],
        cls_b1=params["cls.b1"],
        cls_w2=params["cls.w2"],
        cls_b2=params["cls.b2"],
    )


def init_weights(
    config: RerankerConfig, seed: int, dtype=np.float32
) -> RerankerWeights:
    """Glorot-uniform projections, zero biases, from a seeded generator.

    The same (config, seed) pair always produces bitwise-equal weights.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in, fan_out = shape
            limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return _weights_from_params(config, params)


def zero_gradients(config: RerankerConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape, dtype=dtype) for name, shape in _param_shapes(config).items()}


# ---------------------------------------------------------------------------
# forward / backward core (batched over pairs)
# ---------------------------------------------------------------------------


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    # last-axis softmax with row-max subtraction for overflow safety
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _attention_forward(
    queries: np.ndarray,
    kvs: np.ndarray,
    weights: RerankerWeights,
    want_cache: bool = False,
):
    """Apply all attention blocks. queries/kvs: (B, s, d) in weights dtype.

    Within each block the query side is updated through the residual; the
    key/value side is the raw partner map for every block.
    """
    cfg = weights.config
    B, s, d = queries.shape
    H, dh = cfg.heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    kv_flat = kvs.reshape(B * s, d)
    x = queries
    caches = []
    for blk in weights.blocks:
        x_flat = x.reshape(B * s, d)
        q = (x_flat @ blk.w_q + blk.b_q).reshape(B, s, H, dh).transpose(0, 2, 1, 3)
        k = (kv_flat @ blk.w_k + blk.b_k).reshape(B, s, H, dh).transpose(0, 2, 1, 3)
        v = (kv_flat @ blk.w_v + blk.b_v).reshape(B, s, H, dh).transpose(0, 2, 1, 3)
        attn = _softmax_rows((q @ k.transpose(0, 1, 3, 2)) * scale)  # (B,H,s,s)
        heads = attn @ v  # (B,H,s,dh)
        concat = heads.transpose(0, 2, 1, 3).reshape(B * s, H * dh)
        out = x + (concat @ blk.w_o + blk.b_o).reshape(B, s, d)
        if want_cache:
            caches.append((x, q, k, v, attn, concat))
        x = out
    return x, caches


def _attention_backward(
    grad_out: np.ndarray,
    caches: list,
    kvs: np.ndarray,
    weights: RerankerWeights,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate parameter gradients for the stacked blocks.

    Input-feature gradients are propagated through the residual chain
    between blocks but not returned: the upstream feature extractor is
    frozen.
    """
    cfg = weights.config
    B, s, d = grad_out.shape
    H, dh = cfg.heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    kv_flat = kvs.reshape(B * s, d)
    dx = grad_out
    for i in range(len(weights.blocks) - 1, -1, -1):
        blk = weights.blocks[i]
        x, q, k, v, attn, concat = caches[i]
        dproj = dx.reshape(B * s, d)
        grads[f"block{i}.w_o"] += concat.T @ dproj
        grads[f"block{i}.b_o"] += dproj.sum(axis=0)
        dheads = (dproj @ blk.w_o.T).reshape(B, s, H, dh).transpose(0, 2, 1, 3)
        dattn = dheads @ v.transpose(0, 1, 3, 2)  # (B,H,s,s)
        dv = attn.transpose(0, 1, 3, 2) @ dheads  # (B,H,s,dh)
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dq = (dscores @ k) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
        dq_flat = dq.transpose(0, 2, 1, 3).reshape(B * s, H * dh)
        dk_flat = dk.transpose(0, 2, 1, 3).reshape(B * s, H * dh)
        dv_flat = dv.transpose(0, 2, 1, 3).reshape(B * s, H * dh)
        x_flat = x.reshape(B * s, d)
        grads[f"block{i}.w_q"] += x_flat.T @ dq_flat
        grads[f"block{i}.b_q"] += dq_flat.sum(axis=0)
        grads[f"block{i}.w_k"] += kv_flat.T @ dk_flat
        grads[f"block{i}.b_k"] += dk_flat.sum(axis=0)
        grads[f"block{i}.w_v"] += kv_flat.T @ dv_flat
        grads[f"block{i}.b_v"] += dv_flat.sum(axis=0)
        if i > 0:
            # residual path plus the query projection path
            dx = dx + (dq_flat @ blk.w_q.T).reshape(B, s, d)


def _pair_distances_and_cache(e_a: np.ndarray, e_b: np.ndarray):
    # e_a, e_b: (B, s, d). Returns (B,) distances plus backward cache.
    diff = e_a - e_b
    norms = np.sqrt((diff * diff).sum(axis=2))  # (B, s)
    z = norms.mean(axis=1)
    return z, (diff, norms)


def _pair_distances_backward(gz: np.ndarray, cache) -> np.ndarray:
    # gz: (B,) upstream; returns gradient wrt e_a ( = -grad wrt e_b).
    diff, norms = cache
    s = norms.shape[1]
    safe = np.where(norms > 0, norms, 1.0)
    coef = (gz[:, None] / s) / safe  # (B, s); zero rows stay zero via diff
    return coef[:, :, None] * diff


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_neg(x: np.ndarray) -> np.ndarray:
    # softplus(-x) = -log(sigmoid(x)), computed without overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = np.log1p(np.exp(-x[pos]))
    out[~pos] = -x[~pos] + np.log1p(np.exp(x[~pos]))
    return out


def _classifier_forward(e: np.ndarray, weights: RerankerWeights):
    # e: (N, s, d) -> logits (N, C)
    pooled = e.mean(axis=1)
    h = pooled @ weights.cls_w1 + weights.cls_b1
    a = np.tanh(h)
    logits = a @ weights.cls_w2 + weights.cls_b2
    return logits, (pooled, a)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray):
    # per-row -log softmax(logits)[label]
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    ce = lse - shifted[np.arange(len(labels)), labels]
    probs = np.exp(shifted) / np.exp(lse)[:, None]
    return ce, probs


@dataclass(frozen=True)
class TripletBatch:
    """Feature maps and class labels for a batch of training triplets.

    probe/pos/neg: (B, s, d) arrays; labels: (B, 3) int array with the
    class index of probe, positive, negative. Every label must be < C.
    """

    probe: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.probe.shape[0]


def _batch_forward(
    batch: TripletBatch,
    weights: RerankerWeights,
    alpha: float,
    beta: float,
    want_grads: bool,
):
    cfg = weights.config
    dtype = weights.dtype
    B = len(batch)
    if batch.probe.shape[1:] != (cfg.s, cfg.d):
        raise ShapeError(
            f"batch maps are {batch.probe.shape[1:]}, config declares ({cfg.s}, {cfg.d})"
        )
    if batch.labels.shape != (B, 3):
        raise ShapeError(f"labels must be (B, 3), got {batch.labels.shape}")
    if batch.labels.min() < 0 or batch.labels.max() >= cfg.num_classes:
        raise ValueError(
            f"labels must lie in [0, {cfg.num_classes}), "
            f"got range [{batch.labels.min()}, {batch.labels.max()}]"
        )

    p = np.ascontiguousarray(batch.probe, dtype=dtype)
    pos = np.ascontiguousarray(batch.pos, dtype=dtype)
    neg = np.ascontiguousarray(batch.neg, dtype=dtype)

    # directed attention layout: [p|pos, pos|p, p|neg, neg|p]
    queries = np.concatenate([p, pos, p, neg])
    kvs = np.concatenate([pos, p, neg, p])
    e, caches = _attention_forward(queries, kvs, weights, want_cache=want_grads)

    # losses in float64 so ranking distances keep their precision contract
    e64 = e.astype(np.float64)
    d_pos, cache_pos = _pair_distances_and_cache(e64[:B], e64[B : 2 * B])
    d_neg, cache_neg = _pair_distances_and_cache(e64[2 * B : 3 * B], e64[3 * B :])

    x = d_neg - d_pos
    lstar = _softplus_neg(x)
    damp = np.where(x >= 0, beta, 1.0)
    per_triplet = damp * lstar
    ranking_total = per_triplet.sum()

    labels = np.concatenate(
        [batch.labels[:, 0], batch.labels[:, 1], batch.labels[:, 0], batch.labels[:, 2]]
    )
    logits, cls_cache = _classifier_forward(e64, weights)
    ce, probs = _cross_entropy(logits, labels)
    ce_mean = ce.mean()

    loss = float(ranking_total + alpha * ce_mean)
    if not np.isfinite(loss):
        bad = np.flatnonzero(~np.isfinite(per_triplet))
        if len(bad) == 0:
            bad = np.flatnonzero(~np.isfinite(ce)) % B
        idx = int(bad[0]) if len(bad) else 0
        raise NonFiniteError(f"non-finite loss produced by triplet {idx}")

    if not want_grads:
        return loss, None

    # ---- backward -------------------------------------------------------
    grads = zero_gradients(cfg, dtype=dtype)
    dldx = damp * (_stable_sigmoid(x) - 1.0)  # d loss / d (d_neg - d_pos)

    de = np.zeros_like(e64)
    g_pos = _pair_distances_backward(-dldx, cache_pos)
    de[:B] += g_pos
    de[B : 2 * B] -= g_pos
    g_neg = _pair_distances_backward(dldx, cache_neg)
    de[2 * B : 3 * B] += g_neg
    de[3 * B :] -= g_neg

    # classifier head: mean CE weighted by alpha (exactly zero when alpha=0)
    pooled, act = cls_cache
    n_occ = logits.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n_occ), labels] -= 1.0
    dlogits *= alpha / n_occ
    grads["cls.w2"] += act.T @ dlogits
    grads["cls.b2"] += dlogits.sum(axis=0)
    da = dlogits @ weights.cls_w2.T
    dh = da * (1.0 - act * act)
    grads["cls.w1"] += pooled.T @ dh
    grads["cls.b1"] += dh.sum(axis=0)
    dpooled = dh @ weights.cls_w1.T
    de += dpooled[:, None, :] / cfg.s

    _attention_backward(de.astype(dtype), caches, kvs, weights, grads)
    return loss, grads


def forward_backward(
    batch: TripletBatch,
    weights: RerankerWeights,
    alpha: float,
    beta: float,
):
    """Batch loss plus exact gradients for every parameter.

    Loss is the summed damped ranking loss over triplets plus alpha times
    the mean identity cross-entropy over all four conditioned maps of each
    triplet (probe and candidate side of both attended pairs).
    """
    loss, grads = _batch_forward(batch, weights, alpha, beta, want_grads=True)
    return loss, grads


def batch_loss(
    batch: TripletBatch,
    weights: RerankerWeights,
    alpha: float,
    beta: float,
) -> float:
    """Forward-only evaluation of the combined loss."""
    loss, _ = _batch_forward(batch, weights, alpha, beta, want_grads=False)
    return loss


# ---------------------------------------------------------------------------
# public single-pair operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttendedPair:
    """Conditioned representations of a probe/candidate pair."""

    e_p: np.ndarray
    e_c: np.ndarray


def _check_map(m: np.ndarray, cfg: RerankerConfig, name: str) -> np.ndarray:
    arr = np.asarray(m)
    if arr.shape != (cfg.s, cfg.d):
        raise ShapeError(f"{name} has shape {arr.shape}, config declares ({cfg.s}, {cfg.d})")
    return arr


def cross_attend(
    query_map: np.ndarray,
    kv_map: np.ndarray,
    weights: RerankerWeights,
    config: RerankerConfig | None = None,
) -> np.ndarray:
    """Condition ``query_map`` on ``kv_map``; output shape s x d.

    Computes in the wider of the input and parameter dtypes, so the
    residual path never rounds its input: with zeroed projections the
    output is bitwise the query map.
    """
    cfg = config or weights.config
    q = _check_map(query_map, cfg, "query_map")
    kv = _check_map(kv_map, cfg, "kv_map")
    dtype = np.result_type(q.dtype, kv.dtype, weights.dtype)
    out, _ = _attention_forward(
        q[None].astype(dtype), kv[None].astype(dtype), weights
    )
    result = out[0]
    if not np.isfinite(result).all():
        raise NonFiniteError("cross_attend produced non-finite values")
    return result


def attended_pair(
    f_p: np.ndarray,
    f_c: np.ndarray,
    weights: RerankerWeights,
    config: RerankerConfig | None = None,
) -> AttendedPair:
    """Both conditioning directions with one shared weight set."""
    cfg = config or weights.config
    p = _check_map(f_p, cfg, "f_p")
    c = _check_map(f_c, cfg, "f_c")
    dtype = np.result_type(p.dtype, c.dtype, weights.dtype)
    queries = np.stack([p, c]).astype(dtype)
    kvs = np.stack([c, p]).astype(dtype)
    out, _ = _attention_forward(queries, kvs, weights)
    if not np.isfinite(out).all():
        raise NonFiniteError("attended_pair produced non-finite values")
    return AttendedPair(e_p=out[0], e_c=out[1])


def rerank_distance(
    f_p: np.ndarray,
    f_c: np.ndarray,
    weights: RerankerWeights,
    config: RerankerConfig | None = None,
) -> float:
    """Strip distance between the conditioned representations."""
    pair = attended_pair(f_p, f_c, weights, config)
    return strip_mean_distance(pair.e_p, pair.e_c)


def pair_distances(
    probe_map: np.ndarray,
    candidate_maps: np.ndarray,
    weights: RerankerWeights,
) -> np.ndarray:
    """rerank_distance of one probe against M candidates, batched.

    candidate_maps: (M, s, d). Returns (M,) float64 distances identical to
    per-pair rerank_distance calls.
    """
    cfg = weights.config
    cands = np.asarray(candidate_maps)
    if cands.ndim != 3 or cands.shape[1:] != (cfg.s, cfg.d):
        raise ShapeError(f"candidate_maps must be (M, {cfg.s}, {cfg.d}), got {cands.shape}")
    probe = _check_map(probe_map, cfg, "probe_map")
    m = cands.shape[0]
    dtype = weights.dtype
    tiled = np.broadcast_to(probe.astype(dtype), (m, cfg.s, cfg.d))
    cands = cands.astype(dtype)
    queries = np.concatenate([tiled, cands])
    kvs = np.concatenate([cands, tiled])
    e, _ = _attention_forward(np.ascontiguousarray(queries), np.ascontiguousarray(kvs), weights)
    if not np.isfinite(e).all():
        raise NonFiniteError("pair_distances produced non-finite values")
    diff = e[:m].astype(np.float64) - e[m:].astype(np.float64)
    return np.sqrt((diff * diff).sum(axis=2)).mean(axis=1)


def classify(
    e: np.ndarray,
    weights: RerankerWeights,
    config: RerankerConfig | None = None,
) -> np.ndarray:
    """Identity logits for one conditioned map: mean-pool strips, then a
    two-layer tanh MLP."""
    cfg = config or weights.config
    arr = _check_map(e, cfg, "e")
    logits, _ = _classifier_forward(arr[None].astype(weights.dtype), weights)
    return logits[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def save_checkpoint(
    weights: RerankerWeights,
    path,
    metadata: dict | None = None,
) -> None:
    """Binary checkpoint (magic CGRK) plus a JSON metadata sidecar."""
    cfg = weights.config
    dtype = weights.dtype
    code = dtype.itemsize
    if code not in _DTYPE_CODES:
        raise FormatError(f"unsupported parameter dtype {dtype}")
    blob = bytearray(
        _CKPT_HEADER.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            code,
            cfg.s,
            cfg.d,
            cfg.heads,
            cfg.hidden,
            cfg.blocks,
            cfg.num_classes,
            cfg.mlp_hidden,
        )
    )
    for arr in weights.params().values():
        blob += np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    Path(path).write_bytes(bytes(blob))
    _meta_path(path).write_text(
        json.dumps(metadata or {}, indent=2, sort_keys=True) + "\n"
    )


def load_checkpoint(
    path, expected_config: RerankerConfig | None = None
) -> tuple[RerankerWeights, RerankerConfig, dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    blob = p.read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise FormatError(f"{p}: truncated checkpoint header")
    magic, version, code, s, d, heads, hidden, blocks, num_classes, mlp_hidden = (
        _CKPT_HEADER.unpack_from(blob, 0)
    )
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{p}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{p}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{p}: unknown dtype code {code}")
    try:
        cfg = RerankerConfig(
            s=s, d=d, num_classes=num_classes, heads=heads,
            hidden=hidden, blocks=blocks, mlp_hidden=mlp_hidden,
        )
    except ValueError as exc:
        raise FormatError(f"{p}: invalid stored config ({exc})") from exc
    if expected_config is not None and cfg != expected_config:
        raise ShapeError(f"{p}: checkpoint config {cfg} does not match expected {expected_config}")

    dt = _DTYPE_CODES[code]
    offset = _CKPT_HEADER.size
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(cfg).items():
        n = int(np.prod(shape))
        nbytes = n * dt.itemsize
        if offset + nbytes > len(blob):
            raise FormatError(f"{p}: truncated at parameter {name}")
        params[name] = np.frombuffer(blob, dtype=dt, count=n, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{p}: {len(blob) - offset} trailing bytes")

    meta = {}
    mp = _meta_path(p)
    if mp.exists():
        try:
            meta = json.loads(mp.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{mp}: invalid JSON ({exc})") from exc
    return _weights_from_params(cfg, params), cfg, meta
