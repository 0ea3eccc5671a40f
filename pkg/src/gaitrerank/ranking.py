"""First-stage gallery ranking by the strip-averaged Euclidean distance.

Distances are always computed in float64 regardless of storage precision,
with a fixed summation order, so rankings are reproducible bit-for-bit.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError, ShapeError
from .feature_store import FeatureMap, FeatureSet


@dataclass(frozen=True)
class RankedList:
    """A probe id plus gallery candidates sorted ascending by distance."""

    probe_id: str
    items: tuple[tuple[str, float], ...]

    def __len__(self) -> int:
        return len(self.items)

    def ids(self) -> list[str]:
        return [cid for cid, _ in self.items]

    def distances(self) -> list[float]:
        return [d for _, d in self.items]


def strip_mean_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over strips of the per-strip Euclidean distance, in float64."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt((diff * diff).sum(axis=1)).mean())


def strip_distance(a: FeatureMap, b: FeatureMap) -> float:
    """Distance between two feature maps: (1/s) * sum_i ||a_i - b_i||_2."""
    if a.strips.shape != b.strips.shape:
        raise ShapeError(
            f"shape mismatch: {a.sequence_id!r} is {a.strips.shape}, "
            f"{b.sequence_id!r} is {b.strips.shape}"
        )
    return strip_mean_distance(a.strips, b.strips)


def _distances_to_stack(probe: np.ndarray, stack: np.ndarray) -> np.ndarray:
    # probe (s, d) float64, stack (n, s, d) float64 -> (n,)
    diff = stack - probe
    return np.sqrt((diff * diff).sum(axis=2)).mean(axis=1)


def rank_gallery(
    probe: FeatureMap,
    gallery: FeatureSet,
    k: int | None = None,
    *,
    _stack: np.ndarray | None = None,
) -> RankedList:
    """Top-k gallery candidates by strip distance, ascending.

    The probe's own sequence_id is excluded. Ties are broken by ascending
    sequence_id so rankings are deterministic. ``k=None`` ranks the whole
    gallery.
    """
    if probe.strips.shape != (gallery.s, gallery.d):
        raise ShapeError(
            f"probe {probe.sequence_id!r} is {probe.strips.shape}, "
            f"gallery declares ({gallery.s}, {gallery.d})"
        )
    stack = gallery.stacked() if _stack is None else _stack
    dists = _distances_to_stack(probe.strips.astype(np.float64), stack)
    order = sorted(
        (
            (float(dists[i]), e.sequence_id)
            for i, e in enumerate(gallery.entries)
            if e.sequence_id != probe.sequence_id
        )
    )
    if not order:
        raise DataError(
            f"empty effective gallery for probe {probe.sequence_id!r}"
        )
    if k is not None:
        if k < 1:
            raise DataError(f"k must be >= 1, got {k}")
        order = order[: min(k, len(order))]
    return RankedList(
        probe_id=probe.sequence_id,
        items=tuple((cid, dist) for dist, cid in order),
    )


def rank_all(
    probes,
    gallery: FeatureSet,
    k: int | None = None,
    threads: int = 1,
) -> list[RankedList]:
    """rank_gallery for every probe (a FeatureSet or a sequence of
    FeatureMaps), preserving probe input order."""
    entries = probes.entries if isinstance(probes, FeatureSet) else tuple(probes)
    stack = gallery.stacked()

    def one(probe: FeatureMap) -> RankedList:
        try:
            return rank_gallery(probe, gallery, k, _stack=stack)
        except (DataError, ShapeError) as exc:
            raise type(exc)(f"probe {probe.sequence_id!r}: {exc}") from exc

    if threads > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, entries))
    return [one(p) for p in entries]


def write_ranked_lists(
    lists: Iterable[RankedList],
    path,
    latencies_ms: Sequence[float] | None = None,
) -> None:
    """One JSON record per probe; optional per-probe latency field."""
    lines = []
    for i, rl in enumerate(lists):
        rec: dict = {"probe_id": rl.probe_id, "items": [[cid, d] for cid, d in rl.items]}
        if latencies_ms is not None:
            rec["latency_ms"] = latencies_ms[i]
        lines.append(json.dumps(rec, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_ranked_lists(path) -> list[RankedList]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    out = []
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            items = tuple((str(cid), float(d)) for cid, d in rec["items"])
            out.append(RankedList(probe_id=str(rec["probe_id"]), items=items))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{p}:{lineno}: bad ranked-list record ({exc})") from exc
    return out
