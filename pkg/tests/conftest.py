import numpy as np
import pytest

from gaitrerank.feature_store import FeatureMap, FeatureSet


def make_maps(n_ids, per_id, s, d, seed=0, prefix="id"):
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_ids):
        ident = f"{prefix}{i:03d}"
        for t in range(per_id):
            entries.append(
                FeatureMap(
                    sequence_id=f"{ident}-{t:02d}",
                    identity_id=ident,
                    strips=rng.standard_normal((s, d)).astype(np.float32),
                )
            )
    return entries


@pytest.fixture
def small_set():
    """Six identities, three sequences each, 4x6 strips."""
    return FeatureSet.from_entries(make_maps(6, 3, 4, 6, seed=11))
