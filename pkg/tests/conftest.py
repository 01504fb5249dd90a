import numpy as np
import pytest

from domain_app import OutcomeRecord, Query, ServiceClass, TreatmentGrid, Dataset
from synthworld_app import WorldParams, gen_world


def make_record(i, j, y, rev=10.0, features=(0.5,) * 10, k=0, origin=0, dest=1, bucket=0):
    q = Query(i, origin, dest, bucket, tuple(features), k)
    return OutcomeRecord(q, j, y, rev)


def make_dataset(records, levels=(0.0, 1.0, 2.0), provenance="observational", feature_dim=10):
    return Dataset(
        grid=TreatmentGrid(levels),
        services=(ServiceClass(0, 0.9), ServiceClass(1, 0.75)),
        records=tuple(records),
        provenance=provenance,
        feature_dim=feature_dim,
    )


@pytest.fixture
def small_params():
    return WorldParams(seed=3, n_zones=4, daily_query_volume=600)


@pytest.fixture
def small_world(small_params):
    return gen_world(small_params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def two_clusters():
    """Cluster A: values 10 -> 14, costs 0 -> 3; cluster B: values 8 -> 13, costs 0 -> 4 (grid 0, 3)."""
    from allocator_app import ClusterStats
    from domain_app import ClusterKey

    a = ClusterStats(ClusterKey(0, 1, 2), 1.0, [10 / 14, 1.0], [14.0], [1.0], [[0.0, 3.0]], services=(0,))
    b = ClusterStats(ClusterKey(1, 0, 2), 4 / 3, [8 / 13, 1.0], [9.75], [1.0], [[0.0, 3.0]], services=(0,))
    return [a, b]


def two_cluster_arrays():
    return [[10.0, 14.0], [8.0, 13.0]], [[0.0, 3.0], [0.0, 4.0]]
