import numpy as np
import pytest

from denseloc.features import extract_dense
from denseloc.synthetic import DatabaseGridSpec, QuerySpec, generate_synthetic_scene


@pytest.fixture(scope="session")
def property_scene():
    """Shared desk-scale scene for statistical property tests."""
    db, queries, scene = generate_synthetic_scene(
        1234,
        db_spec=DatabaseGridSpec(nx=2, ny=2, yaw_count=4, image_size=(288, 216)),
        query_spec=QuerySpec(count=12, image_size=(288, 216),
                             pitch_range=(-6.0, 6.0), height_range=(1.3, 1.7),
                             margin=1.2),
    )
    return db, queries, scene


@pytest.fixture(scope="session")
def property_pyramids(property_scene):
    db, queries, _ = property_scene
    return ([extract_dense(e.rgb) for e in db],
            [extract_dense(q.rgb) for q in queries])
