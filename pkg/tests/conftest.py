from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from objscan.assets import load_catalog, write_catalog
from objscan.database import build_database

ROOM_MODELS = ["table", "chair", "sofa", "shelf", "lamp"]


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def catalog(tmp_path_factory):
    root = tmp_path_factory.mktemp("catalog")
    write_catalog(root)
    return load_catalog(Path(root) / "catalog.json")


@pytest.fixture(scope="session")
def room_catalog(catalog):
    """Five-model slice of the catalog matching the demo room contents."""
    models = {k: catalog["models"][k] for k in ROOM_MODELS}
    label_names = list(dict.fromkeys(models[k]["label"] for k in ROOM_MODELS))
    return {"models": models, "label_names": label_names}


@pytest.fixture(scope="session")
def room_db(room_catalog):
    """Shared database over the five room models; building it is expensive."""
    return build_database(room_catalog, seed=7)


TINY_MODELS = ["chair", "lamp"]


@pytest.fixture(scope="session")
def tiny_catalog(catalog):
    models = {k: catalog["models"][k] for k in TINY_MODELS}
    label_names = list(dict.fromkeys(models[k]["label"] for k in TINY_MODELS))
    return {"models": models, "label_names": label_names}


@pytest.fixture(scope="session")
def tiny_db(tiny_catalog):
    """Two-model database keeping episode-level tests quick."""
    return build_database(tiny_catalog, seed=7)
