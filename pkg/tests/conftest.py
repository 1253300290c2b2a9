import json

import numpy as np
import pytest

from l2r2.core_data import LabelTable, LogitTable, save_labels, save_logits
from l2r2.synthbench import GOLDEN, simulate


@pytest.fixture(scope="session")
def golden():
    return simulate(GOLDEN)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_manifest(tmp_path):
    """Write a small dataset and return ``(path, raw_manifest_dict)``; ``edit`` mutates the dict first."""

    def make(views=("full",), seeds=(0,), C=2, n=4, edit=None):
        rng = np.random.default_rng(0)
        raw = {
            "name": "tiny",
            "num_classes": C,
            "class_names": [f"c{k}" for k in range(C)],
            "seeds": list(seeds),
            "views": {v: {} for v in views},
            "splits": {},
            "metadata": None,
        }
        for split in ("train", "val", "test"):
            ids = tuple(f"{split}{i}" for i in range(n))
            save_labels(tmp_path / f"{split}.csv", LabelTable(ids, np.arange(n) % C))
            raw["splits"][split] = f"{split}.csv"
            for v in views:
                raw["views"][v][split] = {}
                for s in seeds:
                    name = f"{v}_{split}_{s}.csv"
                    save_logits(tmp_path / name, LogitTable(ids, rng.normal(size=(n, C))))
                    raw["views"][v][split][str(s)] = name
        if edit:
            edit(raw)
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(raw))
        return path, raw

    return make
