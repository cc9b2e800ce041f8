import numpy as np
import pytest

from probfe.core import default_study_document, load_study_spec


def make_spec(means, stds, metrics=("y0",), **study):
    doc = {
        "variables": [
            {"name": f"x{i}", "mean": float(m), "std": float(s)}
            for i, (m, s) in enumerate(zip(means, stds))
        ],
        "metrics": list(metrics),
        "study": {"n_rsm": max(len(means) + 2, 4), **study},
    }
    return load_study_spec(doc)


@pytest.fixture
def default_doc():
    return default_study_document()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
