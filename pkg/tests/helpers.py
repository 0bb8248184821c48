"""Constructed networks shared by the test modules."""

import numpy as np

from concept_gradient.model import Activation, Linear, Network, predict
from concept_gradient.synthetic import Dataset

# The layer at index 2 projects onto tanh(x0) + tanh(x1), which is symmetric
# in its inputs, so the concept x0 > x1 cannot be decoded after it.
DESTROYING_LAYER = 2


def destroying_network() -> Network:
    w0 = np.array(
        [[1, 0], [0, 1], [-1, 0], [0, -1], [1, 1], [1, -1], [0.5, -0.5], [-0.5, 0.5]], dtype=float
    )
    return Network(
        [
            Linear(w0, np.zeros(8)),
            Activation("tanh"),
            Linear([[1, 1, 0, 0, 0, 0, 0, 0]], [0.0]),
            Activation("tanh"),
            Linear([[1.0]], [0.0]),
        ],
        2,
    )


def antisymmetric_concept_data(f: Network, n: int = 2000, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, 2))
    c = (x[:, 0] > x[:, 1]).astype(float)[:, None]
    n_train = int(0.8 * n)
    return Dataset(x, c, predict(f, x), ["train"] * n_train + ["val"] * (n - n_train))
