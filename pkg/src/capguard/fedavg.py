"""Federated averaging on a linear-regression model with full-batch gradient descent.

Weights include a trailing bias term. Loss is mean squared error.
"""

from __future__ import annotations

import io
from typing import List, Optional, Sequence, Tuple

import numpy as np

Dataset = Tuple[np.ndarray, np.ndarray]


def design(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def mse(w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    r = design(X) @ w - y
    return float(r @ r / len(y))


def gradient(w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    A = design(X)
    return (2.0 / len(y)) * (A.T @ (A @ w - y))


def local_train(w: np.ndarray, X: np.ndarray, y: np.ndarray, lr: float, epochs: int) -> np.ndarray:
    w = w.copy()
    for _ in range(epochs):
        w -= lr * gradient(w, X, y)
    return w


def global_mse(w: np.ndarray, datasets: Sequence[Dataset]) -> float:
    n = sum(len(y) for _, y in datasets)
    return sum(mse(w, X, y) * len(y) for X, y in datasets) / n


def fedavg(
    datasets: Sequence[Dataset],
    lr: float,
    local_epochs: int,
    rounds: int,
    init: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, List[float]]:
    """Run ``rounds`` of FedAvg; returns final weights and the global MSE
    before training followed by the value after each round."""
    dim = datasets[0][0].shape[1] + 1
    w = np.zeros(dim) if init is None else np.asarray(init, dtype=float).copy()
    counts = np.array([len(y) for _, y in datasets], dtype=float)
    trace = [global_mse(w, datasets)]
    for _ in range(rounds):
        local = [local_train(w, X, y, lr, local_epochs) for X, y in datasets]
        w = sum(c * lw for c, lw in zip(counts, local)) / counts.sum()
        trace.append(global_mse(w, datasets))
    return w, trace


def centralized_gd(X: np.ndarray, y: np.ndarray, lr: float, steps: int, init: Optional[np.ndarray] = None) -> np.ndarray:
    w = np.zeros(X.shape[1] + 1) if init is None else np.asarray(init, dtype=float)
    return local_train(w, X, y, lr, steps)


def synthetic_dataset(seed: int, n: int = 64, dim: int = 3, noise: float = 0.05, true_w: Optional[Sequence[float]] = None) -> Dataset:
    rng = np.random.default_rng(seed)
    w = np.asarray(true_w if true_w is not None else np.linspace(1.0, -1.5, dim), dtype=float)
    X = rng.normal(size=(n, dim))
    y = X @ w + 0.5 + noise * rng.normal(size=n)
    return X, y


def dataset_to_csv(X: np.ndarray, y: np.ndarray) -> bytes:
    header = ",".join([f"x{i}" for i in range(X.shape[1])] + ["y"])
    lines = [header]
    for row, target in zip(X, y):
        lines.append(",".join(repr(float(v)) for v in row) + "," + repr(float(target)))
    return ("\n".join(lines) + "\n").encode("ascii")


def dataset_from_csv(data: bytes) -> Dataset:
    arr = np.loadtxt(io.StringIO(data.decode("ascii")), delimiter=",", skiprows=1, ndmin=2)
    if arr.shape[1] < 2:
        raise ValueError("dataset needs at least one feature column and a target")
    return arr[:, :-1], arr[:, -1]
