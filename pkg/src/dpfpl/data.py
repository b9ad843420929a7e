"""Gaussian-blob classification data and non-IID client splits."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numeric import RngStream

TEST_FRACTION = 0.3


@dataclass
class SyntheticDataset:
    class_means: np.ndarray  # C x m
    noise_scale: float
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    def draw(self, labels, rng: RngStream) -> np.ndarray:
        """Fresh samples from the class generators (never part of the dataset)."""
        labels = np.asarray(labels, dtype=int)
        noise = rng.normal((len(labels), self.dim), scale=self.noise_scale) if self.noise_scale else 0.0
        return self.class_means[labels] + noise

    def to_dict(self) -> dict:
        return {
            "class_means": self.class_means.tolist(),
            "noise_scale": self.noise_scale,
            "x_train": self.x_train.tolist(),
            "y_train": self.y_train.tolist(),
            "x_test": self.x_test.tolist(),
            "y_test": self.y_test.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDataset":
        m = len(d["class_means"][0])
        return cls(
            np.asarray(d["class_means"], dtype=float),
            float(d["noise_scale"]),
            np.asarray(d["x_train"], dtype=float).reshape(-1, m),
            np.asarray(d["y_train"], dtype=int),
            np.asarray(d["x_test"], dtype=float).reshape(-1, m),
            np.asarray(d["y_test"], dtype=int),
        )


def generate(
    num_classes: int,
    per_class_count: int,
    m: int,
    noise_scale: float,
    rng: RngStream,
    mean_scale: float = 1.0,
    class_means: np.ndarray | None = None,
) -> SyntheticDataset:
    """Blobs around seeded class means, split 70/30 per class.

    ``class_means`` may be supplied to draw a fresh dataset from an existing
    generator family (used for shadow models).
    """
    if num_classes < 2 or per_class_count < 2 or m < 1:
        raise ValueError(
            f"need C >= 2, per_class_count >= 2, m >= 1; got {num_classes}, {per_class_count}, {m}"
        )
    if noise_scale < 0:
        raise ValueError(f"noise_scale must be >= 0, got {noise_scale}")
    if class_means is None:
        class_means = rng.normal((num_classes, m), scale=mean_scale)
    else:
        class_means = np.asarray(class_means, dtype=float)
        if class_means.shape != (num_classes, m):
            raise ValueError(f"class_means shape {class_means.shape} != {(num_classes, m)}")
    if len({tuple(r) for r in class_means}) < num_classes:
        raise ValueError("class means must be pairwise distinct")
    y = np.repeat(np.arange(num_classes), per_class_count)
    noise = rng.normal((len(y), m), scale=noise_scale) if noise_scale > 0 else np.zeros((len(y), m))
    x = class_means[y] + noise
    n_test = max(1, min(per_class_count - 1, int(round(TEST_FRACTION * per_class_count))))
    test_mask = np.zeros(len(y), dtype=bool)
    for c in range(num_classes):
        idx = np.flatnonzero(y == c)
        test_mask[rng.gen.permutation(idx)[:n_test]] = True
    return SyntheticDataset(class_means, float(noise_scale), x[~test_mask], y[~test_mask], x[test_mask], y[test_mask])


@dataclass
class SplitPlan:
    assignment: np.ndarray  # train index -> client id (-1: class not assigned)
    scheme: str
    local_classes: list[list[int]]
    alpha: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.local_classes)

    def shard(self, client: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == client)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "alpha": self.alpha,
            "assignment": self.assignment.tolist(),
            "local_classes": self.local_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(np.asarray(d["assignment"], dtype=int), d["scheme"], d["local_classes"], d.get("alpha"))


def pathological_split(ds: SyntheticDataset, num_clients: int, classes_per_client: int, rng: RngStream) -> SplitPlan:
    """Disjoint random class sets; each client takes every training sample of its classes."""
    if num_clients < 1 or classes_per_client < 1:
        raise ValueError("num_clients and classes_per_client must be >= 1")
    if num_clients * classes_per_client > ds.num_classes:
        raise ValueError(
            f"not enough classes: {num_clients} clients x {classes_per_client} > C={ds.num_classes}"
        )
    perm = rng.gen.permutation(ds.num_classes)
    owner = np.full(ds.num_classes, -1)
    local = []
    for i in range(num_clients):
        cls = sorted(int(c) for c in perm[i * classes_per_client : (i + 1) * classes_per_client])
        owner[cls] = i
        local.append(cls)
    return SplitPlan(owner[ds.y_train], "pathological", local)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_split(ds: SyntheticDataset, num_clients: int, alpha: float, rng: RngStream) -> SplitPlan:
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if num_clients < 2:
        raise ValueError(f"dirichlet split needs >= 2 clients, got {num_clients}")
    assignment = np.full(len(ds.y_train), -1)
    for c in range(ds.num_classes):
        idx = rng.gen.permutation(np.flatnonzero(ds.y_train == c))
        props = rng.gen.dirichlet(np.full(num_clients, alpha))
        counts = _largest_remainder(props, len(idx))
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for i in range(num_clients):
            assignment[idx[bounds[i] : bounds[i + 1]]] = i
    local = [sorted({int(c) for c in ds.y_train[assignment == i]}) for i in range(num_clients)]
    return SplitPlan(assignment, "dirichlet", local, alpha=float(alpha))


def eval_sets(plan: SplitPlan, ds: SyntheticDataset) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per client: (local test indices, neighbor test indices).

    Neighbor samples are test samples whose labels belong to other clients
    and not to this one.
    """
    owned = [set(c) for c in plan.local_classes]
    everyone = set().union(*owned) if owned else set()
    out = []
    for mine in owned:
        others = everyone - mine
        local = np.flatnonzero(np.isin(ds.y_test, sorted(mine)))
        neighbor = np.flatnonzero(np.isin(ds.y_test, sorted(others)))
        out.append((local, neighbor))
    return out


def neighbor_classes(plan: SplitPlan, client: int) -> list[int]:
    mine = set(plan.local_classes[client])
    others = set().union(*(set(c) for j, c in enumerate(plan.local_classes) if j != client))
    return sorted(others - mine)


def save_json(path, ds: SyntheticDataset, plan: SplitPlan | None = None) -> None:
    payload = {"dataset": ds.to_dict()}
    if plan is not None:
        payload["split"] = plan.to_dict()
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_json(path) -> tuple[SyntheticDataset, SplitPlan | None]:
    with open(path) as fh:
        payload = json.load(fh)
    plan = payload.get("split")
    return SyntheticDataset.from_dict(payload["dataset"]), SplitPlan.from_dict(plan) if plan else None
