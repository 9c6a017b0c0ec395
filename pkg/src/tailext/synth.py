"""Synthetic data: long-tail count profiles, a two-level Gaussian class
hierarchy, and displaced-center auxiliary neighbor classes.

The hierarchy is the desk-scale stand-in for a real taxonomy: superclass
centers are spread wide (sigma_super), fine classes cluster around their
superclass (sigma_fine), and samples cluster around the fine center
(sigma_sample). Fewer superclasses for a fixed class budget means more fine
classes crowded into each cluster, i.e. a finer-grained label space.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    ClassStats,
    ConfigError,
    DataError,
    FeatureDataset,
    LabelSpace,
    derive_rng,
)

__all__ = [
    "CountProfile",
    "HierarchySpec",
    "make_counts",
    "make_hierarchy",
    "make_auxiliary",
]


@dataclass(frozen=True)
class CountProfile:
    """Per-class training-count profile for a long-tail benchmark.

    kind "exponential" interpolates count_y = max_count * imbalance^(y/(n-1)),
    so class 0 gets max_count and the last class max_count * imbalance.
    kind "pareto" draws 1 + Pareto(alpha) variates, sorts them descending and
    rescales so the largest class gets max_count.
    """

    kind: str
    num_classes: int
    max_count: int
    imbalance: float | None = None
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in ("exponential", "pareto"):
            raise ConfigError(f"unknown count profile kind {self.kind!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.max_count < 1:
            raise ConfigError("max_count must be >= 1")
        if self.kind == "exponential":
            if self.imbalance is None or not (0.0 < self.imbalance <= 1.0):
                raise ConfigError(
                    "exponential profile needs imbalance ratio in (0, 1], got "
                    f"{self.imbalance!r}"
                )
        else:
            if self.alpha is None or self.alpha <= 0:
                raise ConfigError(f"pareto profile needs alpha > 0, got {self.alpha!r}")

    def to_json(self) -> dict:
        out = {"kind": self.kind, "num_classes": self.num_classes, "max_count": self.max_count}
        if self.kind == "exponential":
            out["imbalance"] = self.imbalance
        else:
            out["alpha"] = self.alpha
        return out


def make_counts(profile: CountProfile, seed: int = 0) -> ClassStats:
    """Realize a profile as integer counts, monotone non-increasing, all >= 1."""
    n = profile.num_classes
    if profile.kind == "exponential":
        if n == 1:
            raw = np.array([float(profile.max_count)])
        else:
            expo = np.arange(n) / (n - 1)
            raw = profile.max_count * profile.imbalance**expo
    else:
        draws = 1.0 + derive_rng(seed, "counts").pareto(profile.alpha, size=n)
        draws = np.sort(draws)[::-1]
        raw = profile.max_count * draws / draws[0]
    counts = np.maximum(np.rint(raw).astype(np.int64), 1)
    return ClassStats(counts)


@dataclass(frozen=True)
class HierarchySpec:
    """Geometry of the synthetic superclass/fine-class generator.

    Fine-class centers spread inside a low-dimensional subspace of each
    superclass (``fine_subspace_dim``, drawn per superclass). Isotropic
    offsets in high dimension would place every pair of fine classes
    ~sigma_fine*sqrt(2*feature_dim) apart, which no sample noise allowed by
    the spread ordering can bridge; confining them to a few directions is
    what makes fine classes of the same superclass genuinely confusable
    while superclasses stay linearly separable. Set it to None for the
    isotropic (non-confusable) variant.

    The default "ring" layout spaces siblings at jittered equal angles on a
    circle of radius sigma_fine*sqrt(2) inside the subspace, so every class
    faces the same crowding as its siblings and per-class difficulty is set
    by how many classes share the superclass, not by collision luck. The
    "gaussian" layout draws subspace coordinates i.i.d. instead.
    """

    num_superclasses: int
    num_classes: int
    feature_dim: int = 64
    sigma_super: float = 10.0
    sigma_fine: float = 2.0
    sigma_sample: float = 1.0
    fine_subspace_dim: int | None = 2
    fine_layout: str = "ring"

    def __post_init__(self):
        if not 1 <= self.num_superclasses <= self.num_classes:
            raise ConfigError(
                f"need 1 <= num_superclasses <= num_classes, got "
                f"{self.num_superclasses} and {self.num_classes}"
            )
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if not self.sigma_super > self.sigma_fine > self.sigma_sample > 0:
            raise ConfigError(
                "spreads must satisfy sigma_super > sigma_fine > sigma_sample > 0"
            )
        if self.fine_subspace_dim is not None and not (
            1 <= self.fine_subspace_dim <= self.feature_dim
        ):
            raise ConfigError(
                f"fine_subspace_dim must be in [1, {self.feature_dim}] or None, "
                f"got {self.fine_subspace_dim}"
            )
        if self.fine_layout not in ("ring", "gaussian"):
            raise ConfigError(f"unknown fine_layout {self.fine_layout!r}")
        if self.fine_layout == "ring" and self.fine_subspace_dim != 2:
            raise ConfigError("ring layout needs fine_subspace_dim == 2")

    def superclass_of(self, y: int) -> int:
        """Round-robin assignment, spreading any remainder evenly."""
        return y % self.num_superclasses

    def to_json(self) -> dict:
        return {
            "num_superclasses": self.num_superclasses,
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "sigma_super": self.sigma_super,
            "sigma_fine": self.sigma_fine,
            "sigma_sample": self.sigma_sample,
            "fine_subspace_dim": self.fine_subspace_dim,
            "fine_layout": self.fine_layout,
        }


def _assemble(
    feats: list[np.ndarray], labels: list[np.ndarray], ids: list[list[str]]
) -> FeatureDataset:
    return FeatureDataset(
        features=np.concatenate(feats, axis=0),
        labels=np.concatenate(labels),
        ids=tuple(i for chunk in ids for i in chunk),
        provenance="synthetic",
    )


def make_hierarchy(
    spec: HierarchySpec,
    counts: ClassStats,
    seed: int = 0,
    test_per_class: int = 20,
) -> tuple[FeatureDataset, FeatureDataset]:
    """Draw a long-tail train set and an exactly balanced test set.

    All randomness flows through per-purpose derived streams, so any one
    class's samples can be regenerated independently of the others.
    """
    if len(counts) != spec.num_classes:
        raise DataError(
            f"profile has {len(counts)} classes, hierarchy expects {spec.num_classes}"
        )
    if test_per_class < 1:
        raise ConfigError("test_per_class must be >= 1")
    C = spec.feature_dim
    super_centers = derive_rng(seed, "super-centers").normal(
        0.0, spec.sigma_super, size=(spec.num_superclasses, C)
    )
    r = spec.fine_subspace_dim
    bases = None
    if r is not None:
        bases = []
        for s in range(spec.num_superclasses):
            raw = derive_rng(seed, "fine-basis", s).normal(size=(C, r))
            q, _ = np.linalg.qr(raw)
            bases.append(q)
    ring_slot = None
    if spec.fine_layout == "ring":
        members: dict[int, list[int]] = {s: [] for s in range(spec.num_superclasses)}
        for y in range(spec.num_classes):
            members[spec.superclass_of(y)].append(y)
        ring_slot = {}
        for s, ys in members.items():
            rot = derive_rng(seed, "ring-rot", s).uniform(0.0, 2.0 * np.pi)
            order = derive_rng(seed, "ring-order", s).permutation(len(ys))
            for local, y in enumerate(ys):
                ring_slot[y] = (int(order[local]), len(ys), rot)
    tr_f, tr_y, tr_i = [], [], []
    te_f, te_y, te_i = [], [], []
    for y in range(spec.num_classes):
        s = spec.superclass_of(y)
        if bases is None:
            offset = derive_rng(seed, "fine-center", y).normal(
                0.0, spec.sigma_fine, size=C
            )
        elif ring_slot is not None:
            slot, k_s, rot = ring_slot[y]
            jitter = derive_rng(seed, "fine-center", y)
            angle = rot + 2.0 * np.pi * (slot + jitter.uniform(-0.25, 0.25)) / k_s
            radius = np.sqrt(2.0) * spec.sigma_fine * (1.0 + 0.05 * jitter.normal())
            offset = bases[s] @ np.array(
                [radius * np.cos(angle), radius * np.sin(angle)]
            )
        else:
            coords = derive_rng(seed, "fine-center", y).normal(
                0.0, spec.sigma_fine, size=r
            )
            offset = bases[s] @ coords
        center = super_centers[s] + offset
        n_y = int(counts.counts[y])
        tr_f.append(
            center + derive_rng(seed, "train", y).normal(0.0, spec.sigma_sample, size=(n_y, C))
        )
        tr_y.append(np.full(n_y, y, dtype=np.int64))
        tr_i.append([f"syn-train-{y}-{i}" for i in range(n_y)])
        te_f.append(
            center
            + derive_rng(seed, "test", y).normal(
                0.0, spec.sigma_sample, size=(test_per_class, C)
            )
        )
        te_y.append(np.full(test_per_class, y, dtype=np.int64))
        te_i.append([f"syn-test-{y}-{i}" for i in range(test_per_class)])
    return _assemble(tr_f, tr_y, tr_i), _assemble(te_f, te_y, te_i)


def make_auxiliary(
    base: FeatureDataset,
    space: LabelSpace,
    per_target: int,
    samples_per_aux: int,
    seed: int = 0,
    targets: Sequence[int] | None = None,
    offset: float = 3.0,
    noise: float = 1.0,
) -> tuple[FeatureDataset, LabelSpace]:
    """Synthesize neighbor categories for the designated target classes.

    Each auxiliary center sits at the target's empirical class mean plus
    `offset` along a random unit direction; with the default geometry that
    puts neighbors between the fine-class spread and the superclass spread,
    close enough to compete with their target but not identical to it.
    """
    if per_target < 1:
        raise ConfigError(f"per_target must be >= 1, got {per_target}")
    if samples_per_aux < 1:
        raise ConfigError(f"samples_per_aux must be >= 1, got {samples_per_aux}")
    if space.num_auxiliary:
        raise ConfigError("base label space already has auxiliary classes")
    L = space.num_target
    if targets is None:
        chosen = list(range(L))
    else:
        chosen = sorted(set(int(t) for t in targets))
        if chosen and not (0 <= chosen[0] and chosen[-1] < L):
            raise ConfigError(f"targets must lie in [0, {L}), got {chosen}")
    if not chosen:
        raise ConfigError("no target classes designated for expansion")

    C = base.feature_dim
    feats, labels, ids = [], [], []
    neighbor_of: dict[int, int] = {}
    next_id = L
    for t in chosen:
        members = base.features[base.labels == t]
        if members.shape[0] == 0:
            raise DataError(f"target class {t} has no samples to anchor neighbors")
        center = members.mean(axis=0)
        for j in range(per_target):
            direction = derive_rng(seed, "aux-dir", t, j).normal(size=C)
            direction /= np.linalg.norm(direction)
            aux_center = center + offset * direction
            draws = aux_center + derive_rng(seed, "aux-sample", t, j).normal(
                0.0, noise, size=(samples_per_aux, C)
            )
            feats.append(draws)
            labels.append(np.full(samples_per_aux, next_id, dtype=np.int64))
            ids.append([f"syn-aux-{next_id}-{i}" for i in range(samples_per_aux)])
            neighbor_of[next_id] = t
            next_id += 1

    names = None
    if space.class_names is not None:
        names = dict(space.class_names)
        for a, t in neighbor_of.items():
            names[a] = f"{names.get(t, t)}#aux{a - L}"
    new_space = LabelSpace(
        num_target=L,
        num_auxiliary=next_id - L,
        neighbor_of=neighbor_of,
        class_names=names,
    )
    return _assemble(feats, labels, ids), new_space
