"""Per-epoch auxiliary sampling: the per-class sample cap and the
head/medium/tail auxiliary-category attachment ratio.

The ratio entries are per-target auxiliary-category counts by split (how many
neighbor categories a target of that split gets attached each epoch), not
per-sample weights. Subsets are redrawn every epoch from per-(seed, epoch,
class) streams, so a capped class rotates through its full pool over time
while every draw stays replayable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import ConfigError, DataError, FeatureDataset, LabelSpace, derive_rng

__all__ = ["AuxSamplingPlan", "derive_ratio", "build_plan", "sample_epoch"]


def derive_ratio(split_totals: tuple[int, int, int]) -> tuple[int, int, int]:
    """Default attachment ratio 1 : ceil(N_h/N_m) : ceil(N_h/N_t).

    ``split_totals`` are the total sample counts of the many, medium and few
    splits; tail-heavy datasets therefore attach more auxiliary categories to
    tail targets.
    """
    n_h, n_m, n_t = (int(v) for v in split_totals)
    if min(n_h, n_m, n_t) < 1:
        raise DataError(f"split totals must all be >= 1, got {split_totals}")
    return (1, -(-n_h // n_m), -(-n_h // n_t))


@dataclass(frozen=True)
class AuxSamplingPlan:
    """Declarative sampling plan, serialized into the TrainLog for audit.

    ``expanded_targets`` maps each expanded target class id to its split tag
    ("many" | "medium" | "few"); the tag selects the ratio entry that bounds
    how many of the target's auxiliary categories are attached per epoch.
    """

    per_class_cap: int = 50
    ratio: tuple[float, float, float] = (1.0, 1.0, 3.0)
    expanded_targets: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.per_class_cap < 1:
            raise ConfigError(f"per_class_cap must be >= 1, got {self.per_class_cap}")
        ratio = tuple(float(r) for r in self.ratio)
        if len(ratio) != 3 or any(r < 0 for r in ratio):
            raise ConfigError(f"ratio must be 3 non-negative entries, got {self.ratio}")
        object.__setattr__(self, "ratio", ratio)
        tags = dict(self.expanded_targets)
        for t, tag in tags.items():
            if tag not in ("many", "medium", "few"):
                raise ConfigError(f"target {t} has unknown split tag {tag!r}")
        object.__setattr__(self, "expanded_targets", tags)

    def categories_for(self, split_tag: str) -> int:
        idx = ("many", "medium", "few").index(split_tag)
        return math.ceil(self.ratio[idx])

    def to_json(self) -> dict:
        return {
            "per_class_cap": self.per_class_cap,
            "ratio": list(self.ratio),
            "expanded_targets": {
                str(t): tag for t, tag in sorted(self.expanded_targets.items())
            },
        }


def build_plan(
    target_counts: np.ndarray,
    split_tags: tuple[str, ...],
    expanded: tuple[int, ...] | list[int],
    per_class_cap: int,
    ratio: tuple[float, float, float] | None,
) -> AuxSamplingPlan:
    """Assemble a plan from train counts and split tags.

    ``ratio`` of None derives the default from split sample totals, which
    requires all three splits to be non-empty.
    """
    counts = np.asarray(target_counts, dtype=np.int64)
    if ratio is None:
        totals = {"many": 0, "medium": 0, "few": 0}
        for y, tag in enumerate(split_tags):
            totals[tag] += int(counts[y])
        ratio = derive_ratio((totals["many"], totals["medium"], totals["few"]))
    return AuxSamplingPlan(
        per_class_cap=per_class_cap,
        ratio=tuple(float(r) for r in ratio),
        expanded_targets={int(t): split_tags[int(t)] for t in expanded},
    )


def sample_epoch(
    aux: FeatureDataset,
    space: LabelSpace,
    plan: AuxSamplingPlan,
    seed: int,
    epoch: int,
) -> tuple[FeatureDataset, np.ndarray]:
    """Draw one epoch's auxiliary subset.

    For each expanded target, the split-tag ratio entry bounds how many of its
    auxiliary categories are attached this epoch (a fresh per-epoch rotation);
    each attached category then contributes min(available, cap) samples drawn
    without replacement. Returns the sampled subset plus the effective
    per-auxiliary-class counts (length K, aligned with ids L..L+K-1; zero for
    classes left out this epoch, which must then be excluded from the loss).
    """
    L, K = space.num_target, space.num_auxiliary
    eff = np.zeros(K, dtype=np.int64)
    if K == 0 or len(aux) == 0:
        return aux.subset(np.empty(0, dtype=np.int64)), eff

    aux.validate_against(space)
    by_class: dict[int, np.ndarray] = {
        int(c): np.flatnonzero(aux.labels == c) for c in np.unique(aux.labels)
    }

    chosen: list[np.ndarray] = []
    for target in sorted(plan.expanded_targets):
        tag = plan.expanded_targets[target]
        categories = [c for c in space.neighbors_of_target(target) if c in by_class]
        if not categories:
            continue
        n_attach = min(len(categories), plan.categories_for(tag))
        if n_attach == 0:
            continue
        if n_attach < len(categories):
            rng = derive_rng(seed, "aux-attach", epoch, target)
            order = rng.permutation(len(categories))[:n_attach]
            attached = [categories[i] for i in sorted(order)]
        else:
            attached = categories
        for c in attached:
            pool = by_class[c]
            take = min(pool.size, plan.per_class_cap)
            if take < pool.size:
                rng = derive_rng(seed, "aux-sample", epoch, c)
                picked = pool[np.sort(rng.choice(pool.size, size=take, replace=False))]
            else:
                picked = pool
            chosen.append(picked)
            eff[c - L] = take

    if chosen:
        idx = np.concatenate(chosen)
    else:
        idx = np.empty(0, dtype=np.int64)
    return aux.subset(idx), eff
