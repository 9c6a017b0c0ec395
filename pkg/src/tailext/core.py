"""Shared domain types: label spaces, class statistics, feature datasets, run
configuration, and deterministic RNG derivation.

Everything here is immutable after construction and safe to share across
concurrent readers. All randomness in the toolkit flows from a single 64-bit
seed through counter-based Philox streams derived per logical purpose, so
sub-modules draw independent, reproducible samples.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "DataError",
    "ExternalServiceError",
    "LabelSpace",
    "ClassStats",
    "FeatureDataset",
    "RunConfig",
    "build_label_space",
    "imbalance_factor",
    "derive_rng",
    "write_dataset",
    "read_dataset",
]


class ConfigError(ValueError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class DataError(ValueError):
    """Malformed or inconsistent data (CLI exit code 3)."""


class ExternalServiceError(RuntimeError):
    """An outbound service (LLM, retriever, embedder) failed (CLI exit code 4)."""


def _hash_component(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ConfigError(f"stream path components must be non-negative, got {part}")
        return int(part)
    digest = hashlib.blake2s(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed: int, *path: int | str) -> np.random.Generator:
    """Derive an independent generator for the stream named by ``path``.

    The same (seed, path) always yields an identical stream; distinct paths
    yield statistically independent streams. Components may be ints (epoch or
    class indices) or strings (subsystem names), hashed to spawn keys of a
    Philox counter-based generator.
    """
    key = tuple(_hash_component(p) for p in path)
    seq = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class LabelSpace:
    """Partition of contiguous class ids into L target and K auxiliary classes.

    Ids 0..L-1 are target classes; L..L+K-1 are auxiliary. ``neighbor_of``
    maps each auxiliary id to the target id it was queried from. K = 0 is the
    plain closed-set baseline.
    """

    num_target: int
    num_auxiliary: int = 0
    neighbor_of: Mapping[int, int] = field(default_factory=dict)
    class_names: Mapping[int, str] | None = None

    def __post_init__(self):
        L, K = self.num_target, self.num_auxiliary
        if L < 1:
            raise ConfigError(f"need at least one target class, got {L}")
        if K < 0:
            raise ConfigError(f"negative auxiliary count {K}")
        expected = set(range(L, L + K))
        if set(self.neighbor_of) != expected:
            raise ConfigError(
                f"neighbor_of keys must be exactly the auxiliary ids {sorted(expected)}, "
                f"got {sorted(self.neighbor_of)}"
            )
        for aux, tgt in self.neighbor_of.items():
            if not 0 <= tgt < L:
                raise ConfigError(f"auxiliary {aux} maps to invalid target {tgt}")
        object.__setattr__(self, "neighbor_of", dict(self.neighbor_of))
        if self.class_names is not None:
            object.__setattr__(self, "class_names", dict(self.class_names))

    @property
    def num_classes(self) -> int:
        return self.num_target + self.num_auxiliary

    def is_auxiliary(self, class_id: int) -> bool:
        return self.num_target <= class_id < self.num_classes

    def neighbors_of_target(self, target_id: int) -> list[int]:
        """Auxiliary ids queried from ``target_id``, in id order."""
        return [a for a, t in sorted(self.neighbor_of.items()) if t == target_id]

    def to_json(self) -> dict:
        out: dict = {
            "num_target": self.num_target,
            "num_auxiliary": self.num_auxiliary,
            "neighbor_of": {str(k): v for k, v in sorted(self.neighbor_of.items())},
        }
        if self.class_names is not None:
            out["class_names"] = {str(k): v for k, v in sorted(self.class_names.items())}
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "LabelSpace":
        names = obj.get("class_names")
        return cls(
            num_target=int(obj["num_target"]),
            num_auxiliary=int(obj.get("num_auxiliary", 0)),
            neighbor_of={int(k): int(v) for k, v in obj.get("neighbor_of", {}).items()},
            class_names={int(k): str(v) for k, v in names.items()} if names else None,
        )


def build_label_space(
    num_target: int,
    neighbor_pairs: Sequence[tuple[int, int]] = (),
    class_names: Mapping[int, str] | None = None,
) -> LabelSpace:
    """Build a validated LabelSpace from (auxiliary id, target id) pairs.

    Auxiliary ids must be contiguous starting at ``num_target``; duplicate
    auxiliary ids or out-of-range targets are rejected.
    """
    seen: dict[int, int] = {}
    for aux, tgt in neighbor_pairs:
        if aux in seen:
            raise ConfigError(f"duplicate auxiliary id {aux}")
        seen[aux] = tgt
    return LabelSpace(
        num_target=num_target,
        num_auxiliary=len(seen),
        neighbor_of=seen,
        class_names=class_names,
    )


@dataclass(frozen=True)
class ClassStats:
    """Per-class training sample counts n_y for the classes in scope.

    Zero-count classes are rejected at construction: the balanced losses take
    log n_y, so a silent zero would poison training instead of failing fast.
    """

    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.ndim != 1 or arr.size == 0:
            raise DataError("counts must be a non-empty 1-d array")
        if (arr < 1).any():
            bad = np.flatnonzero(arr < 1)
            raise DataError(f"classes {bad.tolist()} have count < 1")
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)

    def __len__(self) -> int:
        return int(self.counts.size)

    def log_counts(self) -> np.ndarray:
        return np.log(self.counts.astype(np.float64))

    def to_json(self) -> dict:
        return {"counts": self.counts.tolist()}

    @classmethod
    def from_json(cls, obj: Mapping) -> "ClassStats":
        return cls(np.asarray(obj["counts"], dtype=np.int64))


def imbalance_factor(stats: ClassStats) -> float:
    """max(counts) / min(counts); 1.0 for a perfectly balanced dataset."""
    return float(stats.counts.max()) / float(stats.counts.min())


@dataclass(frozen=True)
class FeatureDataset:
    """Labeled feature-vector samples, the universal training currency.

    ``features`` is (N, C) float64, ``labels`` (N,) int64. ``ids`` are stable
    per-sample identifiers used in manifests; generated if omitted.
    """

    features: np.ndarray
    labels: np.ndarray
    provenance: str = "synthetic"
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise DataError(f"features must be 2-d (N, C), got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise DataError(
                f"labels shape {labels.shape} does not match {feats.shape[0]} samples"
            )
        if self.provenance not in ("synthetic", "ingested"):
            raise DataError(f"unknown provenance {self.provenance!r}")
        if self.ids is not None and len(self.ids) != feats.shape[0]:
            raise DataError("ids length does not match sample count")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(self.ids))

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def sample_ids(self) -> tuple[str, ...]:
        if self.ids is not None:
            return self.ids
        return tuple(f"{self.provenance[:5]}-{i:06d}" for i in range(len(self)))

    def validate_against(self, space: LabelSpace) -> None:
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= space.num_classes):
            raise DataError(
                f"labels outside [0, {space.num_classes}) for the owning label space"
            )

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)[:num_classes]

    def subset(self, indices: np.ndarray | Sequence[int]) -> "FeatureDataset":
        idx = np.asarray(indices, dtype=np.int64)
        ids = self.ids
        return FeatureDataset(
            features=self.features[idx].copy(),
            labels=self.labels[idx].copy(),
            provenance=self.provenance,
            ids=tuple(ids[i] for i in idx) if ids is not None else None,
        )


def concat_datasets(parts: Iterable[FeatureDataset]) -> FeatureDataset:
    parts = [p for p in parts if len(p)]
    if not parts:
        raise DataError("cannot concatenate zero non-empty datasets")
    dims = {p.feature_dim for p in parts}
    if len(dims) != 1:
        raise DataError(f"feature dims differ across parts: {sorted(dims)}")
    ids: list[str] = []
    for p in parts:
        ids.extend(p.sample_ids())
    return FeatureDataset(
        features=np.concatenate([p.features for p in parts], axis=0),
        labels=np.concatenate([p.labels for p in parts], axis=0),
        provenance=parts[0].provenance,
        ids=tuple(ids),
    )


def _sidecar_path(manifest: Path) -> Path:
    return manifest.with_suffix(".meta.json")


def write_dataset(
    dataset: FeatureDataset,
    space: LabelSpace,
    path: str | Path,
    extra_meta: Mapping | None = None,
) -> None:
    """Write a JSONL manifest plus its header sidecar.

    One record per line: ``{"id": str, "label": int, "features": [float...]}``.
    The sidecar records C, L, K, the neighbor relation, and any provenance
    metadata the caller supplies (generator spec, seed).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = dataset.sample_ids()
    with path.open("w", encoding="utf-8") as fh:
        for i in range(len(dataset)):
            rec = {
                "id": ids[i],
                "label": int(dataset.labels[i]),
                "features": dataset.features[i].tolist(),
            }
            fh.write(json.dumps(rec) + "\n")
    meta = {
        "feature_dim": dataset.feature_dim,
        "num_target": space.num_target,
        "num_auxiliary": space.num_auxiliary,
        "label_space": space.to_json(),
        "provenance": dataset.provenance,
    }
    if extra_meta:
        meta.update(extra_meta)
    _sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_dataset(path: str | Path) -> tuple[FeatureDataset, LabelSpace, dict]:
    """Read a JSONL manifest and its sidecar; returns (dataset, space, meta)."""
    path = Path(path)
    sidecar = _sidecar_path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    if not sidecar.exists():
        raise DataError(f"header sidecar not found: {sidecar}")
    meta = json.loads(sidecar.read_text())
    space = LabelSpace.from_json(meta["label_space"])
    ids: list[str] = []
    labels: list[int] = []
    rows: list[list[float]] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                ids.append(str(rec["id"]))
                labels.append(int(rec["label"]))
                rows.append(rec["features"])
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{line_no}: bad manifest record: {exc}") from exc
    feats = np.asarray(rows, dtype=np.float64)
    if feats.size == 0:
        feats = feats.reshape(0, int(meta["feature_dim"]))
    if feats.shape[1] != int(meta["feature_dim"]):
        raise DataError(
            f"{path}: feature dim {feats.shape[1]} disagrees with sidecar "
            f"{meta['feature_dim']}"
        )
    ds = FeatureDataset(
        features=feats,
        labels=np.asarray(labels, dtype=np.int64),
        provenance=meta.get("provenance", "ingested"),
        ids=tuple(ids),
    )
    ds.validate_against(space)
    return ds, space, meta


@dataclass(frozen=True)
class RunConfig:
    """Hyper-parameters of one training run.

    The determinism contract: identical RunConfig plus identical inputs must
    produce bit-identical metric outputs. Defaults follow the recommended
    operating point: lambda_s=0.1, keep band (0.7, 0.98), per-class cap 50.
    ``aux_ratio`` of None means derive the head:medium:tail attachment counts
    from split totals by ceiling division.
    """

    seed: int = 0
    lambda_s: float = 0.1
    gamma1: float = 0.7
    gamma2: float = 0.98
    per_class_cap: int = 50
    aux_ratio: tuple[float, float, float] | None = None
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    momentum: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    hidden_dim: int | None = None

    def __post_init__(self):
        if self.lambda_s < 0:
            raise ConfigError(f"lambda_s must be >= 0, got {self.lambda_s}")
        if self.lambda_s > 1:
            warnings.warn(
                f"lambda_s={self.lambda_s} > 1 amplifies neighbor competition "
                "instead of silencing it",
                stacklevel=2,
            )
        if not (0.0 <= self.gamma1 < self.gamma2 <= 1.0):
            raise ConfigError(
                f"need 0 <= gamma1 < gamma2 <= 1, got ({self.gamma1}, {self.gamma2})"
            )
        if self.per_class_cap < 1:
            raise ConfigError(f"per_class_cap must be >= 1, got {self.per_class_cap}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.aux_ratio is not None:
            ratio = tuple(float(r) for r in self.aux_ratio)
            if len(ratio) != 3 or any(r < 0 for r in ratio):
                raise ConfigError(f"aux_ratio must be 3 non-negative numbers, got {ratio}")
            object.__setattr__(self, "aux_ratio", ratio)
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "lambda_s": self.lambda_s,
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
            "per_class_cap": self.per_class_cap,
            "aux_ratio": list(self.aux_ratio) if self.aux_ratio is not None else None,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
            "momentum": self.momentum,
            "adam_betas": list(self.adam_betas),
            "weight_decay": self.weight_decay,
            "hidden_dim": self.hidden_dim,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "RunConfig":
        kwargs = dict(obj)
        if kwargs.get("aux_ratio") is not None:
            kwargs["aux_ratio"] = tuple(kwargs["aux_ratio"])
        if "adam_betas" in kwargs:
            kwargs["adam_betas"] = tuple(kwargs["adam_betas"])
        return cls(**kwargs)
