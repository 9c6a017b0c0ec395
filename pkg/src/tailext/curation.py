"""Auxiliary-category curation: ask a language model for fine-grained
neighbor names, drop label leaks, retrieve candidate records, and keep the
ones that pass the caption and prototype-similarity rules.

The heavy lifting (embeddings, image search) lives behind two small
interfaces, so the whole pipeline runs offline against fixture files in
tests and against HTTP services in production.
"""
from __future__ import annotations

import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import (
    ClassStats,
    ConfigError,
    DataError,
    ExternalServiceError,
    FeatureDataset,
    LabelSpace,
)

__all__ = [
    "Candidate",
    "Prototype",
    "CurationConfig",
    "LLMClient",
    "HttpLLMClient",
    "FixtureLLMClient",
    "Retriever",
    "FixtureRetriever",
    "normalize_name",
    "build_prompt",
    "query_neighbors",
    "filter_leaks",
    "compute_prototype",
    "cosine",
    "filter_candidates",
    "curate",
]

_WS = re.compile(r"\s+")


def normalize_name(name: str) -> str:
    """Case-folded, whitespace-collapsed form used for all name comparisons."""
    return _WS.sub(" ", name.strip().casefold())


def build_prompt(class_name: str, k: int = 5) -> str:
    """The structural in-context prompt, with the requested list size and
    the class to expand substituted in."""
    if not class_name or not class_name.strip():
        raise ConfigError("class name for prompting must be non-empty")
    if k < 1:
        raise ConfigError(f"must request at least one neighbor, got k={k}")
    return (
        "Task: Given a category name, please list out "
        f"{k} classes that are fine-grained categories related to the "
        "provided classes.\n"
        "\n"
        "Query: sports car\n"
        "\n"
        "Response: sedan, coupe, SUV, luxury car, electric car\n"
        "\n"
        f"Query: {class_name}\n"
        "\n"
        "Response:"
    )


class LLMClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class HttpLLMClient:
    """Minimal chat-completion client over HTTP.

    Endpoint and key default to the TAILEXT_LLM_URL / TAILEXT_LLM_KEY
    environment variables. Transport failures are retried with a short
    backoff before giving up.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str = "gpt-4",
        timeout: float = 30.0,
        transport_retries: int = 2,
        backoff: float = 0.5,
    ):
        self.base_url = (base_url or os.environ.get("TAILEXT_LLM_URL", "")).rstrip("/")
        if not self.base_url:
            raise ConfigError(
                "no LLM endpoint: pass base_url or set TAILEXT_LLM_URL"
            )
        self.api_key = api_key or os.environ.get("TAILEXT_LLM_KEY")
        self.model = model
        self.timeout = timeout
        self.transport_retries = transport_retries
        self.backoff = backoff

    def complete(self, prompt: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        }
        last: Exception | None = None
        for attempt in range(self.transport_retries + 1):
            try:
                resp = requests.post(
                    f"{self.base_url}/chat/completions",
                    json=body,
                    headers=headers,
                    timeout=self.timeout,
                )
                resp.raise_for_status()
                payload = resp.json()
                return payload["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as exc:
                raise ExternalServiceError(
                    f"malformed completion payload from {self.base_url}: {exc!r}"
                ) from exc
            except Exception as exc:  # transport-level: retry
                last = exc
                if attempt < self.transport_retries:
                    time.sleep(self.backoff * (attempt + 1))
        raise ExternalServiceError(
            f"LLM endpoint {self.base_url} unreachable after "
            f"{self.transport_retries + 1} attempts: {last!r}"
        )


class FixtureLLMClient:
    """Replays recorded responses from ``responses.json`` in a fixture dir.

    The file maps normalized query names to raw response strings. The query
    name is recovered from the last "Query:" line of the prompt, so the
    client stays faithful to whatever prompt the pipeline actually built.
    """

    def __init__(self, fixture_dir: str | Path):
        path = Path(fixture_dir)
        if path.is_dir():
            path = path / "responses.json"
        if not path.exists():
            raise DataError(f"LLM fixture not found: {path}")
        self.responses: dict[str, str] = {
            normalize_name(k): v for k, v in json.loads(path.read_text()).items()
        }

    def complete(self, prompt: str) -> str:
        queries = re.findall(r"^Query:\s*(.+)$", prompt, flags=re.MULTILINE)
        if not queries:
            raise ExternalServiceError("prompt has no Query line to replay")
        key = normalize_name(queries[-1])
        if key not in self.responses:
            raise ExternalServiceError(f"no recorded response for query {key!r}")
        return self.responses[key]


def query_neighbors(
    client: LLMClient, class_name: str, k: int = 5, retries: int = 2
) -> list[str]:
    """Ask for k fine-grained neighbors and parse the comma-separated reply.

    Names come back trimmed, lowercased, and deduplicated in reply order.
    Empty or unparsable replies are retried; persistent failure raises.
    """
    prompt = build_prompt(class_name, k)
    for _ in range(retries + 1):
        raw = client.complete(prompt)
        names = []
        for piece in raw.split(","):
            name = normalize_name(piece)
            if name and name not in names:
                names.append(name)
        if names:
            return names[:k]
    raise ExternalServiceError(
        f"no parsable neighbor names for {class_name!r} after {retries + 1} attempts"
    )


def filter_leaks(names: Sequence[str], target_names) -> list[str]:
    """Drop any proposed name already present in the target label set."""
    blocked = {normalize_name(t) for t in target_names}
    return [n for n in names if normalize_name(n) not in blocked]


@dataclass(frozen=True)
class Candidate:
    """One retrieved record flowing through the filters."""

    image_ref: str
    caption: str
    feature: np.ndarray
    proposed_class: str
    source_target: int

    def __post_init__(self):
        object.__setattr__(
            self, "feature", np.asarray(self.feature, dtype=np.float64)
        )


@dataclass(frozen=True)
class Prototype:
    class_id: int
    vector: np.ndarray


def compute_prototype(dataset: FeatureDataset, class_id: int) -> Prototype:
    """Exact arithmetic mean of the class's training features."""
    mask = dataset.labels == class_id
    if not mask.any():
        raise DataError(f"class {class_id} has no samples to average")
    return Prototype(class_id, dataset.features[mask].mean(axis=0))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DataError(f"cosine dim mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("cosine undefined for zero-norm vector")
    return float(a @ b / (na * nb))


def filter_candidates(
    cands: Sequence[Candidate],
    protos: Mapping[int, Prototype],
    gamma_low: float = 0.7,
    gamma_high: float = 0.98,
) -> tuple[list[Candidate], list[tuple[Candidate, str]]]:
    """Apply the caption rule, then the prototype keep band.

    A candidate survives iff its proposed class name appears in the caption
    (normalized substring) and gamma_low < cos(prototype, feature) <
    gamma_high. Rejections carry the first rule that fired: "caption",
    "similarity-low", or "similarity-high".
    """
    if not 0.0 <= gamma_low < gamma_high <= 1.0:
        raise ConfigError(
            f"need 0 <= gamma_low < gamma_high <= 1, got ({gamma_low}, {gamma_high})"
        )
    kept: list[Candidate] = []
    rejected: list[tuple[Candidate, str]] = []
    for cand in cands:
        if normalize_name(cand.proposed_class) not in normalize_name(cand.caption):
            rejected.append((cand, "caption"))
            continue
        proto = protos.get(cand.source_target)
        if proto is None:
            raise DataError(f"no prototype for target {cand.source_target}")
        sim = cosine(proto.vector, cand.feature)
        if sim <= gamma_low:
            rejected.append((cand, "similarity-low"))
        elif sim >= gamma_high:
            rejected.append((cand, "similarity-high"))
        else:
            kept.append(cand)
    return kept, rejected


class Retriever(Protocol):
    def retrieve(self, class_name: str, source_target: int) -> list[Candidate]: ...


class FixtureRetriever:
    """Serves candidates from a JSONL corpus keyed by proposed class name.

    Each line: {"class": str, "image_ref": str, "caption": str,
    "features": [float, ...]}.
    """

    def __init__(self, corpus_path: str | Path):
        path = Path(corpus_path)
        if not path.exists():
            raise DataError(f"candidate corpus not found: {path}")
        self._by_name: dict[str, list[dict]] = {}
        with path.open(encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    key = normalize_name(rec["class"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataError(f"bad corpus record at line {line_no}: {exc!r}")
                self._by_name.setdefault(key, []).append(rec)

    def retrieve(self, class_name: str, source_target: int) -> list[Candidate]:
        out = []
        for rec in self._by_name.get(normalize_name(class_name), []):
            out.append(
                Candidate(
                    image_ref=rec["image_ref"],
                    caption=rec["caption"],
                    feature=rec["features"],
                    proposed_class=class_name,
                    source_target=source_target,
                )
            )
        return out


@dataclass(frozen=True)
class CurationConfig:
    k: int = 5
    gamma_low: float = 0.7
    gamma_high: float = 0.98
    expand: tuple[str, ...] = ("medium", "few")
    retries: int = 2
    concurrency: int = 8

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.gamma_low < self.gamma_high <= 1.0:
            raise ConfigError(
                f"need 0 <= gamma_low < gamma_high <= 1, got "
                f"({self.gamma_low}, {self.gamma_high})"
            )
        bad = set(self.expand) - {"many", "medium", "few"}
        if bad:
            raise ConfigError(f"unknown split tags in expand: {sorted(bad)}")
        if not self.expand:
            raise ConfigError("expand must name at least one split")
        if self.retries < 0 or self.concurrency < 1:
            raise ConfigError("retries must be >= 0 and concurrency >= 1")

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "gamma_low": self.gamma_low,
            "gamma_high": self.gamma_high,
            "expand": list(self.expand),
            "retries": self.retries,
            "concurrency": self.concurrency,
        }


def _expansion_targets(space: LabelSpace, dataset: FeatureDataset, cfg) -> list[int]:
    from .metrics import assign_splits

    counts = dataset.class_counts(space.num_target)
    if (counts < 1).any():
        missing = np.flatnonzero(counts < 1).tolist()
        raise DataError(f"target classes {missing} have no training samples")
    tags = assign_splits(ClassStats(counts)).tags
    return [c for c in range(space.num_target) if tags[c] in cfg.expand]


def curate(
    space: LabelSpace,
    dataset: FeatureDataset,
    client: LLMClient,
    retriever: Retriever,
    cfg: CurationConfig | None = None,
) -> tuple[FeatureDataset, LabelSpace, dict]:
    """Run the full pipeline for every class in the expansion splits.

    Per target: prompt -> query -> leak filter -> retrieve -> caption and
    similarity filters. Returns the curated auxiliary dataset, the label
    space grown by one auxiliary class per surviving neighbor name, and a
    report with per-stage counts. Targets whose candidates all get filtered
    are recorded in the report, not fatal.
    """
    cfg = cfg or CurationConfig()
    if space.num_auxiliary:
        raise ConfigError("curate expects a closed-set label space (K = 0)")
    if space.class_names is None:
        raise ConfigError("curation needs class names on the label space")
    missing = [c for c in range(space.num_target) if c not in space.class_names]
    if missing:
        raise ConfigError(f"label space lacks names for targets {missing}")
    dataset.validate_against(space)

    targets = _expansion_targets(space, dataset, cfg)
    all_names = [space.class_names[c] for c in range(space.num_target)]

    def stage_one(tid: int):
        # network-bound part: one LLM query, then one retrieval per name
        name = space.class_names[tid]
        proposed = query_neighbors(client, name, cfg.k, cfg.retries)
        survivors = filter_leaks(proposed, all_names)
        fetched = [(n, retriever.retrieve(n, tid)) for n in survivors]
        return tid, len(proposed), survivors, fetched

    if cfg.concurrency > 1 and len(targets) > 1:
        with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
            stage = list(pool.map(stage_one, targets))
    else:
        stage = [stage_one(t) for t in targets]

    # everything after this point is pure and runs in target-id order
    feats: list[np.ndarray] = []
    labels: list[int] = []
    ids: list[str] = []
    pairs: list[tuple[int, int]] = []
    aux_names: dict[int, str] = {}
    per_target: dict[str, dict] = {}
    empty: list[int] = []
    warnings_: list[str] = []
    next_id = space.num_target

    for tid, n_proposed, survivors, fetched in sorted(stage):
        proto = {tid: compute_prototype(dataset, tid)}
        rej_counts = {"caption": 0, "similarity-low": 0, "similarity-high": 0}
        n_retrieved = 0
        n_kept = 0
        for name, cands in fetched:
            n_retrieved += len(cands)
            kept, rejected = filter_candidates(
                cands, proto, cfg.gamma_low, cfg.gamma_high
            )
            for _, reason in rejected:
                rej_counts[reason] += 1
            if not kept:
                continue
            aux_id = next_id
            next_id += 1
            pairs.append((aux_id, tid))
            aux_names[aux_id] = name
            for cand in kept:
                feats.append(cand.feature)
                labels.append(aux_id)
                ids.append(cand.image_ref)
            n_kept += len(kept)
        per_target[str(tid)] = {
            "class_name": space.class_names[tid],
            "proposed": n_proposed,
            "after_leak_filter": len(survivors),
            "retrieved": n_retrieved,
            "kept": n_kept,
            "rejected": rej_counts,
        }
        if n_kept == 0:
            empty.append(tid)

    if not feats:
        warnings_.append("no candidates survived curation; auxiliary set is empty")
        aux = FeatureDataset(
            features=np.zeros((0, dataset.feature_dim)),
            labels=np.zeros(0, dtype=np.int64),
            provenance="ingested",
            ids=(),
        )
        merged = space
    else:
        dims = {f.shape for f in feats}
        if len(dims) != 1:
            raise DataError(f"candidate feature dims differ: {sorted(dims)}")
        aux = FeatureDataset(
            features=np.stack(feats),
            labels=np.asarray(labels, dtype=np.int64),
            provenance="ingested",
            ids=tuple(ids),
        )
        if aux.feature_dim != dataset.feature_dim:
            raise DataError(
                f"candidate feature dim {aux.feature_dim} does not match "
                f"dataset dim {dataset.feature_dim}"
            )
        merged = LabelSpace(
            num_target=space.num_target,
            num_auxiliary=len(pairs),
            neighbor_of=dict(pairs),
            class_names={**space.class_names, **aux_names},
        )

    report = {
        "config": cfg.to_json(),
        "expanded_targets": targets,
        "per_target": per_target,
        "empty_targets": empty,
        "num_aux_classes": merged.num_auxiliary,
        "total_kept_samples": len(aux),
        "warnings": warnings_,
    }
    return aux, merged, report
