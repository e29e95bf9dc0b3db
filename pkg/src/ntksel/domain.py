"""Core identifiers, pipeline configuration, and run manifests.

Numeric conventions used everywhere else in the package: kernel arithmetic
runs in float64, feature files store float32, and all deterministic
tie-breaking is lexicographic on ``(dataset_tag, index)``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

__all__ = [
    "SampleId",
    "PipelineConfig",
    "RunManifest",
    "validate_config",
    "sha256_file",
]


@dataclass(frozen=True, order=True)
class SampleId:
    """Stable identifier of one sample: ``(dataset_tag, index)``.

    Ordering is lexicographic by tag then index and is the tie-break order
    used by every ranking stage.
    """

    dataset_tag: str
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"sample index must be non-negative, got {self.index}")
        if not self.dataset_tag:
            raise ValueError("dataset_tag must be non-empty")

    def __str__(self) -> str:
        return f"{self.dataset_tag}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "SampleId":
        tag, _, idx = text.rpartition(":")
        if not tag:
            raise ValueError(f"not a sample id: {text!r}")
        return cls(tag, int(idx))


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the two-stage selection pipeline.

    Defaults follow the reference operating point: select N=9000 with a
    pre-selection pool of M=4N, K=M/4 neighbors, 8192-dimensional projected
    gradient features, and gradient sums scaled by 1e-5.
    """

    n_select: int = 9000
    preselect_size: int = 36000
    knn_k: int = 9000
    proj_dim: int = 8192
    proj_seed: int = 0
    grad_scale: float = 1e-5
    normalize_by_seq_len: bool = True

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**d)


def validate_config(cfg: PipelineConfig) -> PipelineConfig:
    """Check every config invariant; return ``cfg`` unchanged if all hold.

    Raises ConfigError naming the violated constraint.
    """
    if cfg.n_select <= 0:
        raise ConfigError(f"n_select must be positive, got {cfg.n_select}")
    if cfg.preselect_size <= 0:
        raise ConfigError(f"preselect_size must be positive, got {cfg.preselect_size}")
    if cfg.knn_k <= 0:
        raise ConfigError(f"knn_k must be positive, got {cfg.knn_k}")
    if cfg.proj_dim < 1:
        raise ConfigError(f"proj_dim must be >= 1, got {cfg.proj_dim}")
    if cfg.preselect_size < cfg.n_select:
        raise ConfigError(
            f"preselect_size < n_select ({cfg.preselect_size} < {cfg.n_select})"
        )
    if cfg.knn_k > cfg.preselect_size:
        raise ConfigError(
            f"knn_k > preselect_size ({cfg.knn_k} > {cfg.preselect_size})"
        )
    if not (cfg.proj_seed >= 0 and cfg.proj_seed < 2**64):
        raise ConfigError(f"proj_seed must fit in 64 bits, got {cfg.proj_seed}")
    if not (cfg.grad_scale > 0):
        raise ConfigError(f"grad_scale must be positive, got {cfg.grad_scale}")
    return cfg


def sha256_file(path: str | os.PathLike) -> str:
    """Lowercase hex SHA-256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _default_created_at() -> str:
    """Deterministic-by-default run timestamp.

    Honors the SOURCE_DATE_EPOCH convention so repeated runs with identical
    inputs produce byte-identical manifests; without it the timestamp is
    pinned to the epoch rather than wall clock.
    """
    import datetime

    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    dt = datetime.datetime.fromtimestamp(epoch, datetime.timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class RunManifest:
    """Record of one pipeline run: config, input sizes, and file digests."""

    config: PipelineConfig
    domain_count: int
    candidate_count: int
    feature_file_digests: list[tuple[str, str]] = field(default_factory=list)
    created_at: str = field(default_factory=_default_created_at)

    def to_json(self) -> str:
        payload = {
            "config": self.config.to_json_dict(),
            "domain_count": self.domain_count,
            "candidate_count": self.candidate_count,
            "feature_file_digests": [list(pair) for pair in self.feature_file_digests],
            "created_at": self.created_at,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        return cls(
            config=PipelineConfig.from_json_dict(d["config"]),
            domain_count=d["domain_count"],
            candidate_count=d["candidate_count"],
            feature_file_digests=[tuple(p) for p in d["feature_file_digests"]],
            created_at=d["created_at"],
        )

    def write(self, path: str | os.PathLike) -> str:
        """Write the manifest as UTF-8 JSON; returns its SHA-256."""
        data = self.to_json().encode("utf-8")
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    def verify_digests(self, base: str | os.PathLike | None = None) -> None:
        """Re-hash referenced files; raise if anything changed on disk.

        Digest paths are stored relative to the manifest's directory when
        possible (keeps reruns byte-identical across output locations), so
        pass that directory as ``base`` when verifying a loaded manifest.
        """
        root = Path(base) if base is not None else Path(".")
        for path, digest in self.feature_file_digests:
            target = path if os.path.isabs(path) else root / path
            actual = sha256_file(target)
            if actual != digest:
                raise ConfigError(f"digest mismatch for {path}: {actual} != {digest}")
