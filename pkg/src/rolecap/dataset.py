"""Shard persistence with checksums, corpus statistics, and config export.

Stage outputs are immutable: a stage writes a fresh directory, shard files
land via atomic rename, and the manifest is written last so a directory
with a manifest is always complete.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from typing import Iterable, Iterator

__all__ = [
    "DatasetManifest",
    "ShardInfo",
    "ChecksumError",
    "write_shards",
    "read_shards",
    "load_manifest",
    "iter_shard_records",
    "corpus_stats",
    "TrainingConfigExport",
    "export_training_config",
    "load_training_config",
]

_STAGES = ("generated", "scored", "filtered")


class ChecksumError(ValueError):
    """A shard's bytes do not match the checksum in the manifest."""


@dataclass(frozen=True)
class ShardInfo:
    path: str  # relative to the dataset directory
    record_count: int
    checksum: str  # sha256 of the shard file bytes


@dataclass(frozen=True)
class DatasetManifest:
    shards: tuple[ShardInfo, ...]
    stage: str
    config_fingerprint: str = ""

    def __post_init__(self) -> None:
        if self.stage not in _STAGES:
            raise ValueError(f"stage must be one of {_STAGES}, got {self.stage!r}")

    @property
    def total_records(self) -> int:
        return sum(s.record_count for s in self.shards)

    def to_json(self) -> dict:
        return {
            "schema": "dataset_manifest.v1",
            "stage": self.stage,
            "config_fingerprint": self.config_fingerprint,
            "shards": [
                {"path": s.path, "record_count": s.record_count, "checksum": s.checksum}
                for s in self.shards
            ],
        }

    @classmethod
    def from_json(cls, document: dict) -> "DatasetManifest":
        return cls(
            shards=tuple(
                ShardInfo(path=s["path"], record_count=s["record_count"], checksum=s["checksum"])
                for s in document["shards"]
            ),
            stage=document["stage"],
            config_fingerprint=document.get("config_fingerprint", ""),
        )


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_shards(
    records: Iterable[dict],
    directory: str,
    shard_size: int,
    *,
    stage: str,
    config_fingerprint: str = "",
) -> DatasetManifest:
    """Write records as newline-delimited shard files plus a manifest.

    Refuses to write into a directory that already holds a manifest
    (stages never overwrite their outputs). On error, partial files are
    removed and nothing committed.
    """
    if shard_size < 1:
        raise ValueError(f"shard_size must be >= 1, got {shard_size}")
    manifest_path = os.path.join(directory, "manifest.json")
    if os.path.exists(manifest_path):
        raise FileExistsError(f"{directory} already holds a completed stage output")
    os.makedirs(directory, exist_ok=True)

    written: list[str] = []
    shards: list[ShardInfo] = []
    try:
        chunk: list[dict] = []
        index = 0

        def flush() -> None:
            nonlocal index
            if not chunk:
                return
            name = f"shard-{index:05d}.ndjson"
            final = os.path.join(directory, name)
            fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".ndjson")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                for record in chunk:
                    fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True))
                    fh.write("\n")
            os.replace(tmp, final)
            written.append(final)
            shards.append(
                ShardInfo(path=name, record_count=len(chunk), checksum=_sha256_file(final))
            )
            index += 1
            chunk.clear()

        for record in records:
            chunk.append(record)
            if len(chunk) >= shard_size:
                flush()
        flush()

        manifest = DatasetManifest(
            shards=tuple(shards), stage=stage, config_fingerprint=config_fingerprint
        )
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(manifest.to_json(), fh, ensure_ascii=False, sort_keys=True, indent=2)
            fh.write("\n")
        os.replace(tmp, manifest_path)
        return manifest
    except BaseException:
        for path in written:
            if os.path.exists(path):
                os.unlink(path)
        raise


def load_manifest(directory: str) -> DatasetManifest:
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        return DatasetManifest.from_json(json.load(fh))


def iter_shard_records(directory: str, *, verify: bool = True) -> Iterator[dict]:
    """Stream records from a completed stage directory, checking checksums."""
    manifest = load_manifest(directory)
    for shard in manifest.shards:
        path = os.path.join(directory, shard.path)
        if verify:
            actual = _sha256_file(path)
            if actual != shard.checksum:
                raise ChecksumError(
                    f"{shard.path}: checksum {actual} does not match manifest {shard.checksum}"
                )
        count = 0
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    count += 1
                    yield json.loads(line)
        if count != shard.record_count:
            raise ChecksumError(
                f"{shard.path}: {count} records on disk, manifest says {shard.record_count}"
            )


def read_shards(directory: str, *, verify: bool = True) -> list[dict]:
    return list(iter_shard_records(directory, verify=verify))


def _caption_view(record: dict) -> dict:
    # caption records are flat; scored/filtered records nest them
    return record["record"] if "record" in record else record


def corpus_stats(directory: str) -> dict:
    """One-pass statistics over any stage directory.

    Reports per-granularity record counts and mean word counts, unique
    images, mean captions per image, and per-role record counts.
    """
    total = 0
    images: set[str] = set()
    per_role: dict[str, int] = {}
    per_granularity_count: dict[str, int] = {}
    per_granularity_words: dict[str, int] = {}
    per_image_count: dict[str, int] = {}
    for raw in iter_shard_records(directory):
        record = _caption_view(raw)
        total += 1
        images.add(record["image_id"])
        per_image_count[record["image_id"]] = per_image_count.get(record["image_id"], 0) + 1
        per_role[record["role_name"]] = per_role.get(record["role_name"], 0) + 1
        g = record["granularity"]
        per_granularity_count[g] = per_granularity_count.get(g, 0) + 1
        per_granularity_words[g] = per_granularity_words.get(g, 0) + record["word_count"]
    mean_words = {
        g: per_granularity_words[g] / per_granularity_count[g] for g in per_granularity_count
    }
    return {
        "records": total,
        "unique_images": len(images),
        "captions_per_image_mean": (total / len(images)) if images else 0.0,
        "per_role_counts": dict(sorted(per_role.items())),
        "per_granularity_counts": dict(sorted(per_granularity_count.items())),
        "per_granularity_mean_words": {g: round(v, 4) for g, v in sorted(mean_words.items())},
    }


@dataclass(frozen=True)
class TrainingConfigExport:
    """Downstream trainer settings; field values are part of the contract."""

    global_batch_size: int = 2048
    epochs: int = 6
    learning_rate: float = 1e-6
    warmup_steps: int = 200
    scheduler: str = "cosine"
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    optimizer_eps: float = 1e-8
    weight_decay: float = 1e-2
    max_text_tokens: int = 248

    def to_json(self) -> dict:
        return {
            "schema": "training_config.v1",
            "global_batch_size": self.global_batch_size,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "warmup_steps": self.warmup_steps,
            "scheduler": self.scheduler,
            "optimizer": self.optimizer,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "optimizer_eps": self.optimizer_eps,
            "weight_decay": self.weight_decay,
            "max_text_tokens": self.max_text_tokens,
        }


def export_training_config(path: str) -> TrainingConfigExport:
    """Write the trainer settings as a JSON document; returns the values."""
    config = TrainingConfigExport()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return config


def load_training_config(path: str) -> TrainingConfigExport:
    with open(path, encoding="utf-8") as fh:
        document = json.load(fh)
    document.pop("schema", None)
    return TrainingConfigExport(**document)
