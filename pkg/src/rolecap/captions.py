"""Role-conditioned caption synthesis: prompts, pre-filters, batch runs.

A run walks the (image, role, granularity) grid in a fixed order, one
endpoint call per cell, committing progress after every cell so an
interrupted run resumes without duplicate emission.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .gateway import ChatTurn, ImagePayload, SamplingParams
from .roles import RoleSet, RoleSpec, roleset_fingerprint

__all__ = [
    "Granularity",
    "LONG",
    "SHORT",
    "GRANULARITIES",
    "granularity",
    "ImageItem",
    "CaptionRecord",
    "RunManifest",
    "CAPTION_PROMPT_TEMPLATE",
    "FORBIDDEN_TITLE_PREFIXES",
    "word_count",
    "render_caption_prompt",
    "prefilter",
    "load_corpus",
    "image_media_type",
    "deterministic_clock",
    "run_generation",
    "read_caption_records",
    "manifest_from_file",
]


@dataclass(frozen=True)
class Granularity:
    kind: str
    max_words: int
    min_words: int

    def __post_init__(self) -> None:
        if self.min_words >= self.max_words:
            raise ValueError("min_words must be < max_words")


LONG = Granularity(kind="long", max_words=150, min_words=10)
SHORT = Granularity(kind="short", max_words=30, min_words=4)
GRANULARITIES: tuple[Granularity, ...] = (LONG, SHORT)


def granularity(kind: str) -> Granularity:
    for g in GRANULARITIES:
        if g.kind == kind:
            return g
    raise ValueError(f"unknown granularity kind {kind!r}")


def word_count(caption: str) -> int:
    """Count maximal non-whitespace runs; punctuation stays attached."""
    return len(caption.split())


# The generation instruction. The wording (including "an descriptions") is
# kept exactly as the conditioned models expect it; do not "fix" it.
CAPTION_PROMPT_TEMPLATE = (
    "You are a {agent role} whose specialty is {agent speciality}. {agent role prompt}.\n"
    "You will create an descriptions ({word limit}) for the given image, "
    "from the perspective of an {agent role}, highlighting {agent speciality}.\n"
    "Output only the descriptions with no extra explanations. "
    'Do NOT use any title words such as: "Mood:","Tune:","Joyful simplicity:",'
    '"Muted Precision:","Elegant simplicity:","Muted Precision: "'
)

_WORD_LIMITS = {"long": "max 150 words", "short": "max 30 words for short caption"}

# The literal strings the instruction forbids as caption openers.
FORBIDDEN_TITLE_PREFIXES: tuple[str, ...] = (
    "Mood:",
    "Tune:",
    "Joyful simplicity:",
    "Muted Precision:",
    "Elegant simplicity:",
    "Muted Precision: ",
)


def render_caption_prompt(role: RoleSpec, g: Granularity) -> str:
    """Substitute one role and one word limit into the generation template."""
    return (
        CAPTION_PROMPT_TEMPLATE.replace("{agent role}", role.agent_role)
        .replace("{agent speciality}", role.agent_speciality)
        .replace("{agent role prompt}", role.agent_role_prompt)
        .replace("{word limit}", _WORD_LIMITS[g.kind])
    )


def prefilter(caption: str, g: Granularity) -> str:
    """Classify a raw caption: keep, discard_short, or discard_titled.

    The length check runs first, so a 2-word titled caption reports
    discard_short. Title matching is case-sensitive prefix match after
    leading-whitespace strip.
    """
    if word_count(caption) < g.min_words:
        return "discard_short"
    stripped = caption.lstrip()
    if any(stripped.startswith(prefix) for prefix in FORBIDDEN_TITLE_PREFIXES):
        return "discard_titled"
    return "keep"


@dataclass(frozen=True)
class ImageItem:
    image_id: str
    image_ref: str
    data: bytes
    media_type: str = "image/png"


_MEDIA_TYPES = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".gif": "image/gif",
    ".webp": "image/webp",
    ".bmp": "image/bmp",
}


def image_media_type(path: str) -> str:
    return _MEDIA_TYPES.get(os.path.splitext(path)[1].lower(), "application/octet-stream")


def load_corpus(paths: Iterable[str]) -> list[ImageItem]:
    """Read image files; image_id is the lowercase hex sha256 of the bytes."""
    items = []
    for path in paths:
        with open(path, "rb") as fh:
            data = fh.read()
        items.append(
            ImageItem(
                image_id=hashlib.sha256(data).hexdigest(),
                image_ref=path,
                data=data,
                media_type=image_media_type(path),
            )
        )
    return items


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    image_ref: str
    role_name: str
    granularity: str
    caption: str
    word_count: int
    created_at: str

    def to_record(self) -> dict:
        return {
            "schema": "caption.v1",
            "image_id": self.image_id,
            "image_ref": self.image_ref,
            "role_name": self.role_name,
            "granularity": self.granularity,
            "caption": self.caption,
            "word_count": self.word_count,
            "created_at": self.created_at,
        }

    @classmethod
    def from_record(cls, record: dict) -> "CaptionRecord":
        return cls(
            image_id=record["image_id"],
            image_ref=record["image_ref"],
            role_name=record["role_name"],
            granularity=record["granularity"],
            caption=record["caption"],
            word_count=record["word_count"],
            created_at=record["created_at"],
        )


@dataclass
class RunManifest:
    """Progress ledger for one generation run, committed after every cell."""

    corpus: list[dict]
    roles_fingerprint: str
    granularities: list[str]
    completed: set = field(default_factory=set)
    counts: dict = field(
        default_factory=lambda: {
            "generated": 0,
            "discarded_short": 0,
            "discarded_titled": 0,
            "failed": 0,
        }
    )

    def to_json(self) -> dict:
        return {
            "schema": "run_manifest.v1",
            "corpus": self.corpus,
            "roles_fingerprint": self.roles_fingerprint,
            "granularities": self.granularities,
            "completed": sorted(list(cell) for cell in self.completed),
            "counts": self.counts,
        }

    @classmethod
    def from_json(cls, document: dict) -> "RunManifest":
        return cls(
            corpus=document["corpus"],
            roles_fingerprint=document["roles_fingerprint"],
            granularities=document["granularities"],
            completed={tuple(cell) for cell in document["completed"]},
            counts=dict(document["counts"]),
        )


def _atomic_write_json(path: str, document: dict) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(document, fh, ensure_ascii=False, sort_keys=True, indent=2)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def deterministic_clock(seed: int) -> Callable[[int], str]:
    """Synthetic created_at stamps so seeded runs are byte-reproducible."""

    def clock(cell_ordinal: int) -> str:
        base = 946684800 + (seed % 1000000)  # 2000-01-01 UTC plus a seed offset
        return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(base + cell_ordinal))

    return clock


def _wall_clock(_cell_ordinal: int) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _cell_list(
    corpus: list[ImageItem], roles: RoleSet, granularities: tuple[Granularity, ...]
) -> list[tuple[ImageItem, RoleSpec, Granularity]]:
    # Image-major, then role order, then long before short: the fixed walk
    # order that makes manifests and resumption deterministic.
    ordered_g = [g for g in GRANULARITIES if g in granularities]
    return [(img, role, g) for img in corpus for role in roles.roles for g in ordered_g]


def _records_path(run_dir: str) -> str:
    return os.path.join(run_dir, "records.ndjson")


def _manifest_path(run_dir: str) -> str:
    return os.path.join(run_dir, "manifest.json")


def _prune_orphan_records(run_dir: str, manifest: RunManifest) -> None:
    """Drop record lines whose cell never committed (crash between writes)."""
    path = _records_path(run_dir)
    if not os.path.exists(path):
        return
    kept_lines = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            cell = (record["image_id"], record["role_name"], record["granularity"])
            if cell in manifest.completed:
                kept_lines.append(line if line.endswith("\n") else line + "\n")
    fd, tmp = tempfile.mkstemp(dir=run_dir, prefix=".tmp-", suffix=".ndjson")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.writelines(kept_lines)
    os.replace(tmp, path)


def _caption_cell(
    gateway, image: ImageItem, role: RoleSpec, g: Granularity, params: SamplingParams
) -> str:
    prompt = render_caption_prompt(role, g)
    turn = ChatTurn(
        role="user",
        text=prompt,
        image=ImagePayload(data=image.data, media_type=image.media_type),
    )
    return gateway.complete([turn], params)


def run_generation(
    corpus: list[ImageItem],
    roles: RoleSet,
    gateway,
    params: SamplingParams,
    run_dir: str,
    *,
    granularities: tuple[Granularity, ...] = GRANULARITIES,
    workers: int = 1,
    max_cells: int | None = None,
    clock: Callable[[int], str] | None = None,
) -> RunManifest:
    """Generate captions for every (image, role, granularity) cell.

    Progress commits to run_dir/manifest.json after each cell, records append
    to run_dir/records.ndjson; re-invoking with the same run_dir resumes and
    never re-emits a committed cell. ``max_cells`` bounds how many pending
    cells this invocation processes (interruption hook for tests). Endpoint
    failures (after the gateway's own retry budget) mark the cell failed and
    completed; nothing is emitted for it.

    With ``workers`` > 1, cells are dispatched concurrently but results are
    committed in cell order, so output files are identical to a serial run.
    """
    if clock is None:
        clock = _wall_clock
    os.makedirs(run_dir, exist_ok=True)
    cells = _cell_list(corpus, roles, granularities)
    fingerprint = roleset_fingerprint(roles)
    corpus_listing = [{"image_id": i.image_id, "image_ref": i.image_ref} for i in corpus]

    manifest_file = _manifest_path(run_dir)
    if os.path.exists(manifest_file):
        with open(manifest_file, encoding="utf-8") as fh:
            manifest = RunManifest.from_json(json.load(fh))
        if manifest.roles_fingerprint != fingerprint:
            raise ValueError("run_dir was started with a different role set")
        if manifest.corpus != corpus_listing:
            raise ValueError("run_dir was started with a different corpus")
        if manifest.granularities != [g.kind for g in granularities]:
            raise ValueError("run_dir was started with different granularities")
        _prune_orphan_records(run_dir, manifest)
    else:
        manifest = RunManifest(
            corpus=corpus_listing,
            roles_fingerprint=fingerprint,
            granularities=[g.kind for g in granularities],
        )
        _atomic_write_json(manifest_file, manifest.to_json())

    pending = [
        (ordinal, cell)
        for ordinal, cell in enumerate(cells)
        if (cell[0].image_id, cell[1].agent_name, cell[2].kind) not in manifest.completed
    ]
    if max_cells is not None:
        pending = pending[:max_cells]

    def process(ordinal_cell):
        ordinal, (image, role, g) = ordinal_cell
        try:
            text = _caption_cell(gateway, image, role, g, params)
            return ordinal, image, role, g, text, None
        except Exception as exc:  # gateway exhausts its own retries first
            return ordinal, image, role, g, None, exc

    def commit(result) -> None:
        ordinal, image, role, g, text, error = result
        cell_key = (image.image_id, role.agent_name, g.kind)
        if error is not None:
            manifest.counts["failed"] += 1
        else:
            verdict = prefilter(text, g)
            if verdict == "keep":
                record = CaptionRecord(
                    image_id=image.image_id,
                    image_ref=image.image_ref,
                    role_name=role.agent_name,
                    granularity=g.kind,
                    caption=text,
                    word_count=word_count(text),
                    created_at=clock(ordinal),
                )
                with open(_records_path(run_dir), "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record.to_record(), ensure_ascii=False, sort_keys=True))
                    fh.write("\n")
                manifest.counts["generated"] += 1
            elif verdict == "discard_short":
                manifest.counts["discarded_short"] += 1
            else:
                manifest.counts["discarded_titled"] += 1
        manifest.completed.add(cell_key)
        _atomic_write_json(manifest_file, manifest.to_json())

    if workers <= 1:
        for item in pending:
            commit(process(item))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # futures consumed in submission order: commits stay in cell order
            for future in [pool.submit(process, item) for item in pending]:
                commit(future.result())

    return manifest


def read_caption_records(path: str) -> list[CaptionRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(CaptionRecord.from_record(json.loads(line)))
    return records


def manifest_from_file(run_dir: str) -> RunManifest:
    with open(_manifest_path(run_dir), encoding="utf-8") as fh:
        return RunManifest.from_json(json.load(fh))
