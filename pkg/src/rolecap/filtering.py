"""Relevance scoring and budgeted, diversity-preserving selection.

Scoring asks an endpoint to rate each (image, caption, role) triple on a
1-100 scale. Selection standardizes scores within each role group, then
runs a cap-and-refill pass: cap captions per image, prune to budget with a
per-image floor, or refill coverage and quota when under budget.
"""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .captions import CaptionRecord, ImageItem
from .gateway import ChatTurn, ImagePayload, SamplingParams, default_generation_params
from .roles import RoleSet, RoleSpec

__all__ = [
    "ScoredRecord",
    "FilterConfig",
    "NormalizedRecord",
    "SelectionResult",
    "FILTER_PROMPT_TEMPLATE",
    "render_filter_prompt",
    "parse_score_response",
    "score_pairs",
    "normalize_scores",
    "selection_sort_key",
    "normalized_to_record",
    "normalized_from_record",
    "cap_and_refill",
    "selection_stats",
]


FILTER_PROMPT_TEMPLATE = (
    "Here is Text Caption from a {agent role}, which role is {agent role prompt}\n"
    "Text Caption: {caption}\n"
    "\n"
    "Please evaluate if the provided text caption accurately represents the "
    "main features and objects of the image. The caption doesn't need to "
    "detail every aspect of the image, but it should capture its primary "
    "theme. Rate the overall quality of the text caption's match to the "
    "image on a scale of 1-100, considering the criteria mentioned. A higher "
    "score indicates higher level of image text matching.\n"
    "\n"
    "Please first output a single line containing only one value indicating "
    "the score. In the subsequent line, please provide a brief explanation "
    "of your evaluation."
)


def render_filter_prompt(role: RoleSpec, caption: str) -> str:
    return (
        FILTER_PROMPT_TEMPLATE.replace("{agent role}", role.agent_role)
        .replace("{agent role prompt}", role.agent_role_prompt)
        .replace("{caption}", caption)
    )


@dataclass(frozen=True)
class ScoredRecord:
    record: CaptionRecord
    score: int | None
    rationale: str
    score_status: str  # "ok" | "parse_failed"

    def __post_init__(self) -> None:
        if self.score_status not in ("ok", "parse_failed"):
            raise ValueError(f"bad score_status {self.score_status!r}")
        if (self.score is None) == (self.score_status == "ok"):
            raise ValueError("score must be present exactly when score_status is ok")

    def to_record(self) -> dict:
        return {
            "schema": "scored.v1",
            "record": self.record.to_record(),
            "score": self.score,
            "rationale": self.rationale,
            "score_status": self.score_status,
        }

    @classmethod
    def from_record(cls, document: dict) -> "ScoredRecord":
        return cls(
            record=CaptionRecord.from_record(document["record"]),
            score=document["score"],
            rationale=document["rationale"],
            score_status=document["score_status"],
        )


_INT_TOKEN = re.compile(r"[-+]?\d+")


def parse_score_response(response: str) -> tuple[int, str] | None:
    """Extract (score, rationale) from a scorer reply, or None on failure.

    The score is the first integer token on the first non-empty line,
    clamped to [0, 100]; the rationale is everything after that line.
    """
    lines = response.splitlines()
    for index, line in enumerate(lines):
        if line.strip():
            match = _INT_TOKEN.search(line)
            if match is None:
                return None
            score = max(0, min(100, int(match.group())))
            rationale = "\n".join(lines[index + 1 :]).strip()
            return score, rationale
    return None


def score_pairs(
    records: Sequence[CaptionRecord],
    roles: RoleSet,
    gateway,
    images: Sequence[ImageItem],
    params: SamplingParams | None = None,
    *,
    workers: int = 1,
) -> list[ScoredRecord]:
    """Score each record with one endpoint call; results keep input order.

    A reply that does not parse is retried once; a second failure (or an
    endpoint failure) yields score_status=parse_failed. Nothing is dropped.
    """
    if params is None:
        params = default_generation_params()
    by_id = {image.image_id: image for image in images}
    for record in records:
        roles.get(record.role_name)  # raises KeyError for unresolvable roles
        if record.image_id not in by_id:
            raise KeyError(f"no image supplied for image_id {record.image_id}")

    def score_one(record: CaptionRecord) -> ScoredRecord:
        role = roles.get(record.role_name)
        image = by_id[record.image_id]
        turn = ChatTurn(
            role="user",
            text=render_filter_prompt(role, record.caption),
            image=ImagePayload(data=image.data, media_type=image.media_type),
        )
        last_response = ""
        for _attempt in range(2):  # one retry on parse failure
            try:
                last_response = gateway.complete([turn], params)
            except Exception as exc:
                return ScoredRecord(record, None, f"endpoint failure: {exc}", "parse_failed")
            parsed = parse_score_response(last_response)
            if parsed is not None:
                return ScoredRecord(record, parsed[0], parsed[1], "ok")
        return ScoredRecord(record, None, f"unparseable response: {last_response}", "parse_failed")

    if workers <= 1:
        return [score_one(r) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(score_one, records))


@dataclass(frozen=True)
class FilterConfig:
    k_max: int
    k_min: int
    target_pairs: int
    dedup: bool = True
    epsilon: float = 1e-8
    prefilter_fraction: float = 0.5

    def __post_init__(self) -> None:
        if not (1 <= self.k_min <= self.k_max):
            raise ValueError(f"need 1 <= k_min <= k_max, got k_min={self.k_min} k_max={self.k_max}")
        if self.target_pairs < 1:
            raise ValueError(f"target_pairs must be >= 1, got {self.target_pairs}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not (0 < self.prefilter_fraction <= 1):
            raise ValueError(f"prefilter_fraction must be in (0, 1], got {self.prefilter_fraction}")


@dataclass(frozen=True)
class NormalizedRecord:
    scored: ScoredRecord
    z: float


def _role_statistics(records: Sequence[ScoredRecord]) -> dict[str, tuple[float, float]]:
    groups: dict[str, list[int]] = {}
    for sr in records:
        groups.setdefault(sr.record.role_name, []).append(sr.score)
    stats = {}
    for role_name, xs in groups.items():
        mean = sum(xs) / len(xs)
        variance = sum((x - mean) ** 2 for x in xs) / len(xs)  # population variance
        stats[role_name] = (mean, math.sqrt(variance))
    return stats


def normalize_scores(records: Sequence[ScoredRecord], epsilon: float) -> list[NormalizedRecord]:
    """Standardize scores within each role group: z = (x - mu_r)/(sigma_r + epsilon).

    sigma_r is the population standard deviation. All records must carry
    ok scores; empty input yields empty output.
    """
    for sr in records:
        if sr.score_status != "ok":
            raise ValueError("normalize_scores requires score_status=ok on every record")
    stats = _role_statistics(records)
    return [
        NormalizedRecord(sr, (sr.score - stats[sr.record.role_name][0]) / (stats[sr.record.role_name][1] + epsilon))
        for sr in records
    ]


def selection_sort_key(nr: NormalizedRecord):
    """Total order used by every sorting step: best first, no ties possible."""
    return (
        -nr.z,
        -nr.scored.score,
        nr.scored.record.image_id,
        nr.scored.record.role_name,
        nr.scored.record.caption,
    )


def _raw_sort_key(sr: ScoredRecord):
    return (-sr.score, sr.record.image_id, sr.record.role_name, sr.record.caption)


def normalized_to_record(nr: NormalizedRecord) -> dict:
    document = nr.scored.to_record()
    document["schema"] = "filtered.v1"
    document["z"] = nr.z
    return document


def normalized_from_record(document: dict) -> NormalizedRecord:
    body = dict(document)
    z = body.pop("z")
    body["schema"] = "scored.v1"
    return NormalizedRecord(scored=ScoredRecord.from_record(body), z=z)


@dataclass(frozen=True)
class SelectionResult:
    kept: tuple[NormalizedRecord, ...]
    stats: dict


def cap_and_refill(pool: Sequence[ScoredRecord], cfg: FilterConfig) -> SelectionResult:
    """Budgeted role-aware selection over a scored pool.

    Stages: (1) per role keep the top prefilter_fraction by raw score;
    (2) optional (image, caption) dedup keeping the best-scored row;
    (3) role-wise z-normalization fitted on the surviving rows;
    (4) global sort by z descending; (5) per image keep up to k_max;
    (6) over budget: prune, keeping at least k_min per surviving image,
    filling the remaining quota by descending score; (7) under budget: add
    the top-1 caption for images the prefilter dropped entirely, then refill
    from the surviving pool, respecting k_max.

    The k_min floor takes precedence over the budget: when floors alone
    exceed target_pairs the result overshoots and stats carries a
    constraint_note instead of raising. All ordering uses one total order
    (z desc, raw score desc, image_id, role_name, caption), so the result
    is invariant under input permutation. Records with score_status
    parse_failed are excluded up front and counted.
    """
    scored_ok = [sr for sr in pool if sr.score_status == "ok"]
    excluded = len(pool) - len(scored_ok)
    notes: list[str] = []

    # (1) per-role raw-score prefilter; ceil keeps nonempty groups nonempty
    by_role: dict[str, list[ScoredRecord]] = {}
    for sr in scored_ok:
        by_role.setdefault(sr.record.role_name, []).append(sr)
    survivors: list[ScoredRecord] = []
    for role_name in sorted(by_role):
        group = sorted(by_role[role_name], key=_raw_sort_key)
        keep_n = math.ceil(cfg.prefilter_fraction * len(group))
        survivors.extend(group[:keep_n])
    prefilter_dropped = len(scored_ok) - len(survivors)

    # (2) dedup on (image_id, caption), best-scored row wins
    dedup_removed = 0
    if cfg.dedup:
        seen: set[tuple[str, str]] = set()
        deduped = []
        for sr in sorted(survivors, key=_raw_sort_key):
            key = (sr.record.image_id, sr.record.caption)
            if key in seen:
                dedup_removed += 1
                continue
            seen.add(key)
            deduped.append(sr)
        survivors = deduped

    if not survivors:
        empty_stats = {
            "unique_images": 0,
            "pairs_kept": 0,
            "captions_per_image_mean": 0.0,
            "per_role_kept_counts": {},
            "branch": "empty",
            "excluded_parse_failed": excluded,
            "prefilter_dropped": prefilter_dropped,
            "dedup_removed": dedup_removed,
            "notes": ["empty candidate pool"],
        }
        return SelectionResult(kept=(), stats=empty_stats)

    # (3) role-wise normalization fitted on survivors; the same statistics
    # are applied to coverage rows pulled from outside the surviving set so
    # their z values stay comparable.
    role_stats = _role_statistics(survivors)

    def z_of(sr: ScoredRecord) -> float:
        mean, sigma = role_stats.get(sr.record.role_name, (0.0, 0.0))
        return (sr.score - mean) / (sigma + cfg.epsilon)

    normalized = [NormalizedRecord(sr, z_of(sr)) for sr in survivors]

    # (4) global sort, best first
    normalized.sort(key=selection_sort_key)

    # (5) per image keep up to k_max best
    per_image: dict[str, list[NormalizedRecord]] = {}
    for nr in normalized:
        per_image.setdefault(nr.scored.record.image_id, []).append(nr)
    kept: list[NormalizedRecord] = []
    overflow: list[NormalizedRecord] = []  # capped out in step 5; refill candidates
    for image_id, rows in per_image.items():
        kept.extend(rows[: cfg.k_max])
        overflow.extend(rows[cfg.k_max :])

    if len(kept) > cfg.target_pairs:
        # (6) prune: per-image floors first, then best rows fill the quota
        branch = "over_budget"
        floors: list[NormalizedRecord] = []
        rest: list[NormalizedRecord] = []
        for image_id, rows in per_image.items():
            capped = rows[: cfg.k_max]
            floor_n = min(cfg.k_min, len(capped))
            floors.extend(capped[:floor_n])
            rest.extend(capped[floor_n:])
        if len(floors) >= cfg.target_pairs:
            kept = floors
            if len(floors) > cfg.target_pairs:
                notes.append(
                    f"k_min floor needs {len(floors)} pairs, exceeding target_pairs="
                    f"{cfg.target_pairs}; floor takes precedence"
                )
        else:
            rest.sort(key=selection_sort_key)
            kept = floors + rest[: cfg.target_pairs - len(floors)]
    elif len(kept) < cfg.target_pairs:
        # (7) refill: cover images the prefilter dropped, then spend the
        # remaining quota on capped-out survivors.
        branch = "under_budget"
        covered = {nr.scored.record.image_id for nr in kept}
        uncovered_best: dict[str, NormalizedRecord] = {}
        for sr in scored_ok:
            if sr.record.image_id in covered:
                continue
            candidate = NormalizedRecord(sr, z_of(sr))
            best = uncovered_best.get(sr.record.image_id)
            if best is None or selection_sort_key(candidate) < selection_sort_key(best):
                uncovered_best[sr.record.image_id] = candidate
        for candidate in sorted(uncovered_best.values(), key=selection_sort_key):
            if len(kept) >= cfg.target_pairs:
                break
            kept.append(candidate)
            covered.add(candidate.scored.record.image_id)
        if len(kept) < cfg.target_pairs:
            counts: dict[str, int] = {}
            for nr in kept:
                counts[nr.scored.record.image_id] = counts.get(nr.scored.record.image_id, 0) + 1
            for candidate in sorted(overflow, key=selection_sort_key):
                if len(kept) >= cfg.target_pairs:
                    break
                image_id = candidate.scored.record.image_id
                if counts.get(image_id, 0) >= cfg.k_max:
                    continue
                kept.append(candidate)
                counts[image_id] = counts.get(image_id, 0) + 1
        if len(kept) < cfg.target_pairs:
            notes.append(
                f"candidate pool exhausted at {len(kept)} pairs, under target_pairs="
                f"{cfg.target_pairs}"
            )
    else:
        branch = "exact"

    kept.sort(key=selection_sort_key)

    per_image_kept: dict[str, int] = {}
    per_role_kept: dict[str, int] = {}
    for nr in kept:
        per_image_kept[nr.scored.record.image_id] = per_image_kept.get(nr.scored.record.image_id, 0) + 1
        per_role_kept[nr.scored.record.role_name] = per_role_kept.get(nr.scored.record.role_name, 0) + 1
    stats = {
        "unique_images": len(per_image_kept),
        "pairs_kept": len(kept),
        "captions_per_image_mean": (len(kept) / len(per_image_kept)) if per_image_kept else 0.0,
        "per_role_kept_counts": dict(sorted(per_role_kept.items())),
        "branch": branch,
        "excluded_parse_failed": excluded,
        "prefilter_dropped": prefilter_dropped,
        "dedup_removed": dedup_removed,
        "notes": notes,
    }
    return SelectionResult(kept=tuple(kept), stats=stats)


def selection_stats(result: SelectionResult) -> dict:
    """Recount a selection: images, pairs, per-role retention, score histogram."""
    kept = result.kept
    per_image: dict[str, int] = {}
    per_role: dict[str, int] = {}
    per_granularity: dict[str, int] = {}
    histogram = {f"{lo}-{lo + 9}": 0 for lo in range(0, 100, 10)}
    for nr in kept:
        record = nr.scored.record
        per_image[record.image_id] = per_image.get(record.image_id, 0) + 1
        per_role[record.role_name] = per_role.get(record.role_name, 0) + 1
        per_granularity[record.granularity] = per_granularity.get(record.granularity, 0) + 1
        bucket = min(nr.scored.score // 10, 9) * 10
        histogram[f"{bucket}-{bucket + 9}"] += 1
    return {
        "unique_images": len(per_image),
        "pairs_kept": len(kept),
        "captions_per_image_mean": (len(kept) / len(per_image)) if per_image else 0.0,
        "per_role_kept_counts": dict(sorted(per_role.items())),
        "per_granularity_kept_counts": dict(sorted(per_granularity.items())),
        "score_histogram": histogram,
        "selection_notes": list(result.stats.get("notes", [])),
    }
