"""Expert role registry: builtin personas, role files, and two-round LLM generation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

__all__ = [
    "RoleSpec",
    "RoleSet",
    "RoleValidationError",
    "RoleExtractionError",
    "builtin_roles",
    "load_roles",
    "write_roles",
    "generate_roles",
    "roleset_fingerprint",
    "ROLE_ROUND1_PROMPT",
    "ROLE_ROUND2_PROMPT",
]

_REQUIRED_KEYS = ("agent_name", "agent_role", "agent_speciality", "agent_role_prompt")


class RoleValidationError(ValueError):
    """A role record violates the registry invariants."""


class RoleExtractionError(ValueError):
    """No well-formed role list could be extracted from an endpoint response.

    The offending response text is kept on ``raw_response`` for inspection.
    """

    def __init__(self, message: str, raw_response: str) -> None:
        super().__init__(message)
        self.raw_response = raw_response


@dataclass(frozen=True)
class RoleSpec:
    """One expert persona; the unit of perspective conditioning.

    ``provider_type`` and ``model_name`` are carried for record-format
    fidelity only; routing is the gateway's business. Unknown keys from a
    role file are preserved in ``extra`` so files round-trip unmodified.
    """

    agent_name: str
    agent_role: str
    agent_speciality: str
    agent_role_prompt: str
    provider_type: str = ""
    model_name: str = ""
    extra: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        record = {
            "type": self.provider_type,
            "model_name": self.model_name,
            "agent_name": self.agent_name,
            "agent_role": self.agent_role,
            "agent_speciality": self.agent_speciality,
            "agent_role_prompt": self.agent_role_prompt,
        }
        record.update(self.extra)
        return record

    @classmethod
    def from_record(cls, record: Any) -> "RoleSpec":
        if not isinstance(record, dict):
            raise RoleValidationError(f"role record must be an object, got {type(record).__name__}")
        for key in _REQUIRED_KEYS:
            value = record.get(key)
            if not isinstance(value, str) or not value.strip():
                raise RoleValidationError(f"role record field {key!r} is missing or empty")
        known = set(_REQUIRED_KEYS) | {"type", "model_name"}
        extra = {k: v for k, v in record.items() if k not in known}
        return cls(
            agent_name=record["agent_name"],
            agent_role=record["agent_role"],
            agent_speciality=record["agent_speciality"],
            agent_role_prompt=record["agent_role_prompt"],
            provider_type=str(record.get("type", "")),
            model_name=str(record.get("model_name", "")),
            extra=extra,
        )


@dataclass(frozen=True)
class RoleSet:
    """An ordered collection of roles with their provenance."""

    roles: tuple[RoleSpec, ...]
    source: str = field(default="builtin", compare=False)

    def __post_init__(self) -> None:
        if self.source not in ("builtin", "file", "generated"):
            raise RoleValidationError(f"unknown role source {self.source!r}")
        if not self.roles:
            raise RoleValidationError("a role set needs at least one role")
        names = [r.agent_name for r in self.roles]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise RoleValidationError(f"duplicate agent_name values: {dupes}")

    def get(self, agent_name: str) -> RoleSpec:
        for role in self.roles:
            if role.agent_name == agent_name:
                return role
        raise KeyError(f"unknown role: {agent_name!r}")

    def names(self) -> tuple[str, ...]:
        return tuple(r.agent_name for r in self.roles)


# The five default personas, stored in the exact record shape role files use.
_BUILTIN_RECORDS = [
    {
        "type": "openai",
        "model_name": "gpt-3.5-turbo",
        "agent_name": "GPT Agent 1 - Observer of Details",
        "agent_role": "Observer of Details",
        "agent_speciality": "Micro-level visual recognition",
        "agent_role_prompt": "Focuses on the specific visual attributes of an image such as objects, colors, textures, shapes, and lighting conditions. Strong emphasis on capturing factual, observable details.",
    },
    {
        "type": "openai",
        "model_name": "gpt-3.5-turbo",
        "agent_name": "GPT Agent 2 - Interpreter of Context",
        "agent_role": "Interpreter of Context",
        "agent_speciality": "Semantic and situational interpretation",
        "agent_role_prompt": "Identifies the possible meaning of visual elements, interpreting human expressions, implied actions, cultural references, and the situational context of the image.",
    },
    {
        "type": "openai",
        "model_name": "gpt-3.5-turbo",
        "agent_name": "GPT Agent 3 - Compositional Analyst",
        "agent_role": "Compositional Analyst",
        "agent_speciality": "Macro-level composition analysis",
        "agent_role_prompt": "Examines the overall structure of the image, including arrangement of subjects, balance, perspective, depth, and spatial relationships. Highlights the visual organization and framing.",
    },
    {
        "type": "openai",
        "model_name": "gpt-3.5-turbo",
        "agent_name": "GPT Agent 4 - Narrative Setter",
        "agent_role": "Narrative or Scene Setter",
        "agent_speciality": "Story and situational framing",
        "agent_role_prompt": "Synthesizes observed details and context to suggest a narrative, identifying the setting, possible actions, implied storylines, and the overall communicative intent of the image.",
    },
    {
        "type": "openai",
        "model_name": "gpt-3.5-turbo",
        "agent_name": "GPT Agent 5 - Emotional Responder",
        "agent_role": "Emotional/Aesthetic Responder",
        "agent_speciality": "Mood, tone, and subjective experience",
        "agent_role_prompt": "Focuses on the image's emotional resonance and aesthetic qualities, capturing mood, atmosphere, symbolic associations, and the subjective impression it may evoke in viewers.",
    },
]

ROLE_ROUND1_PROMPT = (
    "What are some roles that are typically used in boosting precise image "
    "description, like different personas to precisely describe the image in "
    "different view."
)

ROLE_ROUND2_PROMPT = """Great, now follow this format and generate a .json file for these roles: Remain "type": "openai", "model_name": "gpt-3.5-turbo", the same. and the agent name = "GPT Agent 1 - {agent role}"

[
  {
    "type": "openai",
    "model_name": "gpt-3.5-turbo",
    "agent_name": "GPT Agent 1 - White Hat",
    "agent_role": "White Hat",
    "agent_speciality": "Information Analysis and Facts",
    "agent_role_prompt": "Focuses on available data and past information, analyzing trends and gaps in knowledge, striving for an objective viewpoint."
  },
  {
    "type": "openai",
    "model_name": "gpt-3.5-turbo",
    "agent_name": "GPT Agent 2 - Red Hat",
    "agent_role": "Red Hat",
    "agent_speciality": "Emotions and Feelings Interpretation",
    "agent_role_prompt": "Listens to and validates the emotional responses of the group, understanding the values and intuition behind reactions, without judgment or justification."
  }
]"""


def builtin_roles() -> RoleSet:
    """The five default expert personas, constant across calls."""
    return RoleSet(
        roles=tuple(RoleSpec.from_record(r) for r in _BUILTIN_RECORDS),
        source="builtin",
    )


def load_roles(path: str) -> RoleSet:
    """Parse a UTF-8 JSON role file (a list of role records) into a RoleSet.

    Raises RoleValidationError for malformed documents, missing/empty fields,
    or duplicate agent names.
    """
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise RoleValidationError(f"malformed role file {path}: {exc}") from exc
    if not isinstance(payload, list):
        raise RoleValidationError(f"role file {path} must contain a list of role records")
    roles = tuple(RoleSpec.from_record(r) for r in payload)
    return RoleSet(roles=roles, source="file")


def write_roles(role_set: RoleSet, path: str) -> None:
    """Write a RoleSet to disk in the record shape load_roles accepts."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_record() for r in role_set.roles], fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def roleset_fingerprint(role_set: RoleSet) -> str:
    """Stable hex digest of a role set's content, for run manifests."""
    import hashlib

    canonical = json.dumps(
        [r.to_record() for r in role_set.roles], sort_keys=True, ensure_ascii=False
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _strip_code_fences(text: str) -> str:
    return "\n".join(line for line in text.splitlines() if not line.lstrip().startswith("```"))


def extract_role_list(response: str) -> tuple[RoleSpec, ...]:
    """Pull the first balanced bracketed block that validates as a role list.

    Code-fence markers are stripped first; surrounding prose is ignored.
    """
    cleaned = _strip_code_fences(response)
    decoder = json.JSONDecoder()
    start = cleaned.find("[")
    while start != -1:
        try:
            candidate, _ = decoder.raw_decode(cleaned[start:])
        except json.JSONDecodeError:
            candidate = None
        if isinstance(candidate, list) and candidate:
            try:
                return tuple(RoleSpec.from_record(r) for r in candidate)
            except RoleValidationError:
                pass
        start = cleaned.find("[", start + 1)
    raise RoleExtractionError("no well-formed role list found in response", response)


def generate_roles(gateway, params=None) -> RoleSet:
    """Run the two-round role-design conversation against a chat endpoint.

    Round 1 asks for persona ideas; round 2 asks for the structured record
    list, which is extracted from the reply. Endpoint and extraction failures
    carry the raw response for inspection.
    """
    from .gateway import ChatTurn, default_generation_params

    if params is None:
        params = default_generation_params()
    turns = [ChatTurn(role="user", text=ROLE_ROUND1_PROMPT)]
    round1 = gateway.complete(turns, params)
    turns.append(ChatTurn(role="assistant", text=round1))
    turns.append(ChatTurn(role="user", text=ROLE_ROUND2_PROMPT))
    round2 = gateway.complete(turns, params)
    roles = extract_role_list(round2)
    return RoleSet(roles=roles, source="generated")
