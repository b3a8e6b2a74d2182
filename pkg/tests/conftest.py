"""Shared fixtures: the fixture corpus, scripted endpoint plumbing, and
deterministic canned captions/scores for end-to-end runs."""

from __future__ import annotations

import glob
import os

import pytest

from rolecap.captions import (
    GRANULARITIES,
    ImageItem,
    load_corpus,
    render_caption_prompt,
)
from rolecap.filtering import render_filter_prompt
from rolecap.gateway import (
    ChatTurn,
    EndpointConfig,
    ImagePayload,
    build_request_body,
    default_generation_params,
)
from rolecap.mockserver import MockEndpoint
from rolecap.roles import RoleSet, builtin_roles

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "fixtures")
MOCK_MODEL = "mock-model"

_COLORS = ["crimson", "cobalt", "meadow", "amber", "slate"]
_OBJECTS = ["square", "circle", "field", "lattice", "ribbon"]


def canned_caption(image: ImageItem, role_index: int, kind: str) -> str:
    """Deterministic fake caption; always passes the pre-filters.

    Word counts vary with the inputs so downstream statistics are not
    degenerate: long captions run 12-16 words, short ones 5-7.
    """
    color = _COLORS[int(image.image_id[:2], 16) % len(_COLORS)]
    noun = _OBJECTS[(int(image.image_id[2:4], 16) + role_index) % len(_OBJECTS)]
    if kind == "long":
        extra = ["with", "gentle", "even", "light", "and"][: 2 + (role_index % 3)]
        words = (
            ["A", color, noun, "rendered", "in", "flat", "tones,", "described", "from",
             "viewpoint", str(role_index + 1)] + extra
        )
    else:
        words = ["Small", color, noun, "study"] + (["closeup"] * (role_index % 2)) + [
            f"v{role_index + 1}"
        ]
    return " ".join(words)


def canned_score(image: ImageItem, role_index: int, kind: str) -> int:
    """Deterministic fake relevance score spread over [35, 95]."""
    seed = int(image.image_id[4:8], 16)
    return 35 + (seed * 7 + role_index * 11 + (0 if kind == "long" else 3)) % 61


@pytest.fixture(scope="session")
def fixture_image_paths() -> list[str]:
    paths = sorted(glob.glob(os.path.join(FIXTURE_DIR, "images", "*.png")))
    assert len(paths) == 3
    return paths


@pytest.fixture(scope="session")
def corpus(fixture_image_paths) -> list[ImageItem]:
    return load_corpus(fixture_image_paths)


@pytest.fixture(scope="session")
def roles() -> RoleSet:
    return builtin_roles()


def caption_request_body(image: ImageItem, role, g, params=None) -> dict:
    if params is None:
        params = default_generation_params()
    turn = ChatTurn(
        role="user",
        text=render_caption_prompt(role, g),
        image=ImagePayload(data=image.data, media_type=image.media_type),
    )
    return build_request_body(MOCK_MODEL, [turn], params)


def score_request_body(image: ImageItem, role, caption: str, params=None) -> dict:
    if params is None:
        params = default_generation_params()
    turn = ChatTurn(
        role="user",
        text=render_filter_prompt(role, caption),
        image=ImagePayload(data=image.data, media_type=image.media_type),
    )
    return build_request_body(MOCK_MODEL, [turn], params)


def script_pipeline(endpoint: MockEndpoint, corpus, roles: RoleSet) -> None:
    """Script every caption and scoring request for the full pipeline grid."""
    for image in corpus:
        for role_index, role in enumerate(roles.roles):
            for g in GRANULARITIES:
                caption = canned_caption(image, role_index, g.kind)
                endpoint.add_for_body(caption_request_body(image, role, g), caption)
                score = canned_score(image, role_index, g.kind)
                endpoint.add_for_body(
                    score_request_body(image, role, caption),
                    f"{score}\nDeterministic fixture rationale.",
                )


@pytest.fixture()
def pipeline_endpoint(corpus, roles):
    endpoint = MockEndpoint()
    script_pipeline(endpoint, corpus, roles)
    with endpoint:
        yield endpoint


def endpoint_config(endpoint: MockEndpoint, **overrides) -> EndpointConfig:
    defaults = dict(
        base_url=endpoint.base_url,
        model_name=MOCK_MODEL,
        api_key_source="",
        timeout=10.0,
        max_retries=3,
        max_concurrency=4,
    )
    defaults.update(overrides)
    return EndpointConfig(**defaults)
