import json

import pytest

from rolecap.gateway import ChatGateway
from rolecap.mockserver import MockEndpoint
from rolecap.roles import (
    ROLE_ROUND1_PROMPT,
    ROLE_ROUND2_PROMPT,
    RoleExtractionError,
    RoleSet,
    RoleSpec,
    RoleValidationError,
    builtin_roles,
    extract_role_list,
    generate_roles,
    load_roles,
    write_roles,
)

from conftest import endpoint_config


def test_builtin_roles_names_and_fields():
    rs = builtin_roles()
    assert len(rs.roles) == 5
    assert rs.roles[0].agent_role == "Observer of Details"
    assert rs.roles[0].agent_speciality == "Micro-level visual recognition"
    assert rs.roles[2].agent_role == "Compositional Analyst"
    assert rs.roles[2].agent_speciality == "Macro-level composition analysis"
    assert rs.roles[1].agent_role == "Interpreter of Context"
    assert rs.roles[3].agent_role == "Narrative or Scene Setter"
    assert rs.roles[4].agent_role == "Emotional/Aesthetic Responder"
    names = rs.names()
    assert len(set(names)) == 5
    for role in rs.roles:
        assert role.provider_type == "openai"
        assert role.model_name == "gpt-3.5-turbo"
        assert role.agent_role_prompt.strip()


def test_builtin_roles_constant_across_calls():
    assert builtin_roles() == builtin_roles()


def test_role_prompt_texts_are_the_expected_records():
    rs = builtin_roles()
    observer = rs.get("GPT Agent 1 - Observer of Details")
    assert "objects, colors, textures, shapes, and lighting conditions" in observer.agent_role_prompt
    responder = rs.get("GPT Agent 5 - Emotional Responder")
    assert responder.agent_speciality == "Mood, tone, and subjective experience"
    assert "emotional resonance and aesthetic qualities" in responder.agent_role_prompt


def test_roundtrip_write_then_load(tmp_path):
    rs = builtin_roles()
    path = tmp_path / "roles.json"
    write_roles(rs, str(path))
    loaded = load_roles(str(path))
    assert loaded.roles == rs.roles
    assert loaded.source == "file"


def test_roundtrip_preserves_unknown_keys(tmp_path):
    records = [r.to_record() for r in builtin_roles().roles]
    records[0]["notes"] = "hand-tuned"
    path = tmp_path / "roles.json"
    path.write_text(json.dumps(records), encoding="utf-8")
    loaded = load_roles(str(path))
    assert loaded.roles[0].extra == {"notes": "hand-tuned"}
    out = tmp_path / "roles2.json"
    write_roles(loaded, str(out))
    assert json.loads(out.read_text(encoding="utf-8"))[0]["notes"] == "hand-tuned"


def test_load_rejects_malformed_document(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(RoleValidationError):
        load_roles(str(path))


def test_load_rejects_empty_field(tmp_path):
    records = [r.to_record() for r in builtin_roles().roles]
    records[2]["agent_role_prompt"] = "   "
    path = tmp_path / "roles.json"
    path.write_text(json.dumps(records), encoding="utf-8")
    with pytest.raises(RoleValidationError):
        load_roles(str(path))


def test_load_rejects_duplicate_names(tmp_path):
    records = [r.to_record() for r in builtin_roles().roles[:2]]
    records[1]["agent_name"] = records[0]["agent_name"]
    path = tmp_path / "roles.json"
    path.write_text(json.dumps(records), encoding="utf-8")
    with pytest.raises(RoleValidationError):
        load_roles(str(path))


def test_load_rejects_non_list(tmp_path):
    path = tmp_path / "roles.json"
    path.write_text(json.dumps({"agent_name": "x"}), encoding="utf-8")
    with pytest.raises(RoleValidationError):
        load_roles(str(path))


def test_extract_role_list_ignores_surrounding_prose():
    records = json.dumps([r.to_record() for r in builtin_roles().roles[:2]])
    response = f"Sure! Here are the roles you asked for:\n```json\n{records}\n```\nHope this helps."
    roles = extract_role_list(response)
    assert len(roles) == 2
    assert roles[0].agent_role == "Observer of Details"


def test_extract_role_list_skips_earlier_non_role_lists():
    records = json.dumps([r.to_record() for r in builtin_roles().roles[:1]])
    response = f"Options: [1, 2, 3]\n{records}"
    roles = extract_role_list(response)
    assert len(roles) == 1


def test_extract_role_list_failure_keeps_raw_response():
    with pytest.raises(RoleExtractionError) as info:
        extract_role_list("I cannot produce that list.")
    assert info.value.raw_response == "I cannot produce that list."


def _conversation_bodies():
    from rolecap.gateway import ChatTurn, build_request_body, default_generation_params

    params = default_generation_params()
    round1_turns = [ChatTurn(role="user", text=ROLE_ROUND1_PROMPT)]
    body1 = build_request_body("mock-model", round1_turns, params)
    reply1 = "Consider personas such as a detail observer and a context interpreter."
    round2_turns = round1_turns + [
        ChatTurn(role="assistant", text=reply1),
        ChatTurn(role="user", text=ROLE_ROUND2_PROMPT),
    ]
    body2 = build_request_body("mock-model", round2_turns, params)
    return body1, reply1, body2


def test_generate_roles_two_round_conversation():
    body1, reply1, body2 = _conversation_bodies()
    records = json.dumps([r.to_record() for r in builtin_roles().roles])
    endpoint = MockEndpoint()
    endpoint.add_for_body(body1, reply1)
    endpoint.add_for_body(body2, f"Here you go:\n{records}")
    with endpoint:
        gateway = ChatGateway(endpoint_config(endpoint))
        rs = generate_roles(gateway)
    assert rs.source == "generated"
    assert rs.roles == builtin_roles().roles
    assert len(endpoint.call_log) == 2


def test_generate_roles_extraction_error_carries_response():
    body1, reply1, body2 = _conversation_bodies()
    endpoint = MockEndpoint()
    endpoint.add_for_body(body1, reply1)
    endpoint.add_for_body(body2, "No list here, sorry.")
    with endpoint:
        gateway = ChatGateway(endpoint_config(endpoint))
        with pytest.raises(RoleExtractionError) as info:
            generate_roles(gateway)
    assert "No list here" in info.value.raw_response


def test_roleset_validation():
    role = builtin_roles().roles[0]
    with pytest.raises(RoleValidationError):
        RoleSet(roles=())
    with pytest.raises(RoleValidationError):
        RoleSet(roles=(role, role))
    with pytest.raises(RoleValidationError):
        RoleSet(roles=(role,), source="mystery")


def test_roleset_get_unknown_raises():
    with pytest.raises(KeyError):
        builtin_roles().get("GPT Agent 9 - Ghost")


def test_from_record_requires_mapping():
    with pytest.raises(RoleValidationError):
        RoleSpec.from_record(["not", "a", "dict"])
