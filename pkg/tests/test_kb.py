import dataclasses
import json

import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from confrepair.kb import (
    KbInconsistent, KbSchemaError, candidate_attributes, kb_from_dict, load_kb, normalize_value, render,
)
from confrepair.xmlmodel import AttrName, parse_document

from conftest import FIXTURES, fixture_paths


def test_default_kb_foreground_introduced_at_23(kb):
    assert kb.lookup("ImageView", "android:foreground").introduced_level == 23


def test_default_kb_covers_named_attributes(kb):
    for tag, name in [("ImageView", "android:foreground"), ("EditText", "android:gravity"),
                      ("SeekBar", "android:layout_height"), ("TextView", "android:drawableTint"),
                      ("ImageButton", "android:background"), ("ImageView", "android:src"),
                      ("ImageView", "app:srcCompat")]:
        assert kb.lookup(tag, name) is not None, (tag, name)


def test_foreground_on_framelayout_works_everywhere(kb):
    assert kb.lookup("FrameLayout", "android:foreground").introduced_level == kb.min_level


def test_empty_kb_knows_nothing():
    empty = kb_from_dict({})
    assert empty.lookup("ImageView", "android:foreground") is None
    assert not empty.is_registered("android:foreground")
    assert candidate_attributes("android:gravity", empty) == []


def test_candidate_rule_to_undeclared_attribute():
    with pytest.raises(KbInconsistent):
        kb_from_dict({"candidates": {"android:gravity": ["android:top"]}})


@pytest.mark.parametrize("data, error", [
    ([], KbSchemaError),
    ({"schema": "other"}, KbSchemaError),
    ({"version": 99}, KbSchemaError),
    ({"elements": []}, KbSchemaError),
    ({"attributes": [{"domain": {}}]}, KbSchemaError),
    ({"attributes": [{"name": "a", "domain": {"kind": "colour"}}]}, KbSchemaError),
    ({"elements": {"A": {"parent": "Missing"}}}, KbInconsistent),
    ({"levels": {"min": 25, "max": 22}}, KbInconsistent),
    ({"attributes": [{"name": "a", "introduced": 23, "effects": [{"field": "f", "from": 22}]}]}, KbInconsistent),
    ({"attributes": [{"name": "a", "introduced": 25, "removed": 23}]}, KbInconsistent),
    ({"attributes": [{"name": "a", "effects": [{"field": "f", "rule": "guess"}]}]}, KbInconsistent),
    ({"attributes": [{"name": "a", "applies_to": ["Nope"]}]}, KbInconsistent),
    ({"attributes": [{"name": "a"}, {"name": "a"}]}, KbInconsistent),
])
def test_invalid_kb_data(data, error):
    with pytest.raises(error):
        kb_from_dict(data)


def test_load_kb_errors(tmp_path):
    with pytest.raises(KbSchemaError):
        load_kb(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(KbSchemaError):
        load_kb(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"schema": "confrepair-kb", "version": 1}))
    assert load_kb(good).specs == {}


def test_candidate_attributes(kb):
    assert AttrName.parse("android:top") in candidate_attributes("android:gravity", kb)
    assert AttrName.parse("app:srcCompat") in candidate_attributes("android:src", kb)
    assert candidate_attributes("android:orientation", kb) == []


def test_foreground_manifests_between_22_and_23(kb):
    doc = parse_document((FIXTURES / "music_player_controls.xml").read_bytes())
    key = ("id/play_pause_button", "mForeground")
    assert render(doc, 22, kb).get(key) is None
    assert render(doc, 23, kb).get(key) == "?android:attr/actionBarItemBackground"


def test_render_is_deterministic(kb):
    for path in fixture_paths():
        a = parse_document(path.read_bytes())
        b = parse_document(path.read_bytes())
        for level in (21, 22, 23, 31):
            assert render(a, level, kb) == render(b, level, kb)


def test_fabricated_attribute_is_attribute_crash(kb):
    doc = parse_document('<TextView android:drawableTintCompat="@color/accent"/>')
    state = render(doc, 22, kb)
    assert state.crashed and state.crash_kinds() == {"attribute"}
    assert "drawableTintCompat" in state.crash_reason


def test_missing_resource_is_resource_crash(kb):
    state = render(parse_document('<ImageView app:srcCompat="@drawable/does_not_exist"/>'), 31, kb)
    assert state.crash_kinds() == {"resource"}


def test_unknown_class_crashes(kb):
    assert render(parse_document("<com.example.Fancy/>"), 31, kb).crash_kinds() == {"class"}


def test_registered_attribute_without_effects_is_inert(kb):
    a = render(parse_document('<TextView android:text="@string/label_volume"/>'), 31, kb)
    b = render(parse_document("<TextView/>"), 31, kb)
    assert not a.crashed and a == b


def test_attribute_below_introduction_contributes_nothing(kb):
    with_tint = parse_document('<TextView android:drawableTint="@color/accent"/>')
    assert render(with_tint, 22, kb) == render(parse_document("<TextView/>"), 22, kb)


def test_removed_attribute_stops_working(kb):
    doc = parse_document('<SeekBar android:splitTrack="true"/>')
    assert render(doc, 22, kb).get(("SeekBar[0]", "mSplitTrack")) == "true"
    assert render(doc, 23, kb).get(("SeekBar[0]", "mSplitTrack")) == "false"


def test_level_out_of_bounds(kb):
    with pytest.raises(ValueError):
        render(parse_document("<View/>"), 20, kb)
    with pytest.raises(ValueError):
        render(parse_document("<View/>"), 32, kb)


def test_wrapper_passes_foreground_to_child(kb):
    doc = parse_document('<LinearLayout><FrameLayout android:foreground="@drawable/ripple_round">'
                         '<ImageView android:id="@+id/x"/></FrameLayout></LinearLayout>')
    for level in (21, 22, 23, 31):
        assert render(doc, level, kb).get(("id/x", "mForeground")) == "@drawable/ripple_round"


def test_dimension_normalization(kb):
    dom = kb.domain_for("TextView", "android:top")
    assert normalize_value(dom, "100dp") == 100.0
    assert normalize_value(dom, "100dip") == 100.0
    assert normalize_value(dom, "35px") == pytest.approx(10.0)
    assert normalize_value(dom, "12dp") != normalize_value(dom, "12")


def test_flag_sets_compare_as_token_sets(kb):
    dom = kb.domain_for("EditText", "android:gravity")
    a = normalize_value(dom, "center_vertical|center_horizontal")
    assert a == normalize_value(dom, "center_horizontal|center_vertical")
    assert a != normalize_value(dom, "center")


def test_invalid_enum_value_is_screened(kb):
    issues = kb.screen(parse_document('<View android:visibility="sometimes"/>'))
    assert [i.kind for i in issues] == ["attribute"]


def _valid_value(spec, kb):
    d = spec.value_domain
    if d.kind in ("enum", "flags"):
        return d.values[0]
    if d.kind == "dimension":
        return "8dp"
    if d.kind == "reference":
        return sorted(kb.resources)[0]
    return "x"


def test_monotone_introduction(kb):
    for (tag, name), spec in kb.specs.items():
        if tag == "*" or spec.introduced_level <= kb.min_level:
            continue
        doc = parse_document(f'<{tag} {name}="{_valid_value(spec, kb)}"/>')
        fields = {e.field for e in spec.render_effects}
        states = [render(doc, lv, kb).as_dict() for lv in range(kb.min_level, spec.introduced_level)]
        for s in states[1:]:
            assert {k: v for k, v in s.items() if k[1] in fields} == \
                {k: v for k, v in states[0].items() if k[1] in fields}


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_crash_monotone_under_registry_growth(kb, data):
    resources = sorted(kb.resources)
    small = frozenset(data.draw(st.lists(st.sampled_from(resources), unique=True)))
    extra = frozenset(data.draw(st.lists(st.sampled_from(resources), unique=True)))
    kb_small = dataclasses.replace(kb, resources=small)
    kb_big = dataclasses.replace(kb, resources=small | extra)
    path = data.draw(st.sampled_from(fixture_paths()))
    level = data.draw(st.integers(kb.min_level, kb.max_level))
    doc = parse_document(path.read_bytes())
    if not render(doc, level, kb_small).crashed:
        assert not render(doc, level, kb_big).crashed


def test_bundled_fixtures_do_not_crash(kb):
    for path in fixture_paths():
        doc = parse_document(path.read_bytes())
        for level in (21, 22, 23, 31):
            assert not render(doc, level, kb).crashed, (path.name, level)
