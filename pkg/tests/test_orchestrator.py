import json

import pytest
from hypothesis import given, settings, HealthCheck
import hypothesis.strategies as st

from confrepair.agents import CHECKER, OPTIMIZER, REPAIRER
from confrepair.backends import BackendUnavailable, ScriptedBackend
from confrepair.conffix import FitnessScore
from confrepair.evaluation import bundled_transcripts_path, load_corpus
from confrepair.orchestrator import (
    COMBINED, INAPPLICABLE_ACCEPT, LLM_CONVERGED, STRATEGY1, TWICE_ACCEPT, UNREPAIRED, IoError, RepairConfig,
    fitness_feedback, load_session, persist_session, repair_bug,
)
from confrepair.xmlmodel import parse_document, serialize_canonical

from conftest import FakeClock, no_sleep

WRAPPED_FOREGROUND = """<FrameLayout android:layout_width="wrap_content" android:layout_height="wrap_content"
    android:foreground="?android:attr/actionBarItemBackground">
    <ImageView android:id="@+id/play_pause_button" android:layout_width="48dp" android:layout_height="48dp"
        android:contentDescription="@string/cd_play" android:scaleType="center" />
</FrameLayout>"""

CHECKBOX_TOP = """<CheckBox android:id="@+id/remember_me" android:layout_width="wrap_content"
    android:layout_height="48dp" android:top="8dp" android:text="@string/label_remember" />"""

CHECKBOX_BOTH = CHECKBOX_TOP.replace('android:top="8dp"', 'android:top="8dp" android:left="16dp"')


@pytest.fixture(scope="module")
def corpus(kb):
    return {r.id: r for r in load_corpus(kb=kb)}


def fence(xml):
    return f"```xml\n{xml}\n```\nExplanation."


def script(rounds):
    """``rounds`` is a list of (repairer, checker, optimizer) replies; None skips."""
    responses = []
    for i, replies in enumerate(rounds, start=1):
        for agent, text in zip((REPAIRER, CHECKER, OPTIMIZER), replies):
            if text is not None:
                responses.append({"agent": agent, "round": i, "response": text})
    return ScriptedBackend.from_data({"responses": responses})


def run(bug, kb, backend, **cfg):
    return repair_bug(bug, kb, backend, RepairConfig(**cfg), clock=FakeClock(), sleep=no_sleep)


def test_checkbox_element_text_matches_fixture(corpus):
    # The scripted proposals above must be the fixture element plus the new attributes.
    el = corpus["checkbox-gravity-22-23"].bug.element
    orig = {str(n): v for n, v in el.attributes}
    prop = {str(n): v for n, v in parse_document(CHECKBOX_TOP).attributes}
    assert {k: v for k, v in prop.items() if k != "android:top"} == \
        {k: v for k, v in orig.items() if k != "android:gravity"}


def test_strategy1_uses_no_backend(kb, corpus, tmp_path):
    backend = ScriptedBackend()
    outcome, log = run(corpus["seekbar-height-22-23"].bug, kb, backend)
    assert outcome.kind == STRATEGY1 and outcome.fitness.score == 1.0
    assert outcome.backend_calls == 0 and backend.calls == []
    path = persist_session(log, tmp_path)
    data = load_session(path)
    assert not [r for r in data["records"] if r["type"] == "exchange"]
    assert [r for r in data["records"] if r["type"] == "fitness"]


def test_foreground_wrap_is_inapplicable_accept(kb, corpus):
    backend = script([(fence(WRAPPED_FOREGROUND), "[PASS] ok", "[PASS] minimal")])
    outcome, log = run(corpus["imageview-foreground-22-23"].bug, kb, backend)
    assert outcome.kind == INAPPLICABLE_ACCEPT and outcome.rounds_used == 1
    assert outcome.final_document.elements[1].tag == "FrameLayout"


def test_checker_reject_then_accept(kb, corpus):
    bug = corpus["checkbox-gravity-22-23"].bug
    backend = script([(fence(CHECKBOX_TOP), "[FAIL] only half of the offset is restored", None),
                      (fence(CHECKBOX_BOTH), "[PASS]", "[PASS]")])
    outcome, log = run(bug, kb, backend)
    assert outcome.kind == LLM_CONVERGED and outcome.rounds_used == 2
    assert outcome.fitness.accepted
    second_prompt = [c for c in backend.calls if c.agent == REPAIRER][1].prompt
    assert second_prompt == "only half of the offset is restored"


def test_twice_consecutive_accept(kb, corpus):
    bug = corpus["checkbox-gravity-22-23"].bug
    backend = script([(fence(CHECKBOX_TOP), "[PASS]", "[PASS]")] * 2)
    outcome, log = run(bug, kb, backend)
    assert outcome.kind == TWICE_ACCEPT and outcome.rounds_used == 2
    assert outcome.fitness.score == pytest.approx(0.5)
    # both proposals reached the fitness gate
    assert len([r for r in log.of_type("fitness") if "round" in r]) == 2


def test_twice_rule_needs_both_to_reach_fitness(kb, corpus):
    bug = corpus["checkbox-gravity-22-23"].bug
    backend = script([(fence(CHECKBOX_TOP), "[PASS]", "[FAIL] trim it"),
                      (fence(CHECKBOX_TOP), "[PASS]", "[PASS]")])
    outcome, _ = run(bug, kb, backend, loop_budget_n=2)
    assert outcome.kind == COMBINED


def test_n1_failed_fitness_exits(kb, corpus):
    bug = corpus["checkbox-gravity-22-23"].bug
    backend = script([(fence(CHECKBOX_TOP), "[PASS]", "[PASS]")])
    outcome, log = run(bug, kb, backend, loop_budget_n=1)
    assert outcome.rounds_used == 1 and outcome.kind == COMBINED
    assert log.of_type("loop_exit")[0]["reason"] == "loop budget exhausted"


def test_malformed_backend_with_key_fields_falls_back(kb, corpus):
    backend = ScriptedBackend(default="I cannot help with XML.")
    outcome, log = run(corpus["checkbox-gravity-22-23"].bug, kb, backend)
    assert outcome.kind == COMBINED and outcome.rounds_used <= 10
    assert outcome.fitness.accepted


def test_malformed_backend_without_key_fields_is_unrepaired(kb, corpus):
    bug = corpus["seekbar-splittrack-22-23"].bug
    outcome, _ = run(bug, kb, ScriptedBackend(default="no code here"))
    assert outcome.kind == UNREPAIRED and outcome.rounds_used <= 10
    assert outcome.final_document == bug.document


def test_malformed_limit_is_configurable(kb, corpus):
    backend = ScriptedBackend(default="nothing")
    outcome, log = run(corpus["checkbox-gravity-22-23"].bug, kb, backend, max_consecutive_malformed=100)
    assert outcome.rounds_used == 10
    assert len([c for c in backend.calls if c.agent == REPAIRER]) == 10


def test_format_error_feedback_sent(kb, corpus):
    backend = ScriptedBackend(default="nothing")
    run(corpus["checkbox-gravity-22-23"].bug, kb, backend)
    assert "fenced block" in backend.calls[1].prompt


def test_crashing_repairs_route_to_fallback(kb, corpus):
    crashing = WRAPPED_FOREGROUND.replace("FrameLayout", "com.example.Overlay")
    backend = script([(fence(crashing), "[PASS]", "[PASS]")] * 5)
    outcome, log = run(corpus["imageview-foreground-22-23"].bug, kb, backend)
    assert outcome.kind == COMBINED and outcome.rounds_used == 3
    assert log.of_type("loop_exit")[0]["reason"] == "repeated crashing repairs"


def test_backend_retries_then_fallback(kb, corpus):
    class Flaky:
        calls = 0

        def complete(self, request):
            Flaky.calls += 1
            raise BackendUnavailable("timeout")

    slept = []
    outcome, log = repair_bug(corpus["checkbox-gravity-22-23"].bug, kb, Flaky(),
                              RepairConfig(backend_retries=2, retry_backoff_s=1.0),
                              clock=FakeClock(), sleep=slept.append)
    assert Flaky.calls == 3 and slept == [1.0, 2.0]
    assert outcome.kind == COMBINED and outcome.note.startswith("backend unavailable")
    assert len(log.of_type("backend_error")) == 3


def test_time_budget_falls_through(kb, corpus):
    backend = ScriptedBackend(default="nothing")
    outcome, log = repair_bug(corpus["checkbox-gravity-22-23"].bug, kb, backend,
                              RepairConfig(time_budget_s=5.0), clock=FakeClock(step=1.0), sleep=no_sleep)
    assert outcome.note == "time budget exhausted"
    assert outcome.kind == COMBINED
    assert log.of_type("time_budget")


def test_golden_sessions(kb, corpus):
    backend = ScriptedBackend.from_path(bundled_transcripts_path())
    expected = {
        "imageview-foreground-22-23": (INAPPLICABLE_ACCEPT, 1),
        "imageview-foreground-cover-22-23": (INAPPLICABLE_ACCEPT, 2),
        "imageview-foreground-shuffle-22-23": (INAPPLICABLE_ACCEPT, 2),
        "edittext-gravity-22-23": (LLM_CONVERGED, 2),
        "imagebutton-background-22-23": (LLM_CONVERGED, 2),
    }
    for bug_id, (kind, rounds) in expected.items():
        outcome, _ = run(corpus[bug_id].bug, kb, backend)
        assert (outcome.kind, outcome.rounds_used) == (kind, rounds), bug_id


def test_three_round_session_log(kb, corpus, tmp_path):
    bug = corpus["checkbox-gravity-22-23"].bug
    backend = script([(fence(CHECKBOX_TOP), "[FAIL] incomplete", None),
                      (fence(CHECKBOX_BOTH + "\n"), "[PASS]", "[FAIL] explain less"),
                      (fence(CHECKBOX_BOTH), "[PASS]", "[PASS]")])
    outcome, log = run(bug, kb, backend)
    assert outcome.rounds_used == 3
    data = load_session(persist_session(log, tmp_path))
    agents = [r["agent"] for r in data["records"] if r["type"] == "exchange"]
    assert agents == [REPAIRER, CHECKER, REPAIRER, CHECKER, OPTIMIZER, REPAIRER, CHECKER, OPTIMIZER]
    assert data["rng_seed"] == 0 and data["config"]["loop_budget_n"] == 10


def test_replay_from_session_log_is_exact(kb, corpus, tmp_path):
    bug = corpus["imageview-foreground-cover-22-23"].bug
    outcome, log = run(bug, kb, ScriptedBackend.from_path(bundled_transcripts_path()))
    path = persist_session(log, tmp_path)
    replay_outcome, replay_log = run(bug, kb, ScriptedBackend.from_session_log(path))
    assert replay_outcome == outcome
    assert replay_log.dumps() == log.dumps()


def test_persist_to_unwritable_location(kb, corpus, tmp_path):
    _, log = run(corpus["seekbar-height-22-23"].bug, kb, ScriptedBackend())
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        persist_session(log, blocker / "sub")


def test_fitness_feedback_modes():
    field = ("id/x", "mContentTop")
    fs = FitnessScore(0.7, False, False, None, ((field, (0.0, 12.0)),), ((field, (0.0, 12.0)),))
    coarse = fitness_feedback(fs, "coarse")
    assert "12" not in coarse and "better repair" in coarse
    fine = fitness_feedback(fs, "fine", (22, 23, 31))
    rows = [line for line in fine.splitlines() if line.startswith("| id/x")]
    assert len(rows) == 2 and "12" in rows[0]
    crashed = FitnessScore(1.0, True, True, "attribute android:foo not found")
    for mode in ("coarse", "fine"):
        text = fitness_feedback(crashed, mode)
        assert "android:foo not found" in text and "better repair" not in text and "|" not in text


def test_config_validation():
    with pytest.raises(ValueError):
        RepairConfig(loop_budget_n=0)
    with pytest.raises(ValueError):
        RepairConfig(feedback_mode="medium")
    cfg = RepairConfig()
    assert (cfg.loop_budget_n, cfg.time_budget_s, cfg.runs_k, cfg.temperature) == (10, 7200.0, 5, 0.7)


REPLIES = st.sampled_from(["nothing useful", fence(WRAPPED_FOREGROUND), fence("<ImageView"), fence(CHECKBOX_TOP),
                           fence(CHECKBOX_BOTH), fence(WRAPPED_FOREGROUND.replace("FrameLayout", "x.Y"))])
VERDICTS = st.sampled_from(["[PASS]", "[FAIL] no", "unclear"])


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.tuples(REPLIES, VERDICTS, VERDICTS), min_size=1, max_size=12),
       st.sampled_from(["checkbox-gravity-22-23", "imageview-foreground-22-23", "seekbar-splittrack-22-23"]),
       st.integers(1, 10))
def test_random_sessions_respect_budget(kb, corpus, rounds, bug_id, n):
    bug = corpus[bug_id].bug
    outcome, log = run(bug, kb, script(rounds), loop_budget_n=n)
    assert outcome.rounds_used <= n
    assert outcome.kind in (STRATEGY1, INAPPLICABLE_ACCEPT, LLM_CONVERGED, TWICE_ACCEPT, COMBINED, UNREPAIRED)
    parse_document(serialize_canonical(outcome.final_document))
    if outcome.kind == LLM_CONVERGED:
        assert outcome.fitness.accepted
    if outcome.kind == TWICE_ACCEPT:
        reached = [r["round"] for r in log.of_type("fitness") if "round" in r]
        assert len(reached) >= 2 and reached[-1] == outcome.rounds_used
