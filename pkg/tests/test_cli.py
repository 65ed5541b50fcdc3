import io
import json

import pytest

from confrepair.cli import EXIT_BACKEND, EXIT_CORPUS, EXIT_OK, EXIT_USAGE, main, parse_duration

from conftest import FIXTURES


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


def test_repair_easy_bug():
    code, text = run("repair", "--bug", "seekbar-height-22-23")
    assert code == EXIT_OK
    summary = json.loads(text.splitlines()[0])
    assert summary["kind"] == "Strategy1" and summary["backend_calls"] == 0
    assert summary["judgment"] == "Correct"
    assert 'android:layout_height="wrap_content"' in text


def test_repair_golden_bug_writes_session(tmp_path):
    code, text = run("repair", "--bug", "imageview-foreground-22-23", "--sessions", str(tmp_path))
    assert code == EXIT_OK
    assert json.loads(text.splitlines()[0])["judgment"] == "Correct"
    assert len(list(tmp_path.glob("*.json"))) == 1


def test_unknown_bug_is_usage_error():
    assert run("repair", "--bug", "no-such-bug")[0] == EXIT_USAGE


def test_bad_arguments_are_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["repair", "--bug", "x", "--time-budget", "soon"])
    assert exc.value.code == EXIT_USAGE
    assert run("repair", "--bug", "seekbar-height-22-23", "--n", "0")[0] == EXIT_USAGE


def test_parse_duration():
    assert parse_duration("90s") == 90 and parse_duration("2m") == 120
    assert parse_duration("1h") == 3600 and parse_duration("5") == 5


def test_oracle_prints_render_state():
    code, text = run("oracle", "--fixture", str(FIXTURES / "album_header.xml"), "--level", "23")
    assert code == EXIT_OK
    state = json.loads(text)
    assert state["crashed"] is False
    assert {"element": "id/album_cover", "field": "mForeground", "value": None} in state["fields"]
    assert text == run("oracle", "--fixture", str(FIXTURES / "album_header.xml"), "--level", "23")[1]


def test_oracle_missing_fixture_is_corpus_error(tmp_path):
    assert run("oracle", "--fixture", str(tmp_path / "gone.xml"), "--level", "23")[0] == EXIT_CORPUS
    bad = tmp_path / "bad.xml"
    bad.write_text("<LinearLayout>")
    assert run("oracle", "--fixture", str(bad), "--level", "23")[0] == EXIT_CORPUS


def test_bad_kb_is_corpus_error(tmp_path):
    kb = tmp_path / "kb.json"
    kb.write_text(json.dumps({"elements": 5}))
    assert run("oracle", "--fixture", str(FIXTURES / "album_header.xml"), "--level", "23",
               "--kb", str(kb))[0] == EXIT_CORPUS


def test_evaluate_then_report(tmp_path):
    out = tmp_path / "report.json"
    sessions = tmp_path / "sessions"
    code, _ = run("evaluate", "--k", "1", "--format", "machine", "--out", str(out), "--sessions", str(sessions))
    assert code == EXIT_OK
    machine = json.loads(out.read_text())
    assert machine["methods"][0]["method"] == "confrepair"
    code, text = run("report", "--from", str(sessions), "--format", "machine")
    assert code == EXIT_OK and json.loads(text) == machine


def test_report_needs_directory(tmp_path):
    assert run("report", "--from", str(tmp_path / "nope"))[0] == EXIT_USAGE


def test_live_config_may_not_hold_credentials(tmp_path, monkeypatch):
    monkeypatch.setenv("COMPAT_REPAIR_API_KEY", "sk-test")
    conf = tmp_path / "live.json"
    conf.write_text(json.dumps({"endpoint": "http://127.0.0.1:9", "model": "m", "api_key": "sk-x"}))
    assert run("repair", "--bug", "edittext-gravity-22-23", "--backend", "live", "--config", str(conf))[0] \
        == EXIT_USAGE


def test_live_without_key_is_backend_error(tmp_path, monkeypatch):
    monkeypatch.delenv("COMPAT_REPAIR_API_KEY", raising=False)
    conf = tmp_path / "live.json"
    conf.write_text(json.dumps({"endpoint": "http://127.0.0.1:9", "model": "m"}))
    assert run("repair", "--bug", "edittext-gravity-22-23", "--backend", "live", "--config", str(conf))[0] \
        == EXIT_BACKEND


def test_live_needs_config():
    assert run("repair", "--bug", "edittext-gravity-22-23", "--backend", "live")[0] == EXIT_USAGE


def test_unknown_backend():
    assert run("repair", "--bug", "edittext-gravity-22-23", "--backend", "carrier-pigeon")[0] == EXIT_USAGE


def test_repair_replays_a_session_log(tmp_path):
    sessions = tmp_path / "s"
    code, first = run("repair", "--bug", "imageview-foreground-cover-22-23", "--sessions", str(sessions))
    log = next(sessions.glob("*.json"))
    code2, again = run("repair", "--bug", "imageview-foreground-cover-22-23", "--backend", f"scripted:{log}")
    assert code == code2 == EXIT_OK and again == first
