import json
import socket
import threading
import time
from pathlib import Path

import httpx
import pytest
from fastapi.testclient import TestClient
from hypothesis import given, settings
from hypothesis import strategies as st

from radassist.imaging import write_nifti
from radassist.service import create_app, load_config, rle_decode, rle_encode
from tests.conftest import phantom_study

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

CANONICAL_PAYLOAD = (
    "Left kidney volume: 170 cm3, Right kidney volume: 179 cm3, the volume ratio is 0.95"
)
NORMAL_SENTENCE = "The kidneys have a normal appearance."


def upload_files(volume=None, mask=None):
    if volume is None:
        volume, mask = phantom_study()
    return (
        {
            "image": ("image.nii", write_nifti(volume, "f32"), "application/octet-stream"),
            "mask": ("mask.nii", write_nifti(mask, "u8"), "application/octet-stream"),
        },
        {
            "descriptor": json.dumps(
                {
                    "modality": "CT",
                    "body_region": "abdomen",
                    "hint_keywords": ["kidney"],
                    "labels": {str(k): v for k, v in mask.label_table.items()},
                }
            )
        },
    )


@pytest.fixture
def client(tmp_path):
    app = create_app({"data_dir": str(tmp_path / "data"), "backend": {"kind": "rule"}})
    with TestClient(app) as c:
        yield c


def create_study(client) -> str:
    files, data = upload_files()
    resp = client.post("/studies", files=files, data=data)
    assert resp.status_code == 201, resp.text
    return resp.json()["study_id"]


def analyzed_study(client) -> str:
    study_id = create_study(client)
    resp = client.post(
        f"/studies/{study_id}/analyze", json={"organs": ["kidney_left", "kidney_right"]}
    )
    assert resp.status_code == 200, resp.text
    return study_id


def sse_events(lines):
    event = None
    for line in lines:
        if line.startswith("event:"):
            event = line.split(":", 1)[1].strip()
        elif line.startswith("data:") and event is not None:
            yield event, json.loads(line.split(":", 1)[1])
            event = None


class TestHealth:
    def test_ok(self, client):
        assert client.get("/health").json() == {"status": "ok"}


class TestStudies:
    def test_upload_routes_ct_abdomen(self, client):
        files, data = upload_files()
        resp = client.post("/studies", files=files, data=data)
        assert resp.status_code == 201
        assert resp.json()["route"] == "ct-seg-radiomics"

    def test_misaligned_pair_rejected(self, client):
        volume, _ = phantom_study()
        _, mask = phantom_study(dims=(12, 12, 4))
        files, data = upload_files()
        files["mask"] = ("mask.nii", write_nifti(mask, "u8"), "application/octet-stream")
        resp = client.post("/studies", files=files, data=data)
        assert resp.status_code == 400
        assert resp.json()["error"] == "DimsMismatch"

    def test_garbage_bytes_bad_magic(self, client):
        files, data = upload_files()
        files["image"] = ("image.nii", b"\x00" * 500, "application/octet-stream")
        resp = client.post("/studies", files=files, data=data)
        assert resp.status_code == 400
        assert resp.json()["error"] == "BadMagic"

    def test_unsupported_format_415(self, client):
        files, data = upload_files()
        files["image"] = ("image.nii.gz", b"\x1f\x8b" + b"\x00" * 500, "application/gzip")
        resp = client.post("/studies", files=files, data=data)
        assert resp.status_code == 415

    def test_raw_format_upload(self, client):
        from radassist.imaging import serialize_raw

        volume, mask = phantom_study()
        vol_header, vol_blob = serialize_raw(volume, "f32")
        mask_header, mask_blob = serialize_raw(mask, "u8")
        resp = client.post(
            "/studies",
            files={
                "image": ("image.bin", vol_blob, "application/octet-stream"),
                "image_header": ("image.json", vol_header, "application/json"),
                "mask": ("mask.bin", mask_blob, "application/octet-stream"),
                "mask_header": ("mask.json", mask_header, "application/json"),
            },
            data={
                "descriptor": json.dumps(
                    {"modality": "CT", "body_region": "abdomen", "hint_keywords": []}
                )
            },
        )
        assert resp.status_code == 201


class TestAnalyze:
    def test_kidney_pair_with_ratio(self, client):
        study_id = create_study(client)
        resp = client.post(
            f"/studies/{study_id}/analyze", json={"organs": ["kidney_left", "kidney_right"]}
        )
        body = resp.json()
        assert resp.status_code == 200
        assert body["features"]["kidney_left"]["volume_cm3"] == 170.0
        assert body["features"]["kidney_right"]["volume_cm3"] == 179.0
        assert body["ratio"]["ratio"] == pytest.approx(170 / 179)

    def test_canonical_organ_expands_to_sides(self, client):
        study_id = create_study(client)
        resp = client.post(f"/studies/{study_id}/analyze", json={"organs": ["kidney"]})
        assert resp.status_code == 200
        assert set(resp.json()["features"]) == {"kidney_left", "kidney_right"}

    def test_repeat_call_identical(self, client):
        study_id = create_study(client)
        first = client.post(
            f"/studies/{study_id}/analyze", json={"organs": ["kidney_left", "kidney_right"]}
        ).json()
        second = client.post(
            f"/studies/{study_id}/analyze", json={"organs": ["kidney_left", "kidney_right"]}
        ).json()
        assert first == second

    def test_absent_organ_422(self, client):
        study_id = create_study(client)
        resp = client.post(f"/studies/{study_id}/analyze", json={"organs": ["pancreas"]})
        assert resp.status_code == 422
        assert resp.json()["error"] == "LabelAbsent"

    def test_unknown_study_404(self, client):
        resp = client.post("/studies/nope/analyze", json={"organs": ["kidney"]})
        assert resp.status_code == 404


class TestSlices:
    def test_all_background_slice(self, client):
        study_id = create_study(client)
        resp = client.get(f"/studies/{study_id}/slices/z/4")  # top plane is empty
        body = resp.json()
        assert resp.status_code == 200
        assert body["labels"] == [[0, body["width"] * body["height"]]]

    def test_kidney_palette_is_blue(self, client):
        study_id = create_study(client)
        body = client.get(f"/studies/{study_id}/slices/z/0").json()
        assert body["palette"]["kidney"] == [0, 0, 255]
        assert body["label_table"] == {"1": "kidney_left", "2": "kidney_right"}

    def test_rle_expands_to_full_plane(self, client):
        study_id = create_study(client)
        body = client.get(f"/studies/{study_id}/slices/z/0").json()
        expanded = rle_decode(body["labels"])
        assert len(expanded) == body["width"] * body["height"]
        assert set(expanded) <= {0, 1, 2}

    def test_out_of_range_400(self, client):
        study_id = create_study(client)
        assert client.get(f"/studies/{study_id}/slices/z/99").status_code == 400

    def test_bad_axis_400(self, client):
        study_id = create_study(client)
        assert client.get(f"/studies/{study_id}/slices/w/0").status_code == 400


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5), max_size=64))
def test_rle_round_trip(labels):
    assert rle_decode(rle_encode(labels)) == labels


def test_rle_shared_fixtures_match():
    fixture = json.loads((FIXTURES / "rle_cases.json").read_text())
    for case in fixture["cases"]:
        assert rle_decode(case["runs"]) == case["expanded"]
        assert rle_encode(case["expanded"]) == case["runs"]


class TestSessions:
    def test_create_returns_canonical_payload(self, client):
        study_id = analyzed_study(client)
        resp = client.post("/sessions", json={"study_id": study_id, "organ": "kidney"})
        assert resp.status_code == 201
        assert resp.json()["feature_payload"] == CANONICAL_PAYLOAD

    def test_unknown_study_404(self, client):
        resp = client.post("/sessions", json={"study_id": "nope", "organ": "kidney"})
        assert resp.status_code == 404

    def test_unanalyzed_organ_409(self, client):
        study_id = create_study(client)
        resp = client.post("/sessions", json={"study_id": study_id, "organ": "kidney"})
        assert resp.status_code == 409
        assert resp.json()["error"] == "NotAnalyzed"

    def test_fresh_session_report(self, client):
        study_id = analyzed_study(client)
        sid = client.post("/sessions", json={"study_id": study_id, "organ": "kidney"}).json()[
            "session_id"
        ]
        body = client.get(f"/sessions/{sid}/report").json()
        assert body == {"accepted_text": "", "event_count": 0}

    def test_prefix_becomes_accepted_text(self, client):
        study_id = analyzed_study(client)
        sid = client.post(
            "/sessions", json={"study_id": study_id, "organ": "kidney", "prefix": "CTU study."}
        ).json()["session_id"]
        body = client.get(f"/sessions/{sid}/report").json()
        assert body["accepted_text"] == "CTU study."
        assert body["event_count"] == 1  # the prefix is logged as an edit

    def test_unknown_session_404(self, client):
        assert client.get("/sessions/nope/report").status_code == 404


class TestSuggestionStream:
    def make_session(self, client):
        study_id = analyzed_study(client)
        return client.post("/sessions", json={"study_id": study_id, "organ": "kidney"}).json()[
            "session_id"
        ]

    def test_tokens_then_done(self, client):
        sid = self.make_session(client)
        with client.stream("GET", f"/sessions/{sid}/suggestion") as resp:
            assert resp.status_code == 200
            assert resp.headers["content-type"].startswith("text/event-stream")
            events = list(sse_events(resp.iter_lines()))
        tokens = [d["text"] for e, d in events if e == "token"]
        indices = [d["index"] for e, d in events if e == "token"]
        assert "".join(tokens) == NORMAL_SENTENCE
        assert len(tokens) == 7
        assert indices == list(range(7))
        done = [d for e, d in events if e == "done"]
        assert len(done) == 1
        assert done[0]["token_count"] == 7
        assert done[0]["tokens_per_sec"] > 0
        rate = done[0]["token_count"] / (done[0]["elapsed_ms"] / 1000.0)
        assert done[0]["tokens_per_sec"] == pytest.approx(rate, rel=0.01)

    def test_accept_full_flow(self, client):
        sid = self.make_session(client)
        with client.stream("GET", f"/sessions/{sid}/suggestion") as resp:
            list(sse_events(resp.iter_lines()))
        resp = client.post(f"/sessions/{sid}/accept", json={"mode": "full"})
        assert resp.json()["accepted_text"] == NORMAL_SENTENCE
        report = client.get(f"/sessions/{sid}/report").json()
        assert report["accepted_text"] == NORMAL_SENTENCE
        assert report["event_count"] == 2  # Proposed + Accepted

    def test_accept_first_word_flow(self, client):
        sid = self.make_session(client)
        with client.stream("GET", f"/sessions/{sid}/suggestion") as resp:
            list(sse_events(resp.iter_lines()))
        resp = client.post(f"/sessions/{sid}/accept", json={"mode": "first_word"})
        assert resp.json()["accepted_text"] == "The"

    def test_reject_flow(self, client):
        sid = self.make_session(client)
        with client.stream("GET", f"/sessions/{sid}/suggestion") as resp:
            list(sse_events(resp.iter_lines()))
        assert client.post(f"/sessions/{sid}/reject").json()["accepted_text"] == ""
        assert client.post(f"/sessions/{sid}/reject").status_code == 409

    def test_edit_flow(self, client):
        sid = self.make_session(client)
        resp = client.post(f"/sessions/{sid}/edit", json={"text": "The kidneys are unremarkable."})
        assert resp.json()["accepted_text"] == "The kidneys are unremarkable."

    def test_accept_without_suggestion_409(self, client):
        sid = self.make_session(client)
        resp = client.post(f"/sessions/{sid}/accept", json={"mode": "full"})
        assert resp.status_code == 409
        assert resp.json()["error"] == "NoSuggestion"

    def test_max_tokens_query_param(self, client):
        sid = self.make_session(client)
        with client.stream("GET", f"/sessions/{sid}/suggestion?max_tokens=1") as resp:
            events = list(sse_events(resp.iter_lines()))
        tokens = [d["text"] for e, d in events if e == "token"]
        assert tokens == ["The"]

    def test_backend_failure_emits_error_event(self, tmp_path):
        config = {
            "data_dir": str(tmp_path / "data"),
            "backend": {"kind": "remote", "base_url": "http://127.0.0.1:9", "model": "m",
                        "timeout_s": 1},
        }
        with TestClient(create_app(config)) as client:
            files, data = upload_files()
            study_id = client.post("/studies", files=files, data=data).json()["study_id"]
            client.post(
                f"/studies/{study_id}/analyze", json={"organs": ["kidney_left", "kidney_right"]}
            )
            sid = client.post("/sessions", json={"study_id": study_id, "organ": "kidney"}).json()[
                "session_id"
            ]
            with client.stream("GET", f"/sessions/{sid}/suggestion") as resp:
                events = list(sse_events(resp.iter_lines()))
            assert events[-1][0] == "error"
            assert events[-1][1]["error"] == "BackendUnavailable"
            # the failure frees the session for another attempt
            with client.stream("GET", f"/sessions/{sid}/suggestion") as resp:
                events = list(sse_events(resp.iter_lines()))
            assert events[-1][0] == "error"


class LiveServer:
    def __init__(self, tmp_path, token_delay_s=0.03):
        import uvicorn

        self.config = {
            "data_dir": str(tmp_path / "data"),
            "backend": {"kind": "rule", "token_delay_s": token_delay_s},
            "suggestion": {"max_tokens_default": 64},
        }
        self.app = create_app(self.config)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.bind(("127.0.0.1", 0))
        sock.listen(32)
        self.port = sock.getsockname()[1]
        self.url = f"http://127.0.0.1:{self.port}"
        self._server = uvicorn.Server(uvicorn.Config(self.app, log_level="error", lifespan="off"))
        self._thread = threading.Thread(
            target=self._server.run, kwargs={"sockets": [sock]}, daemon=True
        )

    def __enter__(self):
        self._thread.start()
        deadline = time.monotonic() + 10
        while not self._server.started:
            time.sleep(0.01)
            if time.monotonic() > deadline:
                raise RuntimeError("uvicorn did not start")
        return self

    def __exit__(self, *exc):
        self._server.should_exit = True
        self._thread.join(timeout=10)


def _setup_session(url: str) -> str:
    with httpx.Client(base_url=url, timeout=10) as c:
        files, data = upload_files()
        study_id = c.post("/studies", files=files, data=data).json()["study_id"]
        c.post(f"/studies/{study_id}/analyze", json={"organs": ["kidney_left", "kidney_right"]})
        return c.post("/sessions", json={"study_id": study_id, "organ": "kidney"}).json()[
            "session_id"
        ]


def test_concurrent_suggestion_conflicts(tmp_path):
    with LiveServer(tmp_path) as server:
        sid = _setup_session(server.url)
        statuses = []

        def first_stream():
            with httpx.Client(base_url=server.url, timeout=10) as c:
                with c.stream("GET", f"/sessions/{sid}/suggestion") as resp:
                    statuses.append(resp.status_code)
                    list(resp.iter_lines())

        t = threading.Thread(target=first_stream)
        t.start()
        time.sleep(0.08)  # mid-stream (7 tokens x 30 ms)
        with httpx.Client(base_url=server.url, timeout=10) as c:
            second = c.get(f"/sessions/{sid}/suggestion")
        t.join()
        assert statuses == [200]
        assert second.status_code == 409
        assert second.json()["error"] == "SuggestionInFlight"


def test_client_disconnect_cancels_session(tmp_path):
    with LiveServer(tmp_path) as server:
        sid = _setup_session(server.url)
        received = []
        with httpx.Client(base_url=server.url, timeout=10) as c:
            with c.stream("GET", f"/sessions/{sid}/suggestion") as resp:
                for event, payload in sse_events(resp.iter_lines()):
                    if event == "token":
                        received.append(payload["text"])
                        if len(received) == 2:
                            break  # walking away mid-stream closes the connection
        deadline = time.monotonic() + 5
        state = server.app.state.service
        while time.monotonic() < deadline:
            handle = state.sessions[sid]
            if handle.session.current_suggestion is None:
                break
            time.sleep(0.02)
        handle = state.sessions[sid]
        assert handle.session.current_suggestion is None
        kinds = [ev.kind.value for ev in handle.session.event_log]
        assert kinds[-1] == "Cancelled"
        # session is immediately reusable
        with httpx.Client(base_url=server.url, timeout=10) as c:
            with c.stream("GET", f"/sessions/{sid}/suggestion") as resp:
                events = list(sse_events(resp.iter_lines()))
        assert any(e == "done" for e, _ in events)


def test_crash_recovery_replays_event_log(tmp_path):
    config = {"data_dir": str(tmp_path / "data"), "backend": {"kind": "rule"}}
    app1 = create_app(config)
    with TestClient(app1) as c:
        files, data = upload_files()
        study_id = c.post("/studies", files=files, data=data).json()["study_id"]
        c.post(f"/studies/{study_id}/analyze", json={"organs": ["kidney_left", "kidney_right"]})
        sid = c.post("/sessions", json={"study_id": study_id, "organ": "kidney"}).json()[
            "session_id"
        ]
        with c.stream("GET", f"/sessions/{sid}/suggestion") as resp:
            list(resp.iter_lines())
        c.post(f"/sessions/{sid}/accept", json={"mode": "full"})
        c.post(f"/sessions/{sid}/edit", json={"text": NORMAL_SENTENCE + " No stones."})
        expected = c.get(f"/sessions/{sid}/report").json()

    # a brand-new process state over the same data_dir must replay identically
    app2 = create_app(config)
    with TestClient(app2) as c2:
        assert c2.get(f"/sessions/{sid}/report").json() == expected
        body = c2.get(f"/studies/{study_id}/slices/z/0").json()
        assert body["palette"]["kidney"] == [0, 0, 255]


def test_event_log_seq_gapless(tmp_path):
    config = {"data_dir": str(tmp_path / "data"), "backend": {"kind": "rule"}}
    app = create_app(config)
    with TestClient(app) as c:
        files, data = upload_files()
        study_id = c.post("/studies", files=files, data=data).json()["study_id"]
        c.post(f"/studies/{study_id}/analyze", json={"organs": ["kidney_left", "kidney_right"]})
        sid = c.post("/sessions", json={"study_id": study_id, "organ": "kidney"}).json()[
            "session_id"
        ]
        for _ in range(3):
            with c.stream("GET", f"/sessions/{sid}/suggestion") as resp:
                list(resp.iter_lines())
            c.post(f"/sessions/{sid}/accept", json={"mode": "full"})
    lines = (tmp_path / "data" / "sessions" / f"{sid}.events.jsonl").read_text().splitlines()
    records = [json.loads(ln) for ln in lines if ln.strip()]
    assert [r["seq"] for r in records] == list(range(1, len(records) + 1))
    stamps = [r["timestamp"] for r in records]
    assert all(a < b for a, b in zip(stamps, stamps[1:]))


def test_load_config_validation(tmp_path):
    from radassist.errors import ConfigError

    good = tmp_path / "good.json"
    good.write_text(json.dumps({"data_dir": str(tmp_path), "backend": {"kind": "rule"}}))
    assert load_config(good)["backend"]["kind"] == "rule"

    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)

    missing = tmp_path / "missing.json"
    with pytest.raises(ConfigError):
        load_config(missing)

    badkind = tmp_path / "badkind.json"
    badkind.write_text(json.dumps({"backend": {"kind": "quantum"}}))
    with pytest.raises(ConfigError):
        load_config(badkind)
