"""HTTP service: study analysis, label slice overlays, and live completion
sessions with SSE token streaming.

Persistence is deliberately plain: study volumes are re-serialized to disk
and each session appends its feedback events to a JSONL log, flushed before
the response goes out. Restart recovery replays those logs, so the report
text survives a hard kill.
"""
from __future__ import annotations

import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from fastapi import FastAPI, File, Form, Request, UploadFile
from fastapi.responses import JSONResponse, StreamingResponse

from . import imaging
from .completion import (
    AcceptMode,
    Backend,
    BackendParams,
    CompletionError,
    CompletionSession,
    EmptyPrompt,
    FeedbackEvent,
    NoSuggestion,
    NotComplete,
    NotStreaming,
    SuggestionInFlight,
    make_backend,
    replay_accepted_text,
)
from .errors import ConfigError, RadAssistError
from .imaging import (
    Axis,
    BadMagic,
    IndexOutOfRange,
    LabelMask,
    Modality,
    VoxelVolume,
    extract_slice,
    parse_nifti,
    parse_raw,
    validate_alignment,
    write_nifti,
)
from .promptgen import render_input_payload
from .radiomics import LabelAbsent, LateralityRatio, OrganFeatureSet, compute_features, paired_ratio
from .router import NoPipelineMatches, RouteDecision, Router, StudyDescriptor


class ServiceError(RadAssistError):
    pass


class UnknownStudy(ServiceError):
    pass


class UnknownSession(ServiceError):
    pass


class NotAnalyzed(ServiceError):
    pass


class UnknownFormat(ServiceError):
    pass


# --- run-length encoding of label rasters --------------------------------------


def rle_encode(labels) -> list[list[int]]:
    """[[label, count], ...] over the flat raster, in raster order."""
    runs: list[list[int]] = []
    for v in labels:
        v = int(v)
        if runs and runs[-1][0] == v:
            runs[-1][1] += 1
        else:
            runs.append([v, 1])
    return runs


def rle_decode(runs: list[list[int]]) -> list[int]:
    out: list[int] = []
    for label, count in runs:
        out.extend([int(label)] * int(count))
    return out


# organ display colors; kidneys render blue
DEFAULT_PALETTE: dict[str, tuple[int, int, int]] = {
    "kidney": (0, 0, 255),
    "liver": (170, 110, 40),
    "spleen": (145, 30, 180),
    "bladder": (255, 215, 0),
    "lung": (70, 240, 240),
    "appendix": (245, 130, 48),
    "adrenal gland": (240, 50, 230),
    "pancreas": (60, 180, 75),
    "aorta": (230, 25, 75),
}
_FALLBACK_COLORS = (
    (128, 128, 0),
    (0, 128, 128),
    (220, 190, 255),
    (170, 255, 195),
    (255, 250, 200),
    (128, 0, 0),
)


def canonical_organ_name(name: str) -> str:
    base = name.strip().lower().replace("_", " ")
    for suffix in (" left", " right"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
    return base


def palette_for(mask: LabelMask) -> dict[str, list[int]]:
    organs = sorted({canonical_organ_name(v) for v in mask.label_table.values()})
    palette = {}
    fallback = 0
    for organ in organs:
        if organ in DEFAULT_PALETTE:
            palette[organ] = list(DEFAULT_PALETTE[organ])
        else:
            palette[organ] = list(_FALLBACK_COLORS[fallback % len(_FALLBACK_COLORS)])
            fallback += 1
    return palette


# --- persistent state -----------------------------------------------------------


@dataclass
class StudyRecord:
    study_id: str
    descriptor: StudyDescriptor
    volume: VoxelVolume
    mask: LabelMask
    route: RouteDecision
    features: dict[str, OrganFeatureSet] = field(default_factory=dict)
    ratio: LateralityRatio | None = None


class SessionHandle:
    """A completion session plus its append-only event log on disk."""

    def __init__(self, session: CompletionSession, events_path: Path):
        self.session = session
        self.events_path = events_path
        self._persisted = 0
        self._io_lock = threading.Lock()

    def persist(self) -> None:
        """Write-ahead flush: append any unpersisted events, fsync."""
        with self._io_lock:
            events = self.session.event_log
            if self._persisted >= len(events):
                return
            with open(self.events_path, "a", encoding="utf-8") as fh:
                while self._persisted < len(events):
                    ev = events[self._persisted]
                    rec = {"seq": self._persisted + 1, **ev.to_dict()}
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
                    self._persisted += 1
                fh.flush()
                os.fsync(fh.fileno())


class ServiceState:
    def __init__(self, config: dict):
        self.config = config
        self.data_dir = Path(config.get("data_dir", "data"))
        self.studies_dir = self.data_dir / "studies"
        self.sessions_dir = self.data_dir / "sessions"
        self.studies_dir.mkdir(parents=True, exist_ok=True)
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        self.backend: Backend = make_backend(config.get("backend", {"kind": "rule"}))
        self.max_tokens_default = int(
            config.get("suggestion", {}).get("max_tokens_default", 128)
        )
        self.router = Router()
        self.studies: dict[str, StudyRecord] = {}
        self.sessions: dict[str, SessionHandle] = {}
        self._lock = threading.Lock()
        self._recover()

    # -- recovery --

    def _recover(self) -> None:
        for study_dir in sorted(self.studies_dir.iterdir()) if self.studies_dir.exists() else []:
            if (study_dir / "study.json").exists():
                try:
                    self._load_study(study_dir)
                except (OSError, json.JSONDecodeError, RadAssistError):
                    continue  # a partially written study is not recoverable
        for meta_path in sorted(self.sessions_dir.glob("*.meta.json")):
            try:
                self._load_session(meta_path)
            except (OSError, json.JSONDecodeError, RadAssistError):
                continue

    def _load_study(self, study_dir: Path) -> None:
        meta = json.loads((study_dir / "study.json").read_text())
        desc_raw = json.loads((study_dir / "descriptor.json").read_text())
        descriptor = StudyDescriptor(
            modality=desc_raw["modality"],
            body_region=desc_raw["body_region"],
            hint_keywords=tuple(desc_raw.get("hint_keywords", ())),
        )
        labels = {int(k): v for k, v in desc_raw.get("labels", {}).items()}
        volume = parse_nifti(
            (study_dir / "image.nii").read_bytes(), modality=descriptor.modality
        )
        mask = parse_nifti((study_dir / "mask.nii").read_bytes(), as_mask=True, label_table=labels)
        record = StudyRecord(
            study_id=meta["study_id"],
            descriptor=descriptor,
            volume=volume,
            mask=mask,
            route=RouteDecision(
                pipeline_id=meta["route"]["pipeline_id"],
                score=meta["route"]["score"],
                matched_rules=tuple(meta["route"]["matched_rules"]),
                matched_keywords=tuple(meta["route"]["matched_keywords"]),
            ),
            features={k: OrganFeatureSet.from_dict(v) for k, v in meta.get("features", {}).items()},
            ratio=LateralityRatio.from_dict(meta["ratio"]) if meta.get("ratio") else None,
        )
        self.studies[record.study_id] = record

    def _load_session(self, meta_path: Path) -> None:
        meta = json.loads(meta_path.read_text())
        session = CompletionSession(
            backend=self.backend,
            organ=meta["organ"],
            feature_payload=meta["feature_payload"],
            session_id=meta["session_id"],
        )
        events_path = self.sessions_dir / f"{meta['session_id']}.events.jsonl"
        handle = SessionHandle(session, events_path)
        if events_path.exists():
            events = []
            for line in events_path.read_text(encoding="utf-8").splitlines():
                line = line.strip()
                if line:
                    events.append(FeedbackEvent.from_dict(json.loads(line)))
            session.event_log = events
            session.accepted_text = replay_accepted_text(events)
            if events:
                session._last_ts = events[-1].timestamp
            handle._persisted = len(events)
        self.sessions[session.id] = handle

    # -- studies --

    def store_study(
        self, volume: VoxelVolume, mask: LabelMask, descriptor: StudyDescriptor
    ) -> StudyRecord:
        validate_alignment(volume, mask)
        route = self.router.route(descriptor)
        study_id = uuid.uuid4().hex[:12]
        study_dir = self.studies_dir / study_id
        study_dir.mkdir(parents=True)
        (study_dir / "image.nii").write_bytes(write_nifti(volume, "f32"))
        mask_dtype = "u8" if int(mask.labels.max(initial=0)) < 256 else "i16"
        (study_dir / "mask.nii").write_bytes(write_nifti(mask, mask_dtype))
        (study_dir / "descriptor.json").write_text(
            json.dumps(
                {
                    "modality": descriptor.modality.value,
                    "body_region": descriptor.body_region,
                    "hint_keywords": list(descriptor.hint_keywords),
                    "labels": {str(k): v for k, v in mask.label_table.items()},
                },
                indent=2,
            )
        )
        record = StudyRecord(study_id, descriptor, volume, mask, route)
        self._persist_study(record)
        with self._lock:
            self.studies[study_id] = record
        return record

    def _persist_study(self, record: StudyRecord) -> None:
        study_dir = self.studies_dir / record.study_id
        payload = {
            "study_id": record.study_id,
            "route": {
                "pipeline_id": record.route.pipeline_id,
                "score": record.route.score,
                "matched_rules": list(record.route.matched_rules),
                "matched_keywords": list(record.route.matched_keywords),
            },
            "features": {k: v.to_dict() for k, v in record.features.items()},
            "ratio": record.ratio.to_dict() if record.ratio else None,
        }
        (study_dir / "study.json").write_text(json.dumps(payload, indent=2))

    def study(self, study_id: str) -> StudyRecord:
        record = self.studies.get(study_id)
        if record is None:
            raise UnknownStudy(f"no study {study_id!r}")
        return record

    def analyze(self, record: StudyRecord, organs: list[str]) -> None:
        by_name = {v: k for k, v in record.mask.label_table.items()}
        label_ids: dict[str, int] = {}
        for organ in organs:
            expanded = [
                name
                for name in by_name
                if name == organ or name in (f"{organ}_left", f"{organ}_right")
            ]
            if not expanded:
                raise LabelAbsent(f"organ {organ!r} is not present in the mask label table")
            for name in expanded:
                label_ids[name] = by_name[name]
        with self._lock:
            for name, label_id in label_ids.items():
                if name not in record.features:
                    record.features[name] = compute_features(record.volume, record.mask, label_id)
            sides = self._paired_sides(record)
            if sides is not None:
                record.ratio = paired_ratio(*sides)
            self._persist_study(record)

    @staticmethod
    def _paired_sides(record: StudyRecord) -> tuple[OrganFeatureSet, OrganFeatureSet] | None:
        left = record.features.get("kidney_left")
        right = record.features.get("kidney_right")
        if left is not None and right is not None:
            return left, right
        return None

    def feature_sets_for(self, record: StudyRecord, organ: str) -> list[OrganFeatureSet]:
        wanted = (organ, f"{organ}_left", f"{organ}_right")
        ordered = []
        for name in (f"{organ}_left", f"{organ}_right", organ):
            if name in record.features:
                ordered.append(record.features[name])
        if not ordered:
            raise NotAnalyzed(f"study {record.study_id!r} has no analyzed features for {organ!r}")
        assert all(f.organ in wanted for f in ordered)
        return ordered

    # -- sessions --

    def create_session(self, study_id: str, organ: str, prefix: str | None) -> SessionHandle:
        record = self.study(study_id)
        sets = self.feature_sets_for(record, organ)
        ratio = None
        if len(sets) == 2 and sets[0].organ.endswith("_left") and sets[1].organ.endswith("_right"):
            ratio = paired_ratio(sets[0], sets[1])
        payload = render_input_payload(sets, ratio, organ)
        session = CompletionSession(backend=self.backend, organ=organ, feature_payload=payload)
        handle = SessionHandle(session, self.sessions_dir / f"{session.id}.events.jsonl")
        meta = {
            "session_id": session.id,
            "study_id": study_id,
            "organ": organ,
            "feature_payload": payload,
        }
        (self.sessions_dir / f"{session.id}.meta.json").write_text(json.dumps(meta, indent=2))
        if prefix:
            session.edit(prefix)
            handle.persist()
        with self._lock:
            self.sessions[session.id] = handle
        return handle

    def session(self, session_id: str) -> SessionHandle:
        handle = self.sessions.get(session_id)
        if handle is None:
            raise UnknownSession(f"no session {session_id!r}")
        return handle


# --- HTTP layer -----------------------------------------------------------------

_STATUS_BY_ERROR: dict[type, int] = {
    UnknownStudy: 404,
    UnknownSession: 404,
    NotAnalyzed: 409,
    SuggestionInFlight: 409,
    NoSuggestion: 409,
    NotComplete: 409,
    NotStreaming: 409,
    EmptyPrompt: 409,
    LabelAbsent: 422,
    NoPipelineMatches: 422,
    UnknownFormat: 415,
}


def _http_status(exc: RadAssistError) -> int:
    for cls, status in _STATUS_BY_ERROR.items():
        if isinstance(exc, cls):
            return status
    return 400


def _error_json(exc: RadAssistError) -> JSONResponse:
    return JSONResponse(
        status_code=_http_status(exc), content={"error": exc.name, "detail": str(exc)}
    )


def _sse(event: str, payload: dict) -> str:
    return f"event: {event}\ndata: {json.dumps(payload, ensure_ascii=False)}\n\n"


_UNSUPPORTED_SUFFIXES = (".gz", ".zip", ".dcm", ".dicom", ".mha", ".mhd", ".nrrd")


def _parse_upload(
    data: bytes,
    filename: str,
    header: bytes | None,
    as_mask: bool,
    label_table: dict[int, str] | None,
    modality: Modality,
):
    if filename and filename.lower().endswith(_UNSUPPORTED_SUFFIXES):
        raise UnknownFormat(f"unsupported file format: {filename!r}")
    if header is not None:
        return parse_raw(header, data)
    return parse_nifti(data, as_mask=as_mask, label_table=label_table, modality=modality)


def create_app(config: dict | None = None) -> FastAPI:
    state = ServiceState(config or {})
    app = FastAPI(title="radassist", docs_url=None, redoc_url=None)
    app.state.service = state

    @app.exception_handler(RadAssistError)
    async def _domain_error(_request: Request, exc: RadAssistError):
        return _error_json(exc)

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/studies", status_code=201)
    def create_study(
        image: UploadFile = File(...),
        mask: UploadFile = File(...),
        descriptor: str = Form(...),
        labels: str | None = Form(None),
        image_header: UploadFile | None = File(None),
        mask_header: UploadFile | None = File(None),
    ):
        try:
            desc_raw = json.loads(descriptor)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"descriptor is not valid JSON: {exc}") from exc
        study_descriptor = StudyDescriptor(
            modality=desc_raw.get("modality", "OTHER"),
            body_region=desc_raw.get("body_region", ""),
            hint_keywords=tuple(desc_raw.get("hint_keywords", ())),
        )
        try:
            extra_labels = json.loads(labels) if labels else None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"labels is not valid JSON: {exc}") from exc
        label_table: dict[int, str] = {}
        for source in (desc_raw.get("labels"), extra_labels):
            if source:
                label_table.update({int(k): str(v) for k, v in source.items()})

        volume = _parse_upload(
            image.file.read(),
            image.filename or "",
            image_header.file.read() if image_header else None,
            as_mask=False,
            label_table=None,
            modality=study_descriptor.modality,
        )
        if isinstance(volume, LabelMask):
            raise BadMagic("the image part parsed as a mask, not a scalar volume")
        mask_obj = _parse_upload(
            mask.file.read(),
            mask.filename or "",
            mask_header.file.read() if mask_header else None,
            as_mask=True,
            label_table=label_table,
            modality=study_descriptor.modality,
        )
        if isinstance(mask_obj, VoxelVolume):
            raise imaging.MaskDtypeNotInteger("the mask part parsed as a scalar volume")
        record = state.store_study(volume, mask_obj, study_descriptor)
        return {"study_id": record.study_id, "route": record.route.pipeline_id}

    @app.post("/studies/{study_id}/analyze")
    def analyze_study(study_id: str, body: dict):
        record = state.study(study_id)
        organs = body.get("organs") or []
        if not isinstance(organs, list) or not organs:
            raise ConfigError("body must carry a non-empty 'organs' list")
        state.analyze(record, [str(o) for o in organs])
        return {
            "features": {k: v.to_dict() for k, v in sorted(record.features.items())},
            "ratio": record.ratio.to_dict() if record.ratio else None,
        }

    @app.get("/studies/{study_id}/slices/{axis}/{index}")
    def get_slice(study_id: str, axis: str, index: int):
        record = state.study(study_id)
        try:
            axis_enum = Axis(axis.upper())
        except ValueError as exc:
            raise IndexOutOfRange(f"unknown axis {axis!r}") from exc
        raster = extract_slice(record.mask, axis_enum, index)
        return {
            "axis": raster.axis.value,
            "index": raster.index,
            "width": raster.width,
            "height": raster.height,
            "labels": rle_encode(raster.labels),
            "palette": palette_for(record.mask),
            "label_table": {str(k): v for k, v in sorted(record.mask.label_table.items())},
        }

    @app.post("/sessions", status_code=201)
    def create_session(body: dict):
        study_id = str(body.get("study_id", ""))
        organ = str(body.get("organ", ""))
        handle = state.create_session(study_id, organ, body.get("prefix"))
        return {
            "session_id": handle.session.id,
            "feature_payload": handle.session.feature_payload,
        }

    @app.get("/sessions/{session_id}/suggestion")
    def stream_suggestion(session_id: str, max_tokens: int | None = None):
        handle = state.session(session_id)
        params = BackendParams(max_tokens=max_tokens or state.max_tokens_default)
        suggestion = handle.session.propose(params)
        handle.persist()  # Proposed hits the log before any token flows

        def event_stream() -> Iterator[str]:
            stream = handle.session.stream_current()
            try:
                for i, token in enumerate(stream):
                    yield _sse("token", {"text": token, "index": i})
            except GeneratorExit:
                stream.close()  # cancels the in-flight suggestion
                handle.persist()
                raise
            except CompletionError as exc:
                handle.persist()
                yield _sse("error", {"error": exc.name, "detail": str(exc)})
                return
            handle.persist()
            elapsed_ms = (suggestion.elapsed_s or 0.0) * 1000.0
            yield _sse(
                "done",
                {
                    "suggestion_id": suggestion.id,
                    "token_count": len(suggestion.tokens),
                    "elapsed_ms": elapsed_ms,
                    "tokens_per_sec": suggestion.tokens_per_sec,
                },
            )

        return StreamingResponse(event_stream(), media_type="text/event-stream")

    @app.post("/sessions/{session_id}/accept")
    def accept(session_id: str, body: dict):
        handle = state.session(session_id)
        raw_mode = str(body.get("mode", "full")).replace("_", "").lower()
        mode = AcceptMode.FirstWord if raw_mode == "firstword" else AcceptMode.Full
        text = handle.session.accept(mode)
        handle.persist()
        return {"accepted_text": text}

    @app.post("/sessions/{session_id}/reject")
    def reject(session_id: str):
        handle = state.session(session_id)
        handle.session.reject()
        handle.persist()
        return {"accepted_text": handle.session.accepted_text}

    @app.post("/sessions/{session_id}/edit")
    def edit(session_id: str, body: dict):
        handle = state.session(session_id)
        text = handle.session.edit(str(body.get("text", "")))
        handle.persist()
        return {"accepted_text": text}

    @app.get("/sessions/{session_id}/report")
    def report(session_id: str):
        handle = state.session(session_id)
        return {
            "accepted_text": handle.session.accepted_text,
            "event_count": len(handle.session.event_log),
        }

    return app


# --- config + entrypoint ----------------------------------------------------------


def load_config(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            config = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    backend = config.get("backend", {})
    if backend.get("kind", "rule") not in ("rule", "remote"):
        raise ConfigError(f"backend.kind must be 'rule' or 'remote', got {backend.get('kind')!r}")
    if backend.get("kind") == "remote":
        for key in ("base_url", "model"):
            if not backend.get(key):
                raise ConfigError(f"remote backend config missing {key!r}")
    return config


def run_server(config: dict) -> None:
    """Bind the socket ourselves (distinguishes port-in-use from bad config),
    then hand it to uvicorn."""
    import socket

    import uvicorn

    server_cfg = config.get("server", {})
    host = server_cfg.get("host", "127.0.0.1")
    port = int(server_cfg.get("port", 8008))
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(128)

    app = create_app(config)
    server = uvicorn.Server(uvicorn.Config(app, log_level="warning", lifespan="off"))
    server.run(sockets=[sock])
