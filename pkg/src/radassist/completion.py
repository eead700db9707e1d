"""Completion sessions, suggestion lifecycle, and streaming backends.

Two backends ship: a deterministic rule backend (ordered rule file over
feature values parsed out of the prompt) used for tests and offline demos,
and a streaming client for the de facto chat-completions JSON wire format.

Each session is a single-writer state machine; all mutating operations are
serialized by a per-session lock, and at most one suggestion streams at a
time. The event log is the source of truth: replaying it from an empty
session reproduces the accepted text exactly.
"""
from __future__ import annotations

import json
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Protocol

import httpx

from .errors import ConfigError, RadAssistError
from .router import canonical_organs


class CompletionError(RadAssistError):
    pass


class BackendUnavailable(CompletionError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class BackendTimeout(CompletionError):
    pass


class StreamCorrupt(CompletionError):
    pass


class SuggestionInFlight(CompletionError):
    pass


class EmptyPrompt(CompletionError):
    pass


class NoSuggestion(CompletionError):
    pass


class NotComplete(CompletionError):
    pass


class NotStreaming(CompletionError):
    pass


@dataclass(frozen=True)
class BackendParams:
    max_tokens: int = 128
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self):
        if self.max_tokens < 1:
            raise CompletionError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise CompletionError("temperature must be >= 0")


class CancelToken:
    """Cooperative cancellation; backends stop within one token of set()."""

    def __init__(self):
        self._event = threading.Event()

    def set(self) -> None:
        self._event.set()

    def is_set(self) -> bool:
        return self._event.is_set()


_TERMINAL_PUNCT = ".,!?;:"


def stream_tokens(text: str) -> list[str]:
    """Split text into streamable tokens whose concatenation is byte-exact.

    Words keep their preceding whitespace; a single trailing punctuation mark
    becomes its own token (so "appearance." streams as two tokens, the way
    subword tokenizers emit sentence-final punctuation).
    """
    tokens: list[str] = []
    pending_ws = ""
    for part in re.findall(r"\s+|\S+", text):
        if part.isspace():
            pending_ws += part
            continue
        word = pending_ws + part
        pending_ws = ""
        if len(part) > 1 and part[-1] in _TERMINAL_PUNCT and part[-2] not in _TERMINAL_PUNCT:
            tokens.append(word[:-1])
            tokens.append(word[-1])
        else:
            tokens.append(word)
    if pending_ws:
        tokens.append(pending_ws)
    return tokens


class Backend(Protocol):
    """Streaming text-generation contract.

    ``generate`` yields zero or more tokens then ends; it must honor
    ``cancel`` within one token boundary and never yield more than
    ``params.max_tokens`` tokens.
    """

    def generate(
        self, prompt: str, params: BackendParams, cancel: CancelToken | None = None
    ) -> Iterator[str]: ...


# --- rule backend -------------------------------------------------------------

FALLBACK_TEMPLATE = "The {organ} is visualized."

# Kidney rule table R1. Order matters: the ratio rules outrank the volume
# rules, so e.g. ratio 0.60 with one atrophic kidney reports the asymmetry.
DEFAULT_RULE_SPECS: tuple[dict, ...] = (
    {
        "organ": "kidney",
        "priority": 10,
        "predicate": {
            "all": [
                {"field": "left_volume", "ge": 120, "le": 200},
                {"field": "right_volume", "ge": 120, "le": 200},
                {"field": "ratio", "ge": 0.85, "le": 1.18},
            ]
        },
        "template": "The kidneys have a normal appearance.",
    },
    {
        "organ": "kidney",
        "priority": 20,
        "predicate": {"field": "ratio", "lt": 0.85},
        "template": "The left kidney is small relative to the right, suggesting asymmetry.",
    },
    {
        "organ": "kidney",
        "priority": 30,
        "predicate": {"field": "ratio", "gt": 1.18},
        "template": "The right kidney is small relative to the left, suggesting asymmetry.",
    },
    {
        "organ": "kidney",
        "priority": 40,
        "predicate": {"field": "min_volume", "lt": 120},
        "template": "The kidneys show decreased volume, consistent with atrophic change.",
    },
    {
        "organ": "kidney",
        "priority": 50,
        "predicate": {"field": "max_volume", "gt": 200},
        "template": "The kidneys appear enlarged, with increased volume.",
    },
)

_VOLUME_RE = re.compile(r"\b([A-Za-z][A-Za-z _]*?) volume: (-?\d+(?:\.\d+)?) cm3", re.IGNORECASE)
_RATIO_RE = re.compile(r"\bthe volume ratio is (-?\d+(?:\.\d+)?)", re.IGNORECASE)


def parse_prompt_facts(prompt: str) -> dict:
    """Extract the feature values a rule predicate can reference."""
    facts: dict = {
        "left_volume": None,
        "right_volume": None,
        "volume": None,
        "ratio": None,
        "min_volume": None,
        "max_volume": None,
        "organs": canonical_organs(prompt),
    }
    volumes = []
    for m in _VOLUME_RE.finditer(prompt):
        label, value = m.group(1).strip().lower(), float(m.group(2))
        volumes.append(value)
        if label.startswith("left "):
            facts["left_volume"] = value
        elif label.startswith("right "):
            facts["right_volume"] = value
        elif facts["volume"] is None:
            facts["volume"] = value
    m = _RATIO_RE.search(prompt)
    if m:
        facts["ratio"] = float(m.group(1))
    if volumes:
        facts["min_volume"] = min(volumes)
        facts["max_volume"] = max(volumes)
    return facts


def eval_predicate(pred: dict, facts: dict) -> bool:
    if "all" in pred:
        return all(eval_predicate(p, facts) for p in pred["all"])
    if "any" in pred:
        return any(eval_predicate(p, facts) for p in pred["any"])
    value = facts.get(pred["field"])
    if "present" in pred:
        return (value is not None) == bool(pred["present"])
    if value is None:
        return False
    if "ge" in pred and not value >= pred["ge"]:
        return False
    if "le" in pred and not value <= pred["le"]:
        return False
    if "gt" in pred and not value > pred["gt"]:
        return False
    if "lt" in pred and not value < pred["lt"]:
        return False
    if "eq" in pred and not value == pred["eq"]:
        return False
    return True


@dataclass(frozen=True)
class CompletionRule:
    organ: str
    predicate: dict
    template: str
    priority: int = 100

    @classmethod
    def from_dict(cls, d: dict) -> "CompletionRule":
        return cls(
            organ=str(d.get("organ", "*")),
            predicate=d.get("predicate", {}),
            template=str(d["template"]),
            priority=int(d.get("priority", 100)),
        )


DEFAULT_RULES: tuple[CompletionRule, ...] = tuple(
    CompletionRule.from_dict(d) for d in DEFAULT_RULE_SPECS
)


def load_rules(path: str | Path) -> tuple[CompletionRule, ...]:
    with open(path, "rb") as fh:
        specs = json.load(fh)
    if not isinstance(specs, list):
        raise ConfigError("rule file must be a JSON list of rules")
    return tuple(CompletionRule.from_dict(d) for d in specs)


class RuleBackend:
    """Deterministic template backend driven by an ordered rule file."""

    def __init__(
        self,
        rules: tuple[CompletionRule, ...] = DEFAULT_RULES,
        token_delay_s: float = 0.0,
    ):
        self.rules = tuple(sorted(rules, key=lambda r: r.priority))
        self.token_delay_s = token_delay_s

    def complete_text(self, prompt: str) -> str:
        facts = parse_prompt_facts(prompt)
        for rule in self.rules:
            if rule.organ != "*" and rule.organ not in facts["organs"]:
                continue
            if eval_predicate(rule.predicate, facts):
                return rule.template
        # no rule matches: fall through to the generic sentence
        organ = facts["organs"][0] if facts["organs"] else "region"
        return FALLBACK_TEMPLATE.format(organ=organ)

    def generate(
        self, prompt: str, params: BackendParams, cancel: CancelToken | None = None
    ) -> Iterator[str]:
        text = self.complete_text(prompt)
        emitted = ""
        for i, token in enumerate(stream_tokens(text)):
            if i >= params.max_tokens:
                return
            if cancel is not None and cancel.is_set():
                return
            if any(stop in emitted + token for stop in params.stop_sequences):
                return
            if self.token_delay_s > 0:
                time.sleep(self.token_delay_s)
            emitted += token
            yield token


# --- remote chat-completions backend ------------------------------------------

SYSTEM_INSTRUCTION = (
    "You are a radiology reporting assistant. Continue the report from the "
    "quantitative findings and partial text provided; reply with the "
    "continuation only."
)


class RemoteBackend:
    """Streaming client for POST {base}/v1/chat/completions with SSE framing."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout_s: float = 30.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout_s = timeout_s

    @classmethod
    def from_config(cls, cfg: dict) -> "RemoteBackend":
        import os

        for key in ("base_url", "model"):
            if not cfg.get(key):
                raise ConfigError(f"remote backend config missing {key!r}")
        api_key = None
        key_env = cfg.get("api_key_env")
        if key_env:
            api_key = os.environ.get(key_env)
            if api_key is None:
                raise ConfigError(f"environment variable {key_env!r} is not set")
        return cls(
            base_url=cfg["base_url"],
            model=cfg["model"],
            api_key=api_key,
            timeout_s=float(cfg.get("timeout_s", 30.0)),
        )

    def generate(
        self, prompt: str, params: BackendParams, cancel: CancelToken | None = None
    ) -> Iterator[str]:
        body = {
            "model": self.model,
            "stream": True,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "messages": [
                {"role": "system", "content": SYSTEM_INSTRUCTION},
                {"role": "user", "content": prompt},
            ],
        }
        if params.stop_sequences:
            body["stop"] = list(params.stop_sequences)
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        try:
            with httpx.Client(timeout=self.timeout_s) as client:
                with client.stream(
                    "POST", f"{self.base_url}/v1/chat/completions", json=body, headers=headers
                ) as resp:
                    if resp.status_code != 200:
                        raise BackendUnavailable(
                            f"backend returned HTTP {resp.status_code}", status=resp.status_code
                        )
                    yield from self._parse_stream(resp.iter_lines(), params, cancel)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"backend timed out after {self.timeout_s}s: {exc}") from exc
        except httpx.TransportError as exc:
            raise BackendUnavailable(f"backend unreachable: {exc}") from exc

    def _parse_stream(
        self, lines: Iterator[str], params: BackendParams, cancel: CancelToken | None
    ) -> Iterator[str]:
        count = 0
        for line in lines:
            if cancel is not None and cancel.is_set():
                return
            line = line.strip()
            if not line or not line.startswith("data:"):
                continue
            payload = line[len("data:") :].strip()
            if payload == "[DONE]":
                return
            try:
                chunk = json.loads(payload)
            except json.JSONDecodeError as exc:
                raise StreamCorrupt(f"malformed stream chunk: {payload[:120]!r}") from exc
            choices = chunk.get("choices") if isinstance(chunk, dict) else None
            if not isinstance(choices, list) or not choices:
                raise StreamCorrupt(f"chunk carries no choices: {payload[:120]!r}")
            content = (choices[0].get("delta") or {}).get("content")
            if content:
                yield content
                count += 1
                if count >= params.max_tokens:
                    return
        raise StreamCorrupt("stream ended before data: [DONE]")


def make_backend(cfg: dict) -> Backend:
    """Build a backend from service/CLI config: {"kind": "rule"|"remote", ...}."""
    kind = cfg.get("kind", "rule")
    if kind == "rule":
        rules = load_rules(cfg["rules_path"]) if cfg.get("rules_path") else DEFAULT_RULES
        return RuleBackend(rules, token_delay_s=float(cfg.get("token_delay_s", 0.0)))
    if kind == "remote":
        return RemoteBackend.from_config(cfg)
    raise ConfigError(f"unknown backend kind {kind!r}")


# --- suggestion & session state machine ----------------------------------------


class SuggestionStatus(str, Enum):
    Streaming = "Streaming"
    Complete = "Complete"
    Accepted = "Accepted"
    PartiallyAccepted = "PartiallyAccepted"
    Rejected = "Rejected"
    Cancelled = "Cancelled"


class EventKind(str, Enum):
    Proposed = "Proposed"
    Accepted = "Accepted"
    PartialAccept = "PartialAccept"
    Rejected = "Rejected"
    Edited = "Edited"
    Cancelled = "Cancelled"


@dataclass(frozen=True)
class FeedbackEvent:
    kind: EventKind
    timestamp: float
    payload: str

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "timestamp": self.timestamp, "payload": self.payload}

    @classmethod
    def from_dict(cls, d: dict) -> "FeedbackEvent":
        return cls(EventKind(d["kind"]), float(d["timestamp"]), str(d.get("payload", "")))


@dataclass
class Suggestion:
    id: str
    prompt: str
    tokens: list[str] = field(default_factory=list)
    status: SuggestionStatus = SuggestionStatus.Streaming
    started_at: float = field(default_factory=time.time)
    finished_at: float | None = None
    elapsed_s: float | None = None
    tokens_per_sec: float | None = None
    _mono_start: float = field(default_factory=time.monotonic, repr=False)
    _source: Iterator[str] | None = field(default=None, repr=False)

    @property
    def text(self) -> str:
        return "".join(self.tokens)


def _append_with_space(base: str, addition: str) -> str:
    if base and addition and not base[-1].isspace() and not addition[0].isspace():
        return base + " " + addition
    return base + addition


def replay_accepted_text(events: list[FeedbackEvent]) -> str:
    """Fold the event log into the accepted text (the log is authoritative)."""
    text = ""
    for ev in events:
        if ev.kind in (EventKind.Accepted, EventKind.PartialAccept):
            text = _append_with_space(text, ev.payload)
        elif ev.kind is EventKind.Edited:
            text = ev.payload
    return text


class AcceptMode(str, Enum):
    Full = "Full"
    FirstWord = "FirstWord"


class CompletionSession:
    """Live editing state for one report section."""

    def __init__(
        self,
        backend: Backend,
        organ: str,
        feature_payload: str,
        accepted_text: str = "",
        session_id: str | None = None,
    ):
        self.id = session_id or uuid.uuid4().hex[:12]
        self.backend = backend
        self.organ = organ
        self.feature_payload = feature_payload
        self.accepted_text = accepted_text
        self.current_suggestion: Suggestion | None = None
        self.event_log: list[FeedbackEvent] = []
        self._lock = threading.RLock()
        self._cancel: CancelToken | None = None
        self._last_ts = 0.0

    # -- internals --

    def _log(self, kind: EventKind, payload: str) -> FeedbackEvent:
        ts = max(time.time(), self._last_ts + 1e-6)  # strictly time-ordered
        self._last_ts = ts
        ev = FeedbackEvent(kind, ts, payload)
        self.event_log.append(ev)
        return ev

    def _build_prompt(self) -> str:
        # radiomics evidence first, then the report written so far
        if self.feature_payload and self.accepted_text:
            return self.feature_payload + ", " + self.accepted_text
        if self.feature_payload:
            return self.feature_payload
        if self.accepted_text:
            return self.accepted_text
        raise EmptyPrompt("both the feature payload and the accepted text are empty")

    def _cancel_current(self, suggestion: Suggestion) -> None:
        with self._lock:
            if suggestion.status is not SuggestionStatus.Streaming:
                return
            if self._cancel is not None:
                self._cancel.set()
            suggestion.status = SuggestionStatus.Cancelled
            suggestion.finished_at = time.time()
            self._log(EventKind.Cancelled, suggestion.text)
            if self.current_suggestion is suggestion:
                self.current_suggestion = None

    def _finalize_complete(self, suggestion: Suggestion) -> None:
        with self._lock:
            if suggestion.status is not SuggestionStatus.Streaming:
                return
            elapsed = max(time.monotonic() - suggestion._mono_start, 1e-9)
            suggestion.status = SuggestionStatus.Complete
            suggestion.finished_at = time.time()
            suggestion.elapsed_s = elapsed
            suggestion.tokens_per_sec = len(suggestion.tokens) / elapsed

    # -- operations --

    def propose(self, params: BackendParams | None = None) -> Suggestion:
        """Start a new suggestion stream; drive it via stream_current()."""
        params = params or BackendParams()
        with self._lock:
            current = self.current_suggestion
            if current is not None and current.status is SuggestionStatus.Streaming:
                raise SuggestionInFlight(f"suggestion {current.id} is still streaming")
            if current is not None:
                # a fresh proposal supersedes an unactioned Complete suggestion
                current.status = SuggestionStatus.Rejected
                self.current_suggestion = None
            prompt = self._build_prompt()
            self._cancel = CancelToken()
            suggestion = Suggestion(id=uuid.uuid4().hex[:12], prompt=prompt)
            suggestion._source = self.backend.generate(prompt, params, self._cancel)
            self.current_suggestion = suggestion
            self._log(EventKind.Proposed, "")
            return suggestion

    def stream_current(self) -> Iterator[str]:
        """Yield tokens of the in-flight suggestion as the backend produces
        them; closing the iterator mid-stream cancels the suggestion."""
        with self._lock:
            suggestion = self.current_suggestion
            if suggestion is None:
                raise NoSuggestion("nothing is streaming")
            if suggestion.status is not SuggestionStatus.Streaming or suggestion._source is None:
                raise NotStreaming(f"suggestion {suggestion.id} is {suggestion.status.value}")
            source = suggestion._source
        try:
            for token in source:
                suggestion.tokens.append(token)  # atomic append, safe for readers
                yield token
        except GeneratorExit:
            self._cancel_current(suggestion)
            raise
        except CompletionError:
            self._cancel_current(suggestion)
            raise
        self._finalize_complete(suggestion)

    def propose_and_wait(self, params: BackendParams | None = None) -> Suggestion:
        suggestion = self.propose(params)
        for _ in self.stream_current():
            pass
        return suggestion

    def accept(self, mode: AcceptMode | str = AcceptMode.Full) -> str:
        mode = AcceptMode(mode)
        with self._lock:
            suggestion = self.current_suggestion
            if suggestion is None:
                raise NoSuggestion("no suggestion to accept")
            if suggestion.status is not SuggestionStatus.Complete:
                raise NotComplete(f"suggestion is {suggestion.status.value}, not Complete")
            text = suggestion.text.strip()
            if mode is AcceptMode.Full:
                self.accepted_text = _append_with_space(self.accepted_text, text)
                suggestion.status = SuggestionStatus.Accepted
                self._log(EventKind.Accepted, text)
                self.current_suggestion = None
            else:
                first, _, rest = text.partition(" ")
                rest = rest.lstrip()
                self.accepted_text = _append_with_space(self.accepted_text, first)
                suggestion.status = SuggestionStatus.PartiallyAccepted
                self._log(EventKind.PartialAccept, first)
                if rest:
                    remainder = Suggestion(
                        id=uuid.uuid4().hex[:12],
                        prompt=suggestion.prompt,
                        tokens=stream_tokens(rest),
                        status=SuggestionStatus.Complete,
                        started_at=suggestion.started_at,
                        finished_at=time.time(),
                        elapsed_s=suggestion.elapsed_s,
                        tokens_per_sec=suggestion.tokens_per_sec,
                    )
                    self.current_suggestion = remainder
                else:
                    self.current_suggestion = None
            return self.accepted_text

    def reject(self) -> None:
        with self._lock:
            suggestion = self.current_suggestion
            if suggestion is None:
                raise NoSuggestion("no suggestion to reject")
            if suggestion.status is not SuggestionStatus.Complete:
                raise NotComplete(f"suggestion is {suggestion.status.value}, not Complete")
            suggestion.status = SuggestionStatus.Rejected
            self._log(EventKind.Rejected, suggestion.text)
            self.current_suggestion = None

    def edit(self, new_text: str) -> str:
        with self._lock:
            suggestion = self.current_suggestion
            if suggestion is not None and suggestion.status is SuggestionStatus.Streaming:
                raise SuggestionInFlight("cannot edit while a suggestion is streaming")
            if suggestion is not None:
                # divergent typing discards the pending ghost text
                suggestion.status = SuggestionStatus.Rejected
                self.current_suggestion = None
            self.accepted_text = new_text
            self._log(EventKind.Edited, new_text)
            return self.accepted_text

    def cancel(self) -> None:
        with self._lock:
            suggestion = self.current_suggestion
            if suggestion is None:
                raise NoSuggestion("no suggestion to cancel")
            if suggestion.status is not SuggestionStatus.Streaming:
                raise NotStreaming(f"suggestion is {suggestion.status.value}, not Streaming")
            self._cancel_current(suggestion)
