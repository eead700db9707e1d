"""Pipeline routing and organ keyword detection.

The pipeline selector is a declarative rule table (auditable, testable);
keyword detection is a case-insensitive longest-match scan over a canonical
organ dictionary with plural and left/right qualifier folding.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import RadAssistError
from .imaging import Modality


class RouterError(RadAssistError):
    pass


class NoPipelineMatches(RouterError):
    pass


# Canonical organ dictionary. Covers the abdominal organs the reports mention
# plus the chest entries the X-ray pipeline needs; extensible via JSON config.
ORGAN_DICTIONARY: tuple[str, ...] = (
    "kidney",
    "liver",
    "spleen",
    "bladder",
    "lung",
    "appendix",
    "adrenal gland",
    "pancreas",
    "aorta",
    "gallbladder",
    "stomach",
    "colon",
    "duodenum",
    "small bowel",
    "prostate",
    "uterus",
    "ureter",
    "urethra",
    "esophagus",
    "heart",
)


@dataclass(frozen=True)
class StudyDescriptor:
    modality: Modality
    body_region: str
    hint_keywords: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        region = str(self.body_region).strip().lower()
        if not region:
            raise RouterError("body_region must be non-empty")
        object.__setattr__(self, "body_region", region)
        object.__setattr__(self, "hint_keywords", tuple(str(k) for k in self.hint_keywords))


@dataclass(frozen=True)
class RouteDecision:
    pipeline_id: str
    score: float
    matched_rules: tuple[str, ...]
    matched_keywords: tuple[str, ...]


@dataclass(frozen=True)
class KeywordHit:
    organ: str
    span: tuple[int, int]
    surface_form: str


def _variants(organ: str) -> list[str]:
    base = [organ, organ + "s"]
    out = list(base)
    for side in ("left", "right"):
        out.extend(f"{side} {form}" for form in base)
    return out


class KeywordDetector:
    """Longest-match scanner; variants fold to their canonical organ."""

    def __init__(self, organs: tuple[str, ...] = ORGAN_DICTIONARY):
        self.organs = tuple(organs)
        self._canonical = {}
        for organ in self.organs:
            for variant in _variants(organ):
                self._canonical[variant.lower()] = organ
        # longest alternatives first so the regex engine prefers them
        alts = sorted(self._canonical, key=len, reverse=True)
        pattern = r"\b(?:" + "|".join(re.escape(a) for a in alts) + r")\b"
        self._regex = re.compile(pattern, re.IGNORECASE)

    def detect(self, text: str) -> list[KeywordHit]:
        hits = []
        for m in self._regex.finditer(text):
            surface = m.group(0)
            hits.append(
                KeywordHit(
                    organ=self._canonical[surface.lower()],
                    span=(m.start(), m.end()),
                    surface_form=surface,
                )
            )
        return hits


_DEFAULT_DETECTOR = KeywordDetector()


def detect_keywords(text: str) -> list[KeywordHit]:
    """Scan free text for organ mentions, sorted by span start."""
    return _DEFAULT_DETECTOR.detect(text)


def canonical_organs(text: str) -> list[str]:
    """Distinct canonical organs mentioned in the text, in first-hit order."""
    seen: dict[str, None] = {}
    for hit in detect_keywords(text):
        seen.setdefault(hit.organ, None)
    return list(seen)


@dataclass(frozen=True)
class RouteRule:
    rule_id: str
    pipeline_id: str
    weight: float = 1.0
    modality: str = "*"  # exact modality name or "*"
    region: str = "*"  # exact lowercase region or "*"
    keywords: tuple[str, ...] = ()  # require at least one if non-empty

    def matches(self, study: StudyDescriptor, organs: set[str]) -> bool:
        if self.modality != "*" and self.modality != study.modality.value:
            return False
        if self.region != "*" and self.region != study.body_region:
            return False
        if self.keywords and not organs.intersection(self.keywords):
            return False
        return True


DEFAULT_ROUTE_RULES: tuple[RouteRule, ...] = (
    RouteRule("ct-abdomen", "ct-seg-radiomics", 1.0, modality="CT", region="abdomen"),
    RouteRule("xr-chest", "xray-classifier", 1.0, modality="XR", region="chest"),
)


@dataclass
class Router:
    rules: tuple[RouteRule, ...] = DEFAULT_ROUTE_RULES
    detector: KeywordDetector = field(default_factory=lambda: _DEFAULT_DETECTOR)

    def route(self, study: StudyDescriptor) -> RouteDecision:
        hint_text = " ".join(study.hint_keywords)
        hits = self.detector.detect(hint_text)
        organs: dict[str, None] = {}
        for hit in hits:
            organs.setdefault(hit.organ, None)

        scores: dict[str, float] = {}
        matched: dict[str, list[str]] = {}
        order: dict[str, int] = {}
        for i, rule in enumerate(self.rules):
            if rule.matches(study, set(organs)):
                scores[rule.pipeline_id] = scores.get(rule.pipeline_id, 0.0) + rule.weight
                matched.setdefault(rule.pipeline_id, []).append(rule.rule_id)
                order.setdefault(rule.pipeline_id, i)
        if not scores:
            raise NoPipelineMatches(
                f"no pipeline rule matches {study.modality.value}/{study.body_region}"
            )
        # highest summed weight wins; ties broken by first matching rule order
        winner = min(scores, key=lambda p: (-scores[p], order[p]))
        return RouteDecision(
            pipeline_id=winner,
            score=scores[winner],
            matched_rules=tuple(matched[winner]),
            matched_keywords=tuple(organs),
        )


def route(study: StudyDescriptor) -> RouteDecision:
    return Router().route(study)


def load_router(path: str | Path) -> Router:
    """Load a router from JSON config: {"organs": [...], "rules": [{...}]}.

    Both keys are optional; omitted ones fall back to the defaults.
    """
    with open(path, "rb") as fh:
        cfg = json.load(fh)
    organs = tuple(cfg.get("organs", ORGAN_DICTIONARY))
    detector = KeywordDetector(organs)
    rules = []
    for i, r in enumerate(cfg.get("rules", [])):
        rules.append(
            RouteRule(
                rule_id=str(r.get("id", f"rule-{i}")),
                pipeline_id=str(r["pipeline"]),
                weight=float(r.get("weight", 1.0)),
                modality=str(r.get("modality", "*")),
                region=str(r.get("region", "*")).lower(),
                keywords=tuple(r.get("keywords", ())),
            )
        )
    return Router(rules=tuple(rules) or DEFAULT_ROUTE_RULES, detector=detector)


def load_classifier_evidence(path: str | Path) -> dict[str, float]:
    """Read precomputed classifier output JSON: {"labels": {name: probability}}."""
    with open(path, "rb") as fh:
        payload = json.load(fh)
    labels = payload.get("labels")
    if not isinstance(labels, dict):
        raise RouterError("classifier evidence must contain a labels map")
    return {str(k): float(v) for k, v in labels.items()}
