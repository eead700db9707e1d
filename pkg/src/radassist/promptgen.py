"""Render organ feature sets and the report prefix into informative prompts.

The wire format is 7-bit ASCII ("cm3", not the typeset superscript) and byte
deterministic: volumes round to whole cm3 (1 decimal below 10 cm3), the
left/right ratio to 2 decimals, everything else to 1 decimal, all ties away
from zero.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .errors import RadAssistError
from .radiomics import LateralityRatio, OrganFeatureSet


class PromptError(RadAssistError):
    pass


class OrganMismatch(PromptError):
    pass


class EmptyFeatures(PromptError):
    pass


SMALL_VOLUME_CM3 = 10.0

# canonical order for the optional extra-feature statements
EXTRA_FEATURES: tuple[tuple[str, str, str], ...] = (
    ("surface area", "surface_area_mm2", "mm2"),
    ("sphericity", "sphericity", ""),
    ("intensity mean", "intensity_mean", "HU"),
    ("intensity std", "intensity_std", "HU"),
    ("entropy", "intensity_entropy", "bits"),
)
EXTRA_FEATURE_NAMES = tuple(name for name, _, _ in EXTRA_FEATURES)


def _round(value: float, places: str) -> str:
    return str(Decimal(repr(float(value))).quantize(Decimal(places), rounding=ROUND_HALF_UP))


def format_volume(v: float) -> str:
    return _round(v, "0.1") if abs(v) < SMALL_VOLUME_CM3 else _round(v, "1")


def format_ratio(r: float) -> str:
    return _round(r, "0.01")


def format_feature(x: float) -> str:
    return _round(x, "0.1")


@dataclass(frozen=True)
class InformativePrompt:
    organ: str
    statements: tuple[tuple[str, str, str], ...]  # (name, rendered value, unit)
    report_prefix: str
    rendered: str


def _side_of(feature_organ: str, organ: str) -> str | None:
    f = feature_organ.strip().lower().replace(" ", "_")
    o = organ.strip().lower().replace(" ", "_")
    if f == o:
        return None
    if f == o + "_left":
        return "left"
    if f == o + "_right":
        return "right"
    raise OrganMismatch(f"feature set for {feature_organ!r} does not belong to organ {organ!r}")


def _display(organ: str, side: str | None) -> str:
    if side is None:
        return organ.capitalize()
    return side.capitalize() + " " + organ.lower()


def _clause(name: str, value: str, unit: str) -> str:
    if name == "volume ratio":
        return f"the volume ratio is {value}"
    return f"{name}: {value} {unit}" if unit else f"{name}: {value}"


def render_prompt(
    features: list[OrganFeatureSet],
    ratio: LateralityRatio | None,
    organ: str,
    report_prefix: str,
    extras: tuple[str, ...] = (),
) -> InformativePrompt:
    """Build the prompt: paired volumes first (left, right), then the ratio,
    then any requested extra features, then the report prefix."""
    if not features:
        raise EmptyFeatures(f"no feature sets supplied for organ {organ!r}")
    unknown = set(extras) - set(EXTRA_FEATURE_NAMES)
    if unknown:
        raise PromptError(f"unknown extra features {sorted(unknown)}")

    sided: dict[str | None, OrganFeatureSet] = {}
    for fs in features:
        side = _side_of(fs.organ, organ)
        if side in sided:
            raise OrganMismatch(f"duplicate feature set for {fs.organ!r}")
        sided[side] = fs
    ordered = [(s, sided[s]) for s in ("left", "right", None) if s in sided]

    statements: list[tuple[str, str, str]] = []
    for side, fs in ordered:
        statements.append((f"{_display(organ, side)} volume", format_volume(fs.volume_cm3), "cm3"))
    if ratio is not None:
        statements.append(("volume ratio", format_ratio(ratio.ratio), ""))
    for name in EXTRA_FEATURE_NAMES:
        if name not in extras:
            continue
        attr = unit = None
        for n, a, u in EXTRA_FEATURES:
            if n == name:
                attr, unit = a, u
        for side, fs in ordered:
            statements.append(
                (f"{_display(organ, side)} {name}", format_feature(getattr(fs, attr)), unit)
            )

    body = ", ".join(_clause(*s) for s in statements)
    rendered = body + (", " + report_prefix if report_prefix else "")
    return InformativePrompt(
        organ=organ,
        statements=tuple(statements),
        report_prefix=report_prefix,
        rendered=rendered,
    )


def render_input_payload(
    features: list[OrganFeatureSet],
    ratio: LateralityRatio | None,
    organ: str,
    extras: tuple[str, ...] = (),
) -> str:
    """The prompt without a report prefix; stored as the triplet "input"."""
    return render_prompt(features, ratio, organ, report_prefix="", extras=extras).rendered


def load_templates(path: str | Path) -> dict[str, str]:
    """Optional override file: JSON map organ -> template with named
    placeholders (left_volume, right_volume, volume, ratio)."""
    with open(path, "rb") as fh:
        templates = json.load(fh)
    if not isinstance(templates, dict):
        raise PromptError("template override file must be a JSON object")
    return {str(k): str(v) for k, v in templates.items()}


def render_with_template(
    template: str,
    features: list[OrganFeatureSet],
    ratio: LateralityRatio | None,
    organ: str,
    report_prefix: str = "",
) -> InformativePrompt:
    """Render through an override template; the prefix rule stays unchanged."""
    if not features:
        raise EmptyFeatures(f"no feature sets supplied for organ {organ!r}")
    values: dict[str, str] = {}
    for fs in features:
        side = _side_of(fs.organ, organ)
        key = "volume" if side is None else f"{side}_volume"
        values[key] = format_volume(fs.volume_cm3)
    if ratio is not None:
        values["ratio"] = format_ratio(ratio.ratio)
    try:
        body = template.format(**values)
    except (KeyError, IndexError) as exc:
        raise PromptError(f"template placeholder not available: {exc}") from exc
    rendered = body + (", " + report_prefix if report_prefix else "")
    return InformativePrompt(
        organ=organ,
        statements=(("template", body, ""),),
        report_prefix=report_prefix,
        rendered=rendered,
    )
