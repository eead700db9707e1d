"""Training-data construction: Instruct/Input/Target triplets, report
section parsing, augmentation, train/test splitting, and a seeded synthetic
paired corpus (features + report + normal/abnormal label) for desk-scale
experiments.

Dataset files are JSON-lines, one triplet per line, UTF-8.
"""
from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .completion import Backend, BackendParams, DEFAULT_RULES, RuleBackend
from .errors import RadAssistError
from .promptgen import render_input_payload
from .radiomics import LateralityRatio, OrganFeatureSet, paired_ratio, sphericity_from
from .router import detect_keywords

DEFAULT_PREFIX_TOKENS = 20


class CorpusError(RadAssistError):
    pass


class OrganNotMentioned(CorpusError):
    pass


class EmptyTarget(CorpusError):
    pass


class TooFewItems(CorpusError):
    pass


class Condition(str, Enum):
    WithRadiomics = "WithRadiomics"
    PrefixOnly = "PrefixOnly"


class CaseLabel(str, Enum):
    Normal = "Normal"
    Abnormal = "Abnormal"
    Unknown = "Unknown"


INSTRUCT_TEMPLATE = (
    "Complete the radiology report section for the {organ} given the quantitative findings."
)

EXTRACTION_INSTRUCTION = (
    "Extract the sentences of the following radiology report that describe the "
    "{organ}. Reply with those sentences verbatim and nothing else."
)

# words whose trailing period does not end a sentence
_ABBREV_GUARD = {"cm", "mm", "no", "dr", "fig", "vs", "approx", "e.g", "i.e"}

_HEADING_RE = re.compile(r"^([A-Z][A-Z0-9 ]*):\s?(.*)$")


def split_sentences(text: str) -> list[str]:
    """Split on '. ' with an abbreviation guard; line breaks also split."""
    sentences: list[str] = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        start = 0
        search = 0
        while True:
            idx = line.find(". ", search)
            if idx == -1:
                break
            head = line[start:idx].split()
            last = head[-1].lower().lstrip("(\"'") if head else ""
            if last in _ABBREV_GUARD:
                search = idx + 1
                continue
            sentence = line[start : idx + 1].strip()
            if sentence:
                sentences.append(sentence)
            start = idx + 2
            search = start
        tail = line[start:].strip()
        if tail:
            sentences.append(tail)
    return sentences


@dataclass(frozen=True)
class ReportDocument:
    report_id: str
    raw_text: str
    sections: tuple[tuple[str, str], ...]  # (heading, body); "" heading = untitled
    organ_sentences: dict[str, list[str]]


# headings that terminate the findings region when scanning forward
_NON_FINDINGS_HEADINGS = {
    "IMPRESSION",
    "CONCLUSION",
    "COMPARISON",
    "TECHNIQUE",
    "INDICATION",
    "HISTORY",
    "EXAM",
    "RECOMMENDATION",
}


def parse_report_sections(raw: str, report_id: str = "") -> ReportDocument:
    """Split a report into (heading, body) sections and attribute sentences
    to organs.

    Headings are ALL-CAPS words followed by ":". Organ attribution runs per
    sentence over the findings region: the FINDINGS section plus any directly
    following organ-headed subsections (e.g. "KIDNEYS: ..."), or the whole
    document when no FINDINGS heading exists. Sentences under an organ heading
    are attributed to that organ as well.
    """
    sections: list[tuple[str, list[str]]] = []
    current_heading = ""
    current_body: list[str] = []
    started = False
    for line in raw.splitlines():
        m = _HEADING_RE.match(line.strip())
        if m:
            if started and (current_heading or any(s.strip() for s in current_body)):
                sections.append((current_heading, current_body))
            current_heading = m.group(1).strip()
            current_body = [m.group(2)] if m.group(2) else []
            started = True
        else:
            current_body.append(line)
            started = True
    if started and (current_heading or any(s.strip() for s in current_body)):
        sections.append((current_heading, current_body))

    packed = tuple((h, "\n".join(b).strip()) for h, b in sections)

    findings_idx = next((i for i, (h, _) in enumerate(packed) if h == "FINDINGS"), None)
    region: list[tuple[str, str]] = []
    if findings_idx is None:
        region = list(packed)
    else:
        region.append(packed[findings_idx])
        for h, b in packed[findings_idx + 1 :]:
            heading_organs = [hit.organ for hit in detect_keywords(h)]
            if not heading_organs or h in _NON_FINDINGS_HEADINGS:
                break
            region.append((h, b))

    organ_sentences: dict[str, list[str]] = {}
    for heading, body in region:
        heading_organs = {hit.organ for hit in detect_keywords(heading)}
        for sentence in split_sentences(body):
            organs = {hit.organ for hit in detect_keywords(sentence)} | heading_organs
            for organ in sorted(organs):
                organ_sentences.setdefault(organ, []).append(sentence)
    return ReportDocument(report_id, raw, packed, organ_sentences)


def extract_organ_section(
    doc: ReportDocument, organ: str, assist: Backend | None = None
) -> str:
    """Join the organ's sentences; with ``assist``, delegate the extraction
    to a remote backend and use its reply verbatim."""
    if assist is not None:
        prompt = (
            EXTRACTION_INSTRUCTION.format(organ=organ) + "\n\nReport:\n" + doc.raw_text
        )
        reply = "".join(assist.generate(prompt, BackendParams(max_tokens=1024)))
        return reply.strip()
    sentences = doc.organ_sentences.get(organ)
    if not sentences:
        raise OrganNotMentioned(f"report {doc.report_id!r} does not mention {organ!r}")
    return " ".join(sentences).strip()


@dataclass(frozen=True)
class TrainingTriplet:
    instruct: str
    input: str
    target: str
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "instruct": self.instruct,
            "input": self.input,
            "target": self.target,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingTriplet":
        return cls(d["instruct"], d["input"], d["target"], dict(d.get("meta", {})))


def prefix_tokens(text: str, n: int) -> str:
    """First min(n, count) whitespace tokens, joined by single spaces."""
    if n < 1:
        raise CorpusError("prefix length must be >= 1")
    return " ".join(text.split()[:n])


def build_triplet(
    organ_text: str,
    organ: str,
    condition: Condition | str,
    features: Sequence[OrganFeatureSet] | None = None,
    ratio: LateralityRatio | None = None,
    prefix_len: int = DEFAULT_PREFIX_TOKENS,
    report_id: str = "",
    label: CaseLabel | str = CaseLabel.Unknown,
) -> TrainingTriplet:
    condition = Condition(condition)
    if not organ_text or not organ_text.strip():
        raise EmptyTarget("target text is empty")
    organ_text = organ_text.strip()
    if condition is Condition.WithRadiomics:
        input_text = render_input_payload(list(features or []), ratio, organ)
    else:
        input_text = prefix_tokens(organ_text, prefix_len)
    return TrainingTriplet(
        instruct=INSTRUCT_TEMPLATE.format(organ=organ),
        input=input_text,
        target=organ_text,
        meta={
            "report_id": report_id,
            "organ": organ,
            "condition": condition.value,
            "label": CaseLabel(label).value,
        },
    )


def augment_reorder(triplet: TrainingTriplet, seed: int) -> TrainingTriplet:
    """Shuffle the target's sentences with a seeded RNG; when at least two
    distinct sentences exist, redraw until the order actually changes."""
    sentences = split_sentences(triplet.target)
    if len(sentences) <= 1:
        return triplet
    rng = random.Random(seed)
    shuffled = list(sentences)
    if len(set(sentences)) > 1:
        while shuffled == sentences:
            rng.shuffle(shuffled)
    else:
        rng.shuffle(shuffled)
    return TrainingTriplet(
        instruct=triplet.instruct,
        input=triplet.input,
        target=" ".join(shuffled),
        meta=dict(triplet.meta),
    )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise CorpusError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


def split(items: Sequence, spec: SplitSpec) -> tuple[list, list]:
    """Seeded shuffle then partition: train gets floor(fraction * N) items."""
    if len(items) < 2:
        raise TooFewItems(f"need at least 2 items to split, got {len(items)}")
    order = list(range(len(items)))
    random.Random(spec.seed).shuffle(order)
    n_train = math.floor(spec.train_fraction * len(items))
    train = [items[i] for i in order[:n_train]]
    test = [items[i] for i in order[n_train:]]
    return train, test


# --- synthetic paired corpus ----------------------------------------------------

ABNORMAL_RATE = 0.3
NORMAL_VOLUME_RANGE = (130.0, 190.0)
NORMAL_RATIO_RANGE = (0.9, 1.11)
SMALL_VOLUME_RANGE = (40.0, 110.0)
LARGE_VOLUME_RANGE = (210.0, 320.0)

_NORMAL_KIDNEY_EXTRAS = (
    "Both kidneys enhance symmetrically.",
    "No kidney stones are identified.",
    "The kidneys excrete contrast promptly.",
    "No hydronephrosis is seen in either kidney.",
    "The kidneys are normally positioned.",
    "No solid kidney mass is identified.",
)
_ABNORMAL_KIDNEY_EXTRAS = (
    "Correlation with prior kidney imaging is recommended.",
    "The remaining kidney parenchyma enhances homogeneously.",
    "No obstructing kidney calculus is identified.",
)
_FILLER_SENTENCES = (
    "No acute abnormality is otherwise identified.",
    "Visualized soft tissues are within normal limits.",
    "No free fluid is seen.",
    "Degenerative changes are noted.",
    "No suspicious osseous lesion.",
)


@dataclass(frozen=True)
class SyntheticCase:
    case_id: str
    left: OrganFeatureSet
    right: OrganFeatureSet
    ratio: LateralityRatio
    report: str
    label: CaseLabel
    kidney_sentences: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "features": {"kidney_left": self.left.to_dict(), "kidney_right": self.right.to_dict()},
            "ratio": self.ratio.to_dict(),
            "report": self.report,
            "label": self.label.value,
            "kidney_sentences": list(self.kidney_sentences),
        }


def _synth_kidney(side: str, volume_cm3: float, rng: random.Random) -> OrganFeatureSet:
    # unit spacing keeps volume = voxel_count / 1000 exact
    voxel_count = max(1, round(volume_cm3 * 1000))
    volume_mm3 = float(voxel_count)
    radius = (3.0 * volume_mm3 / (4.0 * math.pi)) ** (1.0 / 3.0)
    area = 4.0 * math.pi * radius**2 * rng.uniform(1.15, 1.45)
    extent = volume_mm3 ** (1.0 / 3.0)
    mean = rng.uniform(25.0, 45.0)
    std = rng.uniform(8.0, 20.0)
    return OrganFeatureSet(
        organ=f"kidney_{side}",
        label_id=1 if side == "left" else 2,
        voxel_count=voxel_count,
        volume_cm3=voxel_count / 1000.0,
        surface_area_mm2=area,
        sphericity=sphericity_from(volume_mm3, area),
        bbox_mm=(
            extent * rng.uniform(1.2, 1.6),
            extent * rng.uniform(1.2, 1.6),
            extent * rng.uniform(1.2, 1.6),
        ),
        intensity_mean=mean,
        intensity_std=std,
        intensity_min=mean - 3.5 * std,
        intensity_max=mean + 3.5 * std,
        intensity_entropy=rng.uniform(1.5, 3.5),
    )


def generate_synthetic_corpus(n_cases: int, seed: int) -> list[SyntheticCase]:
    """Seeded kidney corpus: ~30% abnormal draws (one kidney atrophic or
    enlarged), report text produced by the default rule table plus benign
    filler, labels from the generator's ground truth."""
    if n_cases < 1:
        raise CorpusError("n_cases must be >= 1")
    rng = random.Random(seed)
    backend = RuleBackend(DEFAULT_RULES)
    cases = []
    for i in range(n_cases):
        abnormal = rng.random() < ABNORMAL_RATE
        if abnormal:
            side = rng.choice(("left", "right"))
            lo, hi = rng.choice((SMALL_VOLUME_RANGE, LARGE_VOLUME_RANGE))
            bad = rng.uniform(lo, hi)
            good = rng.uniform(*NORMAL_VOLUME_RANGE)
            left_v, right_v = (bad, good) if side == "left" else (good, bad)
        else:
            while True:
                left_v = rng.uniform(*NORMAL_VOLUME_RANGE)
                right_v = rng.uniform(*NORMAL_VOLUME_RANGE)
                if NORMAL_RATIO_RANGE[0] <= left_v / right_v <= NORMAL_RATIO_RANGE[1]:
                    break
        left = _synth_kidney("left", left_v, rng)
        right = _synth_kidney("right", right_v, rng)
        ratio = paired_ratio(left, right)

        payload = render_input_payload([left, right], ratio, "kidney")
        finding = backend.complete_text(payload)
        if abnormal:
            extras = rng.sample(_ABNORMAL_KIDNEY_EXTRAS, rng.choice((0, 1)))
        else:
            extras = rng.sample(_NORMAL_KIDNEY_EXTRAS, rng.choice((1, 2)))
        kidney_sentences = (finding, *extras)
        filler = rng.sample(_FILLER_SENTENCES, rng.choice((1, 2)))
        report = (
            "EXAM: CT urography.\n"
            "FINDINGS:\n"
            "KIDNEYS: " + " ".join(kidney_sentences) + "\n"
            "IMPRESSION:\n" + " ".join(filler)
        )
        cases.append(
            SyntheticCase(
                case_id=f"case-{i:05d}",
                left=left,
                right=right,
                ratio=ratio,
                report=report,
                label=CaseLabel.Abnormal if abnormal else CaseLabel.Normal,
                kidney_sentences=kidney_sentences,
            )
        )
    return cases


# --- file IO ---------------------------------------------------------------------


def write_triplets(path: str | Path, triplets: Iterable[TrainingTriplet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps(t.to_dict(), ensure_ascii=False) + "\n")


def read_triplets(path: str | Path) -> list[TrainingTriplet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(TrainingTriplet.from_dict(json.loads(line)))
    return out


def write_corpus_dir(out_dir: str | Path, cases: list[SyntheticCase], seed: int) -> None:
    """Materialize a synthetic corpus for the CLI: manifest, per-case report
    and feature files, the label map, and a self-contained cases.jsonl."""
    out = Path(out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(parents=True, exist_ok=True)
    manifest = {
        "seed": seed,
        "n_cases": len(cases),
        "abnormal_rate": ABNORMAL_RATE,
        "normal_volume_range": list(NORMAL_VOLUME_RANGE),
        "normal_ratio_range": list(NORMAL_RATIO_RANGE),
        "small_volume_range": list(SMALL_VOLUME_RANGE),
        "large_volume_range": list(LARGE_VOLUME_RANGE),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    labels = {}
    with open(out / "cases.jsonl", "w", encoding="utf-8") as fh:
        for case in cases:
            fh.write(json.dumps(case.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
            (out / "reports" / f"{case.case_id}.txt").write_text(case.report, encoding="utf-8")
            payload = {
                "organ": "kidney",
                "features": {
                    "kidney_left": case.left.to_dict(),
                    "kidney_right": case.right.to_dict(),
                },
                "ratio": case.ratio.to_dict(),
            }
            (out / "features" / f"{case.case_id}.json").write_text(
                json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
            labels[case.case_id] = case.label.value
    (out / "labels.json").write_text(json.dumps(labels, indent=2, sort_keys=True) + "\n")
