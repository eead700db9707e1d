"""One-shot command surface over every pipeline stage.

Exit codes: 0 success, 1 domain error, 2 config/usage error, 3 environment
error. All file formats are owned by the corresponding library modules; the
full evaluation experiment is a short shell script (see README).
"""
from __future__ import annotations

import functools
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click

from .completion import DEFAULT_RULES, BackendParams, RuleBackend, load_rules, make_backend
from .corpus import (
    CaseLabel,
    Condition,
    SplitSpec,
    TrainingTriplet,
    augment_reorder,
    build_triplet,
    extract_organ_section,
    generate_synthetic_corpus,
    parse_report_sections,
    read_triplets,
    split,
    write_corpus_dir,
    write_triplets,
)
from .errors import ConfigError, RadAssistError
from .imaging import parse_nifti, parse_raw, validate_alignment
from .metrics import LengthMismatch, evaluate_dataset
from .promptgen import EXTRA_FEATURE_NAMES, render_prompt
from .radiomics import (
    LabelAbsent,
    LateralityRatio,
    OrganFeatureSet,
    compute_features,
    paired_ratio,
)
from .reporting import build_report, format_table, write_figure, write_report_json, write_table_csv
from .service import load_config, run_server


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except RadAssistError as exc:
            click.echo(f"{exc.name}: {exc}", err=True)
            sys.exit(1)
        except OSError as exc:
            click.echo(f"environment error: {exc}", err=True)
            sys.exit(3)

    return wrapper


def _read_image(path: str, as_mask: bool = False, label_table: dict | None = None):
    p = Path(path)
    if p.suffix == ".json":  # raw sidecar header; blob sits next to it
        blob = p.with_suffix(".bin")
        return parse_raw(p.read_bytes(), blob.read_bytes())
    return parse_nifti(p.read_bytes(), as_mask=as_mask, label_table=label_table)


def _belongs(name: str, organ: str) -> str | None:
    n = name.strip().lower().replace(" ", "_")
    o = organ.strip().lower().replace(" ", "_")
    if n == o:
        return ""
    if n == o + "_left":
        return "left"
    if n == o + "_right":
        return "right"
    return None


def _load_feature_file(path: str, organ: str):
    """Read an analyze-output JSON and pick the sets belonging to one organ."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    by_side: dict[str, OrganFeatureSet] = {}
    for name, payload in (data.get("features") or {}).items():
        side = _belongs(name, organ)
        if side is not None:
            by_side[side] = OrganFeatureSet.from_dict(payload)
    sets = [by_side[s] for s in ("left", "right", "") if s in by_side]
    ratio = None
    if "left" in by_side and "right" in by_side:
        if data.get("ratio"):
            ratio = LateralityRatio.from_dict(data["ratio"])
        else:
            ratio = paired_ratio(by_side["left"], by_side["right"])
    return sets, ratio


def _make_backend_from_flags(backend, rules, base_url, model, api_key_env, timeout_s, token_delay):
    if backend == "rule":
        table = load_rules(rules) if rules else DEFAULT_RULES
        return RuleBackend(table, token_delay_s=token_delay)
    return make_backend(
        {
            "kind": "remote",
            "base_url": base_url or "",
            "model": model or "",
            "api_key_env": api_key_env,
            "timeout_s": timeout_s,
        }
    )


@click.group()
def main():
    """Radiology report completion toolkit."""


@main.command()
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--mask", "mask_path", required=True, type=click.Path(exists=True))
@click.option("--labels", "labels_path", type=click.Path(exists=True), help="JSON id->organ map")
@click.option("--organ", "organs", multiple=True, required=True)
@click.option("--out", "out_path", type=click.Path(), help="defaults to stdout")
@guarded
def analyze(image_path, mask_path, labels_path, organs, out_path):
    """Compute per-organ radiomics features from a volume + mask pair."""
    label_table = None
    if labels_path:
        label_table = {int(k): str(v) for k, v in json.loads(Path(labels_path).read_text()).items()}
    volume = _read_image(image_path)
    mask = _read_image(mask_path, as_mask=True, label_table=label_table)
    validate_alignment(volume, mask)

    by_name = {v: k for k, v in mask.label_table.items()}
    features: dict[str, OrganFeatureSet] = {}
    for organ in organs:
        names = [n for n in by_name if _belongs(n, organ) is not None]
        if not names:
            names = [organ]  # let compute_features raise LabelAbsent with the exact name
        for name in names:
            label_id = by_name.get(name)
            if label_id is None:
                raise LabelAbsent(f"organ {name!r} is not present in the mask label table")
            features[name] = compute_features(volume, mask, label_id)

    ratio = None
    for organ in organs:
        left = features.get(f"{organ}_left") or features.get("kidney_left")
        right = features.get(f"{organ}_right") or features.get("kidney_right")
        if left and right:
            ratio = paired_ratio(left, right)
            break

    payload = {
        "organ": organs[0],
        "features": {k: v.to_dict() for k, v in sorted(features.items())},
        "ratio": ratio.to_dict() if ratio else None,
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


@main.command()
@click.option("--features", "features_path", required=True, type=click.Path(exists=True))
@click.option("--organ", required=True)
@click.option("--prefix", default="")
@click.option(
    "--extras",
    default="",
    help=f"comma-separated extra statements from: {', '.join(EXTRA_FEATURE_NAMES)}",
)
@guarded
def prompt(features_path, organ, prefix, extras):
    """Render the informative prompt for an organ."""
    sets, ratio = _load_feature_file(features_path, organ)
    extra_names = tuple(e.strip() for e in extras.split(",") if e.strip())
    rendered = render_prompt(sets, ratio, organ, prefix, extras=extra_names).rendered
    click.echo(rendered)


@main.group()
def dataset():
    """Build, augment, and split triplet datasets."""


@dataset.command()
@click.option("--n", "n_cases", required=True, type=int)
@click.option("--seed", required=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@guarded
def synth(n_cases, seed, out_dir):
    """Generate the seeded synthetic kidney corpus."""
    cases = generate_synthetic_corpus(n_cases, seed)
    write_corpus_dir(out_dir, cases, seed)
    click.echo(f"wrote {len(cases)} cases to {out_dir}", err=True)


@dataset.command()
@click.option("--reports", "reports_dir", required=True, type=click.Path(exists=True))
@click.option("--features", "features_dir", type=click.Path(exists=True))
@click.option("--organ", required=True)
@click.option("--condition", type=click.Choice(["with", "prefix"]), required=True)
@click.option("--labels", "labels_path", type=click.Path(exists=True), help="JSON id->label map")
@click.option("--out", "out_path", required=True, type=click.Path())
@guarded
def build(reports_dir, features_dir, organ, condition, labels_path, out_path):
    """Pair report sections with radiomics inputs (or 20-token prefixes)."""
    cond = Condition.WithRadiomics if condition == "with" else Condition.PrefixOnly
    if cond is Condition.WithRadiomics and not features_dir:
        raise ConfigError("--features is required for --condition with")
    labels = {}
    if labels_path:
        labels = json.loads(Path(labels_path).read_text(encoding="utf-8"))

    triplets = []
    skipped = 0
    for report_path in sorted(Path(reports_dir).glob("*.txt")):
        report_id = report_path.stem
        doc = parse_report_sections(report_path.read_text(encoding="utf-8"), report_id)
        try:
            target = extract_organ_section(doc, organ)
        except RadAssistError:
            skipped += 1
            continue
        features = None
        ratio = None
        if cond is Condition.WithRadiomics:
            feature_path = Path(features_dir) / f"{report_id}.json"
            if not feature_path.exists():
                raise ConfigError(f"no feature file for report {report_id!r}: {feature_path}")
            features, ratio = _load_feature_file(feature_path, organ)
        triplets.append(
            build_triplet(
                target,
                organ,
                cond,
                features=features,
                ratio=ratio,
                report_id=report_id,
                label=labels.get(report_id, CaseLabel.Unknown),
            )
        )
    write_triplets(out_path, triplets)
    click.echo(f"wrote {len(triplets)} triplets to {out_path} ({skipped} skipped)", err=True)


@dataset.command(name="augment")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--seed", required=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@guarded
def augment(in_path, seed, out_path):
    """Sentence-reorder each triplet's target with a seeded shuffle."""
    triplets = read_triplets(in_path)
    write_triplets(out_path, [augment_reorder(t, seed + i) for i, t in enumerate(triplets)])
    click.echo(f"wrote {len(triplets)} augmented triplets to {out_path}", err=True)


@dataset.command(name="split")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--seed", required=True, type=int)
@click.option("--ratio", default=0.9, type=float)
@click.option("--train", "train_path", required=True, type=click.Path())
@click.option("--test", "test_path", required=True, type=click.Path())
@guarded
def split_cmd(in_path, seed, ratio, train_path, test_path):
    """Seeded 9:1 (by default) train/test split of a JSONL file."""
    lines = [ln for ln in Path(in_path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    train, test = split(lines, SplitSpec(train_fraction=ratio, seed=seed))
    Path(train_path).write_text("\n".join(train) + ("\n" if train else ""), encoding="utf-8")
    Path(test_path).write_text("\n".join(test) + ("\n" if test else ""), encoding="utf-8")
    click.echo(f"split {len(lines)} -> {len(train)} train / {len(test)} test", err=True)


@main.command()
@click.option("--features", "features_path", type=click.Path(exists=True))
@click.option("--organ", default="kidney")
@click.option("--prefix", default="")
@click.option("--backend", type=click.Choice(["rule", "remote"]), default="rule")
@click.option("--rules", "rules_path", type=click.Path(exists=True))
@click.option("--base-url")
@click.option("--model")
@click.option("--api-key-env")
@click.option("--timeout", "timeout_s", default=30.0, type=float)
@click.option("--max-tokens", default=128, type=int)
@click.option("--token-delay", default=0.0, type=float, hidden=True)
@click.option("--batch", "batch_path", type=click.Path(exists=True), help="triplet JSONL to complete")
@click.option("--out", "out_path", type=click.Path(), help="predictions JSONL (batch mode)")
@click.option("--workers", default=4, type=int)
@guarded
def complete(
    features_path,
    organ,
    prefix,
    backend,
    rules_path,
    base_url,
    model,
    api_key_env,
    timeout_s,
    max_tokens,
    token_delay,
    batch_path,
    out_path,
    workers,
):
    """Stream a report completion for one feature file, or for a dataset."""
    gen = _make_backend_from_flags(
        backend, rules_path, base_url, model, api_key_env, timeout_s, token_delay
    )
    params = BackendParams(max_tokens=max_tokens)

    if batch_path:
        if not out_path:
            raise ConfigError("--out is required with --batch")
        triplets = read_triplets(batch_path)

        def predict(triplet: TrainingTriplet) -> dict:
            text = "".join(gen.generate(triplet.input, params))
            return {"prediction": text, "meta": dict(triplet.meta)}

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            rows = list(pool.map(predict, triplets))  # order-preserving
        with open(out_path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
        click.echo(f"wrote {len(rows)} predictions to {out_path}", err=True)
        return

    if not features_path:
        raise ConfigError("provide --features (single case) or --batch (dataset)")
    sets, ratio = _load_feature_file(features_path, organ)
    payload = render_prompt(sets, ratio, organ, prefix).rendered
    for token in gen.generate(payload, params):
        click.echo(token, nl=False)
    click.echo()


@main.command(name="eval")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--table", "table_path", type=click.Path(), help="CSV table next to the JSON report")
@click.option("--plot", "plot_path", type=click.Path(), help="bar-chart figure (PNG)")
@click.option("--dataset", "dataset_name", default="")
@click.option("--model", "model_name", default="")
@guarded
def eval_cmd(pred_path, ref_path, out_path, table_path, plot_path, dataset_name, model_name):
    """Score predictions against reference targets (BLEU-1..4, ROUGE-L)."""
    preds = []
    for line in Path(pred_path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            row = json.loads(line)
            preds.append(str(row.get("prediction", row.get("text", ""))))
    refs = read_triplets(ref_path)
    if len(preds) != len(refs):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(refs)} references")
    pairs = [
        (pred, ref.target, str(ref.meta.get("label", "Unknown")))
        for pred, ref in zip(preds, refs)
    ]
    results = evaluate_dataset(pairs)
    report = build_report(results, dataset=dataset_name, model=model_name)
    write_report_json(out_path, report)
    if table_path:
        write_table_csv(table_path, report)
    if plot_path:
        write_figure(plot_path, report)
    click.echo(format_table(report))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@guarded
def serve(config_path):
    """Run the HTTP service."""
    config = load_config(config_path)
    run_server(config)


if __name__ == "__main__":
    main()
