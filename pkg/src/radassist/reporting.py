"""Evaluation report writers: JSON, delimited table, plain-text table, and a
rendered figure alongside them."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import EvalResult

_COLUMNS = ("stratum", "n_cases", "bleu1", "bleu2", "bleu3", "bleu4", "rougeL_p", "rougeL_r", "rougeL_f1")


def build_report(results: list[EvalResult], dataset: str = "", model: str = "") -> dict:
    return {
        "dataset": dataset,
        "model": model,
        "strata": [r.to_dict() for r in results],
    }


def write_report_json(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_table_csv(path: str | Path, report: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_COLUMNS)
        for row in report["strata"]:
            writer.writerow([row[c] for c in _COLUMNS])


def format_table(report: dict) -> str:
    """Plain-text table, one stratum per row."""
    header = f"{'stratum':<10} {'n':>5}  {'BLEU-1':>7} {'BLEU-2':>7} {'BLEU-3':>7} {'BLEU-4':>7} {'ROUGE-L':>8}"
    lines = [header, "-" * len(header)]
    for row in report["strata"]:
        lines.append(
            f"{row['stratum']:<10} {row['n_cases']:>5}  "
            f"{row['bleu1']:>7.3f} {row['bleu2']:>7.3f} {row['bleu3']:>7.3f} {row['bleu4']:>7.3f} "
            f"{row['rougeL_f1']:>8.3f}"
        )
    return "\n".join(lines)


def write_figure(path: str | Path, report: dict) -> None:
    """Grouped bar chart of BLEU-1..4 and ROUGE-L F1 per stratum."""
    strata = report["strata"]
    metrics = ("bleu1", "bleu2", "bleu3", "bleu4", "rougeL_f1")
    labels = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L")
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(strata), 1)
    for i, row in enumerate(strata):
        xs = [j + i * width for j in range(len(metrics))]
        ax.bar(xs, [row[m] for m in metrics], width=width, label=f"{row['stratum']} (n={row['n_cases']})")
    ax.set_xticks([j + width * (len(strata) - 1) / 2 for j in range(len(metrics))])
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    title = " / ".join(x for x in (report.get("dataset"), report.get("model")) if x)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
