"""Report emission: delimited accuracy/error tables plus rendered figures.

Accuracy tables carry one row per model with mean and standard error per
split (reporting policy and adversarial policy side by side).  Error
taxonomies mirror the candidate structure: Adj/Noun/Both for adjective-noun
tasks, bRa/aSb/aRc/cRb for relational tasks.  Percentages are printed with
two decimals; models with no errors render as dashes.

Figures (PNG, rendered alongside the delimited output): per-model training
curves and a grouped accuracy bar chart with standard-error bars.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .scenegen import ConfigError
from .train import RunSummary, SplitStats, TrainHistory

SPLITS = ("train", "validation", "generalization")
SPLIT_TITLES = {"train": "Train", "validation": "Val", "generalization": "Gen"}

MODEL_TITLES = {"add": "Add", "mult": "Mult", "conv": "Conv", "tl": "TL", "rf": "RF"}

FIGURE_DPI = 150


def _pct(stats: SplitStats) -> tuple[str, str]:
    return f"{100 * stats.mean:.2f}", f"{100 * stats.stderr:.2f}"


def accuracy_rows(summaries: dict[str, RunSummary]) -> list[dict]:
    rows = []
    for model, summary in summaries.items():
        row = {"model": MODEL_TITLES.get(model, model)}
        for split in SPLITS:
            mean, err = _pct(summary.accuracy[split])
            row[f"{split}_mean"] = mean
            row[f"{split}_stderr"] = err
            adv_mean, adv_err = _pct(summary.adversarial_accuracy[split])
            row[f"{split}_adv_mean"] = adv_mean
            row[f"{split}_adv_stderr"] = adv_err
            row[f"{split}_tie_rate"] = f"{100 * summary.tie_rate[split].mean:.2f}"
            row[f"{split}_swap_tie_rate"] = f"{100 * summary.swap_tie_rate[split].mean:.2f}"
        rows.append(row)
    return rows


def write_accuracy_csv(path, summaries: dict[str, RunSummary]) -> None:
    rows = accuracy_rows(summaries)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["model"]
    for split in SPLITS:
        fields += [f"{split}_mean", f"{split}_stderr",
                   f"{split}_adv_mean", f"{split}_adv_stderr",
                   f"{split}_tie_rate", f"{split}_swap_tie_rate"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_accuracy_markdown(path, summaries: dict[str, RunSummary]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["| Model | " + " | ".join(SPLIT_TITLES[s] for s in SPLITS)
             + " | " + " | ".join(f"{SPLIT_TITLES[s]} (adv)" for s in SPLITS) + " |"]
    lines.append("|" + "---|" * (1 + 2 * len(SPLITS)))
    for model, summary in summaries.items():
        cells = [MODEL_TITLES.get(model, model)]
        for split in SPLITS:
            mean, err = _pct(summary.accuracy[split])
            cells.append(f"{mean} <sub>{err}</sub>")
        for split in SPLITS:
            mean, err = _pct(summary.adversarial_accuracy[split])
            cells.append(f"{mean} <sub>{err}</sub>")
        lines.append("| " + " | ".join(cells) + " |")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _taxonomy_cells(stats: dict) -> tuple[str, str]:
    if stats is None:
        return "-", "-"
    return f"{stats['mean']:.2f}", f"{stats['stderr']:.2f}"


def aggregate_taxonomies(per_seed_taxonomies: list) -> dict:
    """Mean/stderr of per-seed error percentages for each category.

    Seeds with zero errors carry no percentage and are excluded; if every
    seed is error-free the aggregate is None for all categories.
    """
    kinds = per_seed_taxonomies[0].kinds
    per_kind: dict[str, list[float]] = {k: [] for k in kinds}
    for taxonomy in per_seed_taxonomies:
        pct = taxonomy.percentages()
        if pct is None:
            continue
        for k in kinds:
            per_kind[k].append(pct[k])
    out = {}
    for k in kinds:
        values = per_kind[k]
        if not values:
            out[k] = None
        else:
            arr = np.asarray(values)
            stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
            out[k] = {"mean": float(arr.mean()), "stderr": stderr}
    return out


def write_taxonomy_csv(path, taxonomies: dict[str, dict], kinds) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["model"]
    for k in kinds:
        fields += [f"{k}_mean", f"{k}_stderr"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for model, agg in taxonomies.items():
            row = {"model": MODEL_TITLES.get(model, model)}
            for k in kinds:
                mean, err = _taxonomy_cells(agg[k])
                row[f"{k}_mean"] = mean
                row[f"{k}_stderr"] = err
            writer.writerow(row)


def write_taxonomy_markdown(path, taxonomies: dict[str, dict], kinds) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["| Model | " + " | ".join(kinds) + " |",
             "|" + "---|" * (1 + len(kinds))]
    for model, agg in taxonomies.items():
        cells = [MODEL_TITLES.get(model, model)]
        for k in kinds:
            mean, err = _taxonomy_cells(agg[k])
            cells.append(mean if err == "-" else f"{mean} <sub>{err}</sub>")
        lines.append("| " + " | ".join(cells) + " |")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_summaries_json(path, summaries: dict[str, RunSummary],
                         taxonomies: dict | None = None,
                         calibration: dict | None = None) -> None:
    """Raw result store that the report renderers read back."""
    payload = {"models": {}}
    for model, s in summaries.items():
        payload["models"][model] = {
            "accuracy": {k: vars(v) for k, v in s.accuracy.items()},
            "adversarial_accuracy": {k: vars(v) for k, v in s.adversarial_accuracy.items()},
            "tie_rate": {k: vars(v) for k, v in s.tie_rate.items()},
            "swap_tie_rate": {k: vars(v) for k, v in s.swap_tie_rate.items()},
            "selected_epochs": s.selected_epochs,
            "seeds": s.seeds,
        }
    if taxonomies is not None:
        payload["taxonomies"] = taxonomies
    if calibration is not None:
        payload["calibration"] = calibration
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_summaries_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def summaries_from_json(payload: dict) -> dict[str, RunSummary]:
    out = {}
    for model, data in payload["models"].items():
        out[model] = RunSummary(
            model=model,
            accuracy={k: SplitStats(**v) for k, v in data["accuracy"].items()},
            adversarial_accuracy={k: SplitStats(**v) for k, v in data["adversarial_accuracy"].items()},
            tie_rate={k: SplitStats(**v) for k, v in data["tie_rate"].items()},
            swap_tie_rate={k: SplitStats(**v) for k, v in data["swap_tie_rate"].items()},
            selected_epochs=data["selected_epochs"],
            seeds=data["seeds"],
        )
    return out


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def plot_training_curves(path, model: str, histories: list[TrainHistory]) -> None:
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
    for history in histories:
        epochs = [r.epoch for r in history.records]
        ax_loss.plot(epochs, [r.train_loss for r in history.records],
                     color="tab:gray", alpha=0.5, lw=0.8)
        ax_acc.plot(epochs, [100 * r.train_acc for r in history.records],
                    color="tab:blue", alpha=0.4, lw=0.8)
        ax_acc.plot(epochs, [100 * r.val_acc for r in history.records],
                    color="tab:orange", alpha=0.4, lw=0.8)
    epochs = [r.epoch for r in histories[0].records]
    mean_loss = np.mean([[r.train_loss for r in h.records] for h in histories], axis=0)
    mean_train = np.mean([[100 * r.train_acc for r in h.records] for h in histories], axis=0)
    mean_val = np.mean([[100 * r.val_acc for r in h.records] for h in histories], axis=0)
    ax_loss.plot(epochs, mean_loss, color="black", lw=1.8, label="train loss")
    ax_acc.plot(epochs, mean_train, color="tab:blue", lw=1.8, label="train acc")
    ax_acc.plot(epochs, mean_val, color="tab:orange", lw=1.8, label="val acc")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy [%]")
    ax_acc.set_ylim(0, 102)
    ax_loss.legend(frameon=False, fontsize=8)
    ax_acc.legend(frameon=False, fontsize=8)
    fig.suptitle(MODEL_TITLES.get(model, model))
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def plot_accuracy_bars(path, summaries: dict[str, RunSummary]) -> None:
    models = list(summaries)
    x = np.arange(len(models))
    width = 0.26
    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(models), 3.4))
    for i, split in enumerate(SPLITS):
        means = [100 * summaries[m].accuracy[split].mean for m in models]
        errs = [100 * summaries[m].accuracy[split].stderr for m in models]
        ax.bar(x + (i - 1) * width, means, width, yerr=errs, capsize=3,
               label=SPLIT_TITLES[split])
    ax.set_xticks(x)
    ax.set_xticklabels([MODEL_TITLES.get(m, m) for m in models])
    ax.set_ylabel("accuracy [%]")
    ax.set_ylim(0, 105)
    ax.legend(frameon=False, fontsize=8)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def emit_report(out_dir, summaries: dict[str, RunSummary], taxonomies: dict,
                taxonomy_kinds, formats=("csv", "md"), figures: bool = True,
                histories: dict[str, list[TrainHistory]] | None = None,
                calibration: dict | None = None) -> list[Path]:
    """Write every requested report artifact under out_dir; returns the paths."""
    out_dir = Path(out_dir)
    written = []
    for fmt in formats:
        if fmt == "csv":
            write_accuracy_csv(out_dir / "accuracy.csv", summaries)
            written.append(out_dir / "accuracy.csv")
            if taxonomies:
                write_taxonomy_csv(out_dir / "taxonomy.csv", taxonomies, taxonomy_kinds)
                written.append(out_dir / "taxonomy.csv")
        elif fmt == "md":
            write_accuracy_markdown(out_dir / "accuracy.md", summaries)
            written.append(out_dir / "accuracy.md")
            if taxonomies:
                write_taxonomy_markdown(out_dir / "taxonomy.md", taxonomies, taxonomy_kinds)
                written.append(out_dir / "taxonomy.md")
        else:
            raise ConfigError(f"unknown report format: {fmt!r}")
    write_summaries_json(out_dir / "summaries.json", summaries, taxonomies, calibration)
    written.append(out_dir / "summaries.json")
    if figures:
        plot_accuracy_bars(out_dir / "figures" / "accuracy.png", summaries)
        written.append(out_dir / "figures" / "accuracy.png")
        if histories:
            for model, hs in histories.items():
                p = out_dir / "figures" / f"curves-{model}.png"
                plot_training_curves(p, model, hs)
                written.append(p)
    return written
