"""Merge evaluation outputs into comparison tables and figures.

Inputs are the JSON files written by the ``eval-pairmatch``, ``probe`` and
``finetune`` commands.  Results sharing a run name are averaged over seeds.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sm3.errors import MissingArtifactError, StructureError

# rows of the pair-matching table come first in this order; anything else follows alphabetically
MM_ORDER = ("random", "simclr", "concat", "sep_shared", "sep_sep")
ML_ORDER = ("no_proj", "proj", "msa", "tel", "te")
PAIR_COLUMNS = ("strategy", "n_seeds", "avg_rank", "avg_rank_std", "acc_at_1", "acc_at_5", "M")
CLS_COLUMNS = ("protocol", "mm_strategy", "ml_strategy", "n_seeds", "macro_auc", "macro_auc_std",
               "designated_auc", "sens", "spec", "prec")


def run_name(setting: dict) -> str:
    """Display name of the pretraining that produced a result."""
    if setting.get("name"):
        return str(setting["name"])
    if setting.get("stage") == "mm" and setting.get("pretrain_epochs") == 0:
        return "random"
    return str(setting.get("mm_strategy"))


def _order(name: str, order: tuple[str, ...]) -> tuple:
    return (order.index(name), "") if name in order else (len(order), name)


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _std(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.std(vals)) if len(vals) > 1 else (0.0 if vals else None)


@dataclass
class Report:
    pair_rows: list[dict] = field(default_factory=list)
    cls_rows: list[dict] = field(default_factory=list)
    label_auc: dict[str, list[float | None]] = field(default_factory=dict)
    sources: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"pair_matching": self.pair_rows, "classification": self.cls_rows,
                "designated_auc_per_label": self.label_auc, "sources": self.sources}


def _read(path: Path) -> dict:
    if not path.exists():
        raise MissingArtifactError(f"report input {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise StructureError(f"report input {path} is not JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("kind") not in ("pairmatch", "metrics"):
        raise StructureError(f"report input {path} is neither a pair-matching nor a metrics result")
    return doc


def build_report(paths) -> Report:
    # keyed by file name so the merged output does not depend on where inputs live
    docs = sorted(((Path(p).name, str(p), _read(Path(p))) for p in paths), key=lambda t: t[:2])
    pair: dict[str, list[dict]] = {}
    cls: dict[tuple, list[dict]] = {}
    for _, _, doc in docs:
        setting = doc.get("setting", {})
        if doc["kind"] == "pairmatch":
            pair.setdefault(run_name(setting), []).append(doc)
        else:
            key = (setting.get("protocol"), run_name(setting), setting.get("ml_strategy"))
            cls.setdefault(key, []).append(doc)

    report = Report(sources=[name for name, _, _ in docs])
    for name in sorted(pair, key=lambda n: _order(n, MM_ORDER)):
        group = pair[name]
        report.pair_rows.append({
            "strategy": name,
            "n_seeds": len(group),
            "avg_rank": _mean(d["avg_rank"] for d in group),
            "avg_rank_std": _std(d["avg_rank"] for d in group),
            "acc_at_1": _mean(d["acc_at_1"] for d in group),
            "acc_at_5": _mean(d["acc_at_5"] for d in group),
            "M": group[0]["M"],
        })
    for key in sorted(cls, key=lambda k: (str(k[0]), _order(k[1], MM_ORDER), _order(str(k[2]), ML_ORDER))):
        group = cls[key]
        protocol, mm, ml = key
        report.cls_rows.append({
            "protocol": protocol, "mm_strategy": mm, "ml_strategy": ml, "n_seeds": len(group),
            "macro_auc": _mean(d["macro"]["auc"] for d in group),
            "macro_auc_std": _std(d["macro"]["auc"] for d in group),
            "designated_auc": _mean(d["macro_designated"]["auc"] for d in group),
            "sens": _mean(d["macro_designated"]["sens"] for d in group),
            "spec": _mean(d["macro_designated"]["spec"] for d in group),
            "prec": _mean(d["macro_designated"]["prec"] for d in group),
        })
        per_label: dict[int, list] = {}
        for d in group:
            for row in d["rows"]:
                if row["designated"]:
                    per_label.setdefault(int(row["label"]), []).append(row["auc"])
        report.label_auc[f"{protocol}:{mm}/{ml}"] = [_mean(per_label[k]) for k in sorted(per_label)]
    return report


def _write_csv(rows: list[dict], columns: tuple[str, ...], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in columns])


def plot_pair_matching(rows: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [r["strategy"] for r in rows]
    x = np.arange(len(rows))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(x, [r["avg_rank"] for r in rows], yerr=[r["avg_rank_std"] or 0 for r in rows], color="#4c72b0")
    ax1.set_xticks(x, names, rotation=20)
    ax1.set_ylabel("average rank (lower is better)")
    w = 0.38
    ax2.bar(x - w / 2, [r["acc_at_1"] for r in rows], w, label="Acc@1", color="#55a868")
    ax2.bar(x + w / 2, [r["acc_at_5"] for r in rows], w, label="Acc@5", color="#c44e52")
    ax2.set_xticks(x, names, rotation=20)
    ax2.set_ylim(0, 1)
    ax2.legend(frameon=False)
    fig.suptitle("Cross-modality pair matching")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_label_auc(label_auc: dict[str, list], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(label_auc)
    K = max(len(v) for v in label_auc.values())
    x = np.arange(K)
    w = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.1 * K), 3.8))
    for i, name in enumerate(names):
        vals = [np.nan if v is None else v for v in label_auc[name]]
        ax.bar(x - 0.4 + w * (i + 0.5), vals, w, label=name)
    ax.set_xticks(x, [f"label {k + 1}" for k in range(K)])
    ax.set_ylabel("AUC (designated class)")
    ax.set_ylim(0.4, 1.0)
    ax.legend(frameon=False, fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def write_report(report: Report, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "report.json"]
    written[0].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if report.pair_rows:
        _write_csv(report.pair_rows, PAIR_COLUMNS, out / "pair_matching.csv")
        plot_pair_matching(report.pair_rows, out / "pair_matching.png")
        written += [out / "pair_matching.csv", out / "pair_matching.png"]
    if report.cls_rows:
        _write_csv(report.cls_rows, CLS_COLUMNS, out / "classification.csv")
        plot_label_auc(report.label_auc, out / "label_auc.png")
        written += [out / "classification.csv", out / "label_auc.png"]
    return written
