"""Figures and delimited tables for bench reports and deployment phase timings."""

from __future__ import annotations

import csv
import json
from collections import OrderedDict
from typing import Iterable, Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import metrics  # noqa: E402

GIB = float(1 << 30)

PHASE_ORDER = [
    metrics.PROXY_START,
    metrics.ONBOARD,
    metrics.REQUEST_ATTESTATION,
    metrics.INIT_ISOLATE,
    metrics.CHECK_HASHES,
    metrics.PROVISION_PROGRAM,
    metrics.PROVISION_DATA,
    metrics.EXECUTE,
    metrics.FETCH_RESULT,
]


def load_bench_reports(paths: Iterable[str]) -> list[dict]:
    out = []
    for p in paths:
        with open(p) as fh:
            doc = json.load(fh)
        out.extend(doc if isinstance(doc, list) else [doc])
    return out


def bench_figure(reports: list[dict], path: str) -> None:
    """Median bandwidth per mode, one bar per (target, pattern), min-max whiskers."""
    modes = [m for m in ("read", "write", "update") if any(r["mode"] == m for r in reports)]
    series = list(OrderedDict.fromkeys((r["target"], r["pattern"]) for r in reports))
    fig, axes = plt.subplots(1, len(modes), figsize=(4 * len(modes), 3.6), squeeze=False, sharey=True)
    for ax, mode in zip(axes[0], modes):
        for i, (target, pattern) in enumerate(series):
            rows = [r for r in reports if r["mode"] == mode and r["target"] == target and r["pattern"] == pattern]
            if not rows:
                continue
            r = rows[0]
            med = r["median_bps"] / GIB
            err = [[med - r["min_bps"] / GIB], [r["max_bps"] / GIB - med]]
            ax.bar(i, med, yerr=err, capsize=4, label=f"{target} {pattern}")
        ax.set_title(mode)
        ax.set_xticks(range(len(series)))
        ax.set_xticklabels([f"{t}\n{p}" for t, p in series], fontsize=8)
    axes[0][0].set_ylabel("bandwidth (GiB/s)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def merge_phases(logs: Iterable[list[tuple[str, float]]]) -> dict[str, float]:
    total: dict[str, float] = {}
    for log in logs:
        for name, ms in log:
            total[name] = total.get(name, 0.0) + ms
    ordered = {k: total[k] for k in PHASE_ORDER if k in total}
    ordered.update({k: v for k, v in total.items() if k not in ordered})
    return ordered


def phases_csv(phases: Mapping[str, float], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "ms"])
        for name, ms in phases.items():
            w.writerow([name, f"{ms:.3f}"])


def phases_figure(phases: Mapping[str, float], path: str) -> None:
    names = list(phases)
    fig, ax = plt.subplots(figsize=(7, 0.45 * len(names) + 1.2))
    ax.barh(range(len(names)), [phases[n] for n in names])
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xscale("log")
    ax.set_xlabel("wall time (ms, log scale)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
