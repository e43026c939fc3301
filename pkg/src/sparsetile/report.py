"""Summaries of bench CSV files: speedup tables, weight traffic, plots."""

from __future__ import annotations

import sys
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .bench import read_csv
from .errors import ReportError

BASELINE_KERNEL = {
    "dense": "dense",
    "sparse": "dense",
    "vector_sparse": "dense",
    "int8_dense": "int8_dense",
    "int8_sparse": "int8_dense",
    "attention": "attention",
}

Row = Dict[str, Any]


def _match_key(row: Row) -> Tuple:
    if row["kernel"] == "attention":
        return (row["heads"], row["kv_heads"], row["head_dim"], row["context"], row["workers"])
    return (row["m"], row["k"], row["n"], row["workers"])


def _shape_label(row: Row) -> str:
    if row["kernel"] == "attention":
        return f"h{row['heads']}/kv{row['kv_heads']}/d{row['head_dim']}/ctx{row['context']}"
    return f"{row['m']}x{row['k']}x{row['n']}"


def find_baseline(row: Row, rows: Sequence[Row]) -> Row:
    """The row a speedup is measured against.

    Linear kernels compare with the dense kernel of the same dtype at the
    same shape and worker count (same sparsity preferred); attention
    compares with the unpruned cache.
    """
    want = BASELINE_KERNEL[row["kernel"]]
    key = _match_key(row)
    candidates = [r for r in rows if r["kernel"] == want and _match_key(r) == key]
    if row["kernel"] == "attention":
        candidates = [r for r in candidates if r["k_sparsity"] == 0 and r["v_sparsity"] == 0]
    else:
        same = [r for r in candidates if r["sparsity"] == row["sparsity"]]
        candidates = same or candidates
    if not candidates:
        raise ReportError(f"missing baseline: no {want} row for {row['kernel']} {_shape_label(row)} workers={row['workers']}")
    return candidates[0]


def with_speedups(rows: Sequence[Row]) -> List[Row]:
    """Copies of ``rows`` with ``speedup`` = baseline median / median."""
    out = []
    for row in rows:
        base = find_baseline(row, rows)
        enriched = dict(row)
        enriched["speedup"] = base["median_ns"] / row["median_ns"] if row["median_ns"] else float("inf")
        out.append(enriched)
    return out


def _mib(value: float) -> str:
    return f"{value / (1 << 20):.2f}"


def _table(header: Sequence[str], body: Sequence[Sequence[Any]]) -> List[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines.extend("| " + " | ".join(str(c) for c in cells) + " |" for cells in body)
    return lines


def layer_summary(rows: Sequence[Row]) -> List[Row]:
    """Per-kernel decoder-layer totals: modeled bytes and latency summed over shapes."""
    groups: "OrderedDict[Tuple, Dict[str, Any]]" = OrderedDict()
    for row in rows:
        if row["kernel"] == "attention":
            continue
        key = (row["kernel"], row["sparsity"], row["m"], row["workers"])
        entry = groups.setdefault(
            key,
            {"kernel": key[0], "sparsity": key[1], "m": key[2], "workers": key[3], "shapes": set(),
             "modeled": 0, "dense": 0, "median_ns": 0},
        )
        shape = (row["k"], row["n"])
        if shape in entry["shapes"]:
            continue
        entry["shapes"].add(shape)
        entry["modeled"] += row["modeled_weight_bytes"]
        entry["dense"] += row["dense_weight_bytes"]
        entry["median_ns"] += row["median_ns"]
    summary = []
    for entry in groups.values():
        entry["shapes"] = len(entry["shapes"])
        summary.append(entry)
    return summary


def render_markdown(rows: Sequence[Row], title: str = "sparsetile bench report") -> str:
    enriched = with_speedups(rows)
    lines = [f"# {title}", ""]
    kernels = list(OrderedDict.fromkeys(r["kernel"] for r in enriched))
    for kernel in kernels:
        subset = [r for r in enriched if r["kernel"] == kernel]
        lines.append(f"## {kernel}")
        lines.append("")
        if kernel == "attention":
            header = ["shape", "k_sparsity", "v_sparsity", "workers", "median_ms", "tokens/s", "speedup", "checksum"]
            body = [
                [_shape_label(r), r["k_sparsity"], r["v_sparsity"], r["workers"], f"{r['median_ns'] / 1e6:.3f}",
                 f"{r['throughput']:.4g}", f"{r['speedup']:.2f}x", r["checksum"]]
                for r in subset
            ]
        else:
            header = ["shape", "sparsity", "workers", "median_ms", "GFLOP/s", "speedup", "checksum"]
            body = [
                [_shape_label(r), r["sparsity"], r["workers"], f"{r['median_ns'] / 1e6:.3f}",
                 f"{r['throughput']:.4g}", f"{r['speedup']:.2f}x", r["checksum"]]
                for r in subset
            ]
        lines.extend(_table(header, body))
        lines.append("")

    lines.append("## Weight traffic")
    lines.append("")
    body = []
    for r in enriched:
        ratio = r["modeled_weight_bytes"] / r["dense_weight_bytes"] if r["dense_weight_bytes"] else 0.0
        sparsity = r["sparsity"] if r["kernel"] != "attention" else f"{r['k_sparsity']}/{r['v_sparsity']}"
        body.append([r["kernel"], _shape_label(r), sparsity, _mib(r["modeled_weight_bytes"]),
                     _mib(r["dense_weight_bytes"]), f"{ratio:.4f}"])
    lines.extend(_table(["kernel", "shape", "sparsity", "modeled_MiB", "dense_MiB", "ratio"], body))
    lines.append("")

    summary = layer_summary(rows)
    if summary:
        lines.append("## Decoder layer totals")
        lines.append("")
        body = [
            [s["kernel"], s["sparsity"], s["m"], s["workers"], s["shapes"], _mib(s["modeled"]), _mib(s["dense"]),
             f"{s['median_ns'] / 1e6:.3f}"]
            for s in summary
        ]
        lines.extend(_table(["kernel", "sparsity", "m", "workers", "shapes", "modeled_MiB", "dense_MiB", "layer_ms"], body))
        lines.append("")
    return "\n".join(lines)


def write_plots(rows: Sequence[Row], out_dir: Union[str, Path]) -> List[Path]:
    """Speedup-versus-sparsity PNGs, one per non-baseline kernel (needs matplotlib)."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("warning: matplotlib unavailable; install sparsetile[plot] to write plots", file=sys.stderr)
        return []
    enriched = with_speedups(rows)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for kernel in OrderedDict.fromkeys(r["kernel"] for r in enriched):
        subset = [r for r in enriched if r["kernel"] == kernel]
        fig, ax = plt.subplots(figsize=(6, 4))
        series: "OrderedDict[str, List[Tuple[float, float]]]" = OrderedDict()
        for r in subset:
            x = r["sparsity"] if kernel != "attention" else r["v_sparsity"]
            series.setdefault(f"{_shape_label(r)} w{r['workers']}", []).append((x, r["speedup"]))
        for label, points in series.items():
            points.sort()
            ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=label)
        ax.axhline(1.0, color="grey", linestyle="--", linewidth=1)
        ax.set_xlabel("sparsity" if kernel != "attention" else "v_sparsity")
        ax.set_ylabel(f"speedup vs {BASELINE_KERNEL[kernel]}")
        ax.set_title(f"{kernel} speedup")
        ax.legend(fontsize="small")
        fig.tight_layout()
        path = out / f"speedup_{kernel}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def report(
    csv_path: Union[str, Path],
    out_path: Optional[Union[str, Path]] = None,
    plot_dir: Optional[Union[str, Path]] = None,
) -> str:
    """Render the markdown report for a bench CSV; optionally write it and plots."""
    rows = read_csv(csv_path)
    if not rows:
        raise ReportError(f"{csv_path}: no bench rows")
    text = render_markdown(rows, title=f"sparsetile bench report: {Path(csv_path).name}")
    if out_path is not None:
        target = Path(out_path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text + "\n", encoding="utf-8")
    if plot_dir is not None:
        write_plots(rows, plot_dir)
    return text
