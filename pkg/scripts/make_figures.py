"""Plot the report CSVs of a finished run (needs matplotlib, which the package itself does not use).

    python3 scripts/make_figures.py runs/synthetic
"""

import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_probe(run: Path, group: str, out: Path):
    rows = read(run / "report" / f"fig_probe_{group}.csv")
    metrics = sorted({r["metric"] for r in rows})
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        series = defaultdict(list)
        for r in rows:
            if r["metric"] == metric and r["mean"] not in ("", "nan"):
                series[r["population"]].append((int(r["layer"]), float(r["mean"])))
        for pop, pts in sorted(series.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=pop)
        ax.set_title(metric)
        ax.set_xlabel("layer")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / f"probe_{group}.png", dpi=120)
    plt.close(fig)


def plot_ablation(run: Path, out: Path):
    rows = read(run / "report" / "fig_ablation.csv")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted({r["method"] for r in rows}):
        pts = sorted((float(r["proportion"]), r) for r in rows if r["method"] == method)
        for col, style in (("seen_acc", "-"), ("unseen_acc", "--")):
            ax.plot([p for p, _ in pts], [float(r[col]) for _, r in pts], style, marker="o",
                    label=f"{method.lower()} {col.split('_')[0]}")
    ax.axhline(25.0, color="grey", lw=0.8)
    ax.set_xlabel("fraction of training data")
    ax.set_ylabel("macro accuracy (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "ablation.png", dpi=120)
    plt.close(fig)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    out = args.out or args.run_dir / "figures"
    out.mkdir(parents=True, exist_ok=True)
    for group in ("seen", "unseen"):
        if (args.run_dir / "report" / f"fig_probe_{group}.csv").exists():
            plot_probe(args.run_dir, group, out)
    if (args.run_dir / "report" / "fig_ablation.csv").exists():
        plot_ablation(args.run_dir, out)
    print(f"figures written to {out}")


if __name__ == "__main__":
    main()
