"""Plot-script emission and figure rendering.

The emitted ``plot_paths.py`` is standalone (csv + matplotlib only).  The CLI
renders figures by executing that same script text, so the PNGs are exactly
what a user re-running the script gets.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

_TEMPLATE = '''"""Line plots of |X_t| and V(X_t) for the dumped paths, with the stability bound."""
import csv
import math
import sys
from pathlib import Path

BOUND = {bound}


def load(files):
    """{{label: (t, |x|, V)}} from per-path or long-format CSV dumps."""
    series = {{}}
    for f in files:
        with open(f, newline="", encoding="utf-8") as fh:
            rows = csv.reader(fh)
            header = next(rows)
            long = header[0] == "path_id"
            off = 1 if long else 0
            xs = [i for i, h in enumerate(header) if h.startswith("x")]
            iv = header.index("V")
            for row in rows:
                key = ("path " + row[0]) if long else Path(f).stem
                t, r, v = series.setdefault(key, ([], [], []))
                t.append(float(row[off]))
                r.append(math.sqrt(sum(float(row[i]) ** 2 for i in xs)))
                v.append(float(row[iv]))
    return series


def plot(files, out_dir, show=False):
    import matplotlib
    if not show:
        matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series = load(files)
    written = []
    for name, col, ylabel in (("norm", 1, "|X_t|"), ("lyapunov", 2, "V(X_t)")):
        fig, ax = plt.subplots(figsize=(7, 4))
        for label in sorted(series):
            s = series[label]
            ax.plot(s[0], s[col], lw=0.8, label=label)
        if name == "norm" and BOUND is not None:
            ax.axhline(BOUND, color="k", ls="--", lw=1.0, label="stability bound")
        ax.set_xlabel("t")
        ax.set_ylabel(ylabel)
        if len(series) <= 10:
            ax.legend(fontsize=7)
        fig.tight_layout()
        target = out_dir / f"{{name}}.png"
        fig.savefig(target, dpi=100, metadata={{"Software": None}})
        written.append(target)
        if not show:
            plt.close(fig)
    if show:
        plt.show()
    return written


if __name__ == "__main__":
    here = Path(__file__).resolve().parent
    files = [a for a in sys.argv[1:] if a != "--show"] or sorted(str(p) for p in (here / "paths").glob("*.csv"))
    plot(files, here / "figures", show="--show" in sys.argv)
'''


def plot_script(bound: Optional[float]) -> str:
    return _TEMPLATE.format(bound=repr(float(bound)) if bound is not None else "None")


def render(csv_files: Sequence, bound: Optional[float], out_dir) -> list:
    ns = {"__name__": "stochstab_plot"}
    exec(compile(plot_script(bound), "plot_paths.py", "exec"), ns)
    return ns["plot"]([str(f) for f in csv_files], Path(out_dir))
