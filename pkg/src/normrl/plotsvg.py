"""Self-contained SVG learning curves from run metrics.

One polyline per (variant, suite) group, seed-averaged, with a shaded
+/- 1 std band polygon behind it. No external assets, fonts, or scripts.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError
from .harness import read_metrics

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#e377c2"]
_W, _H = 680, 440
_ML, _MR, _MT, _MB = 64, 16, 20, 44


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _series(rows: list[dict], suites=None):
    """Group rows into (variant, suite) -> sorted (steps, mean, std-across-seeds)."""
    groups: dict[tuple[str, str], dict[int, list[float]]] = {}
    for r in rows:
        if suites and r["suite"] not in suites:
            continue
        key = (r["variant"], r["suite"])
        groups.setdefault(key, {}).setdefault(r["step"], []).append(r["mean_return"])
    out = {}
    for key, per_step in groups.items():
        steps = sorted(per_step)
        mean = np.array([np.mean(per_step[s]) for s in steps])
        std = np.array([np.std(per_step[s]) for s in steps])
        out[key] = (np.array(steps), mean, std)
    if not out:
        raise ConfigError("no metric rows matched the requested suites")
    return out


def plot_runs(run_dirs, out_path, suites=None) -> Path:
    """Render seed-averaged learning curves for the given run directories."""
    rows = []
    for d in run_dirs:
        rows.extend(read_metrics(Path(d) / "metrics.csv"))
    series = _series(rows, suites)

    x_max = max(s[0].max() for s in series.values())
    x_max = max(x_max, 1)
    lo = min((s[1] - s[2]).min() for s in series.values())
    hi = max((s[1] + s[2]).max() for s in series.values())
    pad = 0.05 * max(hi - lo, 1e-9)
    lo, hi = lo - pad, hi + pad

    def sx(v):
        return _ML + (v / x_max) * (_W - _ML - _MR)

    def sy(v):
        return _H - _MB - ((v - lo) / (hi - lo)) * (_H - _MT - _MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
    ]
    # axes and ticks
    ax_y = _H - _MB
    parts.append(f'<line x1="{_ML}" y1="{ax_y}" x2="{_W - _MR}" y2="{ax_y}" stroke="black"/>')
    parts.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{ax_y}" stroke="black"/>')
    for i in range(5):
        xv = x_max * i / 4
        parts.append(f'<line x1="{sx(xv):.1f}" y1="{ax_y}" x2="{sx(xv):.1f}" y2="{ax_y + 4}" stroke="black"/>')
        parts.append(f'<text x="{sx(xv):.1f}" y="{ax_y + 16}" text-anchor="middle">{_fmt(xv)}</text>')
        yv = lo + (hi - lo) * i / 4
        parts.append(f'<line x1="{_ML - 4}" y1="{sy(yv):.1f}" x2="{_ML}" y2="{sy(yv):.1f}" stroke="black"/>')
        parts.append(f'<text x="{_ML - 7}" y="{sy(yv) + 4:.1f}" text-anchor="end">{_fmt(yv)}</text>')
    parts.append(f'<text x="{(_ML + _W - _MR) / 2}" y="{_H - 8}" text-anchor="middle">env steps</text>')
    parts.append(
        f'<text x="14" y="{(_MT + ax_y) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(_MT + ax_y) / 2})">mean return</text>'
    )

    for idx, (key, (steps, mean, std)) in enumerate(sorted(series.items())):
        color = _COLORS[idx % len(_COLORS)]
        upper = mean + std
        lower = mean - std
        band = " ".join(f"{sx(s):.1f},{sy(u):.1f}" for s, u in zip(steps, upper))
        band += " " + " ".join(f"{sx(s):.1f},{sy(v):.1f}" for s, v in zip(steps[::-1], lower[::-1]))
        parts.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.18" stroke="none"/>')
        line = " ".join(f"{sx(s):.1f},{sy(m):.1f}" for s, m in zip(steps, mean))
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.6"/>')
        ly = _MT + 14 * (idx + 1)
        parts.append(f'<line x1="{_W - _MR - 150}" y1="{ly - 4}" x2="{_W - _MR - 130}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_W - _MR - 126}" y="{ly}">{key[0]}/{key[1]}</text>')

    parts.append("</svg>")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return out_path
