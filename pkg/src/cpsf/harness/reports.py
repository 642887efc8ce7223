"""Coverage tables, the SVG coverage chart and the distribution-shift diagnostic."""
from __future__ import annotations

import csv
import io
import logging
import math

import numpy as np
from scipy.stats import ks_2samp

from ..conformal import score_table
from ..exceptions import InvalidInputError
from ..validation import as_positions

log = logging.getLogger(__name__)

COVERAGE_COLUMNS = ("h", "mean_error", "q50", "q90", "q99", "max_error", "C", "coverage")


def coverage_table(radii, model, episodes, t_obs=8, reduction="stacked") -> list:
    """Per-step error statistics and empirical coverage of ``radii``."""
    C = np.asarray(getattr(radii, "C", radii), dtype=np.float64)
    scores = score_table(model, episodes, t_obs, reduction)
    if scores.shape[0] == 0:
        raise InvalidInputError("empty episode set")
    if C.shape != (scores.shape[1],):
        raise InvalidInputError(f"radii length {C.size} does not match horizon {scores.shape[1]}")
    rows = []
    for h in range(scores.shape[1]):
        s = scores[:, h]
        q50, q90, q99 = np.quantile(s, [0.5, 0.9, 0.99])
        rows.append({
            "h": h + 1,
            "mean_error": float(s.mean()),
            "q50": float(q50),
            "q90": float(q90),
            "q99": float(q99),
            "max_error": float(s.max()),
            "C": float(C[h]),
            "coverage": float(np.mean(s <= C[h])),
        })
    return rows


def _cell(v):
    if isinstance(v, int):
        return str(v)
    return repr(float(v)) if math.isfinite(v) else "inf"


def table_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COVERAGE_COLUMNS)
    for r in rows:
        w.writerow([_cell(r[c]) for c in COVERAGE_COLUMNS])
    return buf.getvalue()


def table_from_csv(text: str) -> list:
    r = csv.reader(io.StringIO(text))
    header = tuple(next(r))
    if header != COVERAGE_COLUMNS:
        raise InvalidInputError(f"unexpected coverage CSV header {header}")
    rows = []
    for line in r:
        row = {c: float(v) for c, v in zip(COVERAGE_COLUMNS, line)}
        row["h"] = int(row["h"])
        rows.append(row)
    return rows


def coverage_svg(rows, title="Prediction error and conformal radius per step") -> str:
    """Bars: mean error with a q99 whisker; dashed marker: radius C_h.

    Pure string formatting with fixed precision, so re-plotting a re-read
    CSV yields identical bytes.
    """
    W, Hh, pad = 560, 320, 50
    finite = [r["C"] for r in rows if math.isfinite(r["C"])]
    top = max([r["q99"] for r in rows] + [r["max_error"] for r in rows] + finite + [1e-9]) * 1.1
    n = len(rows)
    bw = (W - 2 * pad) / max(n, 1)

    def y(v):
        return Hh - pad - (min(v, top) / top) * (Hh - 2 * pad)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{Hh}" viewBox="0 0 {W} {Hh}">',
        f'<rect x="0" y="0" width="{W}" height="{Hh}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="13">{title}</text>',
        f'<line x1="{pad}" y1="{Hh - pad}" x2="{W - pad}" y2="{Hh - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{Hh - pad}" stroke="black"/>',
        f'<text x="{pad - 6}" y="{pad + 4}" text-anchor="end" font-family="sans-serif" font-size="10">{top:.3f}</text>',
        f'<text x="{pad - 6}" y="{Hh - pad + 4}" text-anchor="end" font-family="sans-serif" font-size="10">0</text>',
    ]
    for i, r in enumerate(rows):
        x0 = pad + i * bw + bw * 0.2
        w = bw * 0.6
        cx = x0 + w / 2
        ym = y(r["mean_error"])
        out.append(f'<rect x="{x0:.2f}" y="{ym:.2f}" width="{w:.2f}" height="{Hh - pad - ym:.2f}" fill="#4c72b0"/>')
        out.append(f'<line x1="{cx:.2f}" y1="{ym:.2f}" x2="{cx:.2f}" y2="{y(r["q99"]):.2f}" stroke="#333333"/>')
        if math.isfinite(r["C"]):
            yc = y(r["C"])
            label = f'{r["C"]:.3f}'
        else:
            yc = pad
            label = "inf"
        out.append(f'<line x1="{x0 - 4:.2f}" y1="{yc:.2f}" x2="{x0 + w + 4:.2f}" y2="{yc:.2f}" '
                   f'stroke="#dd8800" stroke-width="2" stroke-dasharray="4,3"/>')
        out.append(f'<text x="{cx:.2f}" y="{yc - 4:.2f}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="9">{label}</text>')
        out.append(f'<text x="{cx:.2f}" y="{Hh - pad + 14:.2f}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="10">h={r["h"]}</text>')
        out.append(f'<text x="{cx:.2f}" y="{Hh - pad + 28:.2f}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="9">{100 * r["coverage"]:.1f}%</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- distribution shift ------------------------------------------------------


def min_interagent_distance(positions) -> float:
    """Smallest pairwise distance between agents over the whole episode."""
    pos = as_positions(positions)
    m = pos.shape[1]
    if m < 2:
        return math.inf
    i, j = np.triu_indices(m, 1)
    return float(np.min(np.linalg.norm(pos[:, i] - pos[:, j], axis=-1)))


def shift_diagnostic(episodes, model, t_obs=8, bins=(0.0, 1.5, 2.5, 3.5), horizons=(1, 4, 7),
                     histogram_bins=20, threshold=0.25, reduction="stacked") -> dict:
    """Error histograms grouped by minimum inter-agent distance.

    Adjacent categories are compared with the two-sample Kolmogorov-Smirnov
    statistic per prediction step; ``similar`` flags every statistic below
    ``threshold``.  Empty categories are reported with ``count = 0``.
    """
    if len(episodes) < 100:
        log.warning("shift diagnostic on %d episodes; at least 100 recommended", len(episodes))
    if any(h < 1 or h > model.horizon for h in horizons):
        raise InvalidInputError(f"horizons {horizons} outside 1..{model.horizon}")
    edges = list(bins) + [math.inf]
    scores = score_table(model, episodes, t_obs, reduction)
    dmin = np.array([min_interagent_distance(ep) for ep in episodes])
    cat = np.searchsorted(np.asarray(bins[1:]), dmin, side="right")
    hist_edges = {}
    for h in horizons:
        hi = float(scores[:, h - 1].max()) if scores.size else 1.0
        hist_edges[h] = np.linspace(0.0, hi if hi > 0 else 1.0, histogram_bins + 1)
    categories = []
    for k in range(len(bins)):
        mask = cat == k
        entry = {
            "range": [edges[k], "inf" if math.isinf(edges[k + 1]) else edges[k + 1]],
            "count": int(mask.sum()),
            "histograms": {},
        }
        for h in horizons:
            counts, _ = np.histogram(scores[mask, h - 1], bins=hist_edges[h])
            entry["histograms"][str(h)] = counts.tolist()
        categories.append(entry)
    comparisons = []
    for k in range(len(bins) - 1):
        a, b = cat == k, cat == k + 1
        for h in horizons:
            if a.sum() == 0 or b.sum() == 0:
                stat = None
            else:
                stat = float(ks_2samp(scores[a, h - 1], scores[b, h - 1]).statistic)
            comparisons.append({"pair": [k, k + 1], "h": h, "ks": stat,
                                "similar": None if stat is None else stat < threshold})
    first_three = [c for c in comparisons if c["pair"][1] <= 2]
    return {
        "schema_version": 1,
        "t_obs": t_obs,
        "horizons": list(horizons),
        "threshold": threshold,
        "histogram_edges": {str(h): e.tolist() for h, e in hist_edges.items()},
        "categories": categories,
        "comparisons": comparisons,
        "first_three_similar": bool(first_three) and all(c["similar"] for c in first_three),
    }
