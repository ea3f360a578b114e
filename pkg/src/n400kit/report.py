"""Report bundle writers: CSV tables, a markdown summary and SVG figures.

The CSV tables are the contract; figures are drawn from them and are
never needed by downstream code.
"""

from __future__ import annotations

from html import escape
from pathlib import Path

import numpy as np
import pandas as pd

from .ingest import CONDITIONS, Condition

FLOAT_FORMAT = "%.10g"


def write_csv(df, path):
    Path(path).write_text(df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"),
                          encoding="utf-8")


def _fmt_p(p):
    if p is None or (isinstance(p, float) and np.isnan(p)):
        return ""
    if p < 1e-4:
        return "< 0.0001"
    return f"{p:.4f}"


def _md_table(df, columns, formats=None):
    formats = formats or {}
    head = "| " + " | ".join(columns) + " |"
    sep = "|" + "|".join("---" for _ in columns) + "|"
    lines = [head, sep]
    for _, row in df.iterrows():
        cells = []
        for c in columns:
            v = row[c]
            f = formats.get(c)
            if f is not None:
                cells.append(f(v))
            elif isinstance(v, float):
                cells.append("" if np.isnan(v) else f"{v:.4g}")
            else:
                cells.append(str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def ladder_markdown(ladder_df, alpha=0.05):
    out = ["## Nested model comparison", ""]
    method = ladder_df["method"].iloc[0] if len(ladder_df) else ""
    out.append(f"Likelihood-ratio tests between consecutive rungs; p-values adjusted by {method} FDR.")
    out.append("")
    out.append(_md_table(ladder_df, ["ladder", "label", "n_params", "loglik", "aic", "delta_aic",
                                     "statistic", "df", "p_adjusted", "singular", "note"],
                         {"p_adjusted": _fmt_p, "loglik": lambda v: f"{v:.3f}",
                          "aic": lambda v: f"{v:.3f}", "delta_aic": lambda v: f"{v:.3f}"}))
    tops = ladder_df.sort_values(["ladder", "rung"]).groupby("ladder", sort=False).tail(1)
    if len(tops) > 1:
        best = tops.loc[tops["aic"].idxmin(), "ladder"]
        out += ["", f"Lowest AIC at the top rung: **{best}**."]
    return "\n".join(out) + "\n"


def contrasts_markdown(contrasts_df, cells_df):
    out = ["## Held-out predictions", "",
           _md_table(cells_df, ["source", "condition", "n", "mean", "se"]), "",
           "One-tailed Welch t-tests, FDR adjusted:", "",
           _md_table(contrasts_df, ["label", "statistic", "df", "p_raw", "p_adjusted"],
                     {"p_raw": _fmt_p, "p_adjusted": _fmt_p,
                      "df": lambda v: f"{v:.1f}", "statistic": lambda v: f"{v:.4f}"})]
    return "\n".join(out) + "\n"


def correlation_markdown(corr_df):
    out = ["## Predictor / similarity correlation", "",
           _md_table(corr_df, ["name", "predictor", "similarity", "condition", "n", "r"],
                     {"r": lambda v: f"{v:.3f}"})]
    overall = corr_df[corr_df["condition"] == "all"]
    if len(overall) > 1:
        best = overall.loc[overall["r"].abs().idxmax(), "name"]
        out += ["", f"Strongest correlation: **{best}**."]
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------- SVG

_W, _H = 640, 400
_M = {"l": 70, "r": 20, "t": 30, "b": 70}
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg(body, title):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="{_W}" height="{_H}" fill="white"/>\n'
            f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>\n'
            + "\n".join(body) + "\n</svg>\n")


def _scale(lo, hi, a, b):
    if hi == lo:
        hi = lo + 1.0
    return lambda v: a + (v - lo) * (b - a) / (hi - lo)


def _yaxis(lo, hi, sy, label):
    body = [f'<line x1="{_M["l"]}" y1="{_M["t"]}" x2="{_M["l"]}" y2="{_H - _M["b"]}" stroke="black"/>']
    for v in np.linspace(lo, hi, 5):
        y = sy(v)
        body.append(f'<text x="{_M["l"] - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.3g}</text>')
        body.append(f'<line x1="{_M["l"] - 3}" y1="{y:.1f}" x2="{_M["l"]}" y2="{y:.1f}" stroke="black"/>')
    body.append(f'<text transform="translate(16,{_H / 2:.1f}) rotate(-90)" text-anchor="middle">'
                f'{escape(label)}</text>')
    return body


def aic_figure(ladder_df):
    """Bar chart of AIC improvement over each ladder's baseline."""
    rows = ladder_df[ladder_df["rung"] > 0]
    if rows.empty:
        return _svg([], "AIC improvement over baseline")
    gain = -rows["delta_aic"].to_numpy(dtype=float)
    lo, hi = min(0.0, gain.min()), max(0.0, gain.max())
    sy = _scale(lo, hi, _H - _M["b"], _M["t"])
    width = (_W - _M["l"] - _M["r"]) / len(rows)
    ladders = list(dict.fromkeys(rows["ladder"]))
    body = _yaxis(lo, hi, sy, "AIC improvement")
    for i, (g, (_, r)) in enumerate(zip(gain, rows.iterrows())):
        x = _M["l"] + i * width + 0.1 * width
        y0, y1 = sy(0.0), sy(g)
        color = _COLORS[ladders.index(r["ladder"]) % len(_COLORS)]
        body.append(f'<rect x="{x:.1f}" y="{min(y0, y1):.1f}" width="{0.8 * width:.1f}" '
                    f'height="{abs(y1 - y0):.1f}" fill="{color}"/>')
        body.append(f'<text transform="translate({x + 0.4 * width:.1f},{_H - _M["b"] + 12}) rotate(30)" '
                    f'font-size="9">{escape(r["ladder"] + " " + r["label"])}</text>')
    return _svg(body, "AIC improvement over baseline")


def conditions_figure(cells_df):
    """Mean +/- SE per condition and source; y axis reversed as is customary for ERPs."""
    if cells_df.empty:
        return _svg([], "Held-out amplitudes")
    lo = float((cells_df["mean"] - cells_df["se"].fillna(0)).min())
    hi = float((cells_df["mean"] + cells_df["se"].fillna(0)).max())
    pad = 0.05 * (hi - lo or 1.0)
    lo, hi = lo - pad, hi + pad
    sy = _scale(lo, hi, _M["t"], _H - _M["b"])  # reversed
    sources = list(dict.fromkeys(cells_df["source"]))
    step = (_W - _M["l"] - _M["r"]) / len(CONDITIONS)
    body = _yaxis(lo, hi, sy, "amplitude (reversed)")
    for j, cond in enumerate(CONDITIONS):
        x = _M["l"] + (j + 0.5) * step
        body.append(f'<text x="{x:.1f}" y="{_H - _M["b"] + 16}" text-anchor="middle">'
                    f'{Condition(cond).display}</text>')
    for k, src in enumerate(sources):
        color = _COLORS[k % len(_COLORS)]
        sub = cells_df[cells_df["source"] == src]
        offset = (k - (len(sources) - 1) / 2) * 10
        for _, r in sub.iterrows():
            x = _M["l"] + (CONDITIONS.index(r["condition"]) + 0.5) * step + offset
            se = 0.0 if np.isnan(r["se"]) else r["se"]
            body.append(f'<line x1="{x:.1f}" y1="{sy(r["mean"] - se):.1f}" x2="{x:.1f}" '
                        f'y2="{sy(r["mean"] + se):.1f}" stroke="{color}"/>')
            body.append(f'<circle cx="{x:.1f}" cy="{sy(r["mean"]):.1f}" r="3.5" fill="{color}"/>')
        body.append(f'<text x="{_W - _M["r"] - 150}" y="{_M["t"] + 14 * (k + 1)}" fill="{color}">'
                    f'{escape(src)}</text>')
    return _svg(body, "Held-out amplitudes by condition")


def scatter_figure(scatter_df, name, r):
    x = scatter_df.iloc[:, 2].to_numpy(dtype=float)
    y = scatter_df.iloc[:, 3].to_numpy(dtype=float)
    sx = _scale(x.min(), x.max(), _M["l"], _W - _M["r"])
    sy = _scale(y.min(), y.max(), _H - _M["b"], _M["t"])
    body = _yaxis(float(y.min()), float(y.max()), sy, scatter_df.columns[3])
    body.append(f'<text x="{_W / 2:.1f}" y="{_H - 20}" text-anchor="middle">'
                f'{escape(scatter_df.columns[2])}</text>')
    for xi, yi in zip(x, y):
        body.append(f'<circle cx="{sx(xi):.1f}" cy="{sy(yi):.1f}" r="1.8" fill="#1f77b4" '
                    f'fill-opacity="0.5"/>')
    return _svg(body, f"{name}: r = {r:.3f}")


def correlation_frame(corr_reports):
    rows = []
    for name, rep in corr_reports.items():
        rows.append({"name": name, "predictor": rep.predictor, "similarity": rep.similarity,
                     "condition": "all", "n": rep.n, "r": rep.r})
        for cond, r in rep.by_condition.items():
            n = int((rep.scatter["condition"] == cond).sum())
            rows.append({"name": name, "predictor": rep.predictor, "similarity": rep.similarity,
                         "condition": cond, "n": n, "r": r})
    return pd.DataFrame(rows)


def scatter_frame(corr_reports):
    frames = []
    for name, rep in corr_reports.items():
        df = rep.scatter.rename(columns={rep.predictor: "predictor_value",
                                         rep.similarity: "similarity_value"})
        df.insert(0, "name", name)
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


def rebuild_summary(out):
    """Regenerate ``summary.md`` and figures from whatever CSV tables exist in ``out``."""
    out = Path(out)
    sections = ["# Analysis summary", ""]
    if (out / "ladder.csv").exists():
        df = pd.read_csv(out / "ladder.csv", keep_default_na=False,
                         na_values=[""]).fillna({"note": ""})
        sections.append(ladder_markdown(df))
        (out / "fig_aic.svg").write_text(aic_figure(df), encoding="utf-8")
    if (out / "contrasts.csv").exists() and (out / "conditions.csv").exists():
        con = pd.read_csv(out / "contrasts.csv")
        cells = pd.read_csv(out / "conditions.csv")
        sections.append(contrasts_markdown(con, cells))
        (out / "fig_conditions.svg").write_text(conditions_figure(cells), encoding="utf-8")
    if (out / "correlation.csv").exists():
        corr = pd.read_csv(out / "correlation.csv")
        sections.append(correlation_markdown(corr))
        if (out / "scatter.csv").exists():
            sc = pd.read_csv(out / "scatter.csv", dtype={"frame_id": str})
            panels = []
            for name, grp in sc.groupby("name", sort=False):
                r = float(corr[(corr["name"] == name) & (corr["condition"] == "all")]["r"].iloc[0])
                panels.append((name, grp.drop(columns="name"), r))
            parts = [scatter_figure(g, nm, r) for nm, g, r in panels]
            _stack(out / "fig_scatter.svg", parts)
    text = "\n".join(sections)
    (out / "summary.md").write_text(text, encoding="utf-8")
    return text


def _stack(path, parts):
    if not parts:
        return
    inner = "\n".join(
        f'<svg y="{i * _H}" width="{_W}" height="{_H}">' + p.split(">", 1)[1].rsplit("</svg>", 1)[0] + "</svg>"
        for i, p in enumerate(parts))
    Path(path).write_text(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H * len(parts)}" '
        f'font-family="sans-serif" font-size="11">\n{inner}\n</svg>\n', encoding="utf-8")
