"""CSV and static SVG heatmap output for phase diagrams."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .sweep import NAN, CellResult, PhaseDiagram, SeedResult, normalize_columns

CSV_COLUMNS = (
    "temperature_knob", "temperature_value", "load_knob", "load_value", "seed",
    "test_error", "train_error", "lmc", "cka", "regime", "diverged",
)
MEAN_SEED = "mean"
METRICS = ("test_error", "normalized_error", "lmc", "cka")


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def _num(text: str):
    value = float(text)
    return int(value) if text.lstrip("-").isdigit() else value


def diagram_rows(diagram: PhaseDiagram) -> list[list[str]]:
    rows = []
    tk, lk = diagram.temperature_knob, diagram.load_knob
    for row in diagram.cells:
        for c in row:
            for r in c.per_seed:
                rows.append([tk, _fmt(c.temperature_value), lk, _fmt(c.load_value), str(r.seed),
                             _fmt(r.test_error), _fmt(r.train_error), _fmt(r.lmc), _fmt(r.cka),
                             r.regime, "true" if r.diverged else "false"])
            rows.append([tk, _fmt(c.temperature_value), lk, _fmt(c.load_value), MEAN_SEED,
                         _fmt(c.test_error), _fmt(c.train_error), _fmt(c.lmc), _fmt(c.cka),
                         c.regime, "true" if c.diverged else "false"])
    return rows


def emit_csv(diagram: PhaseDiagram, path) -> None:
    """One row per (cell, seed) plus one ``seed=mean`` row per cell; LF line endings."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(diagram_rows(diagram))
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_csv(path) -> PhaseDiagram:
    """Rebuild a diagram (means, per-seed values, labels) from :func:`emit_csv` output."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        records = list(reader)
    if not records:
        raise ValueError(f"{path}: no data rows")
    t_vals, l_vals = [], []
    seeds: dict[tuple, list[SeedResult]] = {}
    means: dict[tuple, dict] = {}
    for rec in records:
        t, l = _num(rec["temperature_value"]), _num(rec["load_value"])
        if t not in t_vals:
            t_vals.append(t)
        if l not in l_vals:
            l_vals.append(l)
        if rec["seed"] == MEAN_SEED:
            means[(t, l)] = rec
            continue
        seeds.setdefault((t, l), []).append(SeedResult(
            int(rec["seed"]), float(rec["test_error"]), float(rec["train_error"]),
            float(rec["lmc"]), float(rec["cka"]), rec["regime"], rec["diverged"] == "true",
        ))
    cells = []
    for t in t_vals:
        row = []
        for l in l_vals:
            m = means[(t, l)]
            per_seed = seeds.get((t, l), [])
            row.append(CellResult(
                t, l, float(m["test_error"]), float(m["train_error"]), float(m["lmc"]),
                float(m["cka"]), m["regime"], sum(not r.diverged for r in per_seed), per_seed,
            ))
        cells.append(row)
    first = records[0]
    diagram = PhaseDiagram(first["temperature_knob"], t_vals, first["load_knob"], l_vals, cells)
    return normalize_columns(diagram)


def _color(frac: float) -> str:
    # dark blue (low) -> white (high)
    lo, hi = (8, 48, 107), (247, 251, 255)
    rgb = [round(a + (b - a) * frac) for a, b in zip(lo, hi)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_heatmap(diagram: PhaseDiagram, metric: str) -> str:
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    values = diagram.metric(metric)
    finite = values[~(values != values)]
    vmin = float(finite.min()) if finite.size else 0.0
    vmax = float(finite.max()) if finite.size else 0.0
    span = vmax - vmin
    n_t, n_l = diagram.shape
    cw, ch, left, top = 70, 40, 110, 40
    width = left + n_l * cw + 150
    height = top + n_t * ch + 70
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="{left}" y="20" font-size="13">{escape(metric)}</text>',
    ]
    for i in range(n_t):
        y = top + i * ch
        out.append(f'<text x="{left - 8}" y="{y + ch / 2 + 4}" text-anchor="end">'
                   f'{escape(_fmt(diagram.temperature_values[i]))}</text>')
        for j in range(n_l):
            x = left + j * cw
            v = values[i, j]
            if v != v:
                out.append(f'<rect class="cell diverged" x="{x}" y="{y}" width="{cw}" height="{ch}" '
                           f'fill="#bbbbbb" stroke="#ffffff"/>')
                out.append(f'<path d="M{x} {y}L{x + cw} {y + ch}M{x + cw} {y}L{x} {y + ch}" stroke="#666666"/>')
                continue
            frac = 0.5 if span == 0 else (v - vmin) / span
            out.append(f'<rect class="cell" x="{x}" y="{y}" width="{cw}" height="{ch}" '
                       f'fill="{_color(frac)}" stroke="#ffffff"/>')
            ink = "#000000" if frac > 0.5 else "#ffffff"
            out.append(f'<text x="{x + cw / 2}" y="{y + ch / 2 + 4}" text-anchor="middle" '
                       f'fill="{ink}">{v:.3f}</text>')
    bottom = top + n_t * ch
    for j in range(n_l):
        out.append(f'<text x="{left + j * cw + cw / 2}" y="{bottom + 16}" text-anchor="middle">'
                   f'{escape(_fmt(diagram.load_values[j]))}</text>')
    out.append(f'<text x="{left + n_l * cw / 2}" y="{bottom + 36}" text-anchor="middle">'
               f'{escape(diagram.load_knob)}</text>')
    out.append(f'<text x="14" y="{top + n_t * ch / 2}" transform="rotate(-90 14 {top + n_t * ch / 2})" '
               f'text-anchor="middle">{escape(diagram.temperature_knob)}</text>')
    # legend as a gradient-filled path so the rect count stays one per cell
    lx, ly, lh = left + n_l * cw + 30, top, max(n_t * ch, 60)
    out.append('<defs><linearGradient id="scale" x1="0" y1="1" x2="0" y2="0">'
               f'<stop offset="0" stop-color="{_color(0.0)}"/><stop offset="1" stop-color="{_color(1.0)}"/>'
               '</linearGradient></defs>')
    out.append(f'<path d="M{lx} {ly}h16v{lh}h-16z" fill="url(#scale)" stroke="#333333"/>')
    out.append(f'<text x="{lx + 22}" y="{ly + 10}">max {vmax:.4g}</text>')
    out.append(f'<text x="{lx + 22}" y="{ly + lh}">min {vmin:.4g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_heatmap(diagram: PhaseDiagram, metric: str, path) -> None:
    Path(path).write_text(render_heatmap(diagram, metric), encoding="utf-8", newline="")
