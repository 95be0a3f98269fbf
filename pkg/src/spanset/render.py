"""Static SVG views of predictions: span bars, attention grid, slot scatter."""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import quoteattr

import numpy as np

from .metrics import link_predictions

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")

WIDTH = 720
MARGIN = 60
ROW = 22
CELL_H = 6


def _x(t: float, width: float = WIDTH - 2 * MARGIN) -> float:
    return MARGIN + t * width


def _rect(x, y, w, h, **attrs) -> str:
    # trailing underscore escapes keywords (class_ -> class)
    extra = " ".join(f"{k.rstrip('_').replace('_', '-')}={quoteattr(str(v))}" for k, v in attrs.items())
    return f'<rect x="{x:.4f}" y="{y:.4f}" width="{w:.4f}" height="{h:.4f}" {extra}/>'


def _heat(v: float) -> str:
    # white -> dark blue
    v = min(max(v, 0.0), 1.0)
    r = int(round(255 * (1 - v)))
    g = int(round(255 * (1 - 0.8 * v)))
    return f"rgb({r},{g},255)"


def sample_svg(sample, output, b: int = 0, layer: int = -1) -> tuple[str, np.ndarray]:
    """SVG for one sample plus its attention rows (proposal x memory position).

    Each bar carries ``data-s``/``data-e``; x coordinates map [0, 1] onto
    the plot width linearly, so endpoints can be read back from either.
    """
    ranked = link_predictions(output, b)
    attn = output.attention(b, layer)
    T = sample.T
    K = sample.K
    n = attn.shape[0]
    parts = []
    y = 30.0
    parts.append(f'<text x="{MARGIN}" y="18" font-size="12">sample {sample.sample_id}: spans</text>')
    for k in range(K):
        color = PALETTE[k % len(PALETTE)]
        parts.append(f'<text x="4" y="{y + 14:.1f}" font-size="10">q{k}</text>')
        for span, q in sample.targets:
            if q != k:
                continue
            parts.append(_rect(_x(span.s), y, _x(span.e) - _x(span.s), ROW - 6, fill="none",
                               stroke=color, stroke_width=2, class_="target",
                               data_query=k, data_s=repr(span.s), data_e=repr(span.e)))
        for rank, ((span, score), idx) in enumerate(zip(ranked.per_query[k], ranked.indices[k])):
            cls = "pred top1" if rank == 0 else "pred"
            yy = y + 3 + (0 if rank == 0 else 4)
            parts.append(_rect(_x(span.s), yy, max(_x(span.e) - _x(span.s), 0.5), ROW - 12,
                               fill=color, fill_opacity=f"{max(score, 0.1):.3f}", class_=cls,
                               data_query=k, data_rank=rank, data_proposal=idx,
                               data_s=repr(span.s), data_e=repr(span.e), data_score=repr(score)))
        y += ROW
    plot_w = WIDTH - 2 * MARGIN
    parts.append(f'<line x1="{MARGIN}" y1="{y:.1f}" x2="{MARGIN + plot_w}" y2="{y:.1f}" stroke="#888"/>')
    y += 24
    parts.append(f'<text x="{MARGIN}" y="{y - 6:.1f}" font-size="12">proposal-frame attention</text>')
    cw = plot_w / T
    peak = float(attn[:, :T].max()) if attn.size else 1.0
    for i in range(n):
        for f in range(T):
            parts.append(_rect(MARGIN + f * cw, y + i * CELL_H, cw, CELL_H, fill=_heat(attn[i, f] / (peak or 1.0)),
                               class_="attn"))
    y += n * CELL_H + 10
    body = "\n".join(parts)
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{y:.0f}" '
           f'viewBox="0 0 {WIDTH} {y:.0f}">\n{body}\n</svg>\n')
    return svg, attn


def write_attention_csv(path: str | Path, attn: np.ndarray, T: int) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["proposal"] + [f"f{t}" for t in range(T)] + [f"q{k}" for k in range(attn.shape[1] - T)])
        for i, row in enumerate(attn):
            w.writerow([i] + [repr(float(v)) for v in row])


def slot_scatter_svg(outputs, ppq: int) -> str:
    """(center, width) of every active prediction, colored by slot within its subset."""
    size = 360
    pts = []
    for out in outputs:
        for b in range(len(out.n_queries)):
            for i, (s, e) in enumerate(out.spans(b)):
                pts.append((0.5 * (s + e), e - s, i % ppq))
    parts = [f'<rect x="{MARGIN}" y="20" width="{size}" height="{size}" fill="none" stroke="#888"/>',
             f'<text x="{MARGIN}" y="14" font-size="12">prediction center (x) vs width (y) per slot</text>']
    for c, w, slot in pts:
        cx = MARGIN + c * size
        cy = 20 + (1 - w) * size
        parts.append(f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="1.5" fill="{PALETTE[slot % len(PALETTE)]}" '
                     f'fill-opacity="0.5" class="slot" data-slot="{slot}"/>')
    body = "\n".join(parts)
    h = size + 40
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 2 * MARGIN}" height="{h}" '
            f'viewBox="0 0 {size + 2 * MARGIN} {h}">\n{body}\n</svg>\n')


def render(model, samples, sample_id: int, out_svg: str | Path) -> dict[str, Path]:
    """Write the per-sample SVG, its attention CSV and the corpus slot scatter."""
    by_id = {s.sample_id: s for s in samples}
    if sample_id not in by_id:
        raise KeyError(f"no sample with id {sample_id}")
    sample = by_id[sample_id]
    out_svg = Path(out_svg)
    (output,) = model.predict([sample], batch_size=1)
    svg, attn = sample_svg(sample, output)
    out_svg.write_text(svg)
    csv_path = out_svg.with_suffix(".attention.csv")
    write_attention_csv(csv_path, attn, sample.T)
    scatter = out_svg.with_name(out_svg.stem + ".slots.svg")
    scatter.write_text(slot_scatter_svg(model.predict(samples), model.cfg.proposals_per_query))
    return {"svg": out_svg, "attention": csv_path, "scatter": scatter}
