"""Minimal, dependency-free SVG line and bar charts for run reports.

Output is plain text SVG, deterministic for identical inputs.
"""

from __future__ import annotations

WIDTH, HEIGHT = 640, 400
MARGIN = 56


def _scale(values: list[float], lo_px: float, hi_px: float) -> tuple[float, float, float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        hi = lo + 1.0
    span = (hi_px - lo_px) / (hi - lo)
    return lo, hi, span


def _axes(title: str, x_label: str, y_label: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle">{x_label}</text>',
        f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {HEIGHT / 2})">{y_label}</text>',
    ]


def line_chart(
    points: list[tuple[float, float]], path, title: str, x_label: str, y_label: str
) -> None:
    """Write a single polyline chart; points are (x, y) pairs."""
    if not points:
        raise ValueError("line_chart needs at least one point")
    points = sorted(points)
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, _, x_span = _scale(xs, MARGIN, WIDTH - MARGIN)
    y_lo, _, y_span = _scale(ys, MARGIN, HEIGHT - MARGIN)

    def px(x: float) -> float:
        return MARGIN + (x - x_lo) * x_span

    def py(y: float) -> float:
        return HEIGHT - MARGIN - (y - y_lo) * y_span

    parts = _axes(title, x_label, y_label)
    coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in points)
    parts.append(f'<polyline points="{coords}" fill="none" stroke="steelblue" stroke-width="2"/>')
    for x, y in points:
        parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="steelblue"/>')
    parts.append(f'<text x="{MARGIN}" y="{MARGIN - 8}">min x={min(xs):.4g}, max x={max(xs):.4g}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


def bar_chart(
    labels: list[str], counts: list[float], path, title: str, x_label: str, y_label: str
) -> None:
    """Write a bar chart with one bar per label."""
    if not labels or len(labels) != len(counts):
        raise ValueError("labels and counts must be equal-length and non-empty")
    parts = _axes(title, x_label, y_label)
    top = max(max(counts), 1.0)
    inner_width = WIDTH - 2 * MARGIN
    slot = inner_width / len(labels)
    bar_width = slot * 0.8
    for i, (label, count) in enumerate(zip(labels, counts)):
        height = (HEIGHT - 2 * MARGIN) * (count / top)
        x = MARGIN + i * slot + slot * 0.1
        y = HEIGHT - MARGIN - height
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_width:.2f}" '
            f'height="{height:.2f}" fill="steelblue"/>'
        )
        if len(labels) <= 30:
            parts.append(
                f'<text x="{x + bar_width / 2:.2f}" y="{HEIGHT - MARGIN + 14}" '
                f'text-anchor="middle" font-size="9">{label}</text>'
            )
    parts.append(f'<text x="{MARGIN}" y="{MARGIN - 8}">max={top:.6g}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
