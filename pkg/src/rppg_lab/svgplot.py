"""Dependency-free SVG emission for loss curves, waveform overlays and
STMap reconstruction triptychs. Output is deterministic, so plots can
be diffed in tests."""

import numpy as np

WIDTH, HEIGHT = 640, 360
MARGIN = 40
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _scale(vals, lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0
    return out_lo + (np.asarray(vals, dtype=np.float64) - lo) * (out_hi - out_lo) / span


def _polyline(xs, ys, color):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def line_chart(series, title: str, x_label: str, y_label: str) -> str:
    """series: list of (label, xs, ys). Returns the SVG document."""
    all_x = np.concatenate([np.asarray(xs, dtype=np.float64) for _, xs, _ in series])
    all_y = np.concatenate([np.asarray(ys, dtype=np.float64) for _, _, ys in series])
    x_lo, x_hi = float(all_x.min()), float(all_x.max())
    y_lo, y_hi = float(all_y.min()), float(all_y.max())
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 6}" text-anchor="middle" font-size="11">{x_label}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {HEIGHT / 2})">{y_label}</text>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" '
        f'height="{HEIGHT - 2 * MARGIN}" fill="none" stroke="#999"/>',
    ]
    for i, (label, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        px = _scale(xs, x_lo, x_hi, MARGIN, WIDTH - MARGIN)
        py = _scale(ys, y_lo, y_hi, HEIGHT - MARGIN, MARGIN)
        parts.append(_polyline(px, py, color))
        parts.append(
            f'<text x="{WIDTH - MARGIN - 4}" y="{MARGIN + 16 + 14 * i}" text-anchor="end" '
            f'font-size="11" fill="{color}">{label}</text>'
        )
    parts.append(
        f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 14}" font-size="10">{x_lo:.4g}</text>'
    )
    parts.append(
        f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 14}" text-anchor="end" font-size="10">{x_hi:.4g}</text>'
    )
    parts.append(f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" text-anchor="end" font-size="10">{y_lo:.4g}</text>')
    parts.append(f'<text x="{MARGIN - 4}" y="{MARGIN + 4}" text-anchor="end" font-size="10">{y_hi:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def _map_to_rgb(data: np.ndarray) -> np.ndarray:
    """First three channels as 8-bit RGB (values already in [0, 1])."""
    rgb = data[:, :, :3] if data.shape[2] >= 3 else np.repeat(data[:, :, :1], 3, axis=2)
    return np.clip(np.round(rgb * 255), 0, 255).astype(int)


def stmap_triptych(maps, labels, cell: int = 3) -> str:
    """Side-by-side pixel-rect rendering of up to three maps."""
    h, w = maps[0].shape[:2]
    gap = 12
    panel_w = w * cell
    total_w = len(maps) * panel_w + (len(maps) + 1) * gap
    total_h = h * cell + 2 * gap + 16
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" '
        f'viewBox="0 0 {total_w} {total_h}">',
        f'<rect width="{total_w}" height="{total_h}" fill="white"/>',
    ]
    for m_idx, (m, label) in enumerate(zip(maps, labels)):
        x0 = gap + m_idx * (panel_w + gap)
        rgb = _map_to_rgb(np.asarray(m, dtype=np.float64))
        parts.append(f'<text x="{x0}" y="{gap}" font-size="11">{label}</text>')
        for i in range(h):
            for j in range(w):
                r, g, b = rgb[i, j]
                parts.append(
                    f'<rect x="{x0 + j * cell}" y="{gap + 6 + i * cell}" width="{cell}" '
                    f'height="{cell}" fill="rgb({r},{g},{b})"/>'
                )
    parts.append("</svg>")
    return "\n".join(parts)
