"""Image serialization, report files, and matplotlib figures.

Pixel values in [-1, 1] map to 8-bit via the affine (x + 1) * 127.5 with
round-half-even; out-of-range values are clamped at serialization time only.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
import numpy as np
import torch
from PIL import Image

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().numpy()
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0)


def to_png(image: torch.Tensor, path) -> None:
    """Write a (3, H, W) image in [-1, 1] as an 8-bit PNG."""
    Image.fromarray(to_uint8(image).transpose(1, 2, 0)).save(path)


def from_png(path) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def side_by_side(left: torch.Tensor, right: torch.Tensor, gap: int = 2) -> torch.Tensor:
    """Concatenate two images horizontally with a white gap."""
    h = max(left.shape[-2], right.shape[-2])

    def pad_h(img):
        if img.shape[-2] == h:
            return img
        out = torch.ones(img.shape[0], h, img.shape[-1])
        out[:, : img.shape[-2]] = img
        return out

    spacer = torch.ones(left.shape[0], h, gap)
    return torch.cat([pad_h(left), spacer, pad_h(right)], dim=-1)


def image_grid(images: torch.Tensor, columns: int = 4, gap: int = 2) -> torch.Tensor:
    """Tile (N, 3, H, W) images into one grid image with white gaps."""
    n, c, h, w = images.shape
    columns = min(columns, n)
    rows = (n + columns - 1) // columns
    grid = torch.ones(c, rows * (h + gap) - gap, columns * (w + gap) - gap)
    for i in range(n):
        r, col = divmod(i, columns)
        grid[:, r * (h + gap) : r * (h + gap) + h, col * (w + gap) : col * (w + gap) + w] = images[i]
    return grid


def write_json(payload: dict, path) -> None:
    """Deterministic JSON: sorted keys, newline-terminated."""
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def append_ndjson(record: dict, path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_ndjson(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def loss_curve_figure(records: list[dict], path, window: int = 100) -> None:
    """Per-component loss curves plus a windowed mean of the total."""
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    components = sorted({k for r in records for k in r.get("components", {})})
    for name in components:
        ax.plot(steps, [r["components"].get(name, float("nan")) for r in records], alpha=0.4, label=name)
    totals = [sum(r["components"].values()) for r in records]
    if len(totals) >= window:
        centers = range(window, len(totals) + 1)
        means = [sum(totals[i - window : i]) / window for i in centers]
        ax.plot([steps[i - 1] for i in centers], means, color="black", label=f"total ({window}-step mean)")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sweep_figure(rows: list[dict], path, metric_name: str = "value") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["steps"] for r in rows], [r[metric_name] for r in rows], marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("decoding steps")
    ax.set_ylabel(metric_name)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
