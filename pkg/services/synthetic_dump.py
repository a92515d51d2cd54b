"""Synthetic batch dumps: JSON manifest, raw float32 images and a PPM preview grid."""

import json
from pathlib import Path

import numpy as np
import structlog

from utils.errors import DataError

log = structlog.get_logger(__name__)

MANIFEST = "manifest.json"
PAYLOAD = "images.f32"
PREVIEW = "preview.ppm"


def to_uint8(images):
    """Map [-1, 1] pixels to 0..255 (values outside are clipped)."""
    return np.clip(np.floor((np.asarray(images) + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def preview_grid(images, columns=8, max_images=64, pad=1):
    """H x W x 3 uint8 mosaic of the first `max_images` images."""
    images = to_uint8(images[:max_images])
    n, _, h, w = images.shape
    cols = min(columns, n)
    rows = -(-n // cols)
    grid = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y:y + h, x:x + w] = images[i].transpose(1, 2, 0)
    return grid


def encode_ppm(grid):
    """Binary PPM (P6) bytes for an H x W x 3 uint8 array."""
    h, w, _ = grid.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(grid).tobytes()


def save_dump(images, labels, num_classes, out_dir, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = np.ascontiguousarray(images, dtype="<f4")
    labels = np.asarray(labels, dtype=np.int64)
    (out_dir / PAYLOAD).write_bytes(images.tobytes())
    (out_dir / PREVIEW).write_bytes(encode_ppm(preview_grid(images)))
    manifest = {
        "num_classes": int(num_classes),
        "count": int(images.shape[0]),
        "shape": list(images.shape[1:]),
        "dtype": "<f4",
        "payload": PAYLOAD,
        "preview": PREVIEW,
        "labels": labels.tolist(),
        **(extra or {}),
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    log.info("synthetic_dump_saved", path=str(out_dir), count=manifest["count"])
    return out_dir


def load_dump(path):
    """Return (images, labels, manifest) from a dump directory (or its manifest file)."""
    path = Path(path)
    root = path.parent if path.is_file() else path
    manifest_path = root / MANIFEST
    if not manifest_path.exists():
        raise DataError(f"No synthetic dump manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    raw = np.fromfile(root / manifest["payload"], dtype=np.dtype(manifest["dtype"]))
    per_image = int(np.prod(manifest["shape"]))
    expected = manifest["count"] * per_image
    if raw.size != expected:
        raise DataError(f"{root / manifest['payload']}: expected {expected * 4} bytes, found {raw.size * 4} "
                        f"(truncated at byte offset {raw.size * 4})")
    images = raw.reshape(manifest["count"], *manifest["shape"]).astype(np.float32)
    labels = np.asarray(manifest["labels"], dtype=np.int64)
    return images, labels, manifest
