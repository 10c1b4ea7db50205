"""Attention and key-embedding export.

Maps are written as binary PGM (grayscale) and PPM (colour) images, one per
keyframe-relative feature frame, upscaled by pixel repetition.
"""
import csv
import logging
from pathlib import Path

import numpy as np

from .tensor import Tensor
from .tx_head import AttentionTrace, TxHead


logger = logging.getLogger(__name__)


def write_pnm(path, image: np.ndarray):
    """Binary PGM for ``(H, W)`` uint8 arrays, PPM for ``(H, W, 3)``."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    kind = b"P5" if image.ndim == 2 else b"P6"
    header = b"%s\n%d %d\n255\n" % (kind, image.shape[1], image.shape[0])
    Path(path).write_bytes(header + image.tobytes())


def to_gray(values: np.ndarray, upscale: int = 16) -> np.ndarray:
    peak = values.max()
    scaled = values / peak if peak > 0 else np.zeros_like(values)
    image = np.round(scaled * 255).astype(np.uint8)
    return np.kron(image, np.ones((upscale, upscale), dtype=np.uint8))


def write_attention_csv(path, clip_id: str, trace: AttentionTrace, append=False):
    """One row per (proposal, layer, head): ids, then the flattened weights."""
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        for layer in range(trace.layers):
            for head in range(trace.heads):
                weights = trace.map(layer, head)
                for proposal in range(len(weights)):
                    writer.writerow(
                        [clip_id, proposal, layer, head]
                        + [repr(float(v)) for v in weights[proposal].reshape(-1)]
                    )


def write_attention_maps(directory, clip_id: str, trace: AttentionTrace, upscale=16):
    """Every (proposal, layer, head, frame) map, plus the head average of the
    last layer. Returns the written paths.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, volume):
        for frame, values in enumerate(volume):
            path = directory / f"{clip_id}_{name}_t{frame}.pgm"
            write_pnm(path, to_gray(values, upscale))
            written.append(path)

    for layer in range(trace.layers):
        for head in range(trace.heads):
            for proposal, volume in enumerate(trace.map(layer, head)):
                emit(f"p{proposal}_l{layer}_h{head}", volume)
    for proposal, volume in enumerate(trace.head_average()):
        emit(f"p{proposal}_mean", volume)
    logger.info("wrote %d attention maps for %s", len(written), clip_id)
    return written


def principal_components(values: np.ndarray, count: int = 3) -> np.ndarray:
    """Project rows of `values` onto their top `count` principal directions."""
    centered = values - values.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = centered @ vt[:count].T
    if components.shape[1] < count:
        padding = np.zeros((len(components), count - components.shape[1]))
        components = np.concatenate([components, padding], axis=1)
    return components


def write_key_embedding_pca(directory, clip_id: str, head: TxHead, memory: Tensor,
                            layer=0, upscale=16):
    """Colour-code the first three principal components of each head's keys."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames, height, width = memory.shape[:3]
    written = []
    for index, unit in enumerate(head.stack.layers[layer].heads):
        keys = unit.keys(memory).data.astype(np.float64)
        components = principal_components(keys)
        low, high = components.min(axis=0), components.max(axis=0)
        spread = np.where(high > low, high - low, 1.0)
        colors = np.round((components - low) / spread * 255).astype(np.uint8)
        colors = colors.reshape(frames, height, width, 3)
        for frame in range(frames):
            image = np.repeat(np.repeat(colors[frame], upscale, axis=0), upscale, axis=1)
            path = directory / f"{clip_id}_keys_l{layer}_h{index}_t{frame}.ppm"
            write_pnm(path, image)
            written.append(path)
    return written
