"""Forged datasets: procedural normals plus NSA anomalies, their on-disk layout and splits."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import pnm, textures
from .encoders import EncoderConfig, encode_image
from .evaluation import primary_cell
from .learn import TrainingSet
from .synth import SynthConfig, SynthSample, nsa_generate, normal_sample

MANIFEST = "manifest.json"


def n_threads() -> int:
    """Worker cap from ``ANOMALY_FORGE_THREADS`` (default 1)."""
    raw = os.environ.get("ANOMALY_FORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"ANOMALY_FORGE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Ordered map; results never depend on the thread count."""
    n = n_threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _sub_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def forge_samples(
    seed: int,
    n_normal: int,
    n_abnormal: int,
    texture: textures.TextureConfig = textures.TextureConfig(),
    synth: SynthConfig = SynthConfig(),
) -> list[SynthSample]:
    """``n_normal`` clean textures followed by ``n_abnormal`` NSA samples.

    Each anomaly is blended between two fresh textures of its own, so no
    background is shared between samples (and hence between splits).
    """

    def make_normal(i):
        return normal_sample(textures.generate(_sub_seed(seed, 1, i), texture))

    def make_abnormal(j):
        pool = [textures.generate(_sub_seed(seed, 2, j, r), texture) for r in range(2)]
        return nsa_generate(_sub_seed(seed, 3, j), pool, synth)

    normals = parallel_map(make_normal, range(n_normal))
    abnormals = parallel_map(make_abnormal, range(n_abnormal))
    return normals + abnormals


@dataclass
class Record:
    image: str
    mask: str
    label: str
    cells: list[int]


def write_dataset(samples: Sequence[SynthSample], out_dir: str | Path) -> Path:
    """Images as PGM/PPM, masks as 0/255 PGM, plus ``manifest.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        ext = "pgm" if s.image.shape[-1] == 1 else "ppm"
        img_rel, mask_rel = f"images/{i:05d}.{ext}", f"masks/{i:05d}.pgm"
        pnm.save_image(out / img_rel, s.image)
        pnm.write_pgm(out / mask_rel, np.where(s.gt_mask > 0, 255, 0).astype(np.uint8))
        rows.append({"image": img_rel, "mask": mask_rel, "label": s.label, "cells": list(s.position_cells)})
    path = out / MANIFEST
    path.write_text(json.dumps({"samples": rows}, indent=1) + "\n", encoding="utf-8")
    return path


def read_dataset(root: str | Path) -> list[SynthSample]:
    root = Path(root)
    path = root / MANIFEST if root.is_dir() else root
    doc = json.loads(path.read_text(encoding="utf-8"))
    out = []
    for row in doc["samples"]:
        img = pnm.load_image(path.parent / row["image"])
        mask = (pnm.read_pnm(path.parent / row["mask"]) > 127).astype(np.float64)
        out.append(SynthSample(img, mask, row["label"], list(row["cells"])))
    return out


def split_holdout(samples: Sequence[SynthSample], per_class: int) -> tuple[list[int], list[int]]:
    """Train / test indices; the last ``per_class`` samples of each label are held out."""
    train, test = [], []
    for label in ("normal", "abnormal"):
        idx = [i for i, s in enumerate(samples) if s.label == label]
        cut = max(0, len(idx) - per_class)
        train += idx[:cut]
        test += idx[cut:]
    return sorted(train), sorted(test)


def encode_samples(samples: Sequence[SynthSample], cfg: EncoderConfig) -> TrainingSet:
    """Run the frozen encoder once per sample and stack everything for training."""
    enc = parallel_map(lambda s: encode_image(s.image, cfg), list(samples))
    n = len(samples)
    f_img = np.stack([e[0].reshape(-1) for e in enc]) if n else np.zeros((0, cfg.c1))
    levels = [np.stack([e[1].levels[l] for e in enc]) for l in range(4)] if n else []
    gt = np.stack([s.gt_mask for s in samples]) if n else np.zeros((0,) + tuple(cfg.image_size))
    label = np.array([s.label == "abnormal" for s in samples], dtype=np.int64)
    cell = np.array([primary_cell(s.gt_mask).id if s.label == "abnormal" else -1 for s in samples], dtype=np.int64)
    return TrainingSet(f_img, levels, gt, label, cell)
