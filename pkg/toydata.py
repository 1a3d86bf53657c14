"""
Toy Dataset

Procedural stand-in for a chest X-ray dataset: smooth low-contrast Perlin
"normals" and SAS-corrupted copies as the abnormal test class.

    root/train/normal/normal_0000.pgm ...
    root/test/normal/normal_0000.pgm ...
    root/test/abnormal/abnormal_0000.pgm ...
"""

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from config import derive_seed
from imaging import BinaryMask, GrayImage, save_image
from maskgen import perlin_field
from synth import SynthConfig, synthesize

NORMAL_LEVEL = 0.5
NORMAL_CONTRAST = 0.1
NORMAL_GRID_CELLS = 3


def make_normal_image(size: int, seed: int) -> GrayImage:
    """0.5 plus 0.1 x (Perlin - its mean): every normal has the same mean level."""
    field = perlin_field(size, size, derive_seed(seed, "perlin"), grid_cells=NORMAL_GRID_CELLS).data
    return GrayImage(np.clip(NORMAL_LEVEL + NORMAL_CONTRAST * (field - field.mean()), 0.0, 1.0))


@dataclass(frozen=True)
class ToyDataset:
    root: Path
    train_root: Path
    test_root: Path
    n_train: int
    n_test: int


def build_toy_dataset(
    root,
    n_train: int = 64,
    n_test: int = 100,
    image_size: int = 224,
    seed: int = 0,
    synth: Optional[SynthConfig] = None,
    verbose: bool = False,
) -> ToyDataset:
    """
    Write n_train training normals, n_test held-out normals and an abnormal
    copy of every held-out normal (anomaly always applied, anywhere in the image).
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    root = Path(root)
    synth = synth if synth is not None else SynthConfig()
    full = BinaryMask.full(image_size, image_size)

    for i in range(n_train):
        img = make_normal_image(image_size, derive_seed(seed, "train", i))
        save_image(img, root / "train" / "normal" / f"normal_{i:04d}.pgm")

    for i in range(n_test):
        img = make_normal_image(image_size, derive_seed(seed, "test", i))
        save_image(img, root / "test" / "normal" / f"normal_{i:04d}.pgm")
        always = replace(synth, apply_probability=1.0, seed=derive_seed(seed, "anomaly", i))
        save_image(synthesize(img, full, always).image, root / "test" / "abnormal" / f"abnormal_{i:04d}.pgm")

    if verbose:
        print(f"✓ Toy dataset: {n_train} train normals, {n_test} test normals, {n_test} test abnormals -> {root}")
    return ToyDataset(root=root, train_root=root / "train", test_root=root / "test", n_train=n_train, n_test=n_test)
