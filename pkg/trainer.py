"""
Few-Shot Prompt Training

Each step picks a random position view, synthesizes an anomaly inside that
view's region with probability apply_probability (label 1 if it fired), and
takes one plain SGD step on the BCE loss. Only the prompts P_t and P_i are
updated; the frozen encoder is rebuilt from encoder_seed and its content hash
is checked before and after the run.

Checkpoints use a flat little-endian binary layout (see ppad_readme.md).
"""

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import RunConfig, derive_seed, make_rng
from encoder import FrozenEncoders, TrainItem, frozen_hash, init_encoders, loss_and_grad
from errors import CheckpointError, NotEnoughImagesError, PPADIOError
from imaging import GrayImage, list_dataset, load_image
from prompts import (
    PositionView,
    PromptMode,
    PromptParams,
    get_mode,
    image_view_for,
    init_prompt_params,
    patch_grid,
    views_for_mode,
)
from synth import SynthConfig, synthesize

CHECKPOINT_MAGIC = b"PPAD"
CHECKPOINT_VERSION = 1
TENSOR_NAMES = ("text_prompt", "image_prompt")


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass(frozen=True)
class TrainConfig:
    """
    Typed view of a RunConfig for training and scoring.

    The RunConfig itself is kept so checkpoints can store it verbatim.
    """
    run: RunConfig
    synth: SynthConfig

    @classmethod
    def from_run_config(cls, run: RunConfig) -> "TrainConfig":
        synth = SynthConfig(
            weight_choices=tuple(run["weight_choices"]),
            apply_probability=run["apply_probability"],
            seed=run["seed"],
            mask_shape=run["mask_shape"],
            num_points=run["num_points"],
            bezier_probability=run["bezier_probability"],
            control_offset_fraction=run["control_offset_fraction"],
            area_bounds=(run["area_min"], run["area_max"]),
            grid_cells=run["grid_cells"],
        )
        patch_grid(run["image_size"], run["patch_size"])
        return cls(run=run, synth=synth)

    @classmethod
    def defaults(cls) -> "TrainConfig":
        return cls.from_run_config(RunConfig.defaults())

    @property
    def shots(self) -> int:
        return self.run["shots"]

    @property
    def epochs(self) -> int:
        return self.run["epochs"]

    @property
    def learning_rate(self) -> float:
        return self.run["learning_rate"]

    @property
    def eta(self) -> float:
        return self.run["eta"]

    @property
    def seed(self) -> int:
        return self.run["seed"]

    @property
    def mode(self) -> PromptMode:
        return get_mode(self.run["prompt_mode"])

    @property
    def n_patches(self) -> int:
        rows, cols = patch_grid(self.run["image_size"], self.run["patch_size"])
        return rows * cols

    @property
    def text_length(self) -> int:
        """L_t actually used (0 when the mode has no learnable text tokens)."""
        return self.run["text_prompt_length"] if self.mode.text_prompt else 0

    def synth_for(self, seed: int) -> SynthConfig:
        return replace(self.synth, seed=seed)

    def views(self) -> List[PositionView]:
        return views_for_mode(self.mode, self.run["image_size"], self.run["patch_size"])

    def image_view(self, view: PositionView) -> PositionView:
        return image_view_for(view, self.mode, self.run["image_size"], self.run["patch_size"])


def build_encoders(config: TrainConfig) -> FrozenEncoders:
    """The frozen stand-in encoder; a pure function of encoder_seed and the architecture keys."""
    run = config.run
    return init_encoders(
        derive_seed(run["encoder_seed"], "encoder"),
        embed_dim=run["embed_dim"],
        feature_dim=run["feature_dim"],
        patch_pixels=run["patch_size"] ** 2,
        logit_scale=run["logit_scale"],
        pixel_mean=run["pixel_mean"],
        pixel_std=run["pixel_std"],
        patch_activation=run["patch_activation"],
        patch_bias=run["patch_bias"],
    )


def init_prompts(config: TrainConfig) -> PromptParams:
    return init_prompt_params(
        text_length=config.text_length,
        n_patches=config.n_patches,
        width=config.run["embed_dim"],
        std=config.run["prompt_init_std"],
        seed=derive_seed(config.run["seed"], "prompts"),
    )


# ============================================================================
# TRAINING
# ============================================================================

def sample_shots(normal_paths: Sequence, k: int, seed: int) -> list:
    """
    Pick k distinct paths uniformly without replacement.

    Raises:
        NotEnoughImagesError: fewer than k paths
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(normal_paths) < k:
        raise NotEnoughImagesError(f"Need {k} normal images, found {len(normal_paths)}")
    rng = make_rng(seed, "shots")
    picked = rng.choice(len(normal_paths), size=k, replace=False)
    return [normal_paths[i] for i in picked]


def plan_step(rng: np.random.Generator, views: Sequence[PositionView]) -> Tuple[PositionView, int]:
    """Draw the view (uniform) and the synthesis seed for one step."""
    view = views[int(rng.integers(0, len(views)))]
    synth_seed = int(rng.integers(0, 2 ** 63 - 1))
    return view, synth_seed


@dataclass(frozen=True)
class StepResult:
    loss: float
    params: PromptParams
    view: PositionView
    label: int
    weight: Optional[float] = None


def train_step(
    img: GrayImage,
    params: PromptParams,
    enc: FrozenEncoders,
    config: TrainConfig,
    rng: np.random.Generator,
    views: Optional[Sequence[PositionView]] = None,
) -> StepResult:
    """
    One few-shot step: random view, optional SAS anomaly inside the view's
    region, BCE against both class texts, SGD on P_t and P_i.
    """
    views = views if views is not None else config.views()
    view, synth_seed = plan_step(rng, views)
    result = synthesize(img, view.region_mask, config.synth_for(synth_seed))
    label = 1 if result.is_abnormal else 0

    item = TrainItem(image=result.image, view=view, label=label, image_view=config.image_view(view))
    loss, grads = loss_and_grad(item, params, enc)

    lr = config.learning_rate
    updated = PromptParams(
        text_prompt=params.text_prompt - lr * grads.text_prompt,
        image_prompt=params.image_prompt - lr * grads.image_prompt,
    )
    return StepResult(loss=loss, params=updated, view=view, label=label, weight=result.weight)


@dataclass(frozen=True)
class Checkpoint:
    """
    Trained prompts plus what is needed to rebuild the run.

    Attributes:
        params: Learned P_t, P_i
        frozen_hash: frozen_hash() of the encoder the prompts were trained against
        config: The run configuration
        epoch: Completed epochs
        epoch_losses: Per-epoch mean loss (not serialized)
    """
    params: PromptParams
    frozen_hash: int
    config: RunConfig
    epoch: int
    epoch_losses: Tuple[float, ...] = field(default=(), compare=False)


def train(dataset_root, config: TrainConfig, log_path=None, verbose: bool = False) -> Checkpoint:
    """
    Run shots x epochs steps over seeded shuffles of the sampled shots.

    Args:
        dataset_root: Folder with a normal/ subfolder of training images
        config: Training configuration
        log_path: Where to write the epoch,mean_loss CSV (skipped if None)
        verbose: Print per-epoch progress

    Raises:
        NotEnoughImagesError: fewer normal images than shots
        CheckpointError: the frozen encoder changed during the run
    """
    run = config.run
    normal_paths, _ = list_dataset(dataset_root)
    if not normal_paths:
        raise NotEnoughImagesError(f"No normal images under {Path(dataset_root) / 'normal'}")
    shots = sample_shots(normal_paths, run["shots"], run["seed"])
    images = [load_image(p, run["image_size"]) for p in shots]

    enc = build_encoders(config)
    hash_before = frozen_hash(enc)
    params = init_prompts(config)
    views = config.views()

    if verbose:
        print(f"Training {len(images)} shots x {run['epochs']} epochs (mode: {config.mode.name})")

    losses: List[float] = []
    epochs_done = 0
    if config.mode.trainable:
        for epoch in range(run["epochs"]):
            order = make_rng(run["seed"], "epoch", epoch).permutation(len(images))
            epoch_loss = 0.0
            for i, idx in enumerate(order):
                step = train_step(images[idx], params, enc, config, make_rng(run["seed"], "step", epoch, i), views)
                params = step.params
                epoch_loss += step.loss
            losses.append(epoch_loss / len(images))
            epochs_done = epoch + 1
            if verbose:
                print(f"  Epoch {epoch + 1}/{run['epochs']}  mean_loss={losses[-1]:.4f}")
    elif verbose:
        print("  ⚠ zero_shot mode: no training steps")

    if frozen_hash(enc) != hash_before:
        raise CheckpointError("Frozen encoder weights changed during training")

    if log_path is not None:
        write_loss_log(log_path, losses)

    return Checkpoint(params=params, frozen_hash=hash_before, config=run, epoch=epochs_done,
                      epoch_losses=tuple(losses))


def write_loss_log(path, losses: Sequence[float]) -> None:
    """CSV with header epoch,mean_loss; epochs are 1-based."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["epoch,mean_loss"] + [f"{i + 1},{loss!r}" for i, loss in enumerate(losses)]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise PPADIOError(f"Cannot write loss log {path}: {e}") from e


# ============================================================================
# CHECKPOINTS
# ============================================================================

def _pack_text(text: str) -> bytes:
    data = text.encode("utf-8")
    return struct.pack("<I", len(data)) + data


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize a checkpoint to its binary layout."""
    parts = [
        struct.pack("<4sIQI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, ckpt.frozen_hash, ckpt.epoch),
        _pack_text(ckpt.config.to_text()),
        struct.pack("<I", len(TENSOR_NAMES)),
    ]
    for name in TENSOR_NAMES:
        tensor = getattr(ckpt.params, name)
        parts.append(_pack_text(name))
        parts.append(struct.pack("<I", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(checkpoint_bytes(ckpt))
    except OSError as e:
        raise PPADIOError(f"Cannot write checkpoint {path}: {e}") from e


class _Reader:
    """Sequential little-endian reader that turns truncation into CheckpointError."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("Checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (length,) = self.unpack("<I")
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("Checkpoint text is not UTF-8") from e


def parse_checkpoint(data: bytes) -> Checkpoint:
    """
    Inverse of checkpoint_bytes.

    Raises:
        CheckpointError: bad magic, unsupported version, truncated or malformed data
    """
    reader = _Reader(data)
    magic, version, hash_value, epoch = reader.unpack("<4sIQI")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Not a PPAD checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")

    config = RunConfig.from_text(reader.text(), "checkpoint")
    (count,) = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = reader.text()
        (rank,) = reader.unpack("<I")
        dims = reader.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = values.reshape(dims)
    if reader.pos != len(data):
        raise CheckpointError("Trailing bytes after the last tensor")

    missing = [n for n in TENSOR_NAMES if n not in tensors]
    if missing:
        raise CheckpointError(f"Checkpoint lacks tensors: {', '.join(missing)}")
    try:
        params = PromptParams(text_prompt=tensors["text_prompt"], image_prompt=tensors["image_prompt"])
    except ValueError as e:
        raise CheckpointError(f"Bad prompt tensors: {e}") from e
    return Checkpoint(params=params, frozen_hash=hash_value, config=config, epoch=epoch)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as e:
        raise PPADIOError(f"Checkpoint not found: {path}") from e
    except OSError as e:
        raise PPADIOError(f"Cannot read checkpoint {path}: {e}") from e
    return parse_checkpoint(data)


def verify_checkpoint(ckpt: Checkpoint, enc: FrozenEncoders) -> None:
    """Raise CheckpointError unless ckpt was trained against enc."""
    actual = frozen_hash(enc)
    if actual != ckpt.frozen_hash:
        raise CheckpointError(
            f"Frozen encoder hash mismatch: checkpoint {ckpt.frozen_hash:016x}, encoder {actual:016x}"
        )
