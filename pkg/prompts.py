"""
Position-Guided Prompts

The five positional views (left / right / upper / lower lung and the entire
image), the fixed toy vocabulary, and the two prompt assembly rules:

    text:   E_text  = E_pos (+) P_t (+) E_cls          (row concatenation)
    image:  E_image = E_i * M + P_i * (1 - M)           (per patch)

P_t and P_i (PromptParams) are the only trainable tensors in the toolkit.

Region masks are image halves: "left" is the left half of the image
(columns [0, W/2)), not the anatomical left lung.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple, Union

import numpy as np

from errors import DimensionMismatchError, UnknownWordError
from imaging import BinaryMask, GrayImage

VOCAB: Tuple[str, ...] = ("left", "right", "upper", "lower", "lung", "normal", "pneumonia", "<pad>", "<empty>")
TOKEN_IDS: Dict[str, int] = {word: i for i, word in enumerate(VOCAB)}
EMPTY_TOKEN = "<empty>"

CLASS_NAMES: Tuple[str, str] = ("normal", "pneumonia")

# Order of ViewProbabilities
VIEW_NAMES: Tuple[str, ...] = ("left_lung", "right_lung", "upper_lung", "lower_lung", "entire")
VIEW_PREFIXES: Dict[str, str] = {
    "left_lung": "left lung",
    "right_lung": "right lung",
    "upper_lung": "upper lung",
    "lower_lung": "lower lung",
    "entire": "",
}


# ============================================================================
# TOKENIZER
# ============================================================================

def tokenize(text: Union[str, Sequence[str]]) -> List[int]:
    """
    Map words to vocabulary ids. An empty prefix becomes a single <empty> token.

    Raises:
        UnknownWordError: a word outside VOCAB
    """
    words = text.split() if isinstance(text, str) else list(text)
    if not words:
        return [TOKEN_IDS[EMPTY_TOKEN]]
    ids = []
    for word in words:
        if word not in TOKEN_IDS:
            raise UnknownWordError(f"Unknown word '{word}' (vocabulary: {', '.join(VOCAB)})")
        ids.append(TOKEN_IDS[word])
    return ids


# ============================================================================
# POSITION VIEWS
# ============================================================================

@dataclass(frozen=True)
class PositionView:
    """
    One positional context.

    Attributes:
        name: One of VIEW_NAMES
        region_mask: Pixel-level mask M (kept pixels)
        patch_mask: (n_patches,) bool; True where the patch overlaps the region
        prefix: Position words ("left lung", ... or "" for the entire view)
        prefix_tokens: tokenize(prefix)
    """
    name: str
    region_mask: BinaryMask
    patch_mask: np.ndarray
    prefix: str
    prefix_tokens: Tuple[int, ...]

    @property
    def is_entire(self) -> bool:
        return self.name == "entire"


def patch_grid(image_size: int, patch_size: int) -> Tuple[int, int]:
    """(rows, cols) of the patch grid; the image side must be a multiple of the patch side."""
    if patch_size < 1 or image_size < 1 or image_size % patch_size != 0:
        raise DimensionMismatchError(f"Image side {image_size} is not a multiple of patch side {patch_size}")
    n = image_size // patch_size
    return n, n


def region_for(name: str, image_size: int) -> BinaryMask:
    """Axis-aligned half-image region of a view (all ones for the entire view)."""
    half = image_size // 2
    region = np.zeros((image_size, image_size), dtype=bool)
    if name == "left_lung":
        region[:, :half] = True
    elif name == "right_lung":
        region[:, half:] = True
    elif name == "upper_lung":
        region[:half, :] = True
    elif name == "lower_lung":
        region[half:, :] = True
    elif name == "entire":
        region[:, :] = True
    else:
        raise ValueError(f"Unknown view '{name}'")
    return BinaryMask(region)


def patch_mask_for(region: BinaryMask, patch_size: int) -> np.ndarray:
    """Patch-level M: a patch is kept when any of its pixels lies in the region."""
    rows, cols = patch_grid(region.height, patch_size)
    blocks = region.data.reshape(rows, patch_size, cols, patch_size)
    mask = blocks.any(axis=(1, 3)).ravel()
    mask.setflags(write=False)
    return mask


def make_view(name: str, image_size: int, patch_size: int) -> PositionView:
    region = region_for(name, image_size)
    prefix = VIEW_PREFIXES[name]
    return PositionView(
        name=name,
        region_mask=region,
        patch_mask=patch_mask_for(region, patch_size),
        prefix=prefix,
        prefix_tokens=tuple(tokenize(prefix)),
    )


def build_views(image_size: int, patch_size: int) -> List[PositionView]:
    """All five views, in VIEW_NAMES order."""
    patch_grid(image_size, patch_size)
    return [make_view(name, image_size, patch_size) for name in VIEW_NAMES]


# ============================================================================
# PROMPT MODES (ablation variants)
# ============================================================================

@dataclass(frozen=True)
class PromptMode:
    """
    Which parts of the prompt machinery are active.

    Attributes:
        name: Mode key used in config files
        positional: Use the five position views (else the entire view only)
        image_prompt: Mask the image per view and fill with P_i
        text_prompt: Insert learnable P_t rows
        trainable: Run training steps at all
    """
    name: str
    positional: bool
    image_prompt: bool
    text_prompt: bool
    trainable: bool


PROMPT_MODES: Dict[str, PromptMode] = {
    "zero_shot": PromptMode("zero_shot", positional=False, image_prompt=False, text_prompt=False, trainable=False),
    "text": PromptMode("text", positional=False, image_prompt=False, text_prompt=True, trainable=True),
    "position_text": PromptMode("position_text", positional=True, image_prompt=False, text_prompt=True, trainable=True),
    "position_text_image": PromptMode("position_text_image", positional=True, image_prompt=True, text_prompt=True,
                                      trainable=True),
}


def get_mode(name: str) -> PromptMode:
    if name not in PROMPT_MODES:
        raise ValueError(f"Unknown prompt mode '{name}' (choose from {', '.join(PROMPT_MODES)})")
    return PROMPT_MODES[name]


def views_for_mode(mode: PromptMode, image_size: int, patch_size: int) -> List[PositionView]:
    """Views drawn during training / scored at inference for a mode."""
    views = build_views(image_size, patch_size)
    return views if mode.positional else [views[-1]]


def image_view_for(view: PositionView, mode: PromptMode, image_size: int, patch_size: int) -> PositionView:
    """The view whose mask drives the image path (the entire view unless the mode masks images)."""
    if mode.image_prompt or view.is_entire:
        return view
    return make_view("entire", image_size, patch_size)


# ============================================================================
# PROMPT PARAMETERS AND ASSEMBLY
# ============================================================================

def _frozen_copy(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PromptParams:
    """
    The learnable prompts.

    Attributes:
        text_prompt: P_t, shape (L_t, d)
        image_prompt: P_i, shape (n_patches, d)
    """
    text_prompt: np.ndarray
    image_prompt: np.ndarray

    def __post_init__(self):
        text = _frozen_copy(self.text_prompt)
        image = _frozen_copy(self.image_prompt)
        if text.ndim != 2 or image.ndim != 2:
            raise DimensionMismatchError("Prompts must be 2-D matrices")
        if text.shape[1] != image.shape[1]:
            raise DimensionMismatchError(f"Prompt widths differ: {text.shape[1]} vs {image.shape[1]}")
        if not (np.all(np.isfinite(text)) and np.all(np.isfinite(image))):
            raise ValueError("Prompt entries must be finite")
        object.__setattr__(self, "text_prompt", text)
        object.__setattr__(self, "image_prompt", image)

    @property
    def width(self) -> int:
        return self.text_prompt.shape[1]


def init_prompt_params(text_length: int, n_patches: int, width: int, std: float, seed: int) -> PromptParams:
    """I.i.d. Gaussian prompts (mean 0)."""
    rng = np.random.default_rng(seed)
    text = rng.normal(0.0, std, size=(text_length, width))
    image = rng.normal(0.0, std, size=(n_patches, width))
    return PromptParams(text_prompt=text, image_prompt=image)


@dataclass(frozen=True)
class TokenEmbeddings:
    """
    Text input rows.

    Attributes:
        pos: E_pos, embedded prefix tokens
        cls: E_cls, embedded class token
        assembled: E_text = [E_pos ; P_t ; E_cls]
    """
    pos: np.ndarray
    cls: np.ndarray
    assembled: np.ndarray

    @property
    def prompt_length(self) -> int:
        return self.assembled.shape[0] - self.pos.shape[0] - self.cls.shape[0]


@dataclass(frozen=True)
class PatchEmbeddings:
    """
    Image input rows.

    Attributes:
        patches: E_image, shape (n_patches, d)
        grid: (rows, cols) of the patch grid
        patch_mask: (n_patches,) bool; True rows came from E_i, False from P_i
    """
    patches: np.ndarray
    grid: Tuple[int, int]
    patch_mask: np.ndarray


def assemble_text(view: PositionView, class_name: str, params: PromptParams,
                  embed_table: np.ndarray) -> TokenEmbeddings:
    """
    E_text = E_pos (+) P_t (+) E_cls.

    Raises:
        DimensionMismatchError: prompt width differs from the embedding width
        UnknownWordError: class_name outside the vocabulary
    """
    if params.text_prompt.shape[1] != embed_table.shape[1]:
        raise DimensionMismatchError(
            f"Text prompt width {params.text_prompt.shape[1]} != embedding width {embed_table.shape[1]}"
        )
    pos = embed_table[list(view.prefix_tokens)]
    cls = embed_table[tokenize(class_name)]
    assembled = np.vstack([pos, params.text_prompt, cls])
    return TokenEmbeddings(pos=pos, cls=cls, assembled=assembled)


def extract_patches(data: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an (H, W) array into row-major patches, shape (n_patches, patch_size ** 2)."""
    height, width = data.shape
    rows, cols = height // patch_size, width // patch_size
    blocks = data.reshape(rows, patch_size, cols, patch_size).transpose(0, 2, 1, 3)
    return blocks.reshape(rows * cols, patch_size * patch_size)


def assemble_image(img: GrayImage, view: PositionView, params: PromptParams,
                   patch_embed: Callable[[np.ndarray], np.ndarray]) -> PatchEmbeddings:
    """
    E_image = E_i * M + P_i * (1 - M).

    Pixels outside the view region are zeroed before the patch embedding, so
    they cannot reach any output row.

    Args:
        img: Input image
        view: Position view supplying M
        params: Prompts (only P_i is read)
        patch_embed: Frozen (n_patches, patch_pixels) -> (n_patches, d) map

    Raises:
        DimensionMismatchError: image/view/prompt shapes disagree
    """
    if img.shape != view.region_mask.shape:
        raise DimensionMismatchError(f"Image {img.shape} does not match view region {view.region_mask.shape}")
    n_patches = view.patch_mask.shape[0]
    side = int(round(np.sqrt(n_patches)))
    if side * side != n_patches or img.height % side != 0:
        raise DimensionMismatchError(f"Image side {img.height} does not split into {n_patches} patches")
    if params.image_prompt.shape[0] != n_patches:
        raise DimensionMismatchError(f"Image prompt has {params.image_prompt.shape[0]} rows, need {n_patches}")

    patch_size = img.height // side
    visible = np.where(view.region_mask.data, img.data, 0.0)
    embedded = patch_embed(extract_patches(visible, patch_size))
    if embedded.shape != params.image_prompt.shape:
        raise DimensionMismatchError(f"Patch embeddings {embedded.shape} != image prompt {params.image_prompt.shape}")

    rows = np.where(view.patch_mask[:, None], embedded, params.image_prompt)
    return PatchEmbeddings(patches=rows, grid=(side, side), patch_mask=view.patch_mask)
