"""
Frozen Dual Encoder (desk-scale stand-in)

A small fixed-weight text/image encoder pair playing the role of the
pretrained vision-language model:

    text:   E_text  -> mean-pool -> text_head  -> L2-normalize
    image:  E_image -> mean-pool -> image_head -> L2-normalize

Image patches are embedded by CLIP-style pixel normalization, a frozen linear
projection, a frozen bias and a frozen elementwise activation.
The negative bias puts smooth background patches on the flat tail of GELU.

Prediction is a two-way softmax over scaled cosine similarities with the
"normal" and "pneumonia" text features, trained with binary cross-entropy.

Gradients are analytic and flow to the prompts (P_t, P_i) only.
"""

import hashlib
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import erf, expit

from errors import DimensionMismatchError, EmptyInputError
from imaging import GrayImage
from prompts import (
    VOCAB,
    PatchEmbeddings,
    PositionView,
    PromptParams,
    TokenEmbeddings,
    assemble_image,
    assemble_text,
)

EPSILON = 1e-7
NORM_FLOOR = 1e-12
DEFAULT_LOGIT_SCALE = 10.0
DEFAULT_PATCH_BIAS = -2.0
PATCH_ACTIVATIONS = ("gelu", "linear")


# ============================================================================
# DATA STRUCTURES
# ============================================================================

def _frozen_copy(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FrozenEncoders:
    """
    Fixed weights of the stand-in encoders.

    Attributes:
        embed_table: (vocab, d) token embeddings
        patch_proj: (patch_pixels, d) patch projection
        text_head: (d, f) text projection
        image_head: (d, f) image projection
        logit_scale: Softmax temperature (> 0)
        pixel_mean, pixel_std: Pixel normalization before patch_proj
        patch_bias: Scalar added after patch_proj, before the activation
        patch_activation: "gelu" or "linear", applied last
    """
    embed_table: np.ndarray
    patch_proj: np.ndarray
    text_head: np.ndarray
    image_head: np.ndarray
    logit_scale: float = DEFAULT_LOGIT_SCALE
    pixel_mean: float = 0.5
    pixel_std: float = 0.25
    patch_activation: str = "gelu"
    patch_bias: float = DEFAULT_PATCH_BIAS

    def __post_init__(self):
        for name in ("embed_table", "patch_proj", "text_head", "image_head"):
            object.__setattr__(self, name, _frozen_copy(getattr(self, name)))
        d = self.embed_table.shape[1]
        if self.patch_proj.shape[1] != d or self.text_head.shape[0] != d or self.image_head.shape[0] != d:
            raise DimensionMismatchError("Encoder weights disagree on the embedding width d")
        if self.text_head.shape[1] != self.image_head.shape[1]:
            raise DimensionMismatchError("Text and image heads disagree on the feature width f")
        if not self.logit_scale > 0:
            raise ValueError(f"logit_scale must be positive, got {self.logit_scale}")
        if not self.pixel_std > 0:
            raise ValueError(f"pixel_std must be positive, got {self.pixel_std}")
        if self.patch_activation not in PATCH_ACTIVATIONS:
            raise ValueError(f"patch_activation must be one of {PATCH_ACTIVATIONS}")
        if not np.isfinite(self.patch_bias):
            raise ValueError(f"patch_bias must be finite, got {self.patch_bias}")

    @property
    def embed_dim(self) -> int:
        return self.embed_table.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.text_head.shape[1]

    def embed_patches(self, patches: np.ndarray) -> np.ndarray:
        """(n_patches, patch_pixels) raw pixels -> (n_patches, d) embeddings E_i."""
        if patches.shape[1] != self.patch_proj.shape[0]:
            raise DimensionMismatchError(
                f"Patches have {patches.shape[1]} pixels, projection expects {self.patch_proj.shape[0]}"
            )
        z = ((patches - self.pixel_mean) / self.pixel_std) @ self.patch_proj + self.patch_bias
        if self.patch_activation == "gelu":
            return 0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))
        return z


def init_encoders(
    seed: int,
    embed_dim: int = 64,
    feature_dim: int = 64,
    patch_pixels: int = 32 * 32,
    logit_scale: float = DEFAULT_LOGIT_SCALE,
    pixel_mean: float = 0.5,
    pixel_std: float = 0.25,
    patch_activation: str = "gelu",
    patch_bias: float = DEFAULT_PATCH_BIAS,
) -> FrozenEncoders:
    """Seeded Gaussian weights with std 1/sqrt(d)."""
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(embed_dim)
    return FrozenEncoders(
        embed_table=rng.normal(0.0, std, size=(len(VOCAB), embed_dim)),
        patch_proj=rng.normal(0.0, std, size=(patch_pixels, embed_dim)),
        text_head=rng.normal(0.0, std, size=(embed_dim, feature_dim)),
        image_head=rng.normal(0.0, std, size=(embed_dim, feature_dim)),
        logit_scale=logit_scale,
        pixel_mean=pixel_mean,
        pixel_std=pixel_std,
        patch_activation=patch_activation,
        patch_bias=patch_bias,
    )


def frozen_hash(enc: FrozenEncoders) -> int:
    """64-bit content hash of every frozen tensor and scalar."""
    h = hashlib.blake2b(digest_size=8)
    for arr in (enc.embed_table, enc.patch_proj, enc.text_head, enc.image_head):
        h.update(np.asarray(arr.shape, dtype="<u8").tobytes())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    scalars = (enc.logit_scale, enc.pixel_mean, enc.pixel_std, enc.patch_activation, enc.patch_bias)
    h.update(repr(scalars).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class FeatureVector:
    """Encoder output: unit norm, or all zeros when the pooled row is zero."""
    values: np.ndarray


@dataclass(frozen=True)
class PromptGrads:
    """Gradients with the shapes of P_t and P_i."""
    text_prompt: np.ndarray
    image_prompt: np.ndarray


@dataclass(frozen=True)
class TrainItem:
    """
    One labelled example.

    Attributes:
        image: Input image (already synthesized or not)
        view: View supplying the text prefix
        label: 1 if an anomaly was synthesized, else 0
        image_view: View supplying M for the image path (defaults to view)
    """
    image: GrayImage
    view: PositionView
    label: int
    image_view: Optional[PositionView] = None

    @property
    def mask_view(self) -> PositionView:
        return self.image_view if self.image_view is not None else self.view


# ============================================================================
# ENCODING AND PREDICTION
# ============================================================================

def _normalize(z: np.ndarray) -> Tuple[np.ndarray, float]:
    """(z / max(|z|, NORM_FLOOR), |z|). A zero vector stays zero."""
    norm = float(np.linalg.norm(z))
    return z / max(norm, NORM_FLOOR), norm


def _encode_rows(rows: np.ndarray, head: np.ndarray) -> FeatureVector:
    if rows.shape[0] == 0:
        raise EmptyInputError("Encoder input has no rows")
    values, _ = _normalize(rows.mean(axis=0) @ head)
    return FeatureVector(values)


def encode_text(tokens: TokenEmbeddings, enc: FrozenEncoders) -> FeatureVector:
    """Mean-pool E_text, apply the text head, L2-normalize."""
    return _encode_rows(tokens.assembled, enc.text_head)


def encode_image(patches: PatchEmbeddings, enc: FrozenEncoders) -> FeatureVector:
    """Mean-pool E_image, apply the image head, L2-normalize."""
    return _encode_rows(patches.patches, enc.image_head)


def predict(img_feat: FeatureVector, normal_feat: FeatureVector, pneu_feat: FeatureVector,
            scale: float) -> float:
    """
    p(abnormal): second component of softmax(scale * cos(img, normal), scale * cos(img, pneu)).

    p(normal) is 1 - p(abnormal).
    """
    cos_normal = float(img_feat.values @ normal_feat.values)
    cos_pneu = float(img_feat.values @ pneu_feat.values)
    return float(expit(scale * (cos_pneu - cos_normal)))


def bce_loss(p: float, label: int) -> float:
    """Binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]."""
    p = min(max(p, EPSILON), 1.0 - EPSILON)
    return float(-(label * np.log(p) + (1 - label) * np.log(1.0 - p)))


# ============================================================================
# FORWARD / BACKWARD
# ============================================================================

@dataclass(frozen=True)
class _Branch:
    """Cached forward values of one encoder branch."""
    feature: np.ndarray
    norm: float
    rows: int


def _branch(rows: np.ndarray, head: np.ndarray) -> _Branch:
    if rows.shape[0] == 0:
        raise EmptyInputError("Encoder input has no rows")
    feature, norm = _normalize(rows.mean(axis=0) @ head)
    return _Branch(feature=feature, norm=norm, rows=rows.shape[0])


def _normalize_backward(branch: _Branch, grad_feature: np.ndarray) -> np.ndarray:
    """d loss / d z for feature = z / max(|z|, NORM_FLOOR)."""
    if branch.norm < NORM_FLOOR:
        return grad_feature / NORM_FLOOR
    t = branch.feature
    return (grad_feature - t * (t @ grad_feature)) / branch.norm


@dataclass(frozen=True)
class ForwardPass:
    probability: float
    loss: float
    normal: _Branch
    pneumonia: _Branch
    image: _Branch
    patch_mask: np.ndarray


def forward(item: TrainItem, params: PromptParams, enc: FrozenEncoders) -> ForwardPass:
    """Probability and BCE loss of one item, keeping what the backward pass needs."""
    normal = _branch(assemble_text(item.view, "normal", params, enc.embed_table).assembled, enc.text_head)
    pneumonia = _branch(assemble_text(item.view, "pneumonia", params, enc.embed_table).assembled, enc.text_head)
    patches = assemble_image(item.image, item.mask_view, params, enc.embed_patches)
    image = _branch(patches.patches, enc.image_head)

    logit = enc.logit_scale * (image.feature @ pneumonia.feature - image.feature @ normal.feature)
    p = float(expit(logit))
    return ForwardPass(
        probability=p,
        loss=bce_loss(p, item.label),
        normal=normal,
        pneumonia=pneumonia,
        image=image,
        patch_mask=patches.patch_mask,
    )


def loss_and_grad(item: TrainItem, params: PromptParams, enc: FrozenEncoders,
                  loss_scale: float = 1.0) -> Tuple[float, PromptGrads]:
    """
    BCE loss and its exact gradient with respect to P_t and P_i.

    loss_scale multiplies the returned loss and both gradients (per-item weighting).

    The chain: BCE -> two-way softmax -> cosine -> L2-normalize -> linear
    head -> mean-pool -> (concatenation | masked patch replacement).
    Rows of P_i whose patch is kept (M = 1) get exactly zero gradient.
    """
    fp = forward(item, params, enc)
    p = fp.probability

    # d loss / d logit; zero where the probability clamp is active
    delta = (p - item.label) if EPSILON < p < 1.0 - EPSILON else 0.0
    scale = enc.logit_scale * delta * loss_scale

    g = fp.image.feature
    grad_image_feat = scale * (fp.pneumonia.feature - fp.normal.feature)
    grad_pneu_feat = scale * g
    grad_normal_feat = -scale * g

    grad_text = np.zeros_like(params.text_prompt)
    for branch, grad_feat in ((fp.normal, grad_normal_feat), (fp.pneumonia, grad_pneu_feat)):
        grad_mean = enc.text_head @ _normalize_backward(branch, grad_feat)
        grad_text = grad_text + grad_mean[None, :] / branch.rows

    grad_mean_img = enc.image_head @ _normalize_backward(fp.image, grad_image_feat)
    replaced = ~fp.patch_mask
    grad_image = np.where(replaced[:, None], grad_mean_img[None, :] / fp.image.rows, 0.0)
    grad_image = np.broadcast_to(grad_image, params.image_prompt.shape).copy()

    return loss_scale * fp.loss, PromptGrads(text_prompt=grad_text, image_prompt=grad_image)


def grad_prompts(item: TrainItem, params: PromptParams, enc: FrozenEncoders) -> PromptGrads:
    """Exact analytic gradient of the BCE loss with respect to (P_t, P_i)."""
    return loss_and_grad(item, params, enc)[1]
