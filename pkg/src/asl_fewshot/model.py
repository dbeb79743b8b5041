"""Attribute-shaped prototype classifier.

Pipeline per episode: encode every image, predict attributes from the pooled
raw features, fuse attributes into the feature map through a channel gate and
then a multi-kernel spatial gate, pool the refined maps to vectors, build
class prototypes from the support vectors and score queries by a softmax
over negative squared distances.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backbone import ConvEncoder
from .data import Episode
from .errors import ConfigError, ContractError, ShapeError
from .nn import (
    broadcast_concat,
    channel_pool,
    conv2d,
    global_pool,
    he_uniform,
    linear,
    softmax,
    squared_distances,
)
from .seeding import derive_rng
from .tensor import (
    Tensor,
    add,
    as_tensor,
    clamp_min,
    concat,
    getitem,
    log,
    mean,
    mul,
    parameter,
    reshape,
    sigmoid,
    square,
    sub,
    tsum,
)

PROB_FLOOR = 1e-12
DEFAULT_KERNELS = (3, 5, 7, 9)
ABLATION_FLAGS = ("no_vap", "no_cam", "no_psam", "zero_attributes", "no_attributes")


@dataclass(frozen=True)
class Ablation:
    """Switches that remove parts of the model (all off = full model)."""

    no_vap: bool = False
    no_cam: bool = False
    no_psam: bool = False
    zero_attributes: bool = False
    no_attributes: bool = False

    def __post_init__(self):
        if self.no_attributes and self.zero_attributes:
            raise ConfigError("no_attributes and zero_attributes contradict each other")

    @classmethod
    def from_flags(cls, flags: Sequence[str]) -> "Ablation":
        unknown = [f for f in flags if f not in ABLATION_FLAGS]
        if unknown:
            raise ConfigError(f"unknown ablation flag(s) {unknown}; choose from {list(ABLATION_FLAGS)}")
        return cls(**{f: True for f in flags})

    @property
    def flags(self) -> list[str]:
        return [f for f in ABLATION_FLAGS if getattr(self, f)]

    @property
    def uses_vap(self) -> bool:
        return not (self.no_vap or self.no_attributes)

    @property
    def uses_avam(self) -> bool:
        return not (self.no_cam and self.no_psam)

    @property
    def fuses_attributes(self) -> bool:
        return self.uses_avam and not self.no_attributes


@dataclass(frozen=True)
class ModelConfig:
    num_attributes: int
    channels: int = 32
    depth: int = 4
    kernel_sizes: tuple[int, ...] = DEFAULT_KERNELS
    alpha: float = 1.0
    ablation: Ablation = field(default_factory=Ablation)
    loss_reduction: str = "sum"

    def __post_init__(self):
        if self.num_attributes < 1:
            raise ConfigError("num_attributes must be positive")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if not self.ablation.no_psam:
            if not self.kernel_sizes:
                raise ConfigError("PSAM needs at least one kernel size")
            bad = [k for k in self.kernel_sizes if k < 1 or k % 2 == 0]
            if bad:
                raise ConfigError(f"kernel sizes must be odd and positive, got {bad}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigError(f"loss_reduction must be 'sum' or 'mean', got {self.loss_reduction!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        d["ablation"] = self.ablation.flags
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["kernel_sizes"] = tuple(d.get("kernel_sizes", DEFAULT_KERNELS))
        d["ablation"] = Ablation.from_flags(d.get("ablation", []))
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter groups
# ---------------------------------------------------------------------------


@dataclass
class VapParams:
    weight: Tensor  # (C, A)
    bias: Tensor  # (A,)


@dataclass
class CamParams:
    weight: Tensor  # (C + A, C), shared by both pooled branches
    bias: Tensor  # (C,)


@dataclass
class PsamParams:
    kernels: dict[int, Tensor]  # k -> (k, k, 2, 1)
    biases: dict[int, Tensor]  # k -> (1,)

    def __post_init__(self):
        if not self.kernels:
            raise ConfigError("PSAM kernel set is empty")


@dataclass
class RefinedFeature:
    channel_refined: Tensor
    refined: Tensor
    channel_map: Optional[Tensor]
    spatial_map: Optional[Tensor]


# ---------------------------------------------------------------------------
# model pieces as functions of (inputs, params)
# ---------------------------------------------------------------------------


def predict_attributes(feature: Tensor, vap: VapParams) -> Tensor:
    """sigmoid(GAP(feature) W + b): (..., H, W, C) -> (..., A)."""
    pooled = global_pool(feature, "avg")
    pooled = reshape(pooled, pooled.shape[:-3] + (pooled.shape[-1],))
    return sigmoid(linear(pooled, vap.weight, vap.bias))


def channel_attention(hybrid: Tensor, cam: CamParams) -> Tensor:
    """sigmoid(MLP(avgpool F) + MLP(maxpool F)) with one shared layer -> (..., 1, 1, C)."""
    if hybrid.shape[-1] != cam.weight.shape[0]:
        raise ShapeError(f"CAM expects {cam.weight.shape[0]} channels, got {hybrid.shape[-1]}")
    avg = linear(global_pool(hybrid, "avg"), cam.weight, cam.bias)
    mx = linear(global_pool(hybrid, "max"), cam.weight, cam.bias)
    return sigmoid(add(avg, mx))


def pyramid_spatial_attention(hybrid: Tensor, psam: PsamParams) -> Tensor:
    """sigmoid of the summed multi-kernel convolutions of [avg; max] channel pools -> (..., H, W, 1)."""
    if not psam.kernels:
        raise ConfigError("PSAM kernel set is empty")
    pooled = concat([channel_pool(hybrid, "avg"), channel_pool(hybrid, "max")], axis=-1)
    total = None
    for k in sorted(psam.kernels):
        m = conv2d(pooled, psam.kernels[k], psam.biases[k])
        total = m if total is None else add(total, m)
    return sigmoid(total)


def refine(
    visual: Tensor,
    attributes: Optional[Tensor],
    cam: Optional[CamParams],
    psam: Optional[PsamParams],
) -> RefinedFeature:
    """Channel gate then spatial gate, each driven by visual + attribute channels.

    ``attributes`` of None runs the gates on visual channels alone; a None
    parameter group skips that gate.
    """
    if attributes is not None:
        attributes = as_tensor(attributes)
        expected = None
        if cam is not None:
            expected = cam.weight.shape[0] - visual.shape[-1]
        if expected is not None and attributes.shape[-1] != expected:
            raise ShapeError(f"expected {expected} attributes, got {attributes.shape[-1]}")

    def fuse(x: Tensor) -> Tensor:
        return x if attributes is None else broadcast_concat(x, attributes)

    m_c = m_s = None
    f_c = visual
    if cam is not None:
        m_c = channel_attention(fuse(visual), cam)
        f_c = mul(m_c, visual)
    f_f = f_c
    if psam is not None:
        m_s = pyramid_spatial_attention(fuse(f_c), psam)
        f_f = mul(m_s, f_c)
    return RefinedFeature(f_c, f_f, m_c, m_s)


def pool_vectors(feature: Tensor) -> Tensor:
    """GAP a batch of maps (B, H, W, C) to vectors (B, C)."""
    pooled = global_pool(feature, "avg")
    return reshape(pooled, (pooled.shape[0], pooled.shape[-1]))


def compute_prototypes(support: Tensor, labels: np.ndarray, n_way: int) -> Tensor:
    """Per-class mean of support vectors: (S, C) -> (N, C)."""
    labels = np.asarray(labels)
    rows = []
    for n in range(n_way):
        idx = np.flatnonzero(labels == n)
        if idx.size == 0:
            raise ContractError(f"class {n} has no support samples")
        rows.append(mean(getitem(support, idx), axis=0, keepdims=True))
    return concat(rows, axis=0)


def classify(queries: Tensor, prototypes: Tensor) -> Tensor:
    """Softmax over negative squared distances: (Q, C) x (N, C) -> (Q, N)."""
    return softmax(mul(squared_distances(queries, prototypes), -1.0), axis=-1)


def loss_cls(probs: Tensor, labels: np.ndarray, reduction: str = "sum") -> Tensor:
    """Negative log-likelihood of the true labels, with p floored at 1e-12."""
    probs = as_tensor(probs)
    labels = np.asarray(labels)
    picked = getitem(probs, (np.arange(len(labels)), labels))
    nll = mul(log(clamp_min(picked, PROB_FLOOR)), -1.0)
    return tsum(nll) if reduction == "sum" else mean(nll)


def loss_attr(predicted: Tensor, observed) -> Tensor:
    """Mean squared error over samples and attributes."""
    predicted, observed = as_tensor(predicted), as_tensor(observed)
    if predicted.shape != observed.shape:
        raise ShapeError(f"predicted {predicted.shape} vs observed {observed.shape}")
    return mean(square(sub(predicted, observed)))


def loss_total(l_cls, l_attr, alpha: float):
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    return add(l_cls, mul(l_attr, alpha))


# ---------------------------------------------------------------------------
# assembled models
# ---------------------------------------------------------------------------


@dataclass
class EpisodeOutput:
    probs: Tensor  # (Q, N)
    loss: Tensor
    loss_cls: Tensor
    loss_attr: Optional[Tensor]
    predicted_attributes: Optional[Tensor]  # (S + Q, A)
    refined: Optional[RefinedFeature]


class ASLModel:
    """Backbone + attribute predictor + attention refinement + prototype head."""

    def __init__(self, config: ModelConfig, image_shape: tuple[int, int, int] = (32, 32, 3), seed: int = 0):
        self.config = config
        self.image_shape = tuple(image_shape)
        ab = config.ablation
        c, a = config.channels, config.num_attributes
        self.backbone = ConvEncoder(image_shape[2], c, config.depth, derive_rng(seed, "init", "backbone"))
        self.backbone.output_shape(self.image_shape)

        self.vap = self.cam = self.psam = None
        if ab.uses_vap:
            rng = derive_rng(seed, "init", "vap")
            self.vap = VapParams(parameter(he_uniform(rng, (c, a), c)), parameter(np.zeros(a)))
        width = c + a if ab.fuses_attributes else c
        if not ab.no_cam:
            rng = derive_rng(seed, "init", "cam")
            self.cam = CamParams(parameter(he_uniform(rng, (width, c), width)), parameter(np.zeros(c)))
        if not ab.no_psam:
            rng = derive_rng(seed, "init", "psam")
            kernels, biases = {}, {}
            for k in sorted(set(config.kernel_sizes)):
                kernels[k] = parameter(he_uniform(rng, (k, k, 2, 1), 2 * k * k))
                biases[k] = parameter(np.zeros(1))
            self.psam = PsamParams(kernels, biases)

    # -- parameter access --------------------------------------------------
    @property
    def params(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.params.items()}
        if self.vap is not None:
            out["vap.weight"], out["vap.bias"] = self.vap.weight, self.vap.bias
        if self.cam is not None:
            out["cam.weight"], out["cam.bias"] = self.cam.weight, self.cam.bias
        if self.psam is not None:
            for k in sorted(self.psam.kernels):
                out[f"psam.k{k}.kernel"] = self.psam.kernels[k]
                out[f"psam.k{k}.bias"] = self.psam.biases[k]
        for name, p in out.items():
            p.name = name
        return out

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return {f"backbone.{k}": v for k, v in self.backbone.buffers.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward -------------------------------------------------------------
    def forward(self, episode: Episode, training: bool = False) -> EpisodeOutput:
        cfg, ab = self.config, self.config.ablation
        n_s = len(episode.support_labels)
        images = np.concatenate([episode.support_images, episode.query_images], axis=0)
        observed = np.concatenate([episode.support_attributes, episode.query_attributes], axis=0)
        if observed.shape[1] != cfg.num_attributes:
            raise ShapeError(f"episode has {observed.shape[1]} attributes, model expects {cfg.num_attributes}")
        if ab.zero_attributes:
            observed = np.zeros_like(observed)

        visual = self.backbone.encode(Tensor(images), training=training)

        predicted = None
        if self.vap is not None:
            predicted = predict_attributes(visual, self.vap)

        refined = None
        if ab.uses_avam:
            attrs = None
            if ab.fuses_attributes:
                support_attrs = Tensor(observed[:n_s])
                if predicted is not None and not ab.zero_attributes:
                    query_attrs = getitem(predicted, slice(n_s, None))
                else:
                    query_attrs = Tensor(np.zeros_like(observed[n_s:]))
                attrs = concat([support_attrs, query_attrs], axis=0)
            refined = refine(visual, attrs, self.cam, self.psam)
            vectors = pool_vectors(refined.refined)
        else:
            vectors = pool_vectors(visual)

        support = getitem(vectors, slice(0, n_s))
        queries = getitem(vectors, slice(n_s, None))
        prototypes = compute_prototypes(support, episode.support_labels, episode.n_way)
        probs = classify(queries, prototypes)
        l_cls = loss_cls(probs, episode.query_labels, cfg.loss_reduction)

        l_attr = None
        loss = l_cls
        if predicted is not None:
            l_attr = loss_attr(predicted, observed)
            loss = loss_total(l_cls, l_attr, cfg.alpha)
        return EpisodeOutput(probs, loss, l_cls, l_attr, predicted, refined)


class ProtoNet:
    """Plain prototype classifier on GAP'd backbone features."""

    def __init__(self, channels: int = 32, depth: int = 4, image_shape=(32, 32, 3), seed: int = 0,
                 loss_reduction: str = "sum"):
        self.image_shape = tuple(image_shape)
        self.loss_reduction = loss_reduction
        self.backbone = ConvEncoder(image_shape[2], channels, depth, derive_rng(seed, "init", "backbone"))

    @property
    def params(self) -> dict[str, Tensor]:
        return {f"backbone.{k}": v for k, v in self.backbone.params.items()}

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return {f"backbone.{k}": v for k, v in self.backbone.buffers.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, episode: Episode, training: bool = False) -> EpisodeOutput:
        n_s = len(episode.support_labels)
        images = np.concatenate([episode.support_images, episode.query_images], axis=0)
        vectors = pool_vectors(self.backbone.encode(Tensor(images), training=training))
        prototypes = compute_prototypes(getitem(vectors, slice(0, n_s)), episode.support_labels, episode.n_way)
        probs = classify(getitem(vectors, slice(n_s, None)), prototypes)
        l_cls = loss_cls(probs, episode.query_labels, self.loss_reduction)
        return EpisodeOutput(probs, l_cls, l_cls, None, None, None)
