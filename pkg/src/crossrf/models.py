"""Fingerprinting networks: twin encoders, device classifier, domain
discriminator with gradient reversal, plus checkpointing.

The encoder is five conv stages (conv -> batch norm -> LeakyReLU ->
dropout), adaptive average pooling, then one fully connected stage. The
target encoder is structurally identical to the source encoder and starts
from a value copy of its weights, which makes "target before adaptation"
well defined. The discriminator front-loads a gradient reversal layer so a
single backward pass trains it *and* pushes the opposite gradient into
whatever produced its input features.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .autograd import (
    BatchNormState,
    Mode,
    ShapeError,
    Tensor,
    adaptive_avg_pool1d,
    batchnorm1d,
    conv1d,
    dropout,
    grad_reverse,
    leaky_relu,
    linear,
    log_softmax,
    reshape,
)
from .seeding import derive_rng

CHECKPOINT_MAGIC = b"CRFM"
CHECKPOINT_VERSION = 1


class WindowTooShortError(ValueError):
    """Input length collapses below 1 at some conv stage."""


class CheckpointError(Exception):
    """Unreadable or incompatible checkpoint file."""


@dataclass
class EncoderConfig:
    conv_channels: tuple = (16, 32, 64, 64, 128)
    kernel_sizes: tuple = (7, 5, 5, 3, 3)
    strides: tuple = (2, 2, 2, 2, 2)
    dropout_p: float = 0.3
    leaky_slope: float = 0.2
    pool_out_len: int = 1
    feature_dim: int = 128

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.kernel_sizes = tuple(self.kernel_sizes)
        self.strides = tuple(self.strides)
        for name in ("conv_channels", "kernel_sizes", "strides"):
            if len(getattr(self, name)) != 5:
                raise ValueError(f"{name} must list exactly 5 conv stages")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError(f"dropout_p must be in [0,1), got {self.dropout_p}")
        if not (0.0 < self.leaky_slope < 1.0):
            raise ValueError(f"leaky_slope must be in (0,1), got {self.leaky_slope}")
        if self.pool_out_len < 1:
            raise ValueError("pool_out_len must be positive")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")

    def paddings(self) -> tuple:
        # half-kernel padding keeps stage lengths at ceil(L / stride)
        return tuple(k // 2 for k in self.kernel_sizes)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    classifier_hidden: int = 64
    discriminator_hidden: tuple = (128, 64, 32)

    def __post_init__(self):
        self.discriminator_hidden = tuple(self.discriminator_hidden)
        if len(self.discriminator_hidden) != 3:
            raise ValueError("discriminator needs exactly 3 hidden layers")
        if self.classifier_hidden < 1:
            raise ValueError("classifier_hidden must be positive")


@dataclass
class ConvStage:
    weight: Tensor
    bias: Tensor
    bn: BatchNormState


@dataclass
class EncoderParams:
    stages: list
    fc_weight: Tensor
    fc_bias: Tensor

    def tensors(self) -> list:
        out = []
        for s in self.stages:
            out += [s.weight, s.bias, s.bn.gamma, s.bn.beta]
        out += [self.fc_weight, self.fc_bias]
        return out


@dataclass
class ClassifierParams:
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor
    leaky_slope: float = 0.2
    dropout_p: float = 0.3

    def tensors(self) -> list:
        return [self.fc1_weight, self.fc1_bias, self.fc2_weight, self.fc2_bias]


@dataclass
class DiscBlock:
    weight: Tensor
    bias: Tensor
    bn: BatchNormState


@dataclass
class DiscriminatorParams:
    blocks: list
    out_weight: Tensor
    out_bias: Tensor
    grl_lambda: float = 1.0
    leaky_slope: float = 0.2
    dropout_p: float = 0.3

    def tensors(self) -> list:
        out = []
        for b in self.blocks:
            out += [b.weight, b.bias, b.bn.gamma, b.bn.beta]
        out += [self.out_weight, self.out_bias]
        return out


@dataclass
class ModelBundle:
    config: ModelConfig
    num_classes: int
    seed: int
    source_encoder: EncoderParams
    target_encoder: EncoderParams
    classifier: ClassifierParams
    discriminator: DiscriminatorParams


def _uniform(rng, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True)


def _build_encoder(cfg: EncoderConfig, rng, dtype) -> EncoderParams:
    stages = []
    in_ch = 2
    for out_ch, k in zip(cfg.conv_channels, cfg.kernel_sizes):
        fan_in = in_ch * k
        stages.append(ConvStage(
            weight=_uniform(rng, (out_ch, in_ch, k), fan_in, dtype),
            bias=_uniform(rng, (out_ch,), fan_in, dtype),
            bn=BatchNormState.create(out_ch, dtype=dtype),
        ))
        in_ch = out_ch
    flat = cfg.conv_channels[-1] * cfg.pool_out_len
    return EncoderParams(
        stages=stages,
        fc_weight=_uniform(rng, (cfg.feature_dim, flat), flat, dtype),
        fc_bias=_uniform(rng, (cfg.feature_dim,), flat, dtype),
    )


def build_models(config: ModelConfig, num_classes: int, seed: int,
                 grl_lambda: float = 1.0, dtype=np.float32) -> ModelBundle:
    """Deterministically initialize all four networks from one seed.

    Weights and biases are fan-in-scaled uniform; batch-norm affine starts
    at identity with zero-mean/unit-var running stats. The target encoder
    starts as a value copy of the source encoder.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    enc_cfg = config.encoder
    rng = derive_rng(seed, "init")
    source = _build_encoder(enc_cfg, rng, dtype)

    f = enc_cfg.feature_dim
    h = config.classifier_hidden
    classifier = ClassifierParams(
        fc1_weight=_uniform(rng, (h, f), f, dtype),
        fc1_bias=_uniform(rng, (h,), f, dtype),
        fc2_weight=_uniform(rng, (num_classes, h), h, dtype),
        fc2_bias=_uniform(rng, (num_classes,), h, dtype),
        leaky_slope=enc_cfg.leaky_slope,
        dropout_p=enc_cfg.dropout_p,
    )

    discriminator = _build_discriminator(config, rng, grl_lambda, dtype)

    return ModelBundle(
        config=config,
        num_classes=num_classes,
        seed=seed,
        source_encoder=source,
        target_encoder=init_target_from_source(source),
        classifier=classifier,
        discriminator=discriminator,
    )


def _build_discriminator(config: ModelConfig, rng, grl_lambda: float,
                         dtype) -> DiscriminatorParams:
    enc_cfg = config.encoder
    blocks = []
    in_dim = enc_cfg.feature_dim
    for width in config.discriminator_hidden:
        blocks.append(DiscBlock(
            weight=_uniform(rng, (width, in_dim), in_dim, dtype),
            bias=_uniform(rng, (width,), in_dim, dtype),
            bn=BatchNormState.create(width, dtype=dtype),
        ))
        in_dim = width
    return DiscriminatorParams(
        blocks=blocks,
        out_weight=_uniform(rng, (2, in_dim), in_dim, dtype),
        out_bias=_uniform(rng, (2,), in_dim, dtype),
        grl_lambda=float(grl_lambda),
        leaky_slope=enc_cfg.leaky_slope,
        dropout_p=enc_cfg.dropout_p,
    )


def build_discriminator(config: ModelConfig, seed: int,
                        grl_lambda: float = 1.0,
                        dtype=np.float32) -> DiscriminatorParams:
    """Fresh adversary from its own seed (hyperparameter trials start clean)."""
    rng = derive_rng(seed, "init", "discriminator")
    return _build_discriminator(config, rng, grl_lambda, dtype)


def copy_discriminator(params: DiscriminatorParams) -> DiscriminatorParams:
    return DiscriminatorParams(
        blocks=[DiscBlock(weight=b.weight.copy(), bias=b.bias.copy(),
                          bn=_copy_bn(b.bn)) for b in params.blocks],
        out_weight=params.out_weight.copy(),
        out_bias=params.out_bias.copy(),
        grl_lambda=params.grl_lambda,
        leaky_slope=params.leaky_slope,
        dropout_p=params.dropout_p,
    )


def _copy_bn(bn: BatchNormState) -> BatchNormState:
    return BatchNormState(
        gamma=bn.gamma.copy(),
        beta=bn.beta.copy(),
        running_mean=bn.running_mean.copy(),
        running_var=bn.running_var.copy(),
        momentum=bn.momentum,
        eps=bn.eps,
        mode=bn.mode,
    )


def init_target_from_source(source: EncoderParams) -> EncoderParams:
    """Value-identical, independently mutable copy (running stats included)."""
    return EncoderParams(
        stages=[ConvStage(weight=s.weight.copy(), bias=s.bias.copy(),
                          bn=_copy_bn(s.bn)) for s in source.stages],
        fc_weight=source.fc_weight.copy(),
        fc_bias=source.fc_bias.copy(),
    )


def copy_classifier(params: ClassifierParams) -> ClassifierParams:
    return ClassifierParams(
        fc1_weight=params.fc1_weight.copy(), fc1_bias=params.fc1_bias.copy(),
        fc2_weight=params.fc2_weight.copy(), fc2_bias=params.fc2_bias.copy(),
        leaky_slope=params.leaky_slope, dropout_p=params.dropout_p,
    )


def encode(params: EncoderParams, cfg: EncoderConfig, x: Tensor, mode: Mode,
           rng=None) -> Tensor:
    """Window batch [B, 2, W] -> feature batch [B, F]."""
    if x.data.ndim != 3 or x.shape[1] != 2:
        raise ShapeError(f"encoder input must be [B, 2, W], got {list(x.shape)}")
    length = x.shape[2]
    paddings = cfg.paddings()
    h = x
    for i, stage in enumerate(params.stages):
        k, s, p = cfg.kernel_sizes[i], cfg.strides[i], paddings[i]
        if length + 2 * p < k:
            raise WindowTooShortError(
                f"window too short at conv stage {i}: length {length} with "
                f"kernel {k}, padding {p}")
        length = (length + 2 * p - k) // s + 1
        h = conv1d(h, stage.weight, stage.bias, stride=s, padding=p)
        stage.bn.mode = mode
        h = batchnorm1d(h, stage.bn)
        h = leaky_relu(h, cfg.leaky_slope)
        h = dropout(h, cfg.dropout_p, mode, rng)
    if length < cfg.pool_out_len:
        raise WindowTooShortError(
            f"window too short: {length} values left before pooling to "
            f"{cfg.pool_out_len}")
    h = adaptive_avg_pool1d(h, cfg.pool_out_len)
    h = reshape(h, (h.shape[0], h.shape[1] * h.shape[2]))
    h = linear(h, params.fc_weight, params.fc_bias)
    h = leaky_relu(h, cfg.leaky_slope)
    h = dropout(h, cfg.dropout_p, mode, rng)
    return h


def classify(params: ClassifierParams, features: Tensor, mode: Mode,
             rng=None) -> Tensor:
    """Feature batch [B, F] -> raw class logits [B, K]."""
    h = linear(features, params.fc1_weight, params.fc1_bias)
    h = leaky_relu(h, params.leaky_slope)
    h = dropout(h, params.dropout_p, mode, rng)
    return linear(h, params.fc2_weight, params.fc2_bias)


def discriminate(params: DiscriminatorParams, features: Tensor, mode: Mode,
                 rng=None) -> Tensor:
    """Feature batch [B, F] -> domain log-probabilities [B, 2].

    Label convention: 0 = source, 1 = target. Gradients leaving through
    ``features`` are scaled by -grl_lambda.
    """
    h = grad_reverse(features, params.grl_lambda)
    for block in params.blocks:
        h = linear(h, block.weight, block.bias)
        block.bn.mode = mode
        h = batchnorm1d(h, block.bn)
        h = leaky_relu(h, params.leaky_slope)
        h = dropout(h, params.dropout_p, mode, rng)
    h = linear(h, params.out_weight, params.out_bias)
    return log_softmax(h)


# ---------------------------------------------------------------------------
# checkpoint container: JSON header + fixed-order little-endian f32 payload


def _bn_arrays(bn: BatchNormState, prefix: str) -> list:
    return [
        (f"{prefix}.gamma", bn.gamma.data),
        (f"{prefix}.beta", bn.beta.data),
        (f"{prefix}.running_mean", bn.running_mean),
        (f"{prefix}.running_var", bn.running_var),
    ]


def _encoder_arrays(enc: EncoderParams, prefix: str) -> list:
    out = []
    for i, s in enumerate(enc.stages):
        out.append((f"{prefix}.stage{i}.weight", s.weight.data))
        out.append((f"{prefix}.stage{i}.bias", s.bias.data))
        out += _bn_arrays(s.bn, f"{prefix}.stage{i}.bn")
    out.append((f"{prefix}.fc.weight", enc.fc_weight.data))
    out.append((f"{prefix}.fc.bias", enc.fc_bias.data))
    return out


def _bundle_arrays(bundle: ModelBundle) -> list:
    out = _encoder_arrays(bundle.source_encoder, "source_encoder")
    out += _encoder_arrays(bundle.target_encoder, "target_encoder")
    clf = bundle.classifier
    out += [
        ("classifier.fc1.weight", clf.fc1_weight.data),
        ("classifier.fc1.bias", clf.fc1_bias.data),
        ("classifier.fc2.weight", clf.fc2_weight.data),
        ("classifier.fc2.bias", clf.fc2_bias.data),
    ]
    disc = bundle.discriminator
    for i, b in enumerate(disc.blocks):
        out.append((f"discriminator.block{i}.weight", b.weight.data))
        out.append((f"discriminator.block{i}.bias", b.bias.data))
        out += _bn_arrays(b.bn, f"discriminator.block{i}.bn")
    out.append(("discriminator.out.weight", disc.out_weight.data))
    out.append(("discriminator.out.bias", disc.out_bias.data))
    return out


def save_checkpoint(bundle: ModelBundle, path) -> None:
    arrays = _bundle_arrays(bundle)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model": asdict(bundle.config),
        "num_classes": bundle.num_classes,
        "seed": bundle.seed,
        "precision": "f32",
        "grl_lambda": bundle.discriminator.grl_lambda,
        "tensors": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelBundle:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path}: bad checkpoint magic {magic!r}")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            if header.get("format_version") != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path}: unsupported checkpoint version "
                    f"{header.get('format_version')}")
            model_cfg = ModelConfig(
                encoder=EncoderConfig(**header["model"]["encoder"]),
                classifier_hidden=header["model"]["classifier_hidden"],
                discriminator_hidden=tuple(header["model"]["discriminator_hidden"]),
            )
            bundle = build_models(model_cfg, header["num_classes"],
                                  header["seed"],
                                  grl_lambda=header.get("grl_lambda", 1.0))
            arrays = _bundle_arrays(bundle)
            if len(arrays) != len(header["tensors"]):
                raise CheckpointError(
                    f"{path}: tensor count mismatch "
                    f"({len(header['tensors'])} vs {len(arrays)})")
            for (name, a), meta in zip(arrays, header["tensors"]):
                if list(a.shape) != meta["shape"] or name != meta["name"]:
                    raise CheckpointError(
                        f"{path}: tensor {meta['name']} does not match the "
                        f"declared architecture")
                raw = fh.read(4 * a.size)
                if len(raw) < 4 * a.size:
                    raise CheckpointError(f"{path}: payload truncated at {name}")
                a[...] = np.frombuffer(raw, dtype="<f4").reshape(a.shape)
    except (OSError, ValueError, KeyError, struct.error) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    return bundle
