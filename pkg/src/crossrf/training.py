"""Two-stage training: supervised source fitting, then adversarial
adaptation of the target encoder with temperature-scaled distillation.

Stage 1 minimizes cross-entropy over the source encoder and classifier.
Stage 2 freezes both of those, initializes the target encoder from the
source weights, and trains it jointly with a domain discriminator: the
discriminator descends on its own domain NLL while the gradient reversal
layer feeds the negated (scaled) gradient to the target encoder, and a KL
distillation term anchored to the frozen source pipeline preserves class
knowledge. Target windows enter stage 2 with their labels stripped; only
validation scoring ever sees target labels.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .autograd import (
    Mode,
    NumericalError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    concat0,
    log_softmax,
    mul,
    nll_loss,
    scale,
    sum_all,
)
from .iqdata import UnlabeledWindows, WindowedDataset
from .models import (
    ClassifierParams,
    DiscriminatorParams,
    EncoderParams,
    ModelBundle,
    build_discriminator,
    classify,
    copy_classifier,
    copy_discriminator,
    discriminate,
    encode,
    init_target_from_source,
)
from .optim import Adam
from .seeding import derive_rng


@dataclass
class TrainConfig:
    lr_source: float = 1e-3
    lr_target: float = 1e-3
    lr_discriminator: float = 1e-4
    batch_size: int = 64
    epochs_source: int = 30
    epochs_adapt: int = 30
    temperature: float = 4.0
    lambda_adv: float = 1.0
    lambda_distill: float = 0.0
    grl_lambda: float = 1.0
    seed: int = 0
    early_stop_patience: int = 8

    def __post_init__(self):
        for name in ("lr_source", "lr_target", "lr_discriminator"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        for name in ("lambda_adv", "lambda_distill", "grl_lambda"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be nonnegative, got {v}")
        if self.epochs_source < 0 or self.epochs_adapt < 0:
            raise ValueError("epoch counts must be nonnegative")


@dataclass
class EpochRow:
    epoch: int
    cls_loss: float = 0.0
    disc_loss: float = 0.0
    distill_loss: float = 0.0
    total_loss: float = 0.0
    val_accuracy: float = 0.0
    wall_time_s: float = 0.0


@dataclass
class StageLog:
    rows: list = field(default_factory=list)

    def best_val_accuracy(self) -> float:
        return max((r.val_accuracy for r in self.rows), default=0.0)


STAGE_LOG_COLUMNS = ("epoch", "cls_loss", "disc_loss", "distill_loss",
                     "total_loss", "val_accuracy", "wall_time_s")


def write_stage_log(log: StageLog, path) -> None:
    """One CSV row per epoch; wall time stays in the last column so the
    deterministic columns can be compared across reruns."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(STAGE_LOG_COLUMNS) + "\n")
        for r in log.rows:
            fh.write(f"{r.epoch},{r.cls_loss:.6f},{r.disc_loss:.6f},"
                     f"{r.distill_loss:.6f},{r.total_loss:.6f},"
                     f"{r.val_accuracy:.6f},{r.wall_time_s:.3f}\n")


def _batches(n: int, batch_size: int, rng: Optional[np.random.Generator]):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size >= 2:  # batch norm cannot digest a single row
            yield idx


def _check_finite(value: float, what: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise NumericalError(
            f"{what} went non-finite at epoch {epoch}; aborting the run")


def _eval_features(encoder: EncoderParams, enc_cfg, values: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    chunks = []
    for start in range(0, len(values), batch_size):
        x = Tensor(values[start:start + batch_size])
        chunks.append(encode(encoder, enc_cfg, x, Mode.EVAL).data)
    return np.concatenate(chunks, axis=0)


def evaluate(encoder: EncoderParams, classifier: ClassifierParams, enc_cfg,
             dataset: WindowedDataset, batch_size: int = 256):
    """Eval-mode accuracy and per-window argmax predictions.

    Ties break toward the lower class index.
    """
    values = dataset.values_array()
    labels = dataset.labels_array()
    preds = np.empty(len(dataset), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        x = Tensor(values[start:start + batch_size])
        feats = encode(encoder, enc_cfg, x, Mode.EVAL)
        logits = classify(classifier, feats, Mode.EVAL)
        preds[start:start + x.shape[0]] = np.argmax(logits.data, axis=1)
    accuracy = float(np.mean(preds == labels)) if len(dataset) else 0.0
    return accuracy, preds


def train_source(train: WindowedDataset, val: WindowedDataset,
                 cfg: TrainConfig, bundle: ModelBundle):
    """Stage 1: cross-entropy over source encoder + classifier.

    Keeps the epoch with the best validation accuracy; on return the
    bundle holds those parameters and the target encoder is re-seeded from
    them (weight transfer).
    """
    if train.num_classes != bundle.num_classes:
        raise ShapeError(
            f"dataset has {train.num_classes} classes, models expect "
            f"{bundle.num_classes}")
    enc_cfg = bundle.config.encoder
    encoder, classifier = bundle.source_encoder, bundle.classifier
    log = StageLog()
    best_acc = -1.0
    best = (init_target_from_source(encoder), copy_classifier(classifier))
    if cfg.epochs_source > 0:
        params = encoder.tensors() + classifier.tensors()
        opt = Adam(params, cfg.lr_source)
        shuffle_rng = derive_rng(cfg.seed, "source", "shuffle")
        drop_rng = derive_rng(cfg.seed, "source", "dropout")
        values = train.values_array()
        labels = train.labels_array()
        stall = 0
        for epoch in range(cfg.epochs_source):
            t0 = time.perf_counter()
            losses = []
            for idx in _batches(len(train), cfg.batch_size, shuffle_rng):
                x = Tensor(values[idx])
                with Tape() as tape:
                    feats = encode(encoder, enc_cfg, x, Mode.TRAIN, drop_rng)
                    logits = classify(classifier, feats, Mode.TRAIN, drop_rng)
                    loss = nll_loss(log_softmax(logits), labels[idx])
                _check_finite(loss.item(), "classification loss", epoch)
                backward(loss, tape)
                opt.step()
                opt.zero_grad()
                losses.append(loss.item())
            val_acc, _ = evaluate(encoder, classifier, enc_cfg, val)
            cls_loss = float(np.mean(losses)) if losses else 0.0
            log.rows.append(EpochRow(
                epoch=epoch, cls_loss=cls_loss, total_loss=cls_loss,
                val_accuracy=val_acc,
                wall_time_s=time.perf_counter() - t0))
            if val_acc > best_acc:
                best_acc = val_acc
                best = (init_target_from_source(encoder),
                        copy_classifier(classifier))
                stall = 0
            else:
                stall += 1
                if stall >= cfg.early_stop_patience:
                    break
    bundle.source_encoder, bundle.classifier = best
    bundle.target_encoder = init_target_from_source(bundle.source_encoder)
    return bundle.source_encoder, bundle.classifier, log


def distillation_loss(logits_source: Tensor, logits_target: Tensor,
                      temperature: float) -> Tensor:
    """T^2-scaled batch-mean KL(p_source || p_target) at temperature T.

    The source side is treated as a constant (no gradient); gradients flow
    only into ``logits_target``.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if logits_source.shape != logits_target.shape:
        raise ShapeError(
            f"logit shapes differ: {logits_source.shape} vs {logits_target.shape}")
    t = float(temperature)
    b = logits_source.shape[0]

    # constant source side, computed with the same stable log-softmax math
    # as the tensor path so that identical inputs cancel exactly to zero
    zs = logits_source.data * (1.0 / t)
    shifted = zs - zs.max(axis=1, keepdims=True)
    log_ps = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ps = np.exp(log_ps)

    log_pt = log_softmax(scale(logits_target, 1.0 / t))
    gap = add(Tensor(log_ps.astype(log_pt.dtype)), scale(log_pt, -1.0))
    kl_sum = sum_all(mul(Tensor(ps.astype(log_pt.dtype)), gap))
    return scale(kl_sum, (t * t) / b)


def _domain_labels(n_source: int, n_target: int) -> np.ndarray:
    # discriminator convention: source = 0, target = 1
    return np.concatenate([np.zeros(n_source, dtype=np.int64),
                           np.ones(n_target, dtype=np.int64)])


def adapt_target(bundle: ModelBundle, source_train: WindowedDataset,
                 target_train: UnlabeledWindows,
                 target_val: Optional[WindowedDataset],
                 cfg: TrainConfig):
    """Stage 2: adversarial adaptation with distillation anchoring.

    Per batch pair (x_s, x_t): the frozen source encoder embeds x_s, the
    target encoder embeds x_t, and the discriminator scores both through
    the gradient reversal layer. One backward pass over
    ``lambda_adv * L_disc + lambda_distill * L_distill`` then descends the
    discriminator on L_disc while the reversal layer hands the target
    encoder the ``-lambda_adv * grl_lambda``-scaled adversarial gradient.
    The source encoder and classifier never change (verified by hash).

    The target encoder runs with train-mode batch norm (its statistics
    adapt to the target domain) but with its dropout inactive: the
    adversarial game needs a deterministic student, and with dropout noise
    in the encoder the alignment reliably degenerates.

    ``target_train`` carries no labels by construction.
    """
    if not isinstance(target_train, UnlabeledWindows):
        raise TypeError("adaptation target data must be UnlabeledWindows "
                        "(use WindowedDataset.without_labels())")
    if len(target_train) == 0:
        raise ValueError("adaptation needs at least one target window")
    enc_cfg = bundle.config.encoder
    stage2_cfg = replace(enc_cfg, dropout_p=0.0)  # deterministic student
    source_enc = bundle.source_encoder
    classifier = bundle.classifier
    disc = bundle.discriminator
    frozen_clf = copy_classifier(classifier)
    for p in frozen_clf.tensors():
        p.requires_grad = False  # gradient flows *through* it, never into it
    frozen_hash = _params_hash(source_enc.tensors() + classifier.tensors())

    target_enc = init_target_from_source(source_enc)
    log = StageLog()
    best = (init_target_from_source(target_enc), copy_discriminator(disc))
    best_acc = -1.0
    if cfg.epochs_adapt > 0:
        opt_t = Adam(target_enc.tensors(), cfg.lr_target)
        opt_d = Adam(disc.tensors(), cfg.lr_discriminator)
        shuffle_s = derive_rng(cfg.seed, "adapt", "shuffle_source")
        shuffle_t = derive_rng(cfg.seed, "adapt", "shuffle_target")
        drop_rng = derive_rng(cfg.seed, "adapt", "dropout")
        src_values = source_train.values_array()
        tgt_values = np.stack(target_train.values).astype(np.float32)
        # the frozen source pipeline never changes during adaptation, so
        # its features and distillation logits can be computed once
        src_features = _eval_features(source_enc, enc_cfg, src_values)
        tgt_src_logits = classify(
            classifier,
            Tensor(_eval_features(source_enc, enc_cfg, tgt_values)),
            Mode.EVAL).data
        stall = 0
        for epoch in range(cfg.epochs_adapt):
            t0 = time.perf_counter()
            src_batches = list(_batches(len(src_values), cfg.batch_size, shuffle_s))
            tgt_batches = list(_batches(len(tgt_values), cfg.batch_size, shuffle_t))
            disc_losses, dist_losses, totals = [], [], []
            for idx_s, idx_t in zip(src_batches, tgt_batches):
                fs = Tensor(src_features[idx_s])
                src_logits = Tensor(tgt_src_logits[idx_t])
                xt = Tensor(tgt_values[idx_t])
                with Tape() as tape:
                    ft = encode(target_enc, stage2_cfg, xt, Mode.TRAIN)
                    domain_logp = discriminate(
                        disc, concat0([fs, ft]), Mode.TRAIN, drop_rng)
                    l_disc = nll_loss(
                        domain_logp, _domain_labels(fs.shape[0], xt.shape[0]))
                    logits_t = classify(frozen_clf, ft, Mode.EVAL)
                    l_dist = distillation_loss(src_logits, logits_t,
                                               cfg.temperature)
                    total = add(scale(l_disc, cfg.lambda_adv),
                                scale(l_dist, cfg.lambda_distill))
                _check_finite(l_disc.item(), "discriminator loss", epoch)
                _check_finite(l_dist.item(), "distillation loss", epoch)
                backward(total, tape)
                opt_t.step()
                opt_d.step()
                opt_t.zero_grad()
                opt_d.zero_grad()
                disc_losses.append(l_disc.item())
                dist_losses.append(l_dist.item())
                totals.append(total.item())
            val_acc = 0.0
            if target_val is not None:
                val_acc, _ = evaluate(target_enc, classifier, enc_cfg, target_val)
            log.rows.append(EpochRow(
                epoch=epoch,
                disc_loss=float(np.mean(disc_losses)) if disc_losses else 0.0,
                distill_loss=float(np.mean(dist_losses)) if dist_losses else 0.0,
                total_loss=float(np.mean(totals)) if totals else 0.0,
                val_accuracy=val_acc,
                wall_time_s=time.perf_counter() - t0))
            if target_val is None:
                best = (init_target_from_source(target_enc),
                        copy_discriminator(disc))
            elif val_acc > best_acc:
                best_acc = val_acc
                best = (init_target_from_source(target_enc),
                        copy_discriminator(disc))
                stall = 0
            else:
                stall += 1
                if stall >= cfg.early_stop_patience:
                    break
    if _params_hash(source_enc.tensors() + classifier.tensors()) != frozen_hash:
        raise RuntimeError("frozen source parameters were mutated during "
                           "adaptation; this is a bug")
    bundle.target_encoder, bundle.discriminator = best
    return bundle.target_encoder, bundle.discriminator, log


def _params_hash(tensors) -> bytes:
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.digest()


@dataclass
class SearchSpace:
    """Log-uniform ranges for rates and weights; uniform for temperature."""

    lr_target: tuple = (1e-4, 3e-3)
    lambda_adv: tuple = (0.1, 3.0)
    lambda_distill: tuple = (0.05, 2.0)
    temperature: tuple = (1.0, 8.0)
    grl_lambda: tuple = (0.3, 3.0)

    def __post_init__(self):
        for name in ("lr_target", "lambda_adv", "lambda_distill",
                     "temperature", "grl_lambda"):
            lo, hi = getattr(self, name)
            if not (0 < lo < hi) or not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError(f"invalid range for {name}: ({lo}, {hi})")


@dataclass
class TrialResult:
    index: int
    config: TrainConfig
    val_accuracy: float


def hyper_search(space: SearchSpace, budget: int, seed: int,
                 bundle: ModelBundle, source_train: WindowedDataset,
                 target_train: UnlabeledWindows, target_val: WindowedDataset,
                 base_cfg: TrainConfig):
    """Seeded random search over the adaptation hyperparameters.

    Each trial re-derives its own rng stream, starts from a fresh copy of
    the trained source encoder and a freshly initialized discriminator,
    and is scored by target-validation accuracy. Returns the best config
    and the full trial table.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")

    def log_uniform(rng, lo, hi):
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    trials = []
    best: Optional[TrialResult] = None
    for i in range(budget):
        rng = derive_rng(seed, "search", i)
        cfg = replace(
            base_cfg,
            lr_target=log_uniform(rng, *space.lr_target),
            lambda_adv=log_uniform(rng, *space.lambda_adv),
            lambda_distill=log_uniform(rng, *space.lambda_distill),
            temperature=float(rng.uniform(*space.temperature)),
            grl_lambda=log_uniform(rng, *space.grl_lambda),
            seed=int(rng.integers(0, 2 ** 62)),
        )
        trial_bundle = ModelBundle(
            config=bundle.config,
            num_classes=bundle.num_classes,
            seed=cfg.seed,
            source_encoder=bundle.source_encoder,
            target_encoder=init_target_from_source(bundle.source_encoder),
            classifier=bundle.classifier,
            discriminator=build_discriminator(
                bundle.config, cfg.seed, grl_lambda=cfg.grl_lambda),
        )
        _, _, stage_log = adapt_target(trial_bundle, source_train,
                                       target_train, target_val, cfg)
        acc, _ = evaluate(trial_bundle.target_encoder, bundle.classifier,
                          bundle.config.encoder, target_val)
        result = TrialResult(index=i, config=cfg, val_accuracy=acc)
        trials.append(result)
        if best is None or acc > best.val_accuracy:
            best = result
    return best.config, trials
