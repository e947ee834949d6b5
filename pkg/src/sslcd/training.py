"""Pretext pre-training, linear change classifiers and cross-validation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import restore, save_checkpoint, snapshot
from .detection import ThresholdResult, f1_tuned_threshold
from .errors import ConfigError, DataError, NumericalError
from .metrics import confusion, metrics
from .models import BranchConfig, bce_loss, build_model, difference_features, forward_overlap, triplet_l1_loss
from .optim import Adam
from .raster import RasterPair, decode_raster, encode_raster
from .sampling import (
    PatchExample,
    SamplerConfig,
    overlap_epoch,
    sample_labeled_patches,
    stack_batch,
    triplet_epoch,
)
from .seeding import child_seed, substream
from .tensor import Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- configs


@dataclass
class PretrainConfig:
    task: str = "overlap"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    gamma: float = 1.0
    margin: float = 1.0
    batch_size: int = 32
    patch_size: int = 64
    pairs_per_image: int = 5
    val_pairs_per_image: int = 20
    early_stop_threshold: float = 0.01
    max_epochs: int = 100
    filters_per_layer: tuple[int, int, int] = (32, 32, 32)
    kernel_size: int = 3
    augment: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.task not in ("overlap", "triplet"):
            raise ConfigError(f"unknown pretext task {self.task!r}")
        if min(self.lr, self.beta1, self.beta2, self.margin) <= 0 or self.weight_decay < 0 or self.gamma < 0:
            raise ConfigError("learning rate, betas and margin must be positive; decay and gamma non-negative")
        if not 0 < self.early_stop_threshold < 1:
            raise ConfigError("early-stop threshold must lie in (0, 1)")
        if min(self.batch_size, self.patch_size, self.pairs_per_image, self.max_epochs) <= 0:
            raise ConfigError("batch size, patch size, pairs per image and max_epochs must be positive")


@dataclass
class LinearTrainConfig:
    lr: float = 1e-3
    max_epochs: int = 250
    patience: int = 50
    weight_decay: float = 1e-4
    batch_size: int = 8192
    val_fraction: float = 0.2
    class_weights: tuple[float, float] | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.patience >= self.max_epochs:
            raise ConfigError("patience must be smaller than max_epochs")
        if self.lr <= 0 or self.batch_size <= 0 or not 0 <= self.val_fraction < 1:
            raise ConfigError("invalid linear training configuration")


# ---------------------------------------------------------------- early stopping


def early_stop_epoch(val_losses: Sequence[float], threshold: float = 0.01) -> int | None:
    """First 1-based epoch whose loss is not at least ``threshold`` (relative) below the previous one."""
    for i in range(1, len(val_losses)):
        if not val_losses[i] <= val_losses[i - 1] * (1.0 - threshold):
            return i + 1
    return None


def patience_stop_epoch(val_losses: Sequence[float], patience: int) -> int | None:
    """First 1-based epoch at which ``patience`` epochs have passed without a new best."""
    best = float("inf")
    since = 0
    for i, v in enumerate(val_losses):
        if v < best:
            best, since = v, 0
        else:
            since += 1
            if since >= patience:
                return i + 1
    return None


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainResult:
    model: object
    log: list[dict]
    best_epoch: int
    stopped_epoch: int
    stop_reason: str
    test: dict | None = None


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def _overlap_batch_loss(model, batch: list[PatchExample]):
    (p1, p2), y = stack_batch(batch)
    prob = forward_overlap(model, Tensor(p1), Tensor(p2))
    return bce_loss(prob, y), prob.data, y


def _triplet_batch_loss(model, batch: list[PatchExample], cfg: PretrainConfig):
    (p1, p2, p3), _ = stack_batch(batch)
    n = p1.shape[0]
    f = model.branch.forward(Tensor(np.concatenate([p1, p2, p3])))[-1]
    f = f.reshape(3 * n, -1)
    return triplet_l1_loss(f[:n], f[n : 2 * n], f[2 * n :], cfg.margin, cfg.gamma), None, None


def _batch_loss(model, batch, cfg):
    if cfg.task == "overlap":
        return _overlap_batch_loss(model, batch)
    return _triplet_batch_loss(model, batch, cfg)


def evaluate_pretext(model, examples: list[PatchExample], cfg: PretrainConfig) -> dict:
    """Mean loss (and accuracy at 0.5 for the overlap task) over fixed examples."""
    total, n, correct = 0.0, 0, 0
    with T.no_grad():
        for batch in _batches(examples, cfg.batch_size):
            loss, prob, y = _batch_loss(model, batch, cfg)
            total += loss.item() * len(batch)
            n += len(batch)
            if prob is not None:
                correct += int(np.sum((prob > 0.5) == (y == 1)))
    out = {"loss": total / n}
    if cfg.task == "overlap":
        out["accuracy"] = 100.0 * correct / n
    return out


def _fixed_examples(pairs, cfg: PretrainConfig, stream: str) -> list[PatchExample]:
    sampler = SamplerConfig(cfg.patch_size, cfg.val_pairs_per_image, cfg.seed, augmentation_enabled=False)
    rng = substream(cfg.seed, stream)
    return overlap_epoch(pairs, sampler, rng) if cfg.task == "overlap" else triplet_epoch(pairs, sampler, rng)


def initial_model(cfg: PretrainConfig, band_count: int):
    """The untrained model ``pretrain`` starts from for this config and seed."""
    config = BranchConfig(band_count, tuple(cfg.filters_per_layer), cfg.kernel_size)
    return build_model(cfg.task, config, seed=child_seed(cfg.seed, "init"))


def pretrain(
    train_pairs: list[RasterPair],
    val_pairs: list[RasterPair],
    cfg: PretrainConfig,
    test_pairs: list[RasterPair] | None = None,
    out_dir=None,
) -> PretrainResult:
    """Train a pretext model with Adam until the validation loss stalls.

    Training stops at the first epoch whose validation loss is not at least
    ``early_stop_threshold`` below the previous epoch's, or at ``max_epochs``.
    The returned model holds the best-validation parameters. If ``out_dir`` is
    given, the checkpoint and a JSON-lines log are written there.
    """
    cfg.validate()
    if not train_pairs or not val_pairs:
        raise DataError("pretraining needs non-empty train and validation splits")
    if {p.id for p in train_pairs} & {p.id for p in val_pairs}:
        raise DataError("train and validation splits overlap")
    bands = train_pairs[0].bands
    model = initial_model(cfg, bands)
    opt = Adam(model.parameters(), cfg.lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    sampler = SamplerConfig(cfg.patch_size, cfg.pairs_per_image, cfg.seed, cfg.augment)
    rng = substream(cfg.seed, "pretrain/train")
    val_examples = _fixed_examples(val_pairs, cfg, "pretrain/val")
    epoch_fn = overlap_epoch if cfg.task == "overlap" else triplet_epoch

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")

    records: list[dict] = []
    best_loss, best_epoch, best_params = float("inf"), 0, snapshot(model)
    stop_reason = "max_epochs"
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.time()
        examples = epoch_fn(train_pairs, sampler, rng)
        total = 0.0
        try:
            for batch in _batches(examples, cfg.batch_size):
                loss, _, _ = _batch_loss(model, batch, cfg)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(batch)
            val = evaluate_pretext(model, val_examples, cfg)
        except NumericalError as exc:
            restore(model, best_params)
            if out is not None:
                save_checkpoint(model, out, seed=cfg.seed, epoch=best_epoch, extra={"config": _cfg_json(cfg)})
            raise NumericalError(f"epoch {epoch}: {exc}; kept checkpoint from epoch {best_epoch}") from exc

        record = {"epoch": epoch, "train_loss": total / len(examples), "val_loss": val["loss"], "metric": val.get("accuracy")}
        records.append(record)
        log.info("epoch %d train %.5f val %.5f metric %s", epoch, record["train_loss"], val["loss"], record["metric"])
        if out is not None:
            with open(out / "train_log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps({**record, "timing": {"seconds": round(time.time() - started, 3)}}) + "\n")

        if val["loss"] < best_loss:
            best_loss, best_epoch, best_params = val["loss"], epoch, snapshot(model)
        if early_stop_epoch([r["val_loss"] for r in records], cfg.early_stop_threshold) == epoch:
            stop_reason = "early_stop"
            break

    restore(model, best_params)
    test = evaluate_pretext(model, _fixed_examples(test_pairs, cfg, "pretrain/test"), cfg) if test_pairs else None
    if out is not None:
        save_checkpoint(model, out, seed=cfg.seed, epoch=best_epoch, extra={"config": _cfg_json(cfg), "test": test})
    return PretrainResult(model, records, best_epoch, epoch, stop_reason, test)


def _cfg_json(cfg) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


# ---------------------------------------------------------------- linear classifier


class LinearClassifier:
    """Softmax over (unchanged, changed) from a single linear layer."""

    def __init__(self, in_features: int):
        self.in_features = in_features
        self.weight = Tensor(np.zeros((2, in_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(2), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def logits(self, x) -> Tensor:
        return T.linear(x if isinstance(x, Tensor) else Tensor(x), self.weight, self.bias)

    def predict_proba(self, x: np.ndarray, chunk: int = 1 << 18) -> np.ndarray:
        """Probability of "changed" for rows of ``x``."""
        x = np.asarray(x, dtype=np.float32)
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected {self.in_features} features, got {x.shape[-1]}")
        out = []
        with T.no_grad():
            for i in range(0, x.shape[0], chunk):
                out.append(T.softmax(self.logits(x[i : i + chunk]), axis=-1).data[:, 1])
        return np.concatenate(out) if out else np.zeros(0, np.float32)

    def save(self, path, threshold: ThresholdResult | None = None, extra: dict | None = None) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "weight.raw").write_bytes(encode_raster(self.weight.data))
        (path / "bias.raw").write_bytes(encode_raster(self.bias.data))
        meta = {"in_features": self.in_features, "classes": ["unchanged", "changed"], **(extra or {})}
        if threshold is not None:
            meta["threshold"] = {"value": threshold.threshold, "method": threshold.method}
        (path / "linear.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> tuple["LinearClassifier", dict]:
        path = Path(path)
        try:
            meta = json.loads((path / "linear.json").read_text(encoding="utf-8"))
            model = cls(int(meta["in_features"]))
            w = decode_raster((path / "weight.raw").read_bytes())
            b = decode_raster((path / "bias.raw").read_bytes())
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot load linear classifier from {path}: {exc}") from None
        if w.shape != model.weight.shape or b.shape != model.bias.shape:
            raise DataError("linear classifier files do not match their metadata")
        model.weight.data[...] = w
        model.bias.data[...] = b
        return model, meta


def class_weights(y: np.ndarray) -> np.ndarray:
    """Inverse class frequencies, scaled to mean 1."""
    y = np.asarray(y).astype(int)
    counts = np.bincount(y, minlength=2).astype(np.float64)
    if np.any(counts == 0):
        raise DataError("both classes must be present to weight the cross-entropy")
    inv = counts.sum() / counts
    return inv / inv.mean()


def weighted_cross_entropy(logits: Tensor, y: np.ndarray, weights: np.ndarray) -> Tensor:
    """``sum_i w[y_i] * nll_i / sum_i w[y_i]``; equals plain mean CE for equal weights."""
    y = np.asarray(y).astype(int)
    w = np.asarray(weights, dtype=np.float64)[y]
    nll = -T.log_softmax(logits, axis=-1)[np.arange(y.size), y]
    return T.tensor_sum(nll * Tensor(w / w.sum()))


@dataclass
class LinearTrainResult:
    model: LinearClassifier
    log: list[dict]
    best_epoch: int
    stopped_epoch: int
    weights: np.ndarray


def train_linear(
    x: np.ndarray,
    y: np.ndarray,
    cfg: LinearTrainConfig,
    x_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
) -> LinearTrainResult:
    """Fit a :class:`LinearClassifier` with weighted cross-entropy and patience-based stopping.

    Without an explicit validation set, ``val_fraction`` of the rows is held out.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y).astype(int).ravel()
    if x.ndim != 2 or x.shape[0] != y.size:
        raise DataError("features must be [N, D] with one label per row")
    if np.unique(y).size < 2:
        raise DataError("training data contains a single class")
    rng = substream(cfg.seed, "linear")
    if x_val is None:
        order = rng.permutation(y.size)
        n_val = int(round(cfg.val_fraction * y.size))
        x_val, y_val = x[order[:n_val]], y[order[:n_val]]
        x, y = x[order[n_val:]], y[order[n_val:]]
    weights = np.asarray(cfg.class_weights, dtype=np.float64) if cfg.class_weights else class_weights(y)

    model = LinearClassifier(x.shape[1])
    opt = Adam(model.parameters(), cfg.lr, weight_decay=cfg.weight_decay)
    records = []
    best = (float("inf"), 0, snapshot_linear(model))
    stopped = cfg.max_epochs
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(y.size)
        total = 0.0
        for i in range(0, y.size, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss = weighted_cross_entropy(model.logits(x[idx]), y[idx], weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * idx.size
        if y_val is not None and len(y_val):
            with T.no_grad():
                val_loss = weighted_cross_entropy(model.logits(x_val), y_val, weights).item()
        else:
            val_loss = total / y.size
        records.append({"epoch": epoch, "train_loss": total / y.size, "val_loss": val_loss})
        if val_loss < best[0]:
            best = (val_loss, epoch, snapshot_linear(model))
        if epoch - best[1] >= cfg.patience:
            stopped = epoch
            break
    model.weight.data[...], model.bias.data[...] = best[2]
    return LinearTrainResult(model, records, best[1], stopped, weights)


def snapshot_linear(model: LinearClassifier):
    return model.weight.data.copy(), model.bias.data.copy()


# ---------------------------------------------------------------- cross-validation


@dataclass
class FoldPlan:
    folds: list[list[str]]

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_ids(self, i: int) -> list[str]:
        return [pid for j, fold in enumerate(self.folds) if j != i for pid in fold]


def make_fold_plan(pair_ids: Sequence[str], k: int = 3, seed: int | None = None) -> FoldPlan:
    """Split ids into ``k`` disjoint folds of (near-)equal size, in order unless ``seed`` is given."""
    ids = list(pair_ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("pair ids must be unique")
    if k < 2 or len(ids) < k:
        raise ConfigError(f"cannot make {k} folds from {len(ids)} labelled pairs")
    if seed is not None:
        ids = [ids[i] for i in substream(seed, "folds").permutation(len(ids))]
    bounds = np.linspace(0, len(ids), k + 1).round().astype(int)
    return FoldPlan([ids[bounds[i] : bounds[i + 1]] for i in range(k)])


@dataclass
class LabeledSample:
    """Pixel features for sampled patches of one labelled pair."""

    pair_id: str
    features: list[np.ndarray]  # per patch, [P*P, C]
    labels: list[np.ndarray]  # per patch, [P*P]


def sample_layer_features(
    model, pairs: list[RasterPair], layer: int, patches_per_image: int, patch_size: int, seed: int
) -> dict[str, LabeledSample]:
    """Signed feature differences at the pixels of seeded patch crops.

    Features are extracted once on the full image, so crops see real context
    at their borders. Patch locations depend only on ``seed`` and the pair id,
    never on the model or layer, so every experiment sees the same pixels in
    the same order.
    """
    out = {}
    for pair in pairs:
        diff = difference_features(model, pair.t1, pair.t2, layer)
        rng = substream(seed, f"labeled/{pair.id}")
        crops = sample_labeled_patches(pair, patches_per_image, patch_size, rng)
        c = diff.shape[0]
        feats = [ex.rects[0].crop(diff).reshape(c, -1).T for ex in crops]
        labels = [ex.label_mask.reshape(-1).astype(int) for ex in crops]
        out[pair.id] = LabeledSample(pair.id, feats, labels)
    return out


def _stack(samples: list[LabeledSample], patch_idx=None):
    feats, labels = [], []
    for s in samples:
        idx = range(len(s.features)) if patch_idx is None else patch_idx[s.pair_id]
        feats += [s.features[i] for i in idx]
        labels += [s.labels[i] for i in idx]
    return np.concatenate(feats), np.concatenate(labels)


@dataclass
class CVResult:
    layer: int
    fold_aa: list[float | None]
    mean_aa: float | None
    excluded_folds: list[int] = field(default_factory=list)


def run_cv(
    plan: FoldPlan,
    layer: int,
    model,
    pairs: list[RasterPair],
    cfg: LinearTrainConfig,
    patches_per_image: int = 100,
    patch_size: int = 16,
    seed: int = 0,
) -> CVResult:
    """Mean Average Accuracy of per-pixel linear classifiers over the folds of ``plan``.

    Each fold trains on the other folds' patches (20% of them held out for
    early stopping) and is scored at probability 0.5 on its own patches. A
    fold without changed pixels has undefined AA and is excluded.
    """
    by_id = {p.id: p for p in pairs}
    missing = [pid for fold in plan.folds for pid in fold if pid not in by_id]
    if missing:
        raise DataError(f"fold plan references unknown pairs {missing}")
    samples = sample_layer_features(model, [by_id[pid] for fold in plan.folds for pid in fold], layer, patches_per_image, patch_size, seed)
    fold_aa: list[float | None] = []
    excluded = []
    for i in range(plan.k):
        train = [samples[pid] for pid in plan.train_ids(i)]
        rng = substream(seed, f"cv/holdout/{i}")
        holdout = {}
        fit = {}
        for s in train:
            order = rng.permutation(len(s.features))
            n_val = int(round(cfg.val_fraction * len(order)))
            holdout[s.pair_id], fit[s.pair_id] = order[:n_val], order[n_val:]
        x, y = _stack(train, fit)
        xv, yv = _stack(train, holdout)
        result = train_linear(x, y, cfg, xv, yv)
        xt, yt = _stack([samples[pid] for pid in plan.folds[i]])
        pred = (result.model.predict_proba(xt) > 0.5).astype(int)
        aa = metrics(confusion(pred, yt))["average_accuracy"]
        if aa is None:
            log.warning("fold %d has no changed pixels; excluded from the mean", i)
            excluded.append(i)
        fold_aa.append(aa)
    defined = [a for a in fold_aa if a is not None]
    return CVResult(layer, fold_aa, float(np.mean(defined)) if defined else None, excluded)


def train_change_classifier(
    model,
    layer: int,
    pairs: list[RasterPair],
    cfg: LinearTrainConfig,
    patches_per_image: int = 100,
    patch_size: int = 16,
    seed: int = 0,
) -> tuple[LinearClassifier, ThresholdResult]:
    """Fit the final change classifier on all labelled pairs and tune its F1 threshold on them."""
    samples = list(sample_layer_features(model, pairs, layer, patches_per_image, patch_size, seed).values())
    x, y = _stack(samples)
    result = train_linear(x, y, cfg)
    threshold = f1_tuned_threshold(result.model.predict_proba(x), y)
    return result.model, threshold
