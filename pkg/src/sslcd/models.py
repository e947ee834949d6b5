"""Siamese pretext networks, their losses and per-layer feature extraction.

Both pretext models share the same branch: three same-padded convolutions,
each followed by ReLU. The overlap model fuses the two branch outputs by
signed subtraction and classifies the pair; the triplet model uses the
flattened third-layer activations as an embedding.

Weight tying is structural: one :class:`Branch` object is applied to every
patch, so both "branches" read the very same parameter tensors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

TASKS = ("overlap", "triplet")


@dataclass(frozen=True)
class BranchConfig:
    in_channels: int
    filters_per_layer: tuple[int, int, int] = (32, 32, 32)
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "filters_per_layer", tuple(int(f) for f in self.filters_per_layer))
        if self.in_channels <= 0:
            raise ValueError("in_channels must be positive")
        if len(self.filters_per_layer) != 3 or min(self.filters_per_layer) <= 0:
            raise ValueError("a branch has exactly 3 convolutional layers with positive widths")
        if self.kernel_size <= 0 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")

    def to_json(self) -> dict:
        d = asdict(self)
        d["filters_per_layer"] = list(self.filters_per_layer)
        return d


class Branch:
    def __init__(self, config: BranchConfig, rng: np.random.Generator):
        self.config = config
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        c_in, k = config.in_channels, config.kernel_size
        for c_out in config.filters_per_layer:
            std = np.sqrt(2.0 / (c_in * k * k))  # He init for ReLU
            self.weights.append(Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)), requires_grad=True))
            self.biases.append(Tensor(np.zeros(c_out), requires_grad=True))
            c_in = c_out

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            named[f"conv{i}.weight"] = w
            named[f"conv{i}.bias"] = b
        return named

    def forward(self, x: Tensor, upto: int = 3) -> list[Tensor]:
        """Activations of layers ``1..upto`` for ``[B,H,W]`` or ``[N,B,H,W]`` input."""
        if x.shape[-3] != self.config.in_channels:
            raise ValueError(f"input has {x.shape[-3]} bands, branch expects {self.config.in_channels}")
        acts = []
        h = x
        for w, b in list(zip(self.weights, self.biases))[:upto]:
            h = T.relu(T.conv2d(h, w, b))
            acts.append(h)
        return acts


class SiameseOverlapModel:
    """Pretext task 1: is the patch pair overlapping (0) or disjoint (1)?"""

    task = "overlap"
    n_layers = 4

    def __init__(self, config: BranchConfig, seed: int = 0):
        self.config = config
        self.branch = Branch(config, np.random.default_rng(seed))
        c3 = config.filters_per_layer[2]
        self.head_weight = Tensor(np.zeros((1, c3)), requires_grad=True)
        self.head_bias = Tensor(np.zeros(1), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return self.branch.parameters() + [self.head_weight, self.head_bias]

    def named_parameters(self) -> dict[str, Tensor]:
        named = self.branch.named_parameters()
        named["head.weight"] = self.head_weight
        named["head.bias"] = self.head_bias
        return named

    def fuse(self, p1: Tensor, p2: Tensor) -> Tensor:
        if p1.ndim == 4:
            # one pass over the stacked batch; same parameters either way
            n = p1.shape[0]
            f3 = self.branch.forward(T.concat([p1, p2]))[-1]
            return f3[:n] - f3[n:]
        return self.branch.forward(p1)[-1] - self.branch.forward(p2)[-1]

    def logit(self, p1: Tensor, p2: Tensor) -> Tensor:
        # |.| before pooling: a linear read-out of the signed difference is odd
        # under swapping p1/p2 and so cannot encode "how different"
        pooled = T.global_avg_pool(T.absolute(self.fuse(p1, p2)))
        out = T.linear(pooled, self.head_weight, self.head_bias)
        return out.reshape(out.shape[:-1])


class TripletEmbeddingModel:
    """Pretext task 2: embed patches so overlapping ones land close together."""

    task = "triplet"
    n_layers = 3

    def __init__(self, config: BranchConfig, seed: int = 0):
        self.config = config
        self.branch = Branch(config, np.random.default_rng(seed))

    def parameters(self) -> list[Tensor]:
        return self.branch.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return self.branch.named_parameters()


def build_model(task: str, config: BranchConfig, seed: int = 0):
    if task == "overlap":
        return SiameseOverlapModel(config, seed)
    if task == "triplet":
        return TripletEmbeddingModel(config, seed)
    raise ValueError(f"unknown pretext task {task!r}; expected one of {TASKS}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward_overlap(model: SiameseOverlapModel, p1, p2) -> Tensor:
    """Probability that the pair is non-overlapping (pseudo label 1)."""
    p1, p2 = _as_tensor(p1), _as_tensor(p2)
    if p1.shape != p2.shape:
        raise ValueError(f"patch shapes differ: {list(p1.shape)} vs {list(p2.shape)}")
    return T.sigmoid(model.logit(p1, p2))


def bce_loss(prob, y) -> Tensor:
    """Binary cross-entropy, averaged over a batch; ``prob`` is P(label = 1)."""
    prob = _as_tensor(prob)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), prob.shape)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    p = T.clamp(prob, 1e-7, 1 - 1e-7)
    ll = T.log(p) * Tensor(y) + T.log(1.0 - p) * Tensor(1.0 - y)
    return -T.mean(ll)


def forward_embed(model: TripletEmbeddingModel, p) -> Tensor:
    """Flattened layer-3 activations: ``[B,P,P] -> [D]`` or ``[N,B,P,P] -> [N,D]``."""
    p = _as_tensor(p)
    f3 = model.branch.forward(p)[-1]
    if p.ndim == 3:
        return f3.reshape(-1)
    return f3.reshape(f3.shape[0], -1)


def triplet_l1_loss(f1, f2, f3, margin: float = 1.0, gamma: float = 1.0) -> Tensor:
    """Triplet margin loss on Euclidean distances plus ``gamma`` times mean |f1 - f2|.

    Inputs are ``[D]`` (one triplet) or ``[N, D]`` (batch, averaged).
    """
    f1, f2, f3 = _as_tensor(f1), _as_tensor(f2), _as_tensor(f3)
    if not (f1.shape == f2.shape == f3.shape):
        raise ValueError("triplet embeddings must share a shape")
    if margin <= 0 or gamma < 0:
        raise ValueError("need margin > 0 and gamma >= 0")
    d_pos = f1 - f2
    hinge = T.relu(T.norm2(d_pos, axis=-1) - T.norm2(f1 - f3, axis=-1) + margin)
    l1 = T.mean(T.absolute(d_pos), axis=-1)
    return T.mean(hinge + l1 * gamma)


def extract_features(model, image, layer: int, other=None) -> Tensor:
    """Activation map of ``layer`` for ``image`` (``[B,H,W]`` or batched).

    Layers 1-3 are the branch convolutions. Layer 4 (overlap model only) is
    the fusion map ``f3(image) - f3(other)`` and needs the second image.
    """
    image = _as_tensor(image)
    if layer in (1, 2, 3):
        return model.branch.forward(image, upto=layer)[-1]
    if layer == 4 and isinstance(model, SiameseOverlapModel):
        if other is None:
            raise ValueError("layer 4 is the fusion of an image pair; pass `other`")
        return model.fuse(image, _as_tensor(other))
    raise ValueError(f"invalid layer {layer} for a {model.task} model (valid: 1..{model.n_layers})")


def difference_features(model, t1, t2, layer: int) -> np.ndarray:
    """Signed per-pixel feature difference ``f_l(t1) - f_l(t2)`` as ``[C,H,W]``.

    For layer 4 the fusion map already is that difference.
    """
    with T.no_grad():
        if layer == 4:
            return extract_features(model, t1, 4, other=t2).data
        return extract_features(model, t1, layer).data - extract_features(model, t2, layer).data
