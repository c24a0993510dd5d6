"""The four patch-matching networks, their training loop and checkpoints.

Two-channel networks stack both 96x96 patches as the channels of one image.
Siamese networks run each patch through one weight-shared branch, concatenate
the two 96-element branch outputs (first patch first) and feed the
192-vector to a small fully connected decision network.

Class heads end in a 2-way softmax (index 1 = match) and are trained with
categorical cross-entropy; score heads end in a single sigmoid unit trained
with binary cross-entropy.  Either way the match probability ``p`` is the
quantity downstream evaluation consumes.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, InputError, ShapeError
from .layers import Conv2D, Dense, Dropout, Flatten, MaxPool2x2, ReLU, Sequential, Sigmoid
from .pairgen import PATCH_SIZE, PairSample

log = logging.getLogger(__name__)

TWO_CHANNEL = "two_channel"
SIAMESE = "siamese"
CLASS_HEAD = "class"
SCORE_HEAD = "score"

TWO_CHANNEL_BODY = (
    ("conv", 16, 5), ("pool", 2), ("conv", 32, 5), ("pool", 2),
    ("conv", 32, 5), ("pool", 2), ("conv", 16, 5), ("pool", 2),
    ("fc", 64), ("fc", 32),
)
SIAMESE_BRANCH = (
    ("conv", 16, 5), ("pool", 2), ("conv", 32, 5), ("pool", 2),
    ("conv", 64, 5), ("pool", 2), ("conv", 32, 5), ("pool", 2),
    ("fc", 96), ("fc", 96),
)

ARCH_NAMES = ("two-chan-class", "two-chan-score", "siamese-class", "siamese-score")


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative description of one of the four matching networks.

    ``body`` is the two-channel trunk or the siamese branch; ``decision`` the
    fully connected layers after it, ending in the output layer.
    """

    architecture: str
    head: str
    body: tuple
    decision: tuple
    patch_size: int = PATCH_SIZE

    @classmethod
    def from_name(cls, name: str) -> "NetworkSpec":
        try:
            arch, head = {
                "two-chan-class": (TWO_CHANNEL, CLASS_HEAD),
                "two-chan-score": (TWO_CHANNEL, SCORE_HEAD),
                "siamese-class": (SIAMESE, CLASS_HEAD),
                "siamese-score": (SIAMESE, SCORE_HEAD),
            }[name]
        except KeyError:
            raise ConfigError(f"unknown architecture {name!r}; choose from {', '.join(ARCH_NAMES)}") from None
        return cls.canonical(arch, head)

    @classmethod
    def canonical(cls, architecture: str, head: str) -> "NetworkSpec":
        outputs = 2 if head == CLASS_HEAD else 1
        if architecture == TWO_CHANNEL:
            return cls(architecture, head, TWO_CHANNEL_BODY, (("fc", outputs),))
        return cls(architecture, head, SIAMESE_BRANCH, (("fc", 64), ("fc", outputs)))

    @property
    def name(self) -> str:
        prefix = "two-chan" if self.architecture == TWO_CHANNEL else "siamese"
        return f"{prefix}-{self.head}"

    @property
    def outputs(self) -> int:
        return 2 if self.head == CLASS_HEAD else 1

    def validate(self) -> None:
        if self.architecture not in (TWO_CHANNEL, SIAMESE):
            raise ConfigError(f"unsupported architecture {self.architecture!r}")
        if self.head not in (CLASS_HEAD, SCORE_HEAD):
            raise ConfigError(f"unsupported head {self.head!r}")
        if self.patch_size != PATCH_SIZE:
            raise ConfigError(f"networks take {PATCH_SIZE}x{PATCH_SIZE} patches, not {self.patch_size}")
        expected = NetworkSpec.canonical(self.architecture, self.head)
        if (self.body, self.decision) != (expected.body, expected.decision):
            raise ConfigError(f"layer list does not match the {self.name} configuration")

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "head": self.head,
            "body": [list(l) for l in self.body],
            "decision": [list(l) for l in self.decision],
            "patch_size": self.patch_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            return cls(d["architecture"], d["head"],
                       tuple(tuple(l) for l in d["body"]),
                       tuple(tuple(l) for l in d["decision"]),
                       int(d.get("patch_size", PATCH_SIZE)))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed network spec: {exc}") from None


def parameter_count(spec: NetworkSpec) -> int:
    """Number of weights and biases implied by ``spec``'s layer list."""
    channels = 2 if spec.architecture == TWO_CHANNEL else 1
    size = spec.patch_size
    total = 0
    width = None
    for kind, *args in spec.body:
        if kind == "conv":
            f, k = args
            total += f * channels * k * k + f
            channels, size = f, size - k + 1
        elif kind == "pool":
            size //= args[0]
        else:
            width = width if width is not None else channels * size * size
            total += args[0] * width + args[0]
            width = args[0]
    if spec.architecture == SIAMESE:
        width *= 2
    for _, n in spec.decision:
        total += n * width + n
        width = n
    return total


def _stack(layers, in_channels, size, rng, dropout_rate, final_sigmoid=False):
    """Layers for a conv/pool/fc descriptor list.

    Conv is followed by ReLU; every fully connected layer but the last gets
    ReLU and dropout.  When a pool directly follows a conv the ReLU is placed
    after the pool: max and ReLU commute, and the pooled map is 4x smaller.  The last one gets a sigmoid when ``final_sigmoid``,
    otherwise no activation.
    """
    out = []
    channels, width = in_channels, None
    fcs = [i for i, l in enumerate(layers) if l[0] == "fc"]
    for i, (kind, *args) in enumerate(layers):
        after_conv = i > 0 and layers[i - 1][0] == "conv"
        if after_conv and kind != "pool":
            out.append(ReLU())
        if kind == "conv":
            f, k = args
            out.append(Conv2D(channels, f, k, rng))
            channels, size = f, size - k + 1
        elif kind == "pool":
            if args[0] != 2:
                raise ConfigError("only 2x2 pooling is supported")
            out.append(MaxPool2x2())
            if after_conv:
                out.append(ReLU())
            size //= 2
        elif kind == "fc":
            if width is None:
                out.append(Flatten())
                width = channels * size * size
            out.append(Dense(width, args[0], rng))
            width = args[0]
            if i != fcs[-1]:
                out += [ReLU(), Dropout(dropout_rate)]
            elif final_sigmoid:
                out.append(Sigmoid())
        else:
            raise ConfigError(f"unknown layer kind {kind!r}")
    if layers and layers[-1][0] == "conv":
        out.append(ReLU())
    return out, width


class Network:
    """A built matching network.

    For siamese networks ``branch`` is used for both inputs (the same object,
    hence the same parameters); ``decision`` is the head.  For two-channel
    networks ``body`` holds the whole stack and ``decision`` is empty.
    """

    def __init__(self, spec: NetworkSpec, rng, dropout_rate: float = 0.5):
        spec.validate()
        self.spec = spec
        if spec.architecture == TWO_CHANNEL:
            layers, _ = _stack(spec.body + spec.decision, 2, spec.patch_size, rng, dropout_rate)
            self.body = Sequential(layers)
            self.decision = Sequential([])
        else:
            branch, width = _stack(spec.body, 1, spec.patch_size, rng, dropout_rate, final_sigmoid=True)
            self.body = Sequential(branch)
            head = []
            width *= 2
            for i, (_, n) in enumerate(spec.decision):
                head.append(Dense(width, n, rng))
                if i < len(spec.decision) - 1:
                    head += [ReLU(), Dropout(dropout_rate)]
                width = n
            self.decision = Sequential(head)

    @property
    def branches(self):
        """Left and right siamese branches (one shared object)."""
        if self.spec.architecture != SIAMESE:
            raise ConfigError("two-channel networks have no branches")
        return self.body, self.body

    @property
    def params(self) -> list:
        return self.body.params + self.decision.params

    def grads(self) -> list:
        return self.body.grads() + self.decision.grads()

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params)

    def set_dropout(self, rate: float) -> None:
        for layer in self.body.layers + self.decision.layers:
            if isinstance(layer, Dropout):
                layer.rate = rate

    def regime(self):
        return (self.body.regime(), self.decision.regime())

    def _check(self, a, b):
        a = np.asarray(a, dtype=T.DTYPE)
        b = np.asarray(b, dtype=T.DTYPE)
        s = self.spec.patch_size
        if a.shape != b.shape or a.ndim != 3 or a.shape[1:] != (s, s):
            raise ShapeError(f"expected two N x {s} x {s} patch batches, got {a.shape} and {b.shape}")
        return a, b

    def features(self, patches, train=False, rng=None):
        """Siamese branch output for a batch of patches, ``N x 96``."""
        patches = np.asarray(patches, dtype=T.DTYPE)
        return self.branches[0].forward(patches[None], train, rng)

    def logits(self, a, b, train=False, rng=None):
        """Pre-activation outputs for patch batches ``a`` and ``b`` (``N x 96 x 96`` each)."""
        a, b = self._check(a, b)
        if self.spec.architecture == TWO_CHANNEL:
            return self.body.forward(np.stack([a, b]), train, rng)
        n = len(a)
        f = self.body.forward(np.concatenate([a, b])[None], train, rng)
        return self.decision.forward(np.concatenate([f[:n], f[n:]], axis=1), train, rng)

    def backward(self, grad_logits):
        """Backpropagate a logit gradient; parameter gradients land on the layers."""
        if self.spec.architecture == TWO_CHANNEL:
            return self.body.backward(grad_logits, need_input_grad=False)
        g = self.decision.backward(grad_logits)
        half = g.shape[1] // 2
        return self.body.backward(np.concatenate([g[:, :half], g[:, half:]]), need_input_grad=False)

    def input_backward(self, grad_logits):
        """Like :meth:`backward` but also returns ``(grad_a, grad_b)``."""
        if self.spec.architecture == TWO_CHANNEL:
            gx = self.body.backward(grad_logits)
            return gx[0], gx[1]
        g = self.decision.backward(grad_logits)
        half = g.shape[1] // 2
        gx = self.body.backward(np.concatenate([g[:, :half], g[:, half:]]))
        n = len(grad_logits)
        return gx[0, :n], gx[0, n:]

    def probabilities(self, logits):
        if self.spec.head == CLASS_HEAD:
            return T.softmax(logits)[:, 1]
        return T.sigmoid(logits[:, 0])

    def loss(self, logits, labels):
        """Mean training loss and its gradient w.r.t. the logits."""
        labels = np.asarray(labels)
        if self.spec.head == CLASS_HEAD:
            return T.softmax_cross_entropy(logits, labels.astype(int))
        return T.sigmoid_cross_entropy(logits, labels)

    def loss_and_grad(self, a, b, labels, train=False, rng=None) -> float:
        """Forward, loss and backward for one batch; returns the mean loss."""
        loss, g = self.loss(self.logits(a, b, train, rng), labels)
        self.backward(g)
        return loss

    def predict(self, a, b, batch_size: int = 64) -> np.ndarray:
        """Match probabilities for patch batches in inference mode."""
        a, b = self._check(a, b)
        out = np.empty(len(a))
        for s in range(0, len(a), batch_size):
            out[s:s + batch_size] = self.probabilities(self.logits(a[s:s + batch_size], b[s:s + batch_size]))
        return out


def build(spec: NetworkSpec | str, seed: int | None = 0, rng=None, dropout_rate: float = 0.5) -> Network:
    """Build a network with Glorot-uniform weights and zero biases."""
    if isinstance(spec, str):
        spec = NetworkSpec.from_name(spec)
    if rng is None:
        rng = np.random.default_rng(seed)
    return Network(spec, rng, dropout_rate)


@dataclass(frozen=True)
class MatchOutput:
    p: float

    @property
    def is_match(self) -> bool:
        return self.p > 0.5


def forward_pair(net: Network, a, b, train: bool = False, rng=None) -> MatchOutput:
    """Match probability for a single pair of 96x96 patches."""
    a = np.asarray(a, dtype=T.DTYPE)
    b = np.asarray(b, dtype=T.DTYPE)
    s = net.spec.patch_size
    if a.shape != (s, s) or b.shape != (s, s):
        raise ShapeError(f"patches must be {s}x{s}, got {a.shape} and {b.shape}")
    if train and rng is None:
        rng = np.random.default_rng()
    p = net.probabilities(net.logits(a[None], b[None], train, rng))
    return MatchOutput(float(p[0]))


def augment_symmetric(pairs: Sequence[PairSample]) -> list[PairSample]:
    """The input pairs followed by each pair with its two patches swapped."""
    pairs = list(pairs)
    return pairs + [p.reversed() for p in pairs]


def gradient_check(net: Network, a, b, labels, samples: int = 6, eps: float = 1e-3,
                   rng=None) -> float:
    """Largest relative error between backprop and central differences.

    The full loss is evaluated in inference mode (no dropout).  ``samples``
    coordinates are probed in every weight and bias tensor; probes whose
    perturbation flips a ReLU or changes a pooling winner are redrawn.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    net.loss_and_grad(a, b, labels)
    grads = [g.copy() for pair in net.grads() for g in pair]
    tensors = [t for p in net.params for t in (p.weights, p.bias)]

    def loss():
        return net.loss(net.logits(a, b), labels)[0]

    return T.finite_difference_check(loss, tensors, grads, eps=eps, samples=samples, rng=rng,
                                     signature_fn=net.regime)


def gradient_check_architecture(name: str, seed: int = 0, batch: int = 1, samples: int = 6,
                                eps: float = 1e-3) -> float:
    """:func:`gradient_check` on a fresh ``name`` network with random patches."""
    rng = np.random.default_rng(seed)
    net = build(name, rng=rng)
    a = rng.random((batch, PATCH_SIZE, PATCH_SIZE))
    b = rng.random((batch, PATCH_SIZE, PATCH_SIZE))
    labels = np.arange(batch) % 2
    return gradient_check(net, a, b, labels, samples=samples, eps=eps, rng=rng)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 128
    adam: T.AdamConfig = field(default_factory=T.AdamConfig)
    dropout_rate: float = 0.5
    seed: int = 0
    patience: int | None = None
    max_steps: int | None = None
    target_loss: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be positive")


@dataclass
class TrainHistory:
    """Per-epoch mean training loss (and validation loss when one is given)."""

    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    batch_loss: list = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False


def _arrays(pairs, idx):
    a = np.stack([pairs[i].patch_a for i in idx])
    b = np.stack([pairs[i].patch_b for i in idx])
    y = np.array([pairs[i].label for i in idx])
    return a, b, y


def mean_loss(net: Network, pairs: Sequence[PairSample], batch_size: int = 64) -> float:
    """Inference-mode mean loss over ``pairs``."""
    total = 0.0
    for s in range(0, len(pairs), batch_size):
        a, b, y = _arrays(pairs, range(s, min(s + batch_size, len(pairs))))
        loss, _ = net.loss(net.logits(a, b), y)
        total += loss * len(y)
    return total / len(pairs)


def train(net: Network, pairs: Sequence[PairSample], cfg: TrainConfig = TrainConfig(),
          validation: Sequence[PairSample] | None = None):
    """Mini-batch ADAM training.

    Pairs are reshuffled every epoch by a generator seeded from ``cfg.seed``,
    which also draws the dropout masks.  The last, possibly partial, batch of
    an epoch is used.  With ``cfg.patience`` and a validation list, training
    stops once the validation loss has not improved for that many epochs and
    the best parameters are restored.  ``cfg.max_steps`` and
    ``cfg.target_loss`` (checked against each batch loss) end training early.

    Returns:
        ``(net, history)``; ``net`` is trained in place.
    """
    if len(pairs) == 0:
        raise InputError("cannot train on an empty pair list")
    for p in pairs:
        if p.label not in (0, 1):
            raise InputError(f"labels must be 0 or 1, got {p.label!r}")
    rng = np.random.default_rng(cfg.seed)
    net.set_dropout(cfg.dropout_rate)
    params = net.params
    history = TrainHistory()
    best = (np.inf, None)
    stale = 0
    n = len(pairs)
    done = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            a, b, y = _arrays(pairs, idx)
            loss = net.loss_and_grad(a, b, y, train=True, rng=rng)
            for p, g in zip(params, net.grads()):
                T.adam_step(p, g, cfg.adam)
            history.batch_loss.append(loss)
            history.steps += 1
            total += loss * len(idx)
            seen += len(idx)
            if (cfg.max_steps is not None and history.steps >= cfg.max_steps) or (
                    cfg.target_loss is not None and loss < cfg.target_loss):
                done = True
                break
        history.train_loss.append(total / seen)
        log.info("epoch %d: mean training loss %.6f", epoch + 1, history.train_loss[-1])
        if validation:
            vl = mean_loss(net, validation)
            history.val_loss.append(vl)
            if cfg.patience is not None:
                if vl < best[0]:
                    best = (vl, [(p.weights.copy(), p.bias.copy()) for p in params])
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        history.stopped_early = True
                        done = True
        if done:
            break
    if best[1] is not None and history.stopped_early:
        for p, (w, b) in zip(params, best[1]):
            p.weights[...] = w
            p.bias[...] = b
    return net, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"SNRMATCH"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sII")  # magic, version, spec length
_COUNT = struct.Struct("<Q")
_DIGEST = 32


def to_bytes(net: Network) -> bytes:
    """Serialise ``net``: header, spec JSON, parameter count, float64 LE body, SHA-256."""
    spec = json.dumps(net.spec.to_dict(), sort_keys=True).encode("utf-8")
    blocks = []
    for p in net.params:
        blocks.append(np.ascontiguousarray(p.weights, dtype="<f8").tobytes())
        blocks.append(np.ascontiguousarray(p.bias, dtype="<f8").tobytes())
    body = b"".join(blocks)
    payload = (_HEADER.pack(MAGIC, FORMAT_VERSION, len(spec)) + spec
               + _COUNT.pack(len(body) // 8) + body)
    return payload + hashlib.sha256(payload).digest()


def from_bytes(data: bytes, expected: NetworkSpec | None = None) -> Network:
    if len(data) < _HEADER.size:
        raise FormatError("file too short for a checkpoint header", offset=len(data))
    magic, version, spec_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)
    pos = _HEADER.size
    if len(data) < pos + spec_len + _COUNT.size + _DIGEST:
        raise FormatError("truncated checkpoint header", offset=len(data))
    (count,) = _COUNT.unpack_from(data, pos + spec_len)
    body = pos + spec_len + _COUNT.size
    end = body + 8 * count
    if len(data) != end + _DIGEST:
        raise FormatError(f"expected {end + _DIGEST} bytes, found {len(data)}",
                          offset=min(len(data), end))
    if hashlib.sha256(data[:end]).digest() != data[end:]:
        raise FormatError("checksum mismatch", offset=end)
    try:
        spec = NetworkSpec.from_dict(json.loads(data[pos:pos + spec_len].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable network spec: {exc}", offset=pos) from None
    pos = body
    spec.validate()
    if expected is not None and spec != expected:
        raise ConfigError(f"checkpoint holds {spec.name}, expected {expected.name}")
    net = Network(spec, np.random.default_rng(0))
    if count != net.parameter_count:
        raise ConfigError(f"checkpoint has {count} parameters, {spec.name} needs {net.parameter_count}")
    values = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
    k = 0
    for p in net.params:
        for arr in (p.weights, p.bias):
            arr[...] = values[k:k + arr.size].reshape(arr.shape)
            k += arr.size
    return net


def save(net: Network, path) -> None:
    """Write a checkpoint atomically (temporary file, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(net))
    os.replace(tmp, path)


def load(path, expected: NetworkSpec | None = None) -> Network:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), expected)
