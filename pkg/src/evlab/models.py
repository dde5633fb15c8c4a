"""Network definitions, freeze policies, and weight persistence.

All classifiers share the input contract of one trial = a C x 256 signal
(or a batch thereof).  The main architecture runs three same-padded
convolutions with kernel sizes 3, 7, 11 (32 filters each) in parallel,
sums them elementwise, max-pools by 2, and rasterizes to a 4096-vector
regardless of the channel count; a normalized dense stack then reduces
4096 -> 1024 -> 128 -> 1 with a sigmoid head.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as tn
from .errors import DimensionError, PersistenceError, UsageError
from .rng import Rng
from .tensor import Tensor

TRIAL_SAMPLES = 256
CONV_FILTERS = 32
CONV_KERNELS = (3, 7, 11)
RASTER_WIDTH = CONV_FILTERS * (TRIAL_SAMPLES // 2)  # 4096 for every channel count
EMBEDDING_WIDTH = 128


class FreezePolicy(Enum):
    """Which parameters stay fixed during fine-tuning."""

    NONE = "none"
    THROUGH_PENULTIMATE = "penultimate"  # only the final 128 -> 1 layer trains
    LAST_TWO_DENSE = "last2"             # 1024 -> 128 and 128 -> 1 train


@dataclass
class Model:
    """Named-parameter graph with per-parameter freeze flags."""

    kind: str                    # "parallel_conv" | "ffnn" | "decoder"
    c_in: int
    params: dict[str, Tensor]
    frozen: frozenset = frozenset()

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Model(self.kind, self.c_in, params, self.frozen)


def _linear_params(params, name, out_dim, in_dim, rng):
    params[f"{name}.weight"] = tn.xavier_init((out_dim, in_dim), rng)
    params[f"{name}.bias"] = Tensor(np.zeros(out_dim), requires_grad=True)


def _norm_params(params, name, width):
    params[f"{name}.gamma"] = Tensor(np.ones(width), requires_grad=True)
    params[f"{name}.beta"] = Tensor(np.zeros(width), requires_grad=True)


def build_parallel_conv_net(c_in: int, rng: Rng) -> Model:
    """Parallel-kernel convolutional classifier for C x 256 trials."""
    if c_in < 1:
        raise UsageError(f"channel count must be >= 1, got {c_in}")
    params: dict[str, Tensor] = {}
    for k in CONV_KERNELS:
        params[f"conv{k}.weight"] = tn.xavier_init((CONV_FILTERS, c_in, k), rng)
        params[f"conv{k}.bias"] = Tensor(np.zeros(CONV_FILTERS), requires_grad=True)
    _norm_params(params, "norm0", RASTER_WIDTH)
    _linear_params(params, "fc1", 1024, RASTER_WIDTH, rng)
    _norm_params(params, "norm1", 1024)
    _linear_params(params, "fc2", EMBEDDING_WIDTH, 1024, rng)
    _norm_params(params, "norm2", EMBEDDING_WIDTH)
    _linear_params(params, "fc3", 1, EMBEDDING_WIDTH, rng)
    return Model("parallel_conv", c_in, params)


def build_ffnn(c_in: int, rng: Rng) -> Model:
    """Dense feed-forward benchmark on the rasterized C*256 signal."""
    if c_in < 1:
        raise UsageError(f"channel count must be >= 1, got {c_in}")
    params: dict[str, Tensor] = {}
    _linear_params(params, "fc1", 1024, c_in * TRIAL_SAMPLES, rng)
    _norm_params(params, "norm1", 1024)
    _linear_params(params, "fc2", 256, 1024, rng)
    _norm_params(params, "norm2", 256)
    _linear_params(params, "fc3", 1, 256, rng)
    return Model("ffnn", c_in, params)


def build_decoder(c_in: int, rng: Rng) -> Model:
    """Embedding-to-signal decoder: 128 -> 1024 -> 4096 -> C*256.

    Normalization and activation sit between all layers but the last.
    """
    if c_in < 1:
        raise UsageError(f"channel count must be >= 1, got {c_in}")
    params: dict[str, Tensor] = {}
    _linear_params(params, "dec1", 1024, EMBEDDING_WIDTH, rng)
    _norm_params(params, "dnorm1", 1024)
    _linear_params(params, "dec2", RASTER_WIDTH, 1024, rng)
    _norm_params(params, "dnorm2", RASTER_WIDTH)
    _linear_params(params, "dec3", c_in * TRIAL_SAMPLES, RASTER_WIDTH, rng)
    return Model("decoder", c_in, params)


def _as_input(model: Model, x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    shape = t.data.shape
    if shape[-2:] != (model.c_in, TRIAL_SAMPLES) or t.data.ndim not in (2, 3):
        raise DimensionError(
            f"input shape {shape} does not match model ({model.c_in}, {TRIAL_SAMPLES})")
    return t


def _conv_trunk(model: Model, x: Tensor) -> Tensor:
    p = model.params
    summed = None
    for k in CONV_KERNELS:
        y = tn.conv1d_same(x, p[f"conv{k}.weight"], p[f"conv{k}.bias"])
        summed = y if summed is None else tn.add(summed, y)
    pooled = tn.max_pool1d(summed, 2)
    h = tn.raster(pooled)
    h = tn.elu(tn.layer_norm(h, p["norm0.gamma"], p["norm0.beta"]))
    h = tn.linear_affine(h, p["fc1.weight"], p["fc1.bias"])
    h = tn.elu(tn.layer_norm(h, p["norm1.gamma"], p["norm1.beta"]))
    h = tn.linear_affine(h, p["fc2.weight"], p["fc2.bias"])
    return tn.elu(tn.layer_norm(h, p["norm2.gamma"], p["norm2.beta"]))


def penultimate_embedding(model: Model, x) -> Tensor:
    """128-vector tap after the 1024 -> 128 stack (post-norm, post-ELU)."""
    if model.kind != "parallel_conv":
        raise UsageError(f"no embedding tap on a '{model.kind}' model")
    return _conv_trunk(model, _as_input(model, x))


def forward_prob(model: Model, x) -> Tensor:
    """Probability of class 1: shape () for one trial, (B,) for a batch."""
    t = _as_input(model, x)
    p = model.params
    if model.kind == "parallel_conv":
        h = _conv_trunk(model, t)
    elif model.kind == "ffnn":
        h = tn.raster(t)
        h = tn.linear_affine(h, p["fc1.weight"], p["fc1.bias"])
        h = tn.elu(tn.layer_norm(h, p["norm1.gamma"], p["norm1.beta"]))
        h = tn.linear_affine(h, p["fc2.weight"], p["fc2.bias"])
        h = tn.elu(tn.layer_norm(h, p["norm2.gamma"], p["norm2.beta"]))
    else:
        raise UsageError(f"'{model.kind}' model has no probability head")
    logit = tn.linear_affine(h, p["fc3.weight"], p["fc3.bias"])
    squeezed = tn.reshape(logit, () if t.data.ndim == 2 else (-1,))
    return tn.sigmoid(squeezed)


def decode_embedding(decoder: Model, emb: Tensor) -> Tensor:
    """Reconstruct the rasterized signal (length C*256) from an embedding."""
    if decoder.kind != "decoder":
        raise UsageError(f"expected a decoder model, got '{decoder.kind}'")
    p = decoder.params
    h = tn.linear_affine(emb, p["dec1.weight"], p["dec1.bias"])
    h = tn.elu(tn.layer_norm(h, p["dnorm1.gamma"], p["dnorm1.beta"]))
    h = tn.linear_affine(h, p["dec2.weight"], p["dec2.bias"])
    h = tn.elu(tn.layer_norm(h, p["dnorm2.gamma"], p["dnorm2.beta"]))
    return tn.linear_affine(h, p["dec3.weight"], p["dec3.bias"])


def siamese_prob(model: Model, xa, xb, scale: Tensor, shift: Tensor) -> Tensor:
    """sigmoid(scale * D(emb(xa), emb(xb)) + shift).

    With the convention that pair label 1 means "different classes", a
    positive learned scale maps larger embedding distances to higher
    probabilities.  The affine inside the sigmoid is needed because the
    distance is non-negative, which would otherwise floor the output at 0.5.
    """
    ea = penultimate_embedding(model, xa)
    eb = penultimate_embedding(model, xb)
    d = tn.euclidean_distance(ea, eb)
    return tn.sigmoid(tn.add(tn.mul(d, scale), shift))


# ---------------------------------------------------------------------------
# freeze policies
# ---------------------------------------------------------------------------

def apply_freeze(model: Model, policy: FreezePolicy) -> Model:
    """Return the model with freeze flags set according to the policy."""
    if model.kind != "parallel_conv":
        raise UsageError(f"freeze policies apply to the conv net, not '{model.kind}'")
    if policy is FreezePolicy.NONE:
        frozen = frozenset()
    elif policy is FreezePolicy.THROUGH_PENULTIMATE:
        frozen = frozenset(n for n in model.params if not n.startswith("fc3."))
    elif policy is FreezePolicy.LAST_TWO_DENSE:
        frozen = frozenset(
            n for n in model.params if not (n.startswith("fc2.") or n.startswith("fc3.")))
    else:
        raise UsageError(f"unknown freeze policy {policy!r}")
    model.frozen = frozen
    return model


def count_parameters(model: Model, trainable_only: bool = False) -> int:
    source = model.trainable() if trainable_only else model.params
    return sum(int(p.data.size) for p in source.values())


def expected_parallel_conv_parameter_count(c_in: int) -> int:
    """Independent per-layer count for cross-checking the built model."""
    convs = sum(CONV_FILTERS * c_in * k + CONV_FILTERS for k in CONV_KERNELS)
    norms = 2 * RASTER_WIDTH + 2 * 1024 + 2 * EMBEDDING_WIDTH
    dense = (RASTER_WIDTH * 1024 + 1024) + (1024 * EMBEDDING_WIDTH + EMBEDDING_WIDTH) \
        + (EMBEDDING_WIDTH * 1 + 1)
    return convs + norms + dense


def layer_plan(model: Model) -> list[dict]:
    """JSON-serializable description of the layer sequence."""
    if model.kind == "parallel_conv":
        plan = [
            {"layer": "conv1d_same", "kernel": k, "filters": CONV_FILTERS,
             "in_channels": model.c_in} for k in CONV_KERNELS
        ]
        plan += [
            {"layer": "elementwise_sum", "operands": len(CONV_KERNELS)},
            {"layer": "max_pool1d", "kernel": 2},
            {"layer": "raster", "width": RASTER_WIDTH},
            {"layer": "layer_norm", "width": RASTER_WIDTH},
            {"layer": "elu"},
            {"layer": "linear", "in": RASTER_WIDTH, "out": 1024},
            {"layer": "layer_norm", "width": 1024},
            {"layer": "elu"},
            {"layer": "linear", "in": 1024, "out": EMBEDDING_WIDTH},
            {"layer": "layer_norm", "width": EMBEDDING_WIDTH},
            {"layer": "elu"},
            {"layer": "linear", "in": EMBEDDING_WIDTH, "out": 1},
            {"layer": "sigmoid"},
        ]
    elif model.kind == "ffnn":
        width = model.c_in * TRIAL_SAMPLES
        plan = [
            {"layer": "raster", "width": width},
            {"layer": "linear", "in": width, "out": 1024},
            {"layer": "layer_norm", "width": 1024},
            {"layer": "elu"},
            {"layer": "linear", "in": 1024, "out": 256},
            {"layer": "layer_norm", "width": 256},
            {"layer": "elu"},
            {"layer": "linear", "in": 256, "out": 1},
            {"layer": "sigmoid"},
        ]
    elif model.kind == "decoder":
        out = model.c_in * TRIAL_SAMPLES
        plan = [
            {"layer": "linear", "in": EMBEDDING_WIDTH, "out": 1024},
            {"layer": "layer_norm", "width": 1024},
            {"layer": "elu"},
            {"layer": "linear", "in": 1024, "out": RASTER_WIDTH},
            {"layer": "layer_norm", "width": RASTER_WIDTH},
            {"layer": "elu"},
            {"layer": "linear", "in": RASTER_WIDTH, "out": out},
        ]
    else:
        raise UsageError(f"unknown model kind '{model.kind}'")
    return plan


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_MAGIC = b"EVLW"
_VERSION = 1


def save_weights(model: Model, path) -> None:
    """Binary named-tensor format.

    Layout: magic "EVLW", version u32 LE, then per parameter in model
    order: name length u32, UTF-8 name, rank u32, dims u32 each, raw
    float64 LE values.  Freeze flags are run-time policy and not stored.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        for name, p in model.params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", p.data.ndim))
            for dim in p.data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(p.data.astype("<f8").tobytes())


def _read_exact(fh, n, field_name):
    buf = fh.read(n)
    if len(buf) != n:
        raise PersistenceError(f"truncated file, expected {n} bytes", field=field_name)
    return buf


def load_weights(path) -> Model:
    """Rebuild a model from a weight file; the kind is inferred from names."""
    params: dict[str, Tensor] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise PersistenceError("bad magic, not a weight file", field="magic")
        version, = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise PersistenceError(f"unsupported version {version}", field="version")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise PersistenceError("truncated name length", field="name")
            name_len, = struct.unpack("<I", head)
            try:
                name = _read_exact(fh, name_len, "name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise PersistenceError(f"undecodable name: {exc}", field="name") from None
            rank, = struct.unpack("<I", _read_exact(fh, 4, name))
            if rank > 8:
                raise PersistenceError(f"implausible rank {rank}", field=name)
            dims = struct.unpack(
                f"<{rank}I", _read_exact(fh, 4 * rank, name)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            raw = _read_exact(fh, 8 * count, name)
            data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
            if name in params:
                raise PersistenceError("duplicate parameter", field=name)
            params[name] = Tensor(data, requires_grad=True)

    if "conv3.weight" in params:
        kind = "parallel_conv"
        c_in = params["conv3.weight"].data.shape[1]
    elif "dec1.weight" in params:
        kind = "decoder"
        c_in = params["dec3.weight"].data.shape[0] // TRIAL_SAMPLES
    elif "fc1.weight" in params:
        kind = "ffnn"
        c_in = params["fc1.weight"].data.shape[1] // TRIAL_SAMPLES
    else:
        raise PersistenceError("no recognizable architecture", field="params")
    return Model(kind, int(c_in), params)
