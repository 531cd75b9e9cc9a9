"""Small block-structured residual networks with hand-written reverse mode.

A MiniNet is ``stem -> residual blocks -> relu (+ global average pool for
conv nets) -> linear head``.  Every residual block computes

    out = x + W2 . relu(W1 . x + b1) + b2

with ``.`` either an affine map (``dense``) or a 3x3 same-padded convolution
(``conv``), so a block whose branch parameters are all zero is exactly the
identity.  All arithmetic is float64.

Parameter order (stable, used by checkpoints and freeze masks)::

    stem.weight, stem.bias,
    block1.fc1.weight, block1.fc1.bias, block1.fc2.weight, block1.fc2.bias,
    ...
    head.weight, head.bias

Conv blocks name their layers ``conv1``/``conv2`` instead of ``fc1``/``fc2``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BLOCK_KINDS = ("dense", "conv")
CHECKPOINT_MAGIC = "MININET v1"


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    width: int
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}; expected one of {BLOCK_KINDS}")
        if self.width < 1:
            raise ValueError(f"block width must be positive, got {self.width}")
        if self.activation != "relu":
            raise ValueError(f"only relu activations are supported, got {self.activation!r}")


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    blocks: tuple[BlockSpec, ...]
    num_labels: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise ValueError("a network needs at least one block")
        if self.num_labels < 2:
            raise ValueError(f"num_labels must be >= 2, got {self.num_labels}")
        if any(s < 1 for s in self.input_shape) or len(self.input_shape) not in (1, 3):
            raise ValueError(f"input_shape must be (d,) or (c, h, w), got {self.input_shape}")
        kinds = {b.kind for b in self.blocks}
        if len(kinds) != 1:
            raise ValueError("all blocks must share one kind")
        if self.kind == "conv" and len(self.input_shape) != 3:
            raise ValueError("conv blocks need an image input shape (c, h, w)")
        for i in range(1, len(self.blocks)):
            if self.blocks[i].width != self.blocks[i - 1].width:
                raise ValueError(
                    f"block{i + 1}: residual input width {self.blocks[i - 1].width} "
                    f"does not match block width {self.blocks[i].width}"
                )

    @property
    def kind(self) -> str:
        return self.blocks[0].kind

    @property
    def width(self) -> int:
        return self.blocks[0].width

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def to_string(self) -> str:
        shape = "x".join(str(s) for s in self.input_shape)
        blocks = ",".join(f"{b.kind}:{b.width}" for b in self.blocks)
        return f"input={shape};blocks={blocks};labels={self.num_labels}"

    @classmethod
    def from_string(cls, text: str) -> NetworkSpec:
        fields = dict(part.split("=", 1) for part in text.strip().split(";"))
        try:
            shape = tuple(int(s) for s in fields["input"].split("x"))
            blocks = tuple(
                BlockSpec(kind, int(width))
                for kind, width in (b.split(":") for b in fields["blocks"].split(","))
            )
            return cls(shape, blocks, int(fields["labels"]))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"malformed network spec string {text!r}") from exc


def minimal_spec(input_shape, num_blocks: int = 4, width: int = 32, num_labels: int = 10,
                 kind: str = "dense") -> NetworkSpec:
    return NetworkSpec(tuple(input_shape), tuple(BlockSpec(kind, width) for _ in range(num_blocks)),
                       num_labels)


def param_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    w = spec.width
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.kind == "dense":
        shapes["stem.weight"] = (w, spec.input_size)
        shapes["stem.bias"] = (w,)
        for i in range(1, spec.num_blocks + 1):
            for layer in ("fc1", "fc2"):
                shapes[f"block{i}.{layer}.weight"] = (w, w)
                shapes[f"block{i}.{layer}.bias"] = (w,)
    else:
        shapes["stem.weight"] = (w, spec.input_shape[0], 3, 3)
        shapes["stem.bias"] = (w,)
        for i in range(1, spec.num_blocks + 1):
            for layer in ("conv1", "conv2"):
                shapes[f"block{i}.{layer}.weight"] = (w, w, 3, 3)
                shapes[f"block{i}.{layer}.bias"] = (w,)
    shapes["head.weight"] = (spec.num_labels, w)
    shapes["head.bias"] = (spec.num_labels,)
    return shapes


def block_of(name: str) -> str:
    """Group a parameter name belongs to: 'stem', 'block<i>' or 'head'."""
    return name.split(".", 1)[0]


@dataclass
class Network:
    spec: NetworkSpec
    params: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.spec)
        if list(self.params) != list(expected):
            raise ValueError(f"parameter names/order {list(self.params)} do not match spec {list(expected)}")
        for name, shape in expected.items():
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {shape}")
            self.params[name] = arr

    def copy(self) -> Network:
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()})

    @property
    def names(self) -> list[str]:
        return list(self.params)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] < 1:
            raise ValueError("a batch needs at least one example")
        if self.labels.size and self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(f"{self.inputs.shape[0]} inputs but labels of shape {self.labels.shape}")


def init_network(spec: NetworkSpec, seed: int) -> Network:
    """He-style fan-in scaled Gaussian init; biases start at zero.

    Layers feeding a relu use std sqrt(2/fan_in) and the head uses
    sqrt(1/fan_in).  The last layer of each residual branch uses
    sqrt(1/(fan_in * num_blocks)) so the stacked blocks start close to the
    identity; without it PGD training of deeper nets can stall at chance.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        if ".fc2." in name or ".conv2." in name:
            gain = 1.0 / spec.num_blocks
        elif name.startswith("head."):
            gain = 1.0
        else:
            gain = 2.0
        params[name] = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
    return Network(spec, params)


def init_head(num_labels: int, width: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    return rng.standard_normal((num_labels, width)) * np.sqrt(1.0 / width), np.zeros(num_labels)


# ---------------------------------------------------------------------------
# layer primitives

def _relu(x):
    return np.maximum(x, 0.0)


def _im2col(x):
    # (n, c, h, w) -> (n, c, h, w, 3, 3) windows of the zero-padded input
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(2, 3))


def _conv(cols, weight, bias):
    out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + bias[None, :, None, None]


def _conv_backward(dout, cols, weight):
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    flipped = weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    dx = np.tensordot(_im2col(dout), flipped, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return dw, db, dx


def _affine(x, weight, bias):
    return x @ weight.T + bias


def _shape_inputs(spec: NetworkSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    per_example = int(np.prod(x.shape[1:])) if x.ndim > 1 else -1
    if x.ndim < 2 or per_example != spec.input_size:
        raise ValueError(
            f"layer 'stem': expected inputs of shape (n, {spec.input_shape}) "
            f"but got {x.shape}"
        )
    if spec.kind == "dense":
        return x.reshape(x.shape[0], spec.input_size)
    return x.reshape((x.shape[0],) + spec.input_shape)


# ---------------------------------------------------------------------------
# forward / backward

def _forward(net: Network, x):
    spec, p = net.spec, net.params
    h_in = _shape_inputs(spec, x)
    cache = {"x": h_in}
    if spec.kind == "dense":
        z = _affine(h_in, p["stem.weight"], p["stem.bias"])
        h = _relu(z)
        cache["stem"] = z
        for i in range(1, spec.num_blocks + 1):
            u = _affine(h, p[f"block{i}.fc1.weight"], p[f"block{i}.fc1.bias"])
            r = _relu(u)
            h_next = h + _affine(r, p[f"block{i}.fc2.weight"], p[f"block{i}.fc2.bias"])
            cache[f"block{i}"] = (h, u, r)
            h = h_next
        pen = _relu(h)
    else:
        cols = _im2col(h_in)
        z = _conv(cols, p["stem.weight"], p["stem.bias"])
        h = _relu(z)
        cache["stem"] = (z, cols)
        for i in range(1, spec.num_blocks + 1):
            cols1 = _im2col(h)
            u = _conv(cols1, p[f"block{i}.conv1.weight"], p[f"block{i}.conv1.bias"])
            r = _relu(u)
            cols2 = _im2col(r)
            h_next = h + _conv(cols2, p[f"block{i}.conv2.weight"], p[f"block{i}.conv2.bias"])
            cache[f"block{i}"] = (u, cols1, cols2)
            h = h_next
        pen = _relu(h).mean(axis=(2, 3))
    cache["top"] = h
    cache["pen"] = pen
    logits = _affine(pen, p["head.weight"], p["head.bias"])
    return logits, pen, cache


def _lowest_needed(spec: NetworkSpec, need_params, need_input):
    # deepest layer the backward pass has to reach; 0 is the stem
    if need_input or need_params is True:
        return 0
    if not need_params:
        return spec.num_blocks + 1
    groups = {block_of(n) for n in need_params}
    if "stem" in groups:
        return 0
    blocks = [int(g[5:]) for g in groups if g.startswith("block")]
    return min(blocks, default=spec.num_blocks + 1)


def _backward_body(net: Network, cache, dpen, need_params=True, need_input=True):
    """Backprop a gradient at the penultimate layer down to the input.

    ``need_params`` is a bool or a collection of parameter names; the pass
    stops early once everything requested has been computed.
    """
    spec, p = net.spec, net.params
    grads = {}
    lowest = _lowest_needed(spec, need_params, need_input)
    if lowest > spec.num_blocks:
        return grads, None
    need_params = bool(need_params)
    h_top = cache["top"]
    if spec.kind == "dense":
        dh = dpen * (h_top > 0)
        for i in range(spec.num_blocks, 0, -1):
            h, u, r = cache[f"block{i}"]
            w1, w2 = p[f"block{i}.fc1.weight"], p[f"block{i}.fc2.weight"]
            if need_params:
                grads[f"block{i}.fc2.weight"] = dh.T @ r
                grads[f"block{i}.fc2.bias"] = dh.sum(axis=0)
            du = (dh @ w2) * (u > 0)
            if need_params:
                grads[f"block{i}.fc1.weight"] = du.T @ h
                grads[f"block{i}.fc1.bias"] = du.sum(axis=0)
            if i == lowest:
                return grads, None
            dh = dh + du @ w1
        dz = dh * (cache["stem"] > 0)
        if need_params:
            grads["stem.weight"] = dz.T @ cache["x"]
            grads["stem.bias"] = dz.sum(axis=0)
        dx = dz @ p["stem.weight"]
    else:
        hw = h_top.shape[2] * h_top.shape[3]
        dh = (dpen[:, :, None, None] / hw) * (h_top > 0)
        for i in range(spec.num_blocks, 0, -1):
            u, cols1, cols2 = cache[f"block{i}"]
            dw2, db2, dr = _conv_backward(dh, cols2, p[f"block{i}.conv2.weight"])
            du = dr * (u > 0)
            dw1, db1, dh_branch = _conv_backward(du, cols1, p[f"block{i}.conv1.weight"])
            if need_params:
                grads[f"block{i}.conv2.weight"], grads[f"block{i}.conv2.bias"] = dw2, db2
                grads[f"block{i}.conv1.weight"], grads[f"block{i}.conv1.bias"] = dw1, db1
            if i == lowest:
                return grads, None
            dh = dh + dh_branch
        z, cols = cache["stem"]
        dz = dh * (z > 0)
        dw, db, dx = _conv_backward(dz, cols, p["stem.weight"])
        if need_params:
            grads["stem.weight"], grads["stem.bias"] = dw, db
    return grads, dx


def forward(net: Network, batch) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, penultimate)`` for a Batch or a raw input array."""
    x = batch.inputs if isinstance(batch, Batch) else batch
    logits, pen, _ = _forward(net, x)
    return logits, pen


def _check_labels(labels, num_labels):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-d array of class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= num_labels):
        raise ValueError(f"labels must lie in [0, {num_labels}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def per_example_ce(logits, labels) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"{logits.shape[0]} rows of logits but {labels.shape[0]} labels")
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def loss_ce(logits, labels) -> float:
    """Mean softmax cross-entropy."""
    return float(per_example_ce(logits, labels).mean())


def _dlogits(logits, labels, reduction="mean"):
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels) if reduction == "mean" else g


def loss_and_grads(net: Network, x, labels, *, params=True, inputs=False, reduction="mean"):
    """Loss plus gradients in one pass.

    ``params`` is True (all parameters), False, or a collection of names to
    differentiate; a partial set lets the backward pass stop early.
    ``reduction="sum"`` differentiates the summed loss, which gives each
    example's input gradient at its natural scale.
    Returns ``(loss, param_grads or None, input_grad or None)``.
    """
    logits, pen, cache = _forward(net, x)
    labels = _check_labels(labels, net.spec.num_labels)
    losses = per_example_ce(logits, labels)
    loss = float(losses.mean() if reduction == "mean" else losses.sum())
    dlogits = _dlogits(logits, labels, reduction)
    grads = None
    wanted = list(net.params) if params is True else [n for n in net.params if params and n in params]
    body_grads, dx = _backward_body(net, cache, dlogits @ net.params["head.weight"],
                                    need_params=wanted, need_input=inputs)
    if params is not False:
        grads = {}
        for name in wanted:
            if name == "head.weight":
                grads[name] = dlogits.T @ pen
            elif name == "head.bias":
                grads[name] = dlogits.sum(axis=0)
            else:
                grads[name] = body_grads[name]
    dx_out = None
    if inputs:
        dx_out = dx.reshape(np.shape(x))
    return loss, grads, dx_out


def grad_params(net: Network, batch: Batch) -> dict[str, np.ndarray]:
    return loss_and_grads(net, batch.inputs, batch.labels)[1]


def grad_input(net: Network, batch: Batch) -> np.ndarray:
    return loss_and_grads(net, batch.inputs, batch.labels, params=False, inputs=True)[2]


def penultimate_grad_input(net: Network, x, direction) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``sum_i <direction, penultimate(x_i)>`` w.r.t. the inputs.

    Returns ``(objective per example, input gradient)``.
    """
    _, pen, cache = _forward(net, x)
    direction = np.broadcast_to(np.asarray(direction, dtype=np.float64), pen.shape)
    _, dx = _backward_body(net, cache, direction, need_params=False)
    return (pen * direction).sum(axis=1), dx.reshape(np.shape(x))


# ---------------------------------------------------------------------------
# checkpoints

def checkpoint_bytes(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(f"{CHECKPOINT_MAGIC} {net.spec.to_string()}\n".encode("ascii"))
    for name, arr in net.params.items():
        shape = "x".join(str(s) for s in arr.shape)
        buf.write(f"{name} {shape}\n".encode("ascii"))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path) -> Network:
    data = Path(path).read_bytes()
    stream = io.BytesIO(data)
    header = stream.readline().decode("ascii").rstrip("\n")
    if not header.startswith(CHECKPOINT_MAGIC + " "):
        raise ValueError(f"{path}: not a MiniNet checkpoint (header {header[:32]!r})")
    spec = NetworkSpec.from_string(header[len(CHECKPOINT_MAGIC) + 1:])
    params = {}
    for name, shape in param_shapes(spec).items():
        line = stream.readline().decode("ascii").rstrip("\n")
        got_name, _, got_shape = line.partition(" ")
        if got_name != name or tuple(int(s) for s in got_shape.split("x")) != shape:
            raise ValueError(f"{path}: expected parameter {name} {shape}, found {line!r}")
        count = int(np.prod(shape))
        raw = stream.read(8 * count)
        if len(raw) != 8 * count:
            raise ValueError(f"{path}: truncated data for parameter {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if stream.read(1):
        raise ValueError(f"{path}: trailing bytes after last parameter")
    return Network(spec, params)
