"""Layer graphs and the desk-scale architecture builders."""
from __future__ import annotations

from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import InvalidConfig, InvalidDepth, ShapeMismatch, UnresolvedShape
from .layers import (
    Activation,
    ActivationKind,
    BatchNorm2d,
    Conv2d,
    Dropout,
    Flatten,
    GlobalAvgPool,
    Layer,
    Linear,
    MaxPool2d,
)
from .series import LSLU, BlendedActivation
from .tensor import Tensor


class ResidualBegin(Layer):
    """Marks the input of a residual block; the value is kept for the skip path."""

    kind = "res_begin"


class ResidualEnd(Layer):
    """Adds the skip path (optionally through ``shortcut`` nodes) to the main path."""

    kind = "res_end"

    def __init__(self, shortcut: Optional[list] = None, name=None):
        super().__init__(name)
        self.shortcut = list(shortcut or [])

    def set_training(self, flag):
        self.training = flag
        for node in self.shortcut:
            node.set_training(flag)

    def skip(self, x: Tensor, rng=None) -> Tensor:
        for node in self.shortcut:
            x = node(x, rng)
        return x

    def skip_shape(self, shape: tuple) -> tuple:
        for node in self.shortcut:
            shape = node.output_shape(shape)
        return shape


class LayerGraph:
    """Ordered network description executed front to back.

    ``input_shape`` is the per-sample ``(C, H, W)`` shape; it lets the graph
    resolve shapes and count FLOPs without running data through it.
    """

    def __init__(self, nodes: Sequence[Layer], input_shape: Optional[tuple] = None, meta: Optional[dict] = None):
        self.nodes = list(nodes)
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.meta = dict(meta or {})
        self.training = True
        names = [n.name for n in self.walk()]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise InvalidConfig(f"duplicate node names: {sorted(dup)}")
        depth = 0
        for node in self.nodes:
            depth += isinstance(node, ResidualBegin) - isinstance(node, ResidualEnd)
            if depth < 0:
                raise InvalidConfig("residual end without a matching begin")
        if depth:
            raise InvalidConfig("unbalanced residual markers")
        if self.input_shape is not None:
            self.output_shape()

    # -- traversal ----------------------------------------------------------------
    def walk(self) -> Iterator[Layer]:
        """All nodes including those nested in residual shortcuts."""
        for node in self.nodes:
            yield node
            if isinstance(node, ResidualEnd):
                yield from node.shortcut

    def __iter__(self):
        return iter(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def node_count(self) -> int:
        return sum(1 for _ in self.walk())

    def __getitem__(self, name: str) -> Layer:
        for node in self.walk():
            if node.name == name:
                return node
        raise KeyError(name)

    def lslu_layers(self) -> list:
        return [n for n in self.walk() if isinstance(n, LSLU) and n.n_terms > 0]

    def activation_layers(self) -> list:
        return [n for n in self.walk() if isinstance(n, (Activation, LSLU, BlendedActivation))]

    # -- parameters -----------------------------------------------------------------
    def named_parameters(self) -> dict:
        out = {}
        for node in self.walk():
            for key, t in node.params().items():
                out[f"{node.name}.{key}"] = t
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict:
        out = {}
        for node in self.walk():
            for key, arr in node.buffers().items():
                out[f"{node.name}.{key}"] = arr
        return out

    def state_dict(self) -> dict:
        state = {k: t.data for k, t in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        expected = set(params) | set(buffers)
        missing, extra = expected - set(state), set(state) - expected
        if missing or extra:
            raise ShapeMismatch(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for key, t in params.items():
            value = np.asarray(state[key])
            if value.shape != t.shape:
                raise ShapeMismatch(f"tensor {key!r}: checkpoint shape {value.shape} != model shape {t.shape}")
            t.data = value.astype(t.dtype, copy=True)
            t.grad = None
        for key, current in buffers.items():
            value = np.asarray(state[key])
            if value.shape != np.asarray(current).shape:
                raise ShapeMismatch(f"tensor {key!r}: checkpoint shape {value.shape} != model shape {np.shape(current)}")
            node_name, _, buf = key.rpartition(".")
            self[node_name].set_buffer(buf, value.copy())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def astype(self, dtype) -> "LayerGraph":
        for node in self.walk():
            node.astype(np.dtype(dtype))
        return self

    # -- modes ------------------------------------------------------------------------
    def train(self) -> "LayerGraph":
        self.training = True
        for node in self.nodes:
            node.set_training(True)
        return self

    def eval(self) -> "LayerGraph":
        self.training = False
        for node in self.nodes:
            node.set_training(False)
        return self

    # -- execution --------------------------------------------------------------------
    def forward(self, x, rng=None, capture: Optional[dict] = None) -> Tensor:
        """Run the graph.  ``capture``, if given, receives each node's input array by name."""
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        stack = []
        for node in self.nodes:
            if capture is not None:
                capture[node.name] = x.data
            if isinstance(node, ResidualBegin):
                stack.append(x)
                continue
            if isinstance(node, ResidualEnd):
                skip_in = stack.pop()
                if capture is not None:
                    capture[node.name + ".skip"] = skip_in.data
                x = T.add(x, node.skip(skip_in, rng))
                continue
            x = node(x, rng)
        return x

    __call__ = forward

    def kink_margin(self, x, rng=None) -> float:
        """Smallest distance of any node input from that node's kinks (inf if smooth)."""
        capture: dict = {}
        self.forward(x, rng, capture=capture)
        margin = float("inf")
        for node in self.nodes:
            margin = min(margin, node.kink_margin(capture[node.name]))
        return margin

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-style forward over ``x`` in fixed-size chunks."""
        outs = []
        for start in range(0, len(x), batch_size):
            chunk = Tensor(x[start : start + batch_size], dtype=self.dtype)
            with T.no_grad():
                outs.append(self.forward(chunk).data)
        return np.concatenate(outs, axis=0) if outs else np.zeros((0,))

    # -- shapes -----------------------------------------------------------------------
    def node_shapes(self) -> list:
        """``(node, input_shape, output_shape)`` per top-level node."""
        if self.input_shape is None:
            raise UnresolvedShape("graph has no input_shape")
        shape = self.input_shape
        stack, rows = [], []
        for node in self.nodes:
            if isinstance(node, ResidualBegin):
                stack.append(shape)
                rows.append((node, shape, shape))
                continue
            if isinstance(node, ResidualEnd):
                skip = node.skip_shape(stack.pop())
                if skip != shape:
                    raise ShapeMismatch(f"{node.name}: skip shape {skip} != main path {shape}")
                rows.append((node, shape, shape))
                continue
            out = node.output_shape(shape)
            rows.append((node, shape, out))
            shape = out
        return rows

    def output_shape(self) -> tuple:
        rows = self.node_shapes()
        return rows[-1][2] if rows else self.input_shape

    def summary(self) -> str:
        lines = []
        for node, s_in, s_out in self.node_shapes():
            lines.append(f"{node.name:<28}{type(node).__name__:<20}{str(s_in):<18}{s_out}")
        return "\n".join(lines)


def count_params_flops(g: LayerGraph) -> tuple:
    """Trainable scalar count and per-sample FLOPs.

    Convention: conv = 2*C_in*k*k*C_out*H_out*W_out, linear = 2*in*out,
    batch norm and every activation (base, series or blended) = C*H*W,
    pooling, dropout, reshapes and residual additions = 0.  Parameters include
    the four per-term scalars of each series activation; BN running
    statistics are buffers and are not counted.
    """
    params = sum(t.size for t in g.parameters())
    flops = 0
    stack = []
    for node, s_in, _ in g.node_shapes():
        flops += node.flops(s_in)
        if isinstance(node, ResidualBegin):
            stack.append(s_in)
        elif isinstance(node, ResidualEnd):
            # shortcut nodes run on the block input
            shape = stack.pop()
            for sc in node.shortcut:
                flops += sc.flops(shape)
                shape = sc.output_shape(shape)
    return int(params), int(flops)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _activation(name: str, n_terms: int, base: ActivationKind, use_lslu: bool, dtype) -> Layer:
    if use_lslu and n_terms > 0:
        return LSLU(n_terms, base, dtype=dtype, name=name)
    return Activation(base, name=name)


def build_mini_vanillanet(
    depth: int = 5,
    width: int = 32,
    n_terms: int = 3,
    base="relu",
    dropout: float = 0.0,
    in_channels: int = 3,
    input_size: int = 32,
    n_classes: int = 10,
    blend: bool = False,
    head: str = "gap",
    seed: int = 0,
    dtype=np.float32,
    rng: Optional[np.random.Generator] = None,
) -> LayerGraph:
    """Stem (4x4 conv, stride 4) then ``depth - 2`` stages, then a linear classifier.

    Each stage is ``1x1 conv -> BN -> LSLU -> maxpool`` (pooling is skipped once
    the map is 1x1).  With ``blend=True`` a stage gains a leading
    ``1x1 conv -> BN -> blended activation`` whose blend ratio the trainer ramps
    to 1, after which the two 1x1 convs can be merged.  All stages keep
    ``width`` channels.  ``head`` is ``gap`` (global average pool) or
    ``flatten`` (keep the final spatial grid) in front of the classifier.
    """
    if not 4 <= depth <= 6:
        raise InvalidDepth(f"mini-VanillaNet depth must lie in [4, 6], got {depth}")
    if width < 1 or input_size < 4:
        raise InvalidConfig("width must be >= 1 and input_size >= 4")
    base = ActivationKind.parse(base)
    rng = rng if rng is not None else np.random.default_rng(seed)
    nodes: list = [
        Conv2d(in_channels, width, 4, stride=4, bias=False, rng=rng, dtype=dtype, name="stem.conv"),
        BatchNorm2d(width, dtype=dtype, name="stem.bn"),
        _activation("stem.act", n_terms, base, True, dtype),
    ]
    size = input_size // 4
    c = width
    for s in range(1, depth - 1):
        c_out = width
        prefix = f"stage{s}"
        if blend:
            nodes += [
                Conv2d(c, c, 1, bias=False, rng=rng, dtype=dtype, name=f"{prefix}.conv0"),
                BatchNorm2d(c, dtype=dtype, name=f"{prefix}.bn0"),
                BlendedActivation(base, 0.0, name=f"{prefix}.blend"),
            ]
        nodes += [
            Conv2d(c, c_out, 1, bias=False, rng=rng, dtype=dtype, name=f"{prefix}.conv"),
            BatchNorm2d(c_out, dtype=dtype, name=f"{prefix}.bn"),
            _activation(f"{prefix}.act", n_terms, base, True, dtype),
        ]
        if size >= 2:
            nodes.append(MaxPool2d(2, name=f"{prefix}.pool"))
            size //= 2
        c = c_out
    nodes += _head(head, c, size, dropout, n_classes, rng, dtype)
    meta = {
        "arch": "mini-vanillanet",
        "depth": depth,
        "width": width,
        "n_terms": n_terms,
        "base": str(base),
        "dropout": dropout,
        "in_channels": in_channels,
        "input_size": input_size,
        "n_classes": n_classes,
        "blend": blend,
        "head": head,
    }
    return LayerGraph(nodes, (in_channels, input_size, input_size), meta)


def build_mini_resnet(
    blocks: Sequence[int] = (1, 1),
    width: int = 16,
    n_terms: int = 3,
    base="relu",
    mode: str = "downsampling",
    lslu_mask: Optional[Sequence[bool]] = None,
    dropout: float = 0.0,
    in_channels: int = 3,
    input_size: int = 32,
    n_classes: int = 10,
    head: str = "gap",
    stem_stride: int = 1,
    seed: int = 0,
    dtype=np.float32,
    rng: Optional[np.random.Generator] = None,
) -> LayerGraph:
    """Basic-block ResNet: 3x3 stem, then stages of residual blocks.

    Stage ``s`` has ``blocks[s]`` blocks of width ``width * 2**s``; the first
    block of every stage after the first uses stride 2 and a 1x1 projection
    shortcut.  In ``downsampling`` mode only the activation right after the
    strided convolution of each stride-2 block is a series activation (and
    ``lslu_mask`` can switch individual stride-2 blocks off); in ``full`` mode
    every activation is.  ``stem_stride`` sets the stride of the 3x3 stem and
    ``head`` is as in :func:`build_mini_vanillanet`.
    """
    mode = {"downsampling_only": "downsampling"}.get(mode, mode)
    if mode not in ("full", "downsampling"):
        raise InvalidConfig(f"insertion mode must be 'full' or 'downsampling', got {mode!r}")
    blocks = [int(b) for b in blocks]
    if not blocks or any(b < 1 for b in blocks):
        raise InvalidConfig("need at least one stage with at least one block")
    n_down = len(blocks) - 1
    if lslu_mask is None:
        lslu_mask = [True] * n_down
    lslu_mask = [bool(m) for m in lslu_mask]
    if len(lslu_mask) != n_down:
        raise InvalidConfig(f"lslu_mask needs {n_down} entries (one per stride-2 block)")
    base = ActivationKind.parse(base)
    rng = rng if rng is not None else np.random.default_rng(seed)
    full = mode == "full"

    nodes: list = [
        Conv2d(in_channels, width, 3, stride=stem_stride, pad=1, bias=False, rng=rng, dtype=dtype, name="stem.conv"),
        BatchNorm2d(width, dtype=dtype, name="stem.bn"),
        _activation("stem.act", n_terms, base, full, dtype),
    ]
    if stem_stride < 1:
        raise InvalidConfig("stem_stride must be >= 1")
    size = T.conv_output_size(input_size, 3, stem_stride, 1)
    c = width
    down_idx = 0
    for s, count in enumerate(blocks):
        c_out = width * 2**s
        for b in range(count):
            stride = 2 if (s > 0 and b == 0) else 1
            prefix = f"layer{s + 1}.{b}"
            down_lslu = stride == 2 and lslu_mask[down_idx]
            shortcut = []
            if stride != 1 or c != c_out:
                shortcut = [
                    Conv2d(c, c_out, 1, stride=stride, bias=False, rng=rng, dtype=dtype, name=f"{prefix}.down.conv"),
                    BatchNorm2d(c_out, dtype=dtype, name=f"{prefix}.down.bn"),
                ]
            nodes += [
                ResidualBegin(name=f"{prefix}.begin"),
                Conv2d(c, c_out, 3, stride=stride, pad=1, bias=False, rng=rng, dtype=dtype, name=f"{prefix}.conv1"),
                BatchNorm2d(c_out, dtype=dtype, name=f"{prefix}.bn1"),
                _activation(f"{prefix}.act1", n_terms, base, full or down_lslu, dtype),
                Conv2d(c_out, c_out, 3, pad=1, bias=False, rng=rng, dtype=dtype, name=f"{prefix}.conv2"),
                BatchNorm2d(c_out, dtype=dtype, name=f"{prefix}.bn2"),
                ResidualEnd(shortcut, name=f"{prefix}.end"),
                _activation(f"{prefix}.act2", n_terms, base, full, dtype),
            ]
            if stride == 2:
                down_idx += 1
                size = T.conv_output_size(size, 3, 2, 1)
            c = c_out
    nodes += _head(head, c, size, dropout, n_classes, rng, dtype)
    meta = {
        "arch": "mini-resnet",
        "blocks": blocks,
        "width": width,
        "n_terms": n_terms,
        "base": str(base),
        "insertion": mode,
        "lslu_mask": lslu_mask,
        "dropout": dropout,
        "in_channels": in_channels,
        "input_size": input_size,
        "n_classes": n_classes,
        "head": head,
        "stem_stride": stem_stride,
    }
    return LayerGraph(nodes, (in_channels, input_size, input_size), meta)


def _head(kind: str, channels: int, size: int, dropout: float, n_classes: int, rng, dtype) -> list:
    if kind == "gap":
        pool, features = GlobalAvgPool(name="head.gap"), channels
    elif kind == "flatten":
        pool, features = Flatten(name="head.flatten"), channels * size * size
    else:
        raise InvalidConfig(f"head must be 'gap' or 'flatten', got {kind!r}")
    return [pool, Dropout(dropout, name="head.dropout"), Linear(features, n_classes, rng=rng, dtype=dtype, name="head.fc")]


def build_from_meta(meta: dict, dtype=np.float32, seed: int = 0) -> LayerGraph:
    """Rebuild a graph from the ``meta`` dict the builders attach (used by checkpoints)."""
    meta = dict(meta)
    arch = meta.pop("arch", None)
    if arch == "mini-vanillanet":
        return build_mini_vanillanet(dtype=dtype, seed=seed, **meta)
    if arch == "mini-resnet":
        mode = meta.pop("insertion", "downsampling")
        return build_mini_resnet(mode=mode, dtype=dtype, seed=seed, **meta)
    raise InvalidConfig(f"unknown architecture {arch!r}")


def with_n_terms(meta: dict, n_terms: int) -> dict:
    out = dict(meta)
    out["n_terms"] = n_terms
    return out


def iter_blocks(g: LayerGraph) -> Iterable[list]:
    """Yield the node lists between matching residual markers."""
    current = None
    for node in g.nodes:
        if isinstance(node, ResidualBegin):
            current = []
        elif isinstance(node, ResidualEnd):
            yield current + [node]
            current = None
        elif current is not None:
            current.append(node)
