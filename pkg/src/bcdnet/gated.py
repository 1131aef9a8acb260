"""Bidirectional gated units whose state flows across significance branches.

Each layer holds one gated unit per branch (weights are not shared unless
the recurrent-shared variant is requested). The forward sweep runs from
branch 1 to branch N and feeds each unit the hidden and cell state of the
previous branch; the backward sweep runs from N down to 1. Boundary states
are zero.

Gate kernels are stored stacked along the output-channel axis in the order
input gate, forget gate, output gate, candidate input (``i, f, o, in``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import GdnParams, SeParams, gdn, igdn, leaky_relu, se_block
from .tensor import ShapeError, Tensor

DIRECTIONS = ("bi", "down", "up")


@dataclass
class DirectionGates:
    """Gate weights for one sweep direction.

    ``wx`` maps the unit input to the four gate pre-activations. In decoder
    units it emits four sub-pixel copies of each gate channel, which are
    rearranged to double resolution by a pixel shuffle. ``wh`` maps the
    neighbouring branch's hidden state, always at stride 1.
    """

    wx: Tensor
    wh: Tensor
    b: Tensor

    @property
    def hidden_channels(self) -> int:
        return self.b.shape[0] // 4


@dataclass
class GateParams:
    forward: DirectionGates | None = None
    backward: DirectionGates | None = None


@dataclass
class BranchParams:
    """Per-branch fusion stage: SE, 3x3 convolution and normalization."""

    fuse_w: Tensor
    fuse_b: Tensor
    se: SeParams | None = None
    gdn: GdnParams | None = None


@dataclass
class LayerParams:
    mode: str  # "encoder" (stride-2 input path) or "decoder" (pixel-shuffle input path)
    direction: str
    gates: list[GateParams]
    branches: list[BranchParams]
    shared: bool = False
    kernel: int = 3
    norm: str = "gdn"

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    def gate(self, branch: int) -> GateParams:
        return self.gates[0] if self.shared else self.gates[branch]


# ---------------------------------------------------------------------------
# the gated step
# ---------------------------------------------------------------------------


def _cell_state(pre: Tensor, c_in: Tensor | None) -> Tensor:
    """c = f * c_in + i * in, from stacked pre-activations."""
    p = pre.data
    C = p.shape[1] // 4
    i = T._sigmoid(p[:, :C])
    f = T._sigmoid(p[:, C : 2 * C])
    g = np.tanh(p[:, 3 * C :])
    c = i * g
    if c_in is not None:
        if c_in.shape != c.shape:
            raise ShapeError(f"cell state shape {c_in.shape} does not match gates {c.shape}")
        c = c + f * c_in.data
        cd = c_in.data
    else:
        cd = None

    def back(gc):
        dpre = np.zeros_like(p)
        dpre[:, :C] = gc * g * i * (1.0 - i)
        if cd is not None:
            dpre[:, C : 2 * C] = gc * cd * f * (1.0 - f)
        dpre[:, 3 * C :] = gc * i * (1.0 - g * g)
        return (dpre, gc * f) if cd is not None else (dpre,)

    parents = (pre,) if c_in is None else (pre, c_in)
    return T.make_op(c, parents, back)


def _hidden_state(pre: Tensor, c: Tensor) -> Tensor:
    """h = o * tanh(c)."""
    p = pre.data
    C = p.shape[1] // 4
    o = T._sigmoid(p[:, 2 * C : 3 * C])
    tc = np.tanh(c.data)

    def back(gh):
        dpre = np.zeros_like(p)
        dpre[:, 2 * C : 3 * C] = gh * tc * o * (1.0 - o)
        return (dpre, gh * o * (1.0 - tc * tc))

    return T.make_op(o * tc, (pre, c), back)


def gate_preactivation(
    x: Tensor, h_in: Tensor | None, params: DirectionGates, mode: str = "encoder", kernel: int = 3
) -> Tensor:
    pad = kernel // 2
    if mode == "encoder":
        pre = T.conv2d(x, params.wx, stride=2, padding=pad)
    else:
        pre = T.pixel_shuffle(T.conv2d(x, params.wx, padding=pad), 2)
    if h_in is not None:
        if h_in.shape[2:] != pre.shape[2:] or h_in.shape[0] != pre.shape[0]:
            raise ShapeError(
                f"hidden state shape {h_in.shape} does not match input path output {pre.shape}"
            )
        pre = pre + T.conv2d(h_in, params.wh, padding=pad)
    return T.bias_add(pre, params.b)


def gated_step(
    x: Tensor,
    h_in: Tensor | None,
    c_in: Tensor | None,
    params: DirectionGates,
    mode: str = "encoder",
    kernel: int = 3,
) -> tuple[Tensor, Tensor]:
    """One gated update: returns ``(h_out, c_out)``.

    ``h_in``/``c_in`` of None stand for the all-zero boundary state.
    """
    pre = gate_preactivation(x, h_in, params, mode, kernel)
    c = _cell_state(pre, c_in)
    return _hidden_state(pre, c), c


def gate_values(pre: np.ndarray) -> dict[str, np.ndarray]:
    """Split stacked pre-activations into the activated gates (for inspection)."""
    C = pre.shape[1] // 4
    return {
        "i": T._sigmoid(pre[:, :C]),
        "f": T._sigmoid(pre[:, C : 2 * C]),
        "o": T._sigmoid(pre[:, 2 * C : 3 * C]),
        "in": np.tanh(pre[:, 3 * C :]),
    }


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def sweep(
    inputs: list[Tensor], params: LayerParams, reverse: bool = False
) -> list[Tensor]:
    """Run one directional sweep; returns the hidden state of every branch."""
    n = len(inputs)
    order = range(n - 1, -1, -1) if reverse else range(n)
    hidden: list[Tensor | None] = [None] * n
    h = c = None
    for l in order:
        gp = params.gate(l)
        gates = gp.backward if reverse else gp.forward
        h, c = gated_step(inputs[l], h, c, gates, params.mode, params.kernel)
        hidden[l] = h
    return hidden


def _fuse(y: Tensor, bp: BranchParams, params: LayerParams) -> Tensor:
    if bp.se is not None:
        y = se_block(y, bp.se)
    k = bp.fuse_w.shape[-1]
    y = T.conv2d(y, bp.fuse_w, bp.fuse_b, padding=k // 2)
    if params.norm == "leaky_relu":
        return leaky_relu(y)
    return gdn(y, bp.gdn) if params.mode == "encoder" else igdn(y, bp.gdn)


def gated_layer(inputs: list[Tensor], params: LayerParams) -> list[Tensor]:
    """Apply one bidirectional (or unidirectional) gated layer to N branches."""
    n = len(inputs)
    if n != params.n_branches:
        raise ValueError(f"layer has {params.n_branches} branches, got {n} inputs")
    shape = inputs[0].shape
    for t in inputs[1:]:
        if t.shape != shape:
            raise ShapeError(f"branch inputs differ in shape: {shape} vs {t.shape}")
    fwd = sweep(inputs, params) if params.direction in ("bi", "down") else None
    bwd = sweep(inputs, params, reverse=True) if params.direction in ("bi", "up") else None
    outputs = []
    for l in range(n):
        if fwd is not None and bwd is not None:
            y = T.concat((fwd[l], bwd[l]), axis=1)
        else:
            y = fwd[l] if fwd is not None else bwd[l]
        outputs.append(_fuse(y, params.branches[l], params))
    return outputs


def bagu_layer(inputs: list[Tensor], params: LayerParams) -> list[Tensor]:
    if params.mode != "encoder":
        raise ValueError("bagu_layer needs encoder-mode parameters")
    return gated_layer(inputs, params)


def ibagu_layer(inputs: list[Tensor], params: LayerParams) -> list[Tensor]:
    if params.mode != "decoder":
        raise ValueError("ibagu_layer needs decoder-mode parameters")
    return gated_layer(inputs, params)


def unidirectional_layer(inputs: list[Tensor], params: LayerParams, direction: str) -> list[Tensor]:
    if direction not in ("down", "up"):
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
    if params.direction != direction:
        raise ValueError(f"parameters were built for direction {params.direction!r}")
    return gated_layer(inputs, params)


def recurrent_shared_layer(inputs: list[Tensor], params: LayerParams) -> list[Tensor]:
    if not params.shared:
        raise ValueError("recurrent_shared_layer needs shared gate parameters")
    return gated_layer(inputs, params)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _uniform(rng, shape, fan_in, dtype):
    s = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-s, s, shape).astype(dtype), requires_grad=True)


def init_direction(
    rng: np.random.Generator, c_in: int, c_out: int, mode: str, kernel: int, dtype=T.DEFAULT_DTYPE
) -> DirectionGates:
    sub = 4 if mode == "decoder" else 1
    wx = _uniform(rng, (4 * c_out * sub, c_in, kernel, kernel), c_in * kernel * kernel, dtype)
    wh = _uniform(rng, (4 * c_out, c_out, kernel, kernel), c_out * kernel * kernel, dtype)
    b = np.zeros(4 * c_out, dtype=dtype)
    b[c_out : 2 * c_out] = 1.0  # forget gate
    return DirectionGates(wx, wh, Tensor(b, requires_grad=True))


def init_layer(
    rng: np.random.Generator,
    n_branches: int,
    c_in: int,
    c_out: int,
    mode: str = "encoder",
    direction: str = "bi",
    shared: bool = False,
    use_se: bool = True,
    norm: str = "gdn",
    kernel: int = 3,
    fuse_kernel: int = 3,
    se_ratio: int = 4,
    dtype=T.DEFAULT_DTYPE,
) -> LayerParams:
    if mode not in ("encoder", "decoder"):
        raise ValueError(f"unknown layer mode {mode!r}")
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    if norm not in ("gdn", "leaky_relu"):
        raise ValueError(f"unknown normalization {norm!r}")

    def make_gates():
        return GateParams(
            forward=init_direction(rng, c_in, c_out, mode, kernel, dtype)
            if direction in ("bi", "down")
            else None,
            backward=init_direction(rng, c_in, c_out, mode, kernel, dtype)
            if direction in ("bi", "up")
            else None,
        )

    gates = [make_gates()] if shared else [make_gates() for _ in range(n_branches)]
    c_y = 2 * c_out if direction == "bi" else c_out
    branches = []
    for _ in range(n_branches):
        branches.append(
            BranchParams(
                fuse_w=_uniform(rng, (c_out, c_y, fuse_kernel, fuse_kernel), c_y * fuse_kernel**2, dtype),
                fuse_b=Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
                se=SeParams.init(c_y, se_ratio, rng, dtype) if use_se else None,
                gdn=GdnParams.init(c_out, dtype) if norm == "gdn" else None,
            )
        )
    return LayerParams(mode, direction, gates, branches, shared, kernel, norm)
