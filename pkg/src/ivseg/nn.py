"""Small 3D dilated-convolution networks with hand-written gradients.

Two fixed architectures are provided:

  - a segmentation network: three shared conv blocks feeding a policy head
    (per-voxel softmax over the discrete action set) and a value head
    (per-voxel scalar return estimate);
  - an action-confidence network: six conv blocks plus a 1x1x1 projection
    and a logistic squashing, mapping (state, action) to per-voxel
    confidence in (0, 1).

Every block is two 3x3x3 dilated convolutions (stride 1, zero padding that
preserves the spatial shape), each followed by a rectifier. Convolutions
run as im2col + one sgemm; backward passes rebuild the column matrix from
the cached layer input instead of storing it.

Parameters live in a flat name -> float32 array dict (a NamedTensorSet),
so the Adam optimizer and checkpoint IO stay architecture-agnostic.
Everything is dtype-parameterized; tests run the identical code in float64
for finite-difference comparisons.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterable

import numpy as np

from .volume import NamedTensorSet

Params = NamedTensorSet

_EPS = 1e-7  # clamp inside logarithms and sigmoid saturations


# ---------------------------------------------------------------------------
# Architecture specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvBlockSpec:
    in_channels: int
    out_channels: int
    dilation: int


def _blocks(in_channels: int, widths: Iterable[int], dilations: Iterable[int]) -> tuple[ConvBlockSpec, ...]:
    out = []
    prev = in_channels
    for w, d in zip(widths, dilations, strict=True):
        out.append(ConvBlockSpec(prev, w, d))
        prev = w
    return tuple(out)


@dataclass(frozen=True)
class SegNetSpec:
    """Shared trunk + policy/value heads; widths are free, topology is fixed."""

    shared: tuple[ConvBlockSpec, ...]
    policy_head: tuple[ConvBlockSpec, ...]
    value_head: tuple[ConvBlockSpec, ...]
    n_actions: int = 6
    in_channels: int = 3

    @classmethod
    def build(
        cls,
        shared_widths: tuple[int, ...] = (16, 32, 64),
        head_widths: tuple[int, ...] = (64, 32),
        shared_dilations: tuple[int, ...] = (1, 2, 4),
        head_dilations: tuple[int, ...] = (2, 1),
        in_channels: int = 3,
        n_actions: int = 6,
    ) -> "SegNetSpec":
        shared = _blocks(in_channels, shared_widths, shared_dilations)
        trunk_out = shared[-1].out_channels
        return cls(
            shared=shared,
            policy_head=_blocks(trunk_out, head_widths, head_dilations),
            value_head=_blocks(trunk_out, head_widths, head_dilations),
            n_actions=n_actions,
            in_channels=in_channels,
        )

    @classmethod
    def desk(cls) -> "SegNetSpec":
        """CPU-friendly widths used for desk-scale training."""
        return cls.build(shared_widths=(4, 4, 8), head_widths=(4, 4))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ConfNetSpec:
    """Six conv blocks, 1x1x1 projection to one channel, logistic output."""

    blocks: tuple[ConvBlockSpec, ...]
    in_channels: int = 4

    @classmethod
    def build(
        cls,
        widths: tuple[int, ...] = (16, 32, 64, 64, 32, 16),
        dilations: tuple[int, ...] = (1, 2, 4, 4, 2, 1),
        in_channels: int = 4,
    ) -> "ConfNetSpec":
        return cls(blocks=_blocks(in_channels, widths, dilations), in_channels=in_channels)

    @classmethod
    def desk(cls) -> "ConfNetSpec":
        return cls.build(widths=(2, 4, 4, 4, 4, 2))

    def to_dict(self) -> dict:
        return asdict(self)


def spec_from_dict(d: dict) -> SegNetSpec | ConfNetSpec:
    def blk(seq):
        return tuple(ConvBlockSpec(**b) for b in seq)

    if "shared" in d:
        return SegNetSpec(
            shared=blk(d["shared"]),
            policy_head=blk(d["policy_head"]),
            value_head=blk(d["value_head"]),
            n_actions=int(d["n_actions"]),
            in_channels=int(d["in_channels"]),
        )
    return ConfNetSpec(blocks=blk(d["blocks"]), in_channels=int(d["in_channels"]))


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------

def _conv_names(prefix: str, blocks: tuple[ConvBlockSpec, ...]):
    for i, blk in enumerate(blocks):
        chans = [(blk.in_channels, blk.out_channels), (blk.out_channels, blk.out_channels)]
        for j, (cin, cout) in enumerate(chans):
            yield f"{prefix}.b{i}.c{j}", cin, cout, blk.dilation


def param_shapes(spec: SegNetSpec | ConfNetSpec) -> dict[str, tuple[int, ...]]:
    """Exact tensor names and shapes implied by a network spec."""
    shapes: dict[str, tuple[int, ...]] = {}

    def add_conv(name, cin, cout, ksize):
        shapes[f"{name}.w"] = (cout, cin, ksize, ksize, ksize)
        shapes[f"{name}.b"] = (cout,)

    if isinstance(spec, SegNetSpec):
        groups = [("shared", spec.shared), ("policy", spec.policy_head), ("value", spec.value_head)]
        for prefix, blocks in groups:
            for name, cin, cout, _ in _conv_names(prefix, blocks):
                add_conv(name, cin, cout, 3)
        add_conv("policy.proj", spec.policy_head[-1].out_channels, spec.n_actions, 1)
        add_conv("value.proj", spec.value_head[-1].out_channels, 1, 1)
    else:
        for name, cin, cout, _ in _conv_names("conf", spec.blocks):
            add_conv(name, cin, cout, 3)
        add_conv("conf.proj", spec.blocks[-1].out_channels, 1, 1)
    return shapes


def xavier_init(spec: SegNetSpec | ConfNetSpec, rng: np.random.Generator, dtype=np.float32) -> Params:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    params: Params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype)
        else:
            cout, cin = shape[0], shape[1]
            k = int(np.prod(shape[2:]))
            bound = np.sqrt(6.0 / (cin * k + cout * k))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def group_names(spec: SegNetSpec, group: str) -> list[str]:
    """Parameter names belonging to 'shared', 'policy' or 'value'."""
    return [n for n in param_shapes(spec) if n.startswith(group + ".")]


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, dilation: int) -> np.ndarray:
    """Gather the 27 dilated-neighborhood views of x into (27*C, N), offset-major."""
    c, dz, dy, dx = x.shape
    d = dilation
    n = dz * dy * dx
    xp = np.zeros((c, dz + 2 * d, dy + 2 * d, dx + 2 * d), x.dtype)
    xp[:, d:d + dz, d:d + dy, d:d + dx] = x
    cols = np.empty((27, c, n), x.dtype)
    i = 0
    for kz in range(3):
        for ky in range(3):
            for kx in range(3):
                np.copyto(
                    cols[i].reshape(c, dz, dy, dx),
                    xp[:, kz * d:kz * d + dz, ky * d:ky * d + dy, kx * d:kx * d + dx],
                )
                i += 1
    return cols.reshape(27 * c, n)


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, dilation: int) -> np.ndarray:
    """3x3x3 dilated convolution, stride 1, zero padding, shape-preserving."""
    cout, cin = w.shape[:2]
    cols = _im2col(x, dilation)
    wf = np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1).reshape(cout, 27 * cin))
    y = wf @ cols
    if b is not None:
        y += b[:, None]
    return y.reshape(cout, *x.shape[1:])


def conv3d_vjp(dy: np.ndarray, x: np.ndarray, w: np.ndarray, dilation: int):
    """Gradients of a conv3d output w.r.t. input, weights and bias.

    The input gradient is itself a shape-preserving convolution of dy with
    the channel-transposed, spatially flipped kernel, which reuses the
    im2col+gemm fast path instead of a scatter-add.
    """
    cout, cin = w.shape[:2]
    n = x.shape[1] * x.shape[2] * x.shape[3]
    cols = _im2col(x, dilation)
    dyf = dy.reshape(cout, n)
    dwf = dyf @ cols.T                            # (cout, 27*cin)
    dw = np.ascontiguousarray(
        dwf.reshape(cout, 3, 3, 3, cin).transpose(0, 4, 1, 2, 3)
    )
    db = dyf.sum(axis=1)
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    dx = conv3d(dy, wt, None, dilation)
    return dx, dw, db


def conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    cout, cin = w.shape[:2]
    y = w.reshape(cout, cin) @ x.reshape(cin, -1)
    y += b[:, None]
    return y.reshape(cout, *x.shape[1:])


def conv1x1_vjp(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    cout, cin = w.shape[:2]
    dyf = dy.reshape(cout, -1)
    xf = x.reshape(cin, -1)
    dw = (dyf @ xf.T).reshape(w.shape)
    db = dyf.sum(axis=1)
    dx = (w.reshape(cout, cin).T @ dyf).reshape(x.shape)
    return dx, dw, db


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, _EPS, 1.0 - _EPS)


def softmax_channels(z: np.ndarray) -> np.ndarray:
    """Softmax across axis 0 (the action channels), per voxel."""
    m = z.max(axis=0, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# Block stacks with taped forward/backward
# ---------------------------------------------------------------------------

def _run_blocks(params: Params, prefix: str, blocks, x: np.ndarray, tape: list) -> np.ndarray:
    for name, _, _, dilation in _conv_names(prefix, blocks):
        w, b = params[f"{name}.w"], params[f"{name}.b"]
        y = conv3d(x, w, b, dilation)
        np.maximum(y, 0.0, out=y)  # fused rectifier; cached y doubles as the mask
        tape.append((name, x, y, dilation))
        x = y
    return x


def _backward_blocks(params: Params, tape: list, dy: np.ndarray, grads: Params) -> np.ndarray:
    for name, x, y, dilation in reversed(tape):
        dy = dy * (y > 0)
        dx, dw, db = conv3d_vjp(dy, x, params[f"{name}.w"], dilation)
        _acc(grads, f"{name}.w", dw)
        _acc(grads, f"{name}.b", db)
        dy = dx
    return dy


def _acc(grads: Params, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


def seg_forward(params: Params, spec: SegNetSpec, state: np.ndarray, want_cache: bool = True):
    """Run the segmentation network.

    ``state`` stacks the aligned (image, probability, hint) channels as
    (3, D, H, W). Returns per-voxel action probabilities (|A|, D, H, W),
    the value map (D, H, W), and a cache for the backward pass.
    """
    if state.ndim != 4 or state.shape[0] != spec.in_channels:
        raise ValueError(f"expected ({spec.in_channels}, D, H, W) state, got {state.shape}")
    shared_tape: list = []
    trunk = _run_blocks(params, "shared", spec.shared, state, shared_tape)

    policy_tape: list = []
    pfeat = _run_blocks(params, "policy", spec.policy_head, trunk, policy_tape)
    logits = conv1x1(pfeat, params["policy.proj.w"], params["policy.proj.b"])
    policy = softmax_channels(logits)

    value_tape: list = []
    vfeat = _run_blocks(params, "value", spec.value_head, trunk, value_tape)
    value = conv1x1(vfeat, params["value.proj.w"], params["value.proj.b"])[0]

    cache = None
    if want_cache:
        cache = {
            "shared": shared_tape, "policy": policy_tape, "value": value_tape,
            "trunk": trunk, "pfeat": pfeat, "vfeat": vfeat, "policy_out": policy,
        }
    return policy, value, cache


def seg_backward(params: Params, spec: SegNetSpec, cache: dict,
                 dlogits: np.ndarray, dvalue: np.ndarray,
                 grads: Params | None = None) -> Params:
    """Accumulate gradients given upstream grads at the policy logits and value."""
    if grads is None:
        grads = {}
    dpfeat, dw, db = conv1x1_vjp(dlogits, cache["pfeat"], params["policy.proj.w"])
    _acc(grads, "policy.proj.w", dw)
    _acc(grads, "policy.proj.b", db)
    dtrunk_p = _backward_blocks(params, cache["policy"], dpfeat, grads)

    dvfeat, dw, db = conv1x1_vjp(dvalue[None], cache["vfeat"], params["value.proj.w"])
    _acc(grads, "value.proj.w", dw)
    _acc(grads, "value.proj.b", db)
    dtrunk_v = _backward_blocks(params, cache["value"], dvfeat, grads)

    _backward_blocks(params, cache["shared"], dtrunk_p + dtrunk_v, grads)
    return grads


def conf_forward(params: Params, spec: ConfNetSpec, state_action: np.ndarray, want_cache: bool = True):
    """Run the confidence network on (image, prob, hint, action/0.4) channels."""
    if state_action.ndim != 4 or state_action.shape[0] != spec.in_channels:
        raise ValueError(
            f"expected ({spec.in_channels}, D, H, W) input, got {state_action.shape}"
        )
    tape: list = []
    feat = _run_blocks(params, "conf", spec.blocks, state_action, tape)
    z = conv1x1(feat, params["conf.proj.w"], params["conf.proj.b"])[0]
    c = sigmoid(z)
    cache = {"tape": tape, "feat": feat, "conf": c} if want_cache else None
    return c, cache


def conf_backward(params: Params, spec: ConfNetSpec, cache: dict,
                  dz: np.ndarray, grads: Params | None = None) -> Params:
    """Accumulate gradients given the upstream grad at the pre-sigmoid logit."""
    if grads is None:
        grads = {}
    dfeat, dw, db = conv1x1_vjp(dz[None], cache["feat"], params["conf.proj.w"])
    _acc(grads, "conf.proj.w", dw)
    _acc(grads, "conf.proj.b", db)
    _backward_blocks(params, cache["tape"], dfeat, grads)
    return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moments plus a shared step counter."""

    m: Params
    v: Params
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Params, lr: float, names: Iterable[str] | None = None) -> "AdamState":
        names = list(params if names is None else names)
        zeros = lambda n: np.zeros_like(params[n])
        return cls(m={n: zeros(n) for n in names}, v={n: zeros(n) for n in names}, step=0, lr=lr)


def adam_step(params: Params, grads: Params, state: AdamState) -> Params:
    """Standard Adam update with bias correction over the state's tensors."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, m in state.m.items():
        p = params[name]
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
