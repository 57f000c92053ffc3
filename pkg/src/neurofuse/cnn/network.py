"""Network description, architecture builders, forward/backward execution.

Two fixed architectures are built here.  The single-modality classifier is
three conv(20 kernels of 5x5x5, same padding, ReLU) + maxpool(2x2x2) pairs,
then FC 1024 -> FC 128 -> FC n_classes with softmax.  The fusion variant
runs two such branches with 10 kernels each (keeping the total weight count
close to the single network), concatenates the two 128-wide branch outputs
into a fusing FC 128, and classifies from there.

``forward``/``backward`` operate on one sample, matching the public
contract; training uses the batched internals.  Gradients are exact for the
categorical cross-entropy loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NeurofuseError
from . import layers as L

__all__ = [
    "InputTooSmall",
    "ShapeMismatch",
    "Conv3D",
    "MaxPool3D",
    "Flatten",
    "FullyConnected",
    "NetworkSpec",
    "Network",
    "build_single_modality",
    "build_fusion",
    "count_parameters",
    "forward",
    "backward",
]

KERNEL = (5, 5, 5)
POOL = (2, 2, 2)


class InputTooSmall(NeurofuseError):
    """Input dims must survive three pooling halvings (>= 8 per axis)."""


class ShapeMismatch(NeurofuseError):
    """Input tensors do not match the network's declared input dims."""


@dataclass(frozen=True)
class Conv3D:
    out_channels: int
    kernel: tuple[int, int, int] = KERNEL
    activation: str = "relu"


@dataclass(frozen=True)
class MaxPool3D:
    kernel: tuple[int, int, int] = POOL


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class FullyConnected:
    out_nodes: int
    activation: str = "relu"  # "relu" | "softmax"


LayerSpec = Conv3D | MaxPool3D | Flatten | FullyConnected


@dataclass(frozen=True)
class NetworkSpec:
    branches: tuple[tuple[LayerSpec, ...], ...]
    merge: FullyConnected | None
    head: FullyConnected

    def __post_init__(self):
        if len(self.branches) not in (1, 2):
            raise ValueError("a network has 1 or 2 branches")
        expected = 20 if len(self.branches) == 1 else 10
        softmax_count = 0
        for branch in self.branches:
            for layer in branch:
                if isinstance(layer, Conv3D):
                    if layer.out_channels != expected:
                        raise ValueError(
                            f"{len(self.branches)}-branch networks use "
                            f"{expected}-kernel convolutions"
                        )
                    if layer.kernel != KERNEL:
                        raise ValueError("convolution kernel is fixed at 5x5x5")
                if isinstance(layer, FullyConnected) and layer.activation == "softmax":
                    softmax_count += 1
        if self.merge is not None and self.merge.activation == "softmax":
            softmax_count += 1
        if self.head.activation != "softmax" or softmax_count:
            raise ValueError("exactly one softmax is allowed, at the head")


def _branch_layers(channels: int) -> tuple[LayerSpec, ...]:
    return (
        Conv3D(channels), MaxPool3D(),
        Conv3D(channels), MaxPool3D(),
        Conv3D(channels), MaxPool3D(),
        Flatten(),
        FullyConnected(1024, "relu"),
        FullyConnected(128, "relu"),
    )


def _check_input_dims(input_dims):
    dims = tuple(int(d) for d in input_dims)
    if len(dims) != 3:
        raise ValueError("input_dims must have 3 entries")
    if any(d < 8 for d in dims):
        raise InputTooSmall(
            f"input dims {dims} cannot survive three pooling halvings"
        )
    return dims


def build_single_modality(input_dims, n_classes: int = 2) -> NetworkSpec:
    """Single-volume classifier: conv/pool x3, FC 1024, FC 128, softmax head."""
    _check_input_dims(input_dims)
    return NetworkSpec(
        branches=(_branch_layers(20),),
        merge=None,
        head=FullyConnected(n_classes, "softmax"),
    )


def build_fusion(input_dims, n_classes: int = 2) -> NetworkSpec:
    """Dual-branch classifier with 10-kernel convs and a fusing FC 128."""
    _check_input_dims(input_dims)
    return NetworkSpec(
        branches=(_branch_layers(10), _branch_layers(10)),
        merge=FullyConnected(128, "relu"),
        head=FullyConnected(n_classes, "softmax"),
    )


def _walk_shapes(branch, input_dims):
    """Yield (layer, in_channels, spatial_dims or flat width) along a branch."""
    spatial = tuple(input_dims)
    channels = 1
    flat = None
    for layer in branch:
        yield layer, channels, spatial, flat
        if isinstance(layer, Conv3D):
            channels = layer.out_channels
        elif isinstance(layer, MaxPool3D):
            spatial = tuple(d // 2 for d in spatial)
            if min(spatial) < 1:
                raise InputTooSmall(f"pooling below one voxel at {spatial}")
        elif isinstance(layer, Flatten):
            flat = channels * int(np.prod(spatial))
        elif isinstance(layer, FullyConnected):
            flat = layer.out_nodes


def _branch_out_width(branch, input_dims) -> int:
    spatial = tuple(input_dims)
    channels = 1
    width = None
    for layer in branch:
        if isinstance(layer, Conv3D):
            channels = layer.out_channels
        elif isinstance(layer, MaxPool3D):
            spatial = tuple(d // 2 for d in spatial)
        elif isinstance(layer, Flatten):
            width = channels * int(np.prod(spatial))
        elif isinstance(layer, FullyConnected):
            width = layer.out_nodes
    return int(width)


def _parameter_layout(spec: NetworkSpec, input_dims):
    """Declaration-ordered list of (name, shape) for every learnable array."""
    layout = []
    for b, branch in enumerate(spec.branches):
        for i, (layer, channels, spatial, flat) in enumerate(
            _walk_shapes(branch, input_dims)
        ):
            tag = f"branch{b}.layer{i}"
            if isinstance(layer, Conv3D):
                layout.append((f"{tag}.w", (layer.out_channels, channels) + KERNEL))
                layout.append((f"{tag}.b", (layer.out_channels,)))
            elif isinstance(layer, FullyConnected):
                layout.append((f"{tag}.w", (flat, layer.out_nodes)))
                layout.append((f"{tag}.b", (layer.out_nodes,)))
    widths = [_branch_out_width(branch, input_dims) for branch in spec.branches]
    head_in = sum(widths)
    if spec.merge is not None:
        layout.append(("merge.w", (head_in, spec.merge.out_nodes)))
        layout.append(("merge.b", (spec.merge.out_nodes,)))
        head_in = spec.merge.out_nodes
    layout.append(("head.w", (head_in, spec.head.out_nodes)))
    layout.append(("head.b", (spec.head.out_nodes,)))
    return layout


def count_parameters(spec: NetworkSpec, input_dims) -> int:
    """Exact learnable scalar count (kernels, FC weights, all biases)."""
    dims = _check_input_dims(input_dims)
    return sum(int(np.prod(shape)) for _, shape in _parameter_layout(spec, dims))


class Network:
    """A NetworkSpec bound to input dims, a dtype and parameter arrays."""

    def __init__(self, spec: NetworkSpec, input_dims, dtype=np.float32):
        self.spec = spec
        self.input_dims = _check_input_dims(input_dims)
        self.dtype = np.dtype(dtype)
        self.layout = _parameter_layout(spec, self.input_dims)
        self.params: list[np.ndarray] = [
            np.zeros(shape, dtype=self.dtype) for _, shape in self.layout
        ]

    def initialize(self, seed: int) -> "Network":
        """He-uniform weights scaled by fan-in; biases zero; seeded."""
        rng = np.random.default_rng(seed)
        for (name, shape), param in zip(self.layout, self.params):
            if name.endswith(".b"):
                param[...] = 0.0
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 2 else shape[0]
                limit = math.sqrt(6.0 / fan_in)
                param[...] = rng.uniform(-limit, limit, shape).astype(self.dtype)
        return self

    def astype(self, dtype) -> "Network":
        other = Network(self.spec, self.input_dims, dtype)
        for dst, src in zip(other.params, self.params):
            dst[...] = src
        return other


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _forward_batch(net: Network, inputs, train: bool):
    """Batched forward; ``inputs`` is one (B,D,H,W) array per branch."""
    if len(inputs) != len(net.spec.branches):
        raise ShapeMismatch(
            f"network has {len(net.spec.branches)} branch(es), got {len(inputs)} input(s)"
        )
    for x in inputs:
        if tuple(x.shape[1:]) != net.input_dims:
            raise ShapeMismatch(
                f"input shape {tuple(x.shape[1:])} != declared {net.input_dims}"
            )
    pidx = 0
    caches = []
    branch_outs = []
    for branch, x in zip(net.spec.branches, inputs):
        h = x.astype(net.dtype, copy=False)[:, None]  # add channel axis
        for layer in branch:
            if isinstance(layer, Conv3D):
                w, b = net.params[pidx], net.params[pidx + 1]
                pidx += 2
                pre, conv_cache = L.conv3d_forward(h, w, b)
                h, relu_cache = L.relu_forward(pre)
                caches.append(("conv", conv_cache, relu_cache))
            elif isinstance(layer, MaxPool3D):
                h, pool_cache = L.maxpool_forward(h)
                caches.append(("pool", pool_cache, None))
            elif isinstance(layer, Flatten):
                caches.append(("flatten", h.shape, None))
                h = h.reshape(h.shape[0], -1)
            elif isinstance(layer, FullyConnected):
                w, b = net.params[pidx], net.params[pidx + 1]
                pidx += 2
                pre, fc_x = L.fc_forward(h, w, b)
                h, relu_cache = L.relu_forward(pre)
                caches.append(("fc", fc_x, relu_cache))
        branch_outs.append(h)

    h = branch_outs[0] if len(branch_outs) == 1 else np.concatenate(branch_outs, axis=1)
    if net.spec.merge is not None:
        w, b = net.params[pidx], net.params[pidx + 1]
        pidx += 2
        pre, fc_x = L.fc_forward(h, w, b)
        h, relu_cache = L.relu_forward(pre)
        caches.append(("merge", fc_x, relu_cache))
    w, b = net.params[pidx], net.params[pidx + 1]
    logits, fc_x = L.fc_forward(h, w, b)
    probs = L.softmax(logits)
    cache = (caches, fc_x) if train else None
    return probs, cache


def _backward_batch(net: Network, cache, probs, targets_onehot):
    """Gradients of the mean cross-entropy over the batch; same order as params."""
    caches, head_x = cache
    batch = probs.shape[0]
    grads = [np.zeros_like(p) for p in net.params]
    pidx = len(net.params)

    dlogits = (probs - targets_onehot.astype(probs.dtype)) / batch
    pidx -= 2
    dh, grads[pidx], grads[pidx + 1] = L.fc_backward(dlogits, head_x, net.params[pidx])

    ci = len(caches)
    if net.spec.merge is not None:
        ci -= 1
        kind, fc_x, relu_cache = caches[ci]
        dpre = L.relu_backward(dh, relu_cache)
        pidx -= 2
        dh, grads[pidx], grads[pidx + 1] = L.fc_backward(dpre, fc_x, net.params[pidx])

    widths = [_branch_out_width(branch, net.input_dims) for branch in net.spec.branches]
    branch_grads = []
    offset = sum(widths)
    for width in reversed(widths):
        branch_grads.insert(0, dh[:, offset - width : offset])
        offset -= width

    for b in range(len(net.spec.branches) - 1, -1, -1):
        branch = net.spec.branches[b]
        dx = branch_grads[b]
        for layer in reversed(branch):
            ci -= 1
            kind, c1, c2 = caches[ci]
            if isinstance(layer, FullyConnected):
                dpre = L.relu_backward(dx, c2)
                pidx -= 2
                dx, grads[pidx], grads[pidx + 1] = L.fc_backward(
                    dpre, c1, net.params[pidx]
                )
            elif isinstance(layer, Flatten):
                dx = dx.reshape(c1)
            elif isinstance(layer, MaxPool3D):
                dx = L.maxpool_backward(dx, c1)
            elif isinstance(layer, Conv3D):
                dpre = L.relu_backward(dx, c2)
                pidx -= 2
                dx, grads[pidx], grads[pidx + 1] = L.conv3d_backward(dpre, c1)
    return grads


# ---------------------------------------------------------------------------
# public single-sample surface
# ---------------------------------------------------------------------------

def forward(net: Network, inputs, train: bool = False):
    """Run one sample through the network.

    ``inputs`` is one array of shape ``input_dims`` per branch.  Returns
    (probs, cache); the cache is None unless ``train`` and is consumed by
    :func:`backward`.
    """
    if isinstance(inputs, np.ndarray):
        inputs = (inputs,)
    batched = [np.asarray(x)[None] for x in inputs]
    probs, cache = _forward_batch(net, batched, train)
    return probs[0], (cache, probs) if train else None


def backward(net: Network, cache, target_onehot):
    """Exact gradients of -sum(target * log(probs)) for one sample."""
    inner, probs = cache
    onehot = np.asarray(target_onehot, dtype=probs.dtype)[None]
    return _backward_batch(net, inner, probs, onehot)
