"""U-Net for single-channel inpainting, as pure functions over a parameter dict.

Layout for ``depth`` pooling steps and ``base`` channels:

* encoder level ``i`` (``i < depth``): two 3x3 conv + ReLU to ``base * 2**i``
  channels, the result is kept as skip ``i``, then 2x2 max-pool;
* bottleneck: two 3x3 conv + ReLU to ``base * 2**depth`` channels;
* decoder level ``i`` (from ``depth - 1`` down to 0): 2x2 stride-2 transposed
  conv halving channels, concatenation ``[skip_i, up]``, two 3x3 conv + ReLU;
* head: 1x1 conv to one channel and a logistic sigmoid.

Parameters live in an ordered ``dict`` keyed ``enc{i}.conv{1,2}.{w,b}``,
``bottleneck.conv{1,2}.{w,b}``, ``dec{i}.up.{w,b}``, ``dec{i}.conv{1,2}.{w,b}``,
``head.{w,b}``. Conv weights are ``[C_out, C_in, k, k]``; transposed-conv
weights are ``[C_in, C_out, 2, 2]``.
"""

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ValidationError
from ..validation import check_same_shape, check_tensor4
from . import ops


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 2
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        for name in ("depth", "base_channels"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ValidationError(f"{name} must be an integer >= 1, got {v!r}")
        if (self.in_channels, self.out_channels) != (1, 1):
            raise ValidationError("only single-channel input and output are supported")

    @property
    def input_multiple(self):
        """Spatial dims must be divisible by this."""
        return 2**self.depth

    def channels(self, level):
        return self.base_channels * 2**level

    def check_input(self, x, name="x"):
        x = check_tensor4(x, name=name, channels=self.in_channels)
        m = self.input_multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ValidationError(
                f"{name} spatial dims {x.shape[2]}x{x.shape[3]} must be divisible by "
                f"2**depth = {m}"
            )
        return x

    def to_dict(self):
        return asdict(self)


def layer_specs(config):
    """Ordered ``(prefix, kind, c_in, c_out, k)`` for every layer."""
    specs = []
    c_prev = config.in_channels
    for i in range(config.depth):
        c = config.channels(i)
        specs.append((f"enc{i}.conv1", "conv", c_prev, c, 3))
        specs.append((f"enc{i}.conv2", "conv", c, c, 3))
        c_prev = c
    c = config.channels(config.depth)
    specs.append(("bottleneck.conv1", "conv", c_prev, c, 3))
    specs.append(("bottleneck.conv2", "conv", c, c, 3))
    for i in reversed(range(config.depth)):
        c_up, c = config.channels(i + 1), config.channels(i)
        specs.append((f"dec{i}.up", "up", c_up, c, 2))
        specs.append((f"dec{i}.conv1", "conv", 2 * c, c, 3))
        specs.append((f"dec{i}.conv2", "conv", c, c, 3))
    specs.append(("head", "conv", config.channels(0), config.out_channels, 1))
    return specs


def param_shapes(config):
    shapes = {}
    for prefix, kind, cin, cout, k in layer_specs(config):
        shapes[f"{prefix}.w"] = (cout, cin, k, k) if kind == "conv" else (cin, cout, k, k)
        shapes[f"{prefix}.b"] = (cout,)
    return shapes


def count_params(config):
    return sum(k * k * cin * cout + cout for _, _, cin, cout, k in layer_specs(config))


def init_params(config, seed=0, dtype=np.float64):
    """Uniform weights in ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``, zero biases.

    ``fan_in`` is the number of inputs feeding one output unit: ``C_in*k*k``
    for convolutions and ``C_in`` for the stride-2 transposed convolution,
    whose kernel positions never overlap.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for prefix, kind, cin, cout, k in layer_specs(config):
        if kind == "conv":
            shape, fan_in = (cout, cin, k, k), cin * k * k
        else:
            shape, fan_in = (cin, cout, k, k), cin
        bound = np.sqrt(6.0 / fan_in)
        params[f"{prefix}.w"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[f"{prefix}.b"] = np.zeros(cout, dtype=dtype)
    return params


def check_params(params, config):
    expected = param_shapes(config)
    if list(params) != list(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValidationError(
            f"parameter names do not match config (missing={missing}, extra={extra})"
        )
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ValidationError(f"{name} has shape {params[name].shape}, expected {shape}")


def _block_forward(params, prefix, x):
    caches = []
    for j in (1, 2):
        z, c = ops.conv2d_forward(x, params[f"{prefix}.conv{j}.w"], params[f"{prefix}.conv{j}.b"])
        x = ops.relu_forward(z)
        caches.append((c, x))
    return x, caches


def _block_backward(params, grads, prefix, dy, caches):
    for j in (2, 1):
        c, y = caches[j - 1]
        dz = ops.relu_backward(dy, y)
        dy, dw, db = ops.conv2d_backward(dz, c, params[f"{prefix}.conv{j}.w"])
        grads[f"{prefix}.conv{j}.w"] = dw
        grads[f"{prefix}.conv{j}.b"] = db
    return dy


def _forward(params, config, x):
    cache = {"skips": [], "enc": [], "pool": [], "dec": {}}
    h = x
    for i in range(config.depth):
        h, bc = _block_forward(params, f"enc{i}", h)
        cache["enc"].append(bc)
        cache["skips"].append(h)
        h, pc = ops.maxpool2_forward(h)
        cache["pool"].append(pc)
    h, cache["bottleneck"] = _block_forward(params, "bottleneck", h)
    cache["bottleneck_out"] = h
    for i in reversed(range(config.depth)):
        up, uc = ops.upconv2_forward(h, params[f"dec{i}.up.w"], params[f"dec{i}.up.b"])
        cat = np.concatenate([cache["skips"][i], up], axis=1)
        h, bc = _block_forward(params, f"dec{i}", cat)
        cache["dec"][i] = (uc, bc, cat.shape)
    z, cache["head"] = ops.conv2d_forward(h, params["head.w"], params["head.b"])
    out = ops.sigmoid(z)
    return out, cache


def forward(params, config, x):
    """Run the network on ``x`` of shape ``[N, 1, H, W]``; output has the same shape."""
    x = config.check_input(x)
    return _forward(params, config, x.astype(params["head.w"].dtype, copy=False))[0]


def forward_trace(params, config, x):
    """Shapes of the skips, bottleneck and decoder concatenations for ``x``."""
    x = config.check_input(x)
    out, cache = _forward(params, config, x.astype(params["head.w"].dtype, copy=False))
    return {
        "skips": [s.shape for s in cache["skips"]],
        "bottleneck": cache["bottleneck_out"].shape,
        "concat": {i: cache["dec"][i][2] for i in range(config.depth)},
        "output": out.shape,
    }


def _backward(params, config, cache, out, dout):
    grads = {}
    dz = dout * out * (1.0 - out)
    dh, grads["head.w"], grads["head.b"] = ops.conv2d_backward(dz, cache["head"], params["head.w"])
    dskips = [None] * config.depth
    for i in range(config.depth):
        uc, bc, _ = cache["dec"][i]
        dcat = _block_backward(params, grads, f"dec{i}", dh, bc)
        c_skip = config.channels(i)
        dskips[i] = dcat[:, :c_skip]
        dh, grads[f"dec{i}.up.w"], grads[f"dec{i}.up.b"] = ops.upconv2_backward(
            dcat[:, c_skip:], uc, params[f"dec{i}.up.w"]
        )
    dh = _block_backward(params, grads, "bottleneck", dh, cache["bottleneck"])
    for i in reversed(range(config.depth)):
        dh = ops.maxpool2_backward(dh, cache["pool"][i]) + dskips[i]
        dh = _block_backward(params, grads, f"enc{i}", dh, cache["enc"][i])
    return {name: grads[name] for name in params}


def loss_and_grads(params, config, x, target, mask=None):
    """Mean squared error of ``forward(x)`` against ``target`` and its gradients.

    With ``mask`` (same shape, boolean), the mean runs over masked elements only.
    """
    x = config.check_input(x)
    target = check_tensor4(target, name="target")
    check_same_shape(x, target, ("x", "target"))
    dtype = params["head.w"].dtype
    out, cache = _forward(params, config, x.astype(dtype, copy=False))
    diff = out - target.astype(dtype, copy=False)
    if mask is None:
        denom = diff.size
    else:
        check_same_shape(x, mask, ("x", "mask"))
        weight = np.asarray(mask, dtype=dtype)
        diff = diff * weight
        denom = max(float(weight.sum()), 1.0)
    loss = float(np.sum(diff * diff) / denom)
    grads = _backward(params, config, cache, out, (2.0 / denom) * diff)
    return loss, grads
