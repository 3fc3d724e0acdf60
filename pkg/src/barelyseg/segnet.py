"""Small 3D encoder-decoder segmentation network on :mod:`tensorcore`.

Layout for ``levels = L`` and ``base_channels = b`` (channels ``b * 2**l``):

    enc0:  conv3 -> relu -> conv3 -> relu                      (skip 0)
    enc l: conv3/stride2 -> relu -> conv3 -> relu              (skip l)
    dec l: upsample x2 -> conv3 -> relu -> concat(skip l-1) -> conv3 -> relu
    head:  conv1 -> channel softmax

With ``leak > 0`` every relu passes ``leak * x`` on its negative side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorcore import Tape

ParameterSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 1
    base_channels: int = 8
    levels: int = 2
    num_classes: int = 2
    kernel: int = 3
    leak: float = 0.0  # negative-side slope; 0 is a plain relu

    def __post_init__(self):
        if not 0.0 <= self.leak < 1.0:
            raise ValueError("leak must be in [0, 1)")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def factor(self) -> int:
        return 2**self.levels

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level


def layer_shapes(config: SegNetConfig) -> dict[str, tuple[int, int, int]]:
    """Name -> (out_channels, in_channels, kernel) for every conv layer."""
    k = config.kernel
    c = config.channels
    layers = {
        "enc0.conv1": (c(0), config.in_channels, k),
        "enc0.conv2": (c(0), c(0), k),
    }
    for l in range(1, config.levels + 1):
        layers[f"enc{l}.down"] = (c(l), c(l - 1), k)
        layers[f"enc{l}.conv"] = (c(l), c(l), k)
    for l in range(config.levels, 0, -1):
        layers[f"dec{l}.up"] = (c(l - 1), c(l), k)
        layers[f"dec{l}.fuse"] = (c(l - 1), 2 * c(l - 1), k)
    layers["head"] = (config.num_classes, c(0), 1)
    return layers


def config_from_params(params: ParameterSet, leak: float = 0.0) -> SegNetConfig:
    """Recover the architecture from parameter names and shapes.

    The relu leak leaves no trace in the weights, so it is passed in.
    """
    try:
        w0 = params["enc0.conv1.w"]
        head = params["head.w"]
    except KeyError as exc:
        raise KeyError(f"parameter set lacks {exc.args[0]!r}") from None
    levels = 0
    while f"enc{levels + 1}.down.w" in params:
        levels += 1
    config = SegNetConfig(
        in_channels=w0.shape[1], base_channels=w0.shape[0], levels=levels, num_classes=head.shape[0], kernel=w0.shape[2],
        leak=leak,
    )
    for name, (cout, cin, k) in layer_shapes(config).items():
        for suffix, shape in ((".w", (cout, cin, k, k, k)), (".b", (cout,))):
            if name + suffix not in params:
                raise KeyError(f"parameter set lacks {name + suffix!r}")
            if params[name + suffix].shape != shape:
                raise ValueError(f"{name + suffix} has shape {params[name + suffix].shape}, expected {shape}")
    return config


def init(config: SegNetConfig, rng: np.random.Generator, dtype=np.float64) -> ParameterSet:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    params = {}
    for name, (cout, cin, k) in layer_shapes(config).items():
        fan_in = cin * k**3
        bound = np.sqrt(6.0 / fan_in)
        params[f"{name}.w"] = rng.uniform(-bound, bound, size=(cout, cin, k, k, k)).astype(dtype)
        params[f"{name}.b"] = np.zeros(cout, dtype=dtype)
    return params


def check_input(config: SegNetConfig, shape) -> None:
    spatial = tuple(shape[-3:])
    f = config.factor
    bad = [n for n in spatial if n % f]
    if bad:
        need = tuple((-n) % f for n in spatial)
        raise ValueError(
            f"spatial dims {spatial} must be divisible by {f}; pad each axis by {need} voxels"
        )


def forward(params: ParameterSet, volume: np.ndarray, config: SegNetConfig, tape: Tape | None = None):
    """Class probabilities ``(num_classes, D, H, W)``.

    Without a tape the pass records nothing and the probability array is
    returned. With a tape the parameters are registered on it (re-used if
    already present) and the output node id is returned.
    """
    x = np.asarray(volume)
    if x.ndim == 3:
        x = x[None]
    check_input(config, x.shape)
    if x.shape[0] != config.in_channels:
        raise ValueError(f"expected {config.in_channels} input channels, got {x.shape[0]}")
    own = tape is None
    t = Tape(record=False) if own else tape

    def conv(name, h, stride=1):
        w = t.parameter(f"{name}.w", params[f"{name}.w"])
        b = t.parameter(f"{name}.b", params[f"{name}.b"])
        return t.conv3d(h, w, b, stride=stride)

    def act(h):
        return t.relu(h, config.leak)

    h = t.constant(x.astype(params["head.w"].dtype, copy=False))
    h = act(conv("enc0.conv1", h))
    h = act(conv("enc0.conv2", h))
    skips = [h]
    for l in range(1, config.levels + 1):
        h = act(conv(f"enc{l}.down", h, stride=2))
        h = act(conv(f"enc{l}.conv", h))
        skips.append(h)
    for l in range(config.levels, 0, -1):
        h = act(conv(f"dec{l}.up", t.upsample2(h)))
        h = t.concat(h, skips[l - 1])
        h = act(conv(f"dec{l}.fuse", h))
    out = t.softmax(conv("head", h))
    return t.value(out) if own else out


def predict(params: ParameterSet, volume: np.ndarray, config: SegNetConfig) -> np.ndarray:
    """Hard class grid ``(D, H, W)``; pads up to the downsample factor if needed."""
    x = np.asarray(volume)
    if x.ndim == 3:
        x = x[None]
    spatial = x.shape[1:]
    pad = [(-n) % config.factor for n in spatial]
    if any(pad):
        x = np.pad(x, [(0, 0)] + [(p // 2, p - p // 2) for p in pad])
    probs = forward(params, x, config)
    grid = np.argmax(probs, axis=0)
    return grid[tuple(slice(p // 2, p // 2 + n) for p, n in zip(pad, spatial))]
