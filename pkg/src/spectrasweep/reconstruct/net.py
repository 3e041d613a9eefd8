"""A small UNet-style encoder-decoder in numpy with a hand-written backward pass.

Encoder: depth x [conv3x3, ReLU, conv3x3, ReLU, 2x2 mean-pool]; a two-conv
bottleneck; decoder: depth x [nearest 2x upsample, concat skip, conv3x3, ReLU,
conv3x3, ReLU]; a final 1x1 conv. Tensors are (C, H, W), one sample at a time.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

# ---------------------------------------------------------------------------
# layer primitives (forward and backward)


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation; w has shape (C_out, C_in, 3, 3)."""
    _, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], H, W))
    for dy in range(3):
        for dx in range(3):
            out += np.tensordot(w[:, :, dy, dx], xp[:, dy:dy + H, dx:dx + W], axes=(1, 0))
    return out + b[:, None, None]


def conv3x3_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    _, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for dy in range(3):
        for dx in range(3):
            gw[:, :, dy, dx] = np.tensordot(g, xp[:, dy:dy + H, dx:dx + W], axes=([1, 2], [1, 2]))
            gxp[:, dy:dy + H, dx:dx + W] += np.tensordot(w[:, :, dy, dx], g, axes=(0, 0))
    return gxp[:, 1:-1, 1:-1], gw, g.sum(axis=(1, 2))


def conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.tensordot(w, x, axes=(1, 0)) + b[:, None, None]


def conv1x1_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    return np.tensordot(w, g, axes=(0, 0)), np.tensordot(g, x, axes=([1, 2], [1, 2])), g.sum(axis=(1, 2))


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, g):
    return g * (x > 0)


def pool2(x):
    C, H, W = x.shape
    return x.reshape(C, H // 2, 2, W // 2, 2).mean(axis=(2, 4))


def pool2_backward(g):
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(g):
    C, H, W = g.shape
    return g.reshape(C, H // 2, 2, W // 2, 2).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetConfig:
    c_in: int = 7
    c_out: int = 8
    base_width: int = 8
    depth: int = 2
    seed: int = 0

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.base_width, self.depth) < 1:
            raise ValueError("c_in, c_out, base_width and depth must all be >= 1")

    def width(self, level: int) -> int:
        return self.base_width * 2 ** level


def _layer_specs(cfg: NetConfig) -> list[tuple[str, int, int, int]]:
    """(name, c_in, c_out, kernel size) in forward order."""
    specs = []
    c = cfg.c_in
    for l in range(cfg.depth):
        w = cfg.width(l)
        specs += [(f"enc{l}a", c, w, 3), (f"enc{l}b", w, w, 3)]
        c = w
    w = cfg.width(cfg.depth)
    specs += [("mid_a", c, w, 3), ("mid_b", w, w, 3)]
    c = w
    for l in reversed(range(cfg.depth)):
        w = cfg.width(l)
        specs += [(f"dec{l}a", c + w, w, 3), (f"dec{l}b", w, w, 3)]
        c = w
    specs.append(("out", c, cfg.c_out, 1))
    return specs


@dataclass
class NetParams:
    config: NetConfig
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]

    @property
    def skips(self) -> list[tuple[str, str]]:
        """(encoder layer whose output is kept, decoder layer that consumes it)."""
        return [(f"enc{l}b", f"dec{l}a") for l in range(self.config.depth)]

    def names(self) -> list[str]:
        return [s[0] for s in _layer_specs(self.config)]

    def copy(self) -> "NetParams":
        return NetParams(self.config, {k: v.copy() for k, v in self.weights.items()},
                         {k: v.copy() for k, v in self.biases.items()})

    def tensors(self):
        for name in self.names():
            yield f"{name}.w", self.weights[name]
            yield f"{name}.b", self.biases[name]


def net_init(cfg: NetConfig) -> NetParams:
    """He-normal weights (variance 2 / fan_in), zero biases, deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    weights, biases = {}, {}
    for name, ci, co, k in _layer_specs(cfg):
        fan_in = ci * k * k
        shape = (co, ci, 3, 3) if k == 3 else (co, ci)
        weights[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        biases[name] = np.zeros(co)
    return NetParams(cfg, weights, biases)


def _check_input(params: NetParams, x: np.ndarray) -> None:
    cfg = params.config
    if x.ndim != 3 or x.shape[0] != cfg.c_in:
        raise ValueError(f"expected input ({cfg.c_in}, H, W), got {x.shape}")
    m = 2 ** cfg.depth
    if x.shape[1] % m or x.shape[2] % m:
        raise ValueError(f"spatial dims {x.shape[1:]} not divisible by 2^depth = {m}")


def _forward(params: NetParams, x: np.ndarray):
    cfg = params.config
    W, B = params.weights, params.biases
    cache = {}

    def conv_relu(name, inp):
        pre = conv3x3(inp, W[name], B[name])
        cache[name] = (inp, pre)
        return relu(pre)

    h = x
    skips = []
    for l in range(cfg.depth):
        h = conv_relu(f"enc{l}b", conv_relu(f"enc{l}a", h))
        skips.append(h)
        h = pool2(h)
    h = conv_relu("mid_b", conv_relu("mid_a", h))
    for l in reversed(range(cfg.depth)):
        up = upsample2(h)
        h = np.concatenate([up, skips[l]])
        cache[f"split{l}"] = up.shape[0]
        h = conv_relu(f"dec{l}b", conv_relu(f"dec{l}a", h))
    cache["out"] = (h, None)
    return conv1x1(h, W["out"], B["out"]), cache


def net_forward(params: NetParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _check_input(params, x)
    return _forward(params, x)[0]


def net_backward(params: NetParams, x: np.ndarray, upstream: np.ndarray):
    """Gradients of <upstream, net_forward(params, x)>.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` maps
    ``"<layer>.w"`` / ``"<layer>.b"`` to arrays shaped like the parameters.
    """
    x = np.asarray(x, dtype=float)
    _check_input(params, x)
    out, cache = _forward(params, x)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream gradient shape {upstream.shape} does not match output {out.shape}")
    cfg = params.config
    W = params.weights
    grads = {}

    def conv_relu_back(name, g):
        inp, pre = cache[name]
        gx, gw, gb = conv3x3_backward(inp, W[name], relu_backward(pre, g))
        grads[f"{name}.w"], grads[f"{name}.b"] = gw, gb
        return gx

    h_last = cache["out"][0]
    g, grads["out.w"], grads["out.b"] = conv1x1_backward(h_last, W["out"], upstream)
    skip_grads = [None] * cfg.depth
    for l in range(cfg.depth):
        g = conv_relu_back(f"dec{l}a", conv_relu_back(f"dec{l}b", g))
        n_up = cache[f"split{l}"]
        skip_grads[l] = g[n_up:]
        g = upsample2_backward(g[:n_up])
    g = conv_relu_back("mid_a", conv_relu_back("mid_b", g))
    for l in reversed(range(cfg.depth)):
        g = pool2_backward(g) + skip_grads[l]
        g = conv_relu_back(f"enc{l}a", conv_relu_back(f"enc{l}b", g))
    return grads, g


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then float32 little-endian tensors in order

_CKPT_MAGIC = "SSNET1"


def save_params(params: NetParams, path) -> None:
    tensors = list(params.tensors())
    header = {"magic": _CKPT_MAGIC, "version": 1, "config": asdict(params.config),
              "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors], "dtype": "f32le"}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("ascii"))
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_params(path) -> NetParams:
    from ..core import FormatError

    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError(f"malformed checkpoint header: {exc}") from exc
        if header.get("magic") != _CKPT_MAGIC:
            raise FormatError(f"not a network checkpoint (magic {header.get('magic')!r})")
        payload = fh.read()
    cfg = NetConfig(**header["config"])
    expected = sum(int(np.prod(t["shape"])) for t in header["tensors"]) * 4
    if len(payload) != expected:
        raise FormatError(f"payload size mismatch, expected {expected} bytes, got {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f4").astype(float)
    weights, biases, pos = {}, {}, 0
    for t in header["tensors"]:
        n = int(np.prod(t["shape"]))
        arr = flat[pos:pos + n].reshape(t["shape"])
        pos += n
        layer, kind = t["name"].rsplit(".", 1)
        (weights if kind == "w" else biases)[layer] = arr
    return NetParams(cfg, weights, biases)
