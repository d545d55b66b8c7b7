"""Hand-rolled MLP radiance field: forward, backprop, and checkpoints.

No autograd framework: layers cache their inputs on the forward pass and
the backward pass consumes the cache. Gradients are checked against central
finite differences in the test suite for every shipped layer configuration.

Parameters default to float32 (field evaluation precision); float64 is
supported for gradient checks.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .fields import FieldValues, PositionalEncoding, RadianceField

CHECKPOINT_MAGIC = b"ARFC"
CHECKPOINT_VERSION = 1


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(np.zeros((), dtype=z.dtype), z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Mlp:
    """Fully connected stack with ReLU between layers.

    The output layer is linear unless final_relu is set. Heads apply their
    own output nonlinearity (softplus / sigmoid) outside this class.
    """

    def __init__(self, sizes: list[int], rng: np.random.Generator | None = None,
                 dtype=np.float32, final_relu: bool = False):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(sizes)
        self.dtype = np.dtype(dtype)
        self.final_relu = final_relu
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            relu_next = final_relu or i < len(sizes) - 2
            s = np.sqrt(6.0 / fan_in) if relu_next else np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)).astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Returns (output, cache); x is (N, sizes[0])."""
        x = np.ascontiguousarray(x, dtype=self.dtype)
        cache = []
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            relu_here = self.final_relu or i < self.num_layers - 1
            cache.append((h, z if relu_here else None))
            h = np.maximum(z, 0) if relu_here else z
        return h, cache

    def backward(self, cache: list, dy: np.ndarray
                 ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Returns ([(dW, db) per layer], dx) for upstream gradient dy."""
        dh = np.ascontiguousarray(dy, dtype=self.dtype)
        grads: list = [None] * self.num_layers
        for i in range(self.num_layers - 1, -1, -1):
            h_in, z = cache[i]
            dz = dh if z is None else dh * (z > 0)
            grads[i] = (dz.T @ h_in, dz.sum(axis=0))
            dh = dz @ self.weights[i]
        return grads, dh

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


@dataclass(frozen=True)
class MlpFieldConfig:
    """Architecture of the radiance MLP.

    Defaults suit the desk-scale regime; paper-scale NeRF nets are larger.
    """

    num_parts: int
    hidden_layers: int = 6
    hidden_width: int = 128
    color_hidden: int = 64
    x_bands: int = 10
    d_bands: int = 4
    include_input: bool = True
    cond_dim: int = 0
    seg_head: bool = True
    sigma_bias_init: float = -1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "MlpFieldConfig":
        return MlpFieldConfig(**d)


# shipped presets; the gradient-check suite covers each of these
PRESETS = {
    "default": dict(hidden_layers=6, hidden_width=128, color_hidden=64,
                    x_bands=10, d_bands=4),
    "desk": dict(hidden_layers=4, hidden_width=64, color_hidden=32,
                 x_bands=8, d_bands=2),
    "tiny": dict(hidden_layers=2, hidden_width=32, color_hidden=16,
                 x_bands=4, d_bands=2),
}


def preset_config(name: str, num_parts: int, **overrides) -> MlpFieldConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return MlpFieldConfig(num_parts=num_parts, **kw)


class RadianceMlp(RadianceField):
    """Trainable radiance-segmentation field.

    Trunk consumes the encoded position (plus conditioning features when
    configured); density and segmentation heads read the trunk feature,
    and the color branch additionally sees the encoded view direction.
    Output activations: softplus density, logistic color, raw seg logits.
    """

    def __init__(self, config: MlpFieldConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.num_parts = config.num_parts
        self.cond_dim = config.cond_dim
        self.enc_x = PositionalEncoding(config.x_bands, config.include_input)
        self.enc_d = PositionalEncoding(config.d_bands, config.include_input)
        self.x_dim = self.enc_x.output_dim(3)
        self.d_dim = self.enc_d.output_dim(3)

        rng = rng if rng is not None else np.random.default_rng(0)
        w = config.hidden_width
        trunk_sizes = [self.x_dim + config.cond_dim] + [w] * config.hidden_layers
        self.trunk = Mlp(trunk_sizes, rng, dtype, final_relu=True)
        self.color_mlp = Mlp([w + self.d_dim, config.color_hidden, 3], rng, dtype)
        self.sigma_head = Mlp([w, 1], rng, dtype)
        self.sigma_head.biases[0][:] = config.sigma_bias_init
        # seg head initialized last so seg-less nets share all other draws
        self.seg_head = Mlp([w, config.num_parts + 1], rng, dtype) if config.seg_head else None

    def _networks(self) -> list[Mlp]:
        nets = [self.trunk, self.color_mlp, self.sigma_head]
        if self.seg_head is not None:
            nets.append(self.seg_head)
        return nets

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for net in self._networks():
            out.extend(net.param_arrays())
        return out

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.param_arrays())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.param_arrays()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=self.dtype)
        if vec.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {vec.shape}")
        pos = 0
        for a in self.param_arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def forward(self, x: np.ndarray, d: np.ndarray,
                cond: np.ndarray | None = None) -> tuple[FieldValues, dict]:
        """Field outputs plus the cache needed by backward()."""
        x = np.asarray(x, dtype=self.dtype)
        d = np.asarray(d, dtype=self.dtype)
        self._check_cond(x.shape[0], cond)
        xe = self.enc_x.encode(x)
        de = self.enc_d.encode(d)
        tin = xe if cond is None else np.concatenate(
            [xe, np.asarray(cond, dtype=self.dtype)], axis=-1)

        h, cache_t = self.trunk.forward(tin)
        z_sigma, cache_s = self.sigma_head.forward(h)
        sigma = softplus(z_sigma[:, 0])
        cin = np.concatenate([h, de], axis=-1)
        z_color, cache_c = self.color_mlp.forward(cin)
        color = sigmoid(z_color)
        if self.seg_head is not None:
            logits, cache_g = self.seg_head.forward(h)
        else:
            logits, cache_g = np.zeros((x.shape[0], self.num_classes), dtype=self.dtype), None

        cache = dict(trunk=cache_t, sigma=cache_s, color=cache_c, seg=cache_g,
                     z_sigma=z_sigma, color_out=color)
        return FieldValues(sigma=sigma, color=color, logits=logits), cache

    def evaluate(self, x: np.ndarray, d: np.ndarray,
                 cond: np.ndarray | None = None) -> FieldValues:
        return self.forward(x, d, cond)[0]

    def backward(self, cache: dict, d_sigma: np.ndarray, d_color: np.ndarray,
                 d_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Parameter and trunk-input gradients for the given upstream grads.

        Returns (flat parameter gradient aligned with get_flat(), gradient
        w.r.t. the trunk input vector, i.e. encoded position plus
        conditioning columns).
        """
        d_sigma = np.asarray(d_sigma, dtype=self.dtype)
        d_color = np.asarray(d_color, dtype=self.dtype)
        d_logits = np.asarray(d_logits, dtype=self.dtype)

        c_out = cache["color_out"]
        dz_color = d_color * c_out * (1.0 - c_out)
        grads_c, dcin = self.color_mlp.backward(cache["color"], dz_color)
        w = self.config.hidden_width
        dh = dcin[:, :w].copy()

        dz_sigma = (d_sigma * sigmoid(cache["z_sigma"][:, 0]))[:, None]
        grads_s, dh_s = self.sigma_head.backward(cache["sigma"], dz_sigma)
        dh += dh_s

        grads_g = []
        if self.seg_head is not None:
            grads_g, dh_g = self.seg_head.backward(cache["seg"], d_logits)
            dh += dh_g

        grads_t, dtin = self.trunk.backward(cache["trunk"], dh)

        flat = np.concatenate([g.ravel() for pair in
                               (grads_t + grads_c + grads_s + list(grads_g))
                               for g in pair])
        return flat.astype(self.dtype), dtin


def mlp_forward_backward(mlp: Mlp, x: np.ndarray, dy: np.ndarray
                         ) -> tuple[np.ndarray, list, np.ndarray]:
    """(outputs, parameter gradients, input gradients) for one batch."""
    y, cache = mlp.forward(x)
    if dy.shape != y.shape:
        raise ValueError(f"upstream gradient shape {dy.shape} != output {y.shape}")
    grads, dx = mlp.backward(cache, dy)
    return y, grads, dx


def save_checkpoint(path, networks: dict[str, RadianceMlp]) -> None:
    """Write named networks sharing one config to a flat binary file.

    Layout: magic, u32 version, u32 header length, JSON header (config,
    network names, per-array shapes), then every parameter array as
    little-endian float32 in layer order.
    """
    names = list(networks)
    if not names:
        raise ValueError("no networks to save")
    cfg = networks[names[0]].config
    if any(net.config != cfg for net in networks.values()):
        raise ValueError("all networks in one checkpoint must share a config")
    header = {
        "config": cfg.to_dict(),
        "networks": names,
        "shapes": [[list(a.shape) for a in networks[n].param_arrays()] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for n in names:
        for a in networks[n].param_arrays():
            buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> dict[str, RadianceMlp]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a radiance-field checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode())
    cfg = MlpFieldConfig.from_dict(header["config"])
    pos = 12 + hlen
    out = {}
    for name, shapes in zip(header["networks"], header["shapes"]):
        net = RadianceMlp(cfg)
        arrays = net.param_arrays()
        if len(arrays) != len(shapes):
            raise ValueError(f"{path}: layer count mismatch for network {name!r}")
        for a, shape in zip(arrays, shapes):
            if list(a.shape) != shape:
                raise ValueError(f"{path}: shape mismatch {list(a.shape)} vs {shape}")
            count = a.size
            vals = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            a[...] = vals.reshape(a.shape)
        out[name] = net
    return out
