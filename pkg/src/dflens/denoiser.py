"""Conditional noise-prediction U-Net with inspectable internals.

The network runs on single images [C, H, W]: two downsampling encoder
stages (conv + 2x decimation), a bottleneck with one cross-attention block
over condition-token embeddings, two nearest-neighbor upsampling stages
with skip connections, and sinusoidal time conditioning projected to a
per-channel bias at every stage. Activation maps and the cross-attention
weights can be captured on any forward pass.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, ddim_step, q_sample
from .rng import GEN_STREAM, philox

CHECKPOINT_MAGIC = b"DFLENS01"
CHECKPOINT_VERSION = 1

# names of the capturable activation maps, in forward order
ACTIVATION_LAYERS = ("enc1", "enc2", "bottleneck", "dec1", "dec2")
DEFAULT_CAM_LAYER = "dec2"


class CheckpointError(RuntimeError):
    """Malformed or truncated checkpoint file."""


class TrainingDiverged(RuntimeError):
    """Loss or parameters became non-finite."""


@dataclass(frozen=True)
class ConditionTokens:
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))


def _as_condition(cond) -> ConditionTokens:
    return cond if isinstance(cond, ConditionTokens) else ConditionTokens(tuple(cond))


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor; serialized verbatim into checkpoints.

    The diffusion chain the model was trained against (kind and length) is
    part of the descriptor so a checkpoint is self-contained at inference.
    """

    image_size: int = 32
    in_channels: int = 3
    base_width: int = 16
    vocab_size: int = 10
    token_count: int = 3
    embed_dim: int = 32
    attn_dim: int = 32
    time_dim: int = 16
    schedule_kind: str = "linear"
    train_timesteps: int = 1000

    def __post_init__(self):
        if self.image_size % 4 != 0:
            raise ValueError("image_size must be divisible by 4 (two stride-2 stages)")
        if self.time_dim % 2 != 0:
            raise ValueError("time_dim must be even")


@dataclass
class ForwardTrace:
    """Outputs of one forward pass.

    ``eps_hat`` and the captured activations stay attached to the autodiff
    graph so gradient-based saliency can differentiate through them;
    ``attention`` is a detached [tokens, H'*W'] array whose columns each
    sum to 1.
    """

    eps_hat: T.Tensor
    activations: dict[str, T.Tensor] = field(default_factory=dict)
    attention: np.ndarray | None = None


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of a step index."""
    if t < 0:
        raise ValueError("step index must be non-negative")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


class Denoiser:
    """Noise-prediction network eps(x_t, t, cond)."""

    def __init__(self, arch: ArchSpec | None = None, seed: int = 0):
        self.arch = arch or ArchSpec()
        self.params: dict[str, T.Tensor] = {}
        self._init_params(seed)

    def _add_param(self, name: str, data: np.ndarray):
        self.params[name] = T.Tensor(data, requires_grad=True)

    def _init_params(self, seed: int):
        a = self.arch
        rng = philox(seed, 0)
        w = a.base_width

        def conv_init(c_out, c_in, k=3):
            fan_in = c_in * k * k
            return rng.standard_normal((c_out, c_in, k, k)) * math.sqrt(2.0 / fan_in)

        def dense_init(rows, cols):
            return rng.standard_normal((rows, cols)) * math.sqrt(1.0 / cols)

        stages = [
            ("enc1", w, a.in_channels, 1),
            ("enc2", 2 * w, w, 2),
            ("mid_in", 4 * w, 2 * w, 2),
            ("bottleneck", 4 * w, 4 * w, 1),
            ("dec1", 2 * w, 4 * w + 2 * w, 1),
            ("dec2", w, 2 * w + w, 1),
        ]
        self._stages = {name: (c_out, c_in, stride) for name, c_out, c_in, stride in stages}
        for name, c_out, c_in, _ in stages:
            self._add_param(f"{name}.w", conv_init(c_out, c_in))
            self._add_param(f"time.{name}.w", dense_init(c_out, a.time_dim) * 0.1)
            self._add_param(f"time.{name}.b", np.zeros(c_out))
        self._add_param("tok.embed", rng.standard_normal((a.vocab_size, a.embed_dim)))
        self._add_param("attn.wq", dense_init(4 * w, a.attn_dim))
        self._add_param("attn.wk", dense_init(a.embed_dim, a.attn_dim))
        self._add_param("attn.wv", dense_init(a.embed_dim, 4 * w) * 0.1)
        self._add_param("out.w", np.zeros((a.in_channels, w, 3, 3)))
        self._add_param("out.b", np.zeros(a.in_channels))

    def parameter_names(self) -> list[str]:
        return sorted(self.params)

    def _stage(self, x, name, temb, down, offset=None):
        # downsampling stages run the conv at full resolution and decimate,
        # keeping conv2d's integral-output contract intact on even extents
        h = T.conv2d(x, self.params[f"{name}.w"], stride=1, padding=1)
        bias = T.matmul(self.params[f"time.{name}.w"], temb) + T.reshape(
            self.params[f"time.{name}.b"], (-1, 1)
        )
        h = T.relu(h + T.reshape(bias, (bias.shape[0], 1, 1)))
        if down > 1:
            h = T.downsample_nearest(h, down)
        if offset is not None and offset[0] == name:
            h = h + T.Tensor(offset[1])
        return h

    def _cross_attention(self, h, cond: ConditionTokens):
        c, hh, ww = h.shape
        tok = T.take_rows(self.params["tok.embed"], cond.tokens)
        q = T.matmul(T.transpose(T.reshape(h, (c, hh * ww))), self.params["attn.wq"])
        k = T.matmul(tok, self.params["attn.wk"])
        v = T.matmul(tok, self.params["attn.wv"])
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(self.arch.attn_dim))
        attn = T.softmax(scores, axis=1)  # each spatial position sums to 1 over tokens
        out = T.reshape(T.transpose(T.matmul(attn, v)), (c, hh, ww))
        return out, attn

    def forward(
        self,
        x_t,
        t: int,
        cond,
        capture: bool = False,
        activation_offset: tuple[str, np.ndarray] | None = None,
    ) -> ForwardTrace:
        """One denoising prediction.

        ``activation_offset = (layer, delta)`` adds a constant array to the
        named activation mid-pass, which supports finite-difference probes
        of the activation-space gradients.
        """
        a = self.arch
        x = x_t if isinstance(x_t, T.Tensor) else T.Tensor(x_t)
        expected = (a.in_channels, a.image_size, a.image_size)
        if x.shape != expected:
            raise T.ShapeError(f"input shape {x.shape} does not match model shape {expected}")
        cond = _as_condition(cond)
        if len(cond.tokens) != a.token_count:
            raise ValueError(
                f"expected {a.token_count} condition tokens, got {len(cond.tokens)}"
            )
        for tok in cond.tokens:
            if not 0 <= tok < a.vocab_size:
                raise ValueError(f"token id {tok} outside vocabulary of size {a.vocab_size}")

        temb = T.Tensor(time_embedding(t, a.time_dim).reshape(-1, 1))
        acts: dict[str, T.Tensor] = {}

        h1 = self._stage(x, "enc1", temb, 1, activation_offset)
        acts["enc1"] = h1
        h2 = self._stage(h1, "enc2", temb, 2, activation_offset)
        acts["enc2"] = h2
        h3 = self._stage(h2, "mid_in", temb, 2, activation_offset)
        attn_out, attn = self._cross_attention(h3, cond)
        h4 = self._stage(h3 + attn_out, "bottleneck", temb, 1, activation_offset)
        acts["bottleneck"] = h4
        u1 = T.concat([T.upsample_nearest(h4, 2), h2], axis=0)
        h5 = self._stage(u1, "dec1", temb, 1, activation_offset)
        acts["dec1"] = h5
        u2 = T.concat([T.upsample_nearest(h5, 2), h1], axis=0)
        h6 = self._stage(u2, "dec2", temb, 1, activation_offset)
        acts["dec2"] = h6
        eps = T.conv2d(h6, self.params["out.w"], stride=1, padding=1) + T.reshape(
            self.params["out.b"], (-1, 1, 1)
        )

        trace = ForwardTrace(eps_hat=eps)
        if capture:
            trace.activations = acts
            trace.attention = np.ascontiguousarray(attn.data.T)
        return trace

    def predict(self, x_t, t: int, cond) -> np.ndarray:
        """Plain-array forward pass without graph recording."""
        with T.no_grad():
            return self.forward(x_t, t, cond).eps_hat.data


def train(
    model: Denoiser,
    dataset,
    schedule: NoiseSchedule,
    steps: int,
    lr: float,
    seed: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    adam_eps: float = 1e-8,
) -> list[float]:
    """Adam on the denoising MSE; returns the per-step loss history.

    Each step draws (sample, t, noise) from a Philox stream keyed by
    (seed, step), so histories are bit-identical across runs and the draw
    for step k never depends on earlier steps.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    names = model.parameter_names()
    m = {n: np.zeros_like(model.params[n].data) for n in names}
    v = {n: np.zeros_like(model.params[n].data) for n in names}
    history: list[float] = []
    for step in range(steps):
        rng = philox(seed, step)
        x0, tokens = dataset[rng.integers(len(dataset))]
        t = int(rng.integers(schedule.total_steps))
        eps = rng.standard_normal(x0.shape)
        x_t = q_sample(x0, t, eps, schedule)

        trace = model.forward(x_t, t, tokens)
        diff = trace.eps_hat - T.Tensor(eps)
        loss = T.tmean(diff * diff)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became non-finite at step {step}")
        T.backward(loss)

        k = step + 1
        for n in names:
            p = model.params[n]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m[n] = beta1 * m[n] + (1 - beta1) * g
            v[n] = beta2 * v[n] + (1 - beta2) * g * g
            m_hat = m[n] / (1 - beta1**k)
            v_hat = v[n] / (1 - beta2**k)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + adam_eps)
            if not np.all(np.isfinite(p.data)):
                raise TrainingDiverged(f"parameter {n} became non-finite at step {step}")
        history.append(value)
    return history


def generate(
    model: Denoiser,
    schedule: NoiseSchedule,
    plan,
    cond,
    seed: int,
    capture: bool = False,
    callback=None,
) -> np.ndarray:
    """Deterministic reverse process along a time-step plan.

    ``callback(position, t, x_t, trace)`` is invoked before each step with
    the current latent and its forward trace. Returns the final sample.
    """
    a = model.arch
    rng = philox(seed, GEN_STREAM)
    x = rng.standard_normal((a.in_channels, a.image_size, a.image_size))
    steps = plan.steps
    with T.no_grad():
        for i, t in enumerate(steps):
            trace = model.forward(x, t, cond, capture=capture)
            if callback is not None:
                callback(i, t, x, trace)
            t_prev = steps[i + 1] if i + 1 < len(steps) else -1
            x = ddim_step(x, t, t_prev, trace.eps_hat.data, 0.0, 0.0, schedule)
    return x


def save_checkpoint(model: Denoiser, path):
    """Binary checkpoint: magic, version, arch JSON, then a tensor table."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<H", CHECKPOINT_VERSION)
    arch_json = json.dumps(asdict(model.arch), sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(arch_json))
    blob += arch_json
    names = model.parameter_names()
    blob += struct.pack("<I", len(names))
    for name in names:
        data = model.params[name].data
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", 0, data.ndim)  # dtype tag 0 = float64
        for extent in data.shape:
            blob += struct.pack("<I", extent)
        blob += np.ascontiguousarray(data, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> Denoiser:
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(len(CHECKPOINT_MAGIC))) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes: not a dflens checkpoint")
    (version,) = struct.unpack("<H", take(2))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (arch_len,) = struct.unpack("<I", take(4))
    try:
        arch = ArchSpec(**json.loads(bytes(take(arch_len)).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid architecture descriptor: {exc}") from exc

    model = Denoiser(arch, seed=0)
    (count,) = struct.unpack("<I", take(4))
    expected = set(model.parameter_names())
    seen = set()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        dtype_tag, rank = struct.unpack("<BB", take(2))
        if dtype_tag != 0:
            raise CheckpointError(f"unknown dtype tag {dtype_tag} for tensor {name!r}")
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(n_items * 8), dtype="<f8").reshape(shape)
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
        if model.params[name].data.shape != shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {shape}, expected {model.params[name].data.shape}"
            )
        model.params[name] = T.Tensor(data.astype(np.float64), requires_grad=True)
        seen.add(name)
    missing = expected - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    return model
