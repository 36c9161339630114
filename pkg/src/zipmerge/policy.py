"""Two-stream actor-critic network and its snapshot file format.

The raster goes through three stride-2 convolutions and a linear embedding;
the feature vector through two fully connected layers. Both embeddings are
concatenated and fused into a shared trunk that feeds the action heads
(steering and acceleration as tanh-squashed Gaussians, turn signal as a
3-way categorical) and the value head.

Continuous actions are stored in their pre-squash form ``u``; the applied
controls are ``steer = 0.5 tanh(u0)`` and ``accel = -1 + 5 tanh(u1)``, which
maps onto the [-6, 4] m/s^2 range.
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .dynamics import ACCEL_MAX, ACCEL_MIN, STEER_BOUND, ControlInput, Signal
from .observation import OBS_LAYOUT_VERSION, VECTOR_DIM

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
N_SIGNALS = 3
ACTION_CENTER = torch.tensor([0.0, 0.5 * (ACCEL_MAX + ACCEL_MIN)], dtype=torch.float64)
ACTION_HALF = torch.tensor([STEER_BOUND, 0.5 * (ACCEL_MAX - ACCEL_MIN)], dtype=torch.float64)
_LOG2 = math.log(2.0)
_HALF_LOG_2PI_E = 0.5 * math.log(2.0 * math.pi * math.e)


@dataclass(frozen=True)
class PolicyArch:
    raster_size: int = 128
    raster_channels: int = 3
    conv_channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    raster_embed: int = 128
    vector_dim: int = VECTOR_DIM
    vector_hidden: tuple[int, ...] = (64, 64)
    fusion: int = 128
    init_log_std: float = 0.0

    def conv_sizes(self) -> list[int]:
        sizes = [self.raster_size]
        for _ in self.conv_channels:
            sizes.append((sizes[-1] + 2 * self.padding - self.kernel) // self.stride + 1)
        return sizes

    @property
    def flat_dim(self) -> int:
        return self.conv_channels[-1] * self.conv_sizes()[-1] ** 2

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyArch":
        d = dict(d)
        for k in ("conv_channels", "vector_hidden"):
            d[k] = tuple(d[k])
        return cls(**d)


# tiny network used for finite-difference gradient checks
MICRO_ARCH = PolicyArch(raster_size=8, conv_channels=(2, 3, 4), raster_embed=8, vector_dim=4,
                        vector_hidden=(6, 6), fusion=8)


@dataclass
class PolicyOutput:
    mean: torch.Tensor      # (B, 2) pre-squash means for steer, accel
    log_std: torch.Tensor   # (B, 2) clamped
    logits: torch.Tensor    # (B, 3) signal logits: off, left, right
    value: torch.Tensor     # (B,)


class TwoStreamPolicy(nn.Module):
    def __init__(self, arch: PolicyArch = PolicyArch(), seed: int | None = 0):
        super().__init__()
        self.arch = arch
        convs = []
        cin = arch.raster_channels
        for cout in arch.conv_channels:
            convs.append(nn.Conv2d(cin, cout, arch.kernel, arch.stride, arch.padding))
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.raster_fc = nn.Linear(arch.flat_dim, arch.raster_embed)
        vec = []
        d = arch.vector_dim
        for h in arch.vector_hidden:
            vec.append(nn.Linear(d, h))
            d = h
        self.vector_fcs = nn.ModuleList(vec)
        self.fusion = nn.Linear(arch.raster_embed + d, arch.fusion)
        self.mean_head = nn.Linear(arch.fusion, 2)
        self.log_std_head = nn.Linear(arch.fusion, 2)
        self.signal_head = nn.Linear(arch.fusion, N_SIGNALS)
        self.value_head = nn.Linear(arch.fusion, 1)
        if seed is not None:
            self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        heads = {self.mean_head, self.log_std_head, self.signal_head, self.value_head}
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    gain = 0.01 if m in heads else math.sqrt(2.0)
                    w = m.weight.view(m.weight.shape[0], -1)
                    nn.init.orthogonal_(w, gain=gain, generator=gen)
                    m.bias.zero_()
            self.log_std_head.bias.fill_(self.arch.init_log_std)

    def _check(self, raster: torch.Tensor, vector: torch.Tensor) -> None:
        a = self.arch
        want = (a.raster_size, a.raster_size, a.raster_channels)
        if raster.dim() != 4 or tuple(raster.shape[1:]) != want:
            raise ValueError(f"raster must be (B, {want[0]}, {want[1]}, {want[2]}), got {tuple(raster.shape)}")
        if vector.dim() != 2 or vector.shape[1] != a.vector_dim or vector.shape[0] != raster.shape[0]:
            raise ValueError(f"vector must be (B, {a.vector_dim}) matching the raster batch, "
                             f"got {tuple(vector.shape)}")

    def forward(self, raster: torch.Tensor, vector: torch.Tensor) -> PolicyOutput:
        """``raster`` is ``(B, H, W, 3)`` uint8 (0..255) or float (0..1)."""
        self._check(raster, vector)
        dtype = self.fusion.weight.dtype
        if raster.dtype == torch.uint8:
            x = raster.to(dtype) / 255.0
        else:
            x = raster.to(dtype)
        x = x.permute(0, 3, 1, 2)
        for conv in self.convs:
            x = F.relu(conv(x))
        x = F.relu(self.raster_fc(x.flatten(1)))
        v = vector.to(dtype)
        for fc in self.vector_fcs:
            v = F.relu(fc(v))
        h = F.relu(self.fusion(torch.cat([x, v], dim=1)))
        return PolicyOutput(
            mean=self.mean_head(h),
            log_std=self.log_std_head(h).clamp(LOG_STD_MIN, LOG_STD_MAX),
            logits=self.signal_head(h),
            value=self.value_head(h).squeeze(1),
        )

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def squash(u: torch.Tensor) -> torch.Tensor:
    """Pre-squash actions ``(..., 2)`` to bounded ``(steer, accel)``."""
    return ACTION_CENTER.to(u.dtype) + ACTION_HALF.to(u.dtype) * torch.tanh(u)


def log_prob(out: PolicyOutput, u: torch.Tensor, signal: torch.Tensor) -> torch.Tensor:
    """Log density of the squashed action (in control units) plus the signal log-prob."""
    std = out.log_std.exp()
    z = (u - out.mean) / std
    gauss = -0.5 * z * z - out.log_std - 0.5 * math.log(2.0 * math.pi)
    # log |d tanh(u)/du| written stably
    corr = 2.0 * (_LOG2 - u - F.softplus(-2.0 * u)) + torch.log(ACTION_HALF.to(u.dtype))
    cont = (gauss - corr).sum(-1)
    cat = F.log_softmax(out.logits, dim=-1).gather(-1, signal.long().unsqueeze(-1)).squeeze(-1)
    return cont + cat


def entropy(out: PolicyOutput) -> torch.Tensor:
    """Pre-squash Gaussian entropy plus categorical entropy (per sample)."""
    gauss = (_HALF_LOG_2PI_E + out.log_std).sum(-1)
    logp = F.log_softmax(out.logits, dim=-1)
    cat = -(logp.exp() * logp).sum(-1)
    return gauss + cat


def log_prob_and_entropy(out: PolicyOutput, u: torch.Tensor, signal: torch.Tensor):
    return log_prob(out, u, signal), entropy(out)


def entropy_bounds() -> tuple[float, float]:
    """Range of :func:`entropy` implied by the log-std clamp."""
    return 2 * (_HALF_LOG_2PI_E + LOG_STD_MIN), 2 * (_HALF_LOG_2PI_E + LOG_STD_MAX) + math.log(N_SIGNALS)


@dataclass(frozen=True)
class ActionSample:
    steer: float
    accel: float
    signal: Signal
    log_prob: float
    entropy: float
    raw: np.ndarray  # pre-squash (u_steer, u_accel)

    def control(self) -> ControlInput:
        return ControlInput(self.accel, self.steer, self.signal)


def _draws(rng, b: int):
    """Gaussian noise ``(b, 2)`` and uniforms ``(b, 1)``; ``rng`` may be one
    generator or one per row (row ``i`` then only consumes ``rng[i]``)."""
    if isinstance(rng, (list, tuple)):
        if len(rng) != b:
            raise ValueError(f"need {b} generators, got {len(rng)}")
        noise = np.empty((b, 2))
        draw = np.empty((b, 1))
        for i, g in enumerate(rng):
            noise[i] = g.standard_normal(2)
            draw[i, 0] = g.random()
        return noise, draw
    return rng.standard_normal((b, 2)), rng.random((b, 1))


def sample_actions(out: PolicyOutput, rng, deterministic: bool = False):
    """Batch sampling with numpy randomness (so rollouts are reproducible).

    Returns ``(u, signal, log_prob, entropy)`` as numpy arrays.
    """
    with torch.no_grad():
        mean = out.mean.detach()
        if deterministic:
            u = mean.clone()
            sig = out.logits.argmax(-1)
        else:
            noise, draw = _draws(rng, mean.shape[0])
            u = mean + out.log_std.exp() * torch.from_numpy(noise).to(mean.dtype)
            probs = F.softmax(out.logits.to(torch.float64), dim=-1).numpy()
            cdf = np.cumsum(probs, axis=1)
            sig = torch.from_numpy(np.minimum((draw > cdf).sum(axis=1), N_SIGNALS - 1))
        lp = log_prob(out, u, sig)
        ent = entropy(out)
    return u.numpy(), sig.numpy(), lp.numpy(), ent.numpy()


def sample_action(out: PolicyOutput, rng: np.random.Generator, mode: str = "explore") -> ActionSample:
    """Single-observation convenience wrapper (batch of one)."""
    if mode not in ("explore", "deterministic"):
        raise ValueError(f"mode must be 'explore' or 'deterministic', got {mode!r}")
    u, sig, lp, ent = sample_actions(out, rng, deterministic=mode == "deterministic")
    a = squash(torch.from_numpy(u[0]).to(torch.float64)).numpy()
    return ActionSample(float(a[0]), float(a[1]), Signal(int(sig[0])), float(lp[0]), float(ent[0]), u[0].copy())


def controls_from(u: np.ndarray, signal: np.ndarray) -> list[ControlInput]:
    a = squash(torch.from_numpy(np.asarray(u, dtype=np.float64))).numpy()
    return [ControlInput(float(r[1]), float(r[0]), Signal(int(s))) for r, s in zip(a, signal)]


def obs_to_tensors(frames) -> tuple[torch.Tensor, torch.Tensor]:
    raster = torch.from_numpy(np.stack([f.raster.data for f in frames]))
    vector = torch.from_numpy(np.stack([f.vector for f in frames]))
    return raster, vector


# ---------------------------------------------------------------- snapshots

MAGIC = b"ZMPOLICY"
FORMAT_VERSION = 1


class SnapshotError(Exception):
    pass


class SnapshotCorruptError(SnapshotError):
    pass


class SnapshotVersionError(SnapshotError):
    pass


class SnapshotShapeError(SnapshotError):
    pass


def save_snapshot(policy: TwoStreamPolicy, meta: dict | None, sink) -> bytes:
    """Write a snapshot to a path or binary file object; returns the bytes.

    Layout: magic, format version, observation layout version, JSON metadata,
    shape table, float32 little-endian payload, CRC32 of all preceding bytes.
    """
    meta = dict(meta or {})
    meta["arch"] = asdict(policy.arch)
    state = policy.state_dict()
    body = io.BytesIO()
    body.write(MAGIC)
    body.write(struct.pack("<HH", FORMAT_VERSION, OBS_LAYOUT_VERSION))
    mj = json.dumps(meta, sort_keys=True).encode("utf-8")
    body.write(struct.pack("<I", len(mj)))
    body.write(mj)
    body.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        nb = name.encode("utf-8")
        body.write(struct.pack("<H", len(nb)))
        body.write(nb)
        body.write(struct.pack("<B", t.dim()))
        body.write(struct.pack(f"<{t.dim()}I", *t.shape))
    for t in state.values():
        body.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    data = body.getvalue()
    data += struct.pack("<I", zlib.crc32(data))
    if hasattr(sink, "write"):
        sink.write(data)
    elif sink is not None:
        Path(sink).write_bytes(data)
    return data


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SnapshotCorruptError("snapshot truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_snapshot(source, expected_arch: PolicyArch | None = None) -> tuple[TwoStreamPolicy, dict]:
    """Inverse of :func:`save_snapshot`. Raises a :class:`SnapshotError` subclass on bad input."""
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif hasattr(source, "read"):
        data = source.read()
    else:
        data = Path(source).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise SnapshotCorruptError("not a policy snapshot (bad magic or too short)")
    if struct.unpack("<I", data[-4:])[0] != zlib.crc32(data[:-4]):
        raise SnapshotCorruptError("checksum mismatch")
    r = _Reader(data[:-4])
    r.take(len(MAGIC))
    fmt, layout = r.unpack("<HH")
    if fmt != FORMAT_VERSION:
        raise SnapshotVersionError(f"snapshot format {fmt}, expected {FORMAT_VERSION}")
    if layout != OBS_LAYOUT_VERSION:
        raise SnapshotVersionError(f"observation layout {layout}, this build uses {OBS_LAYOUT_VERSION}")
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode("utf-8"))
        arch = PolicyArch.from_dict(meta["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise SnapshotCorruptError(f"bad metadata block: {exc}") from exc
    if expected_arch is not None and arch != expected_arch:
        raise SnapshotShapeError(f"snapshot architecture {arch} differs from expected {expected_arch}")
    (n,) = r.unpack("<I")
    table = []
    for _ in range(n):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        (nd,) = r.unpack("<B")
        table.append((name, tuple(r.unpack(f"<{nd}I"))))
    policy = TwoStreamPolicy(arch, seed=None)
    state = policy.state_dict()
    if [k for k, _ in table] != list(state) or any(tuple(state[k].shape) != s for k, s in table):
        raise SnapshotShapeError("shape table does not match the architecture")
    new_state = {}
    for name, shape in table:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        new_state[name] = torch.from_numpy(arr.astype(np.float32))
    if r.pos != len(r.data):
        raise SnapshotCorruptError("trailing bytes after payload")
    policy.load_state_dict(new_state)
    return policy, meta


def parameters_equal(a: TwoStreamPolicy, b: TwoStreamPolicy) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return list(sa) == list(sb) and all(torch.equal(sa[k], sb[k]) for k in sa)
