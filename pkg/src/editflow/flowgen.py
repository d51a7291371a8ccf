"""Conditioned flow-matching generator over flattened micro-videos.

The latent space is pixel space (identity decode with clamping; a learned
linear decoder can sit behind the same call). The noising path is the
affine interpolation z_t = (1-t) x0 + t eps with target velocity eps - x0,
the unique convention under which z_t - t v recovers x0 exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .microworld import EditInstruction, OPERATORS, WorldError


@dataclass
class FlowConfig:
    frames: int = 8
    height: int = 8
    width: int = 8
    d_video: int = 24       # source-encoding width
    d_instr: int = 16       # instruction-embedding width
    d_understand: int = 16  # understanding-embedding width
    d_cond: int = 32        # fused conditioning width
    hidden: int = 64
    t_features: int = 8     # sinusoidal time-feature width (must be even)
    instr_buckets: int = 64

    @property
    def latent_dim(self) -> int:
        return self.frames * self.height * self.width

    @property
    def gen_input_dim(self) -> int:
        return self.latent_dim + self.t_features + self.d_cond


@dataclass
class ConditionSignal:
    v: nc.Tensor       # source-video encoding
    t: nc.Tensor       # instruction embedding
    u: nc.Tensor       # understanding embedding
    fused: nc.Tensor   # connector output fed to the generator
    dropped: bool = False


def instruction_key(instruction: EditInstruction, decimals: int = 3) -> str:
    """Canonical lookup key: operator plus discretized parameters."""
    parts = [instruction.operator_id]
    for k in sorted(instruction.parameters):
        v = instruction.parameters[k]
        if isinstance(v, float):
            v = round(v, decimals)
        parts.append(f"{k}={v}")
    return "|".join(parts)


def instruction_bucket(instruction: EditInstruction, n_buckets: int) -> int:
    if instruction.operator_id != "identity" and instruction.operator_id not in OPERATORS:
        raise WorldError(f"unknown operator {instruction.operator_id!r}")
    digest = hashlib.sha256(instruction_key(instruction).encode()).digest()
    return int.from_bytes(digest[:8], "big") % n_buckets


def time_features(t: float, width: int) -> np.ndarray:
    """Sinusoidal features of the scalar timestep at octave frequencies."""
    freqs = 2.0 ** np.arange(width // 2)
    angles = 2.0 * np.pi * freqs * t
    return np.concatenate([np.sin(angles), np.cos(angles)])


def init_params(store: nc.ParamStore, cfg: FlowConfig) -> None:
    """Create encoder + generator parameters (idempotent)."""
    L = cfg.latent_dim
    store.get_or_create("enc.video", (cfg.d_video, L), fan_in=L)
    store.get_or_create("enc.instr_table", (cfg.instr_buckets, cfg.d_instr), fan_in=cfg.d_instr)
    store.get_or_create("enc.understand", (cfg.d_understand, cfg.d_video + cfg.d_instr),
                        fan_in=cfg.d_video + cfg.d_instr)
    store.get_or_create("enc.connector",
                        (cfg.d_cond, cfg.d_video + cfg.d_instr + cfg.d_understand),
                        fan_in=cfg.d_video + cfg.d_instr + cfg.d_understand)
    store.get_or_create("enc.null", (cfg.d_cond,), fan_in=cfg.d_cond)
    store.get_or_create("gen.w1", (cfg.hidden, cfg.gen_input_dim), fan_in=cfg.gen_input_dim)
    store.get_or_create("gen.b1", (cfg.hidden,), init="zeros")
    store.get_or_create("gen.w2", (L, cfg.hidden), fan_in=cfg.hidden)
    store.get_or_create("gen.b2", (L,), init="zeros")


GENERATOR_PREFIXES = ("gen.", "enc.", "dec.")


def is_generator_param(name: str) -> bool:
    """Parameters moved by the training loop (the critic stays frozen)."""
    return name.startswith(GENERATOR_PREFIXES)


def encode_condition(store: nc.ParamStore, cfg: FlowConfig,
                     source: np.ndarray, instruction: EditInstruction) -> ConditionSignal:
    """Fuse source encoding, instruction embedding, and understanding embedding."""
    flat = nc.Tensor(source.reshape(-1))
    v = nc.matmul(store["enc.video"], flat)
    t = nc.row(store["enc.instr_table"], instruction_bucket(instruction, cfg.instr_buckets))
    u = nc.matmul(store["enc.understand"], nc.concat([v, t]))
    fused = nc.matmul(store["enc.connector"], nc.concat([v, t, u]))
    return ConditionSignal(v=v, t=t, u=u, fused=fused)


def cfg_dropout(store: nc.ParamStore, cond: ConditionSignal, p_drop: float,
                rng: np.random.Generator) -> ConditionSignal:
    """Swap the fused signal for the learned null vector with probability p_drop."""
    if not (0.0 <= p_drop <= 1.0):
        raise ValueError(f"p_drop {p_drop} outside [0,1]")
    if p_drop > 0.0 and rng.random() < p_drop:
        return ConditionSignal(v=cond.v, t=cond.t, u=cond.u,
                               fused=store["enc.null"], dropped=True)
    return cond


def noise_path(x0: np.ndarray, eps: np.ndarray, t: float) -> np.ndarray:
    if x0.shape != eps.shape:
        raise nc.ShapeError(f"noise_path: {x0.shape} vs {eps.shape}")
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"timestep {t} outside [0,1]")
    return (1.0 - t) * x0 + t * eps


def target_velocity(x0: np.ndarray, eps: np.ndarray) -> np.ndarray:
    if x0.shape != eps.shape:
        raise nc.ShapeError(f"target_velocity: {x0.shape} vs {eps.shape}")
    return eps - x0


def predict_velocity(store: nc.ParamStore, cfg: FlowConfig, z_t: np.ndarray,
                     t: float, fused: nc.Tensor) -> nc.Tensor:
    if z_t.shape != (cfg.latent_dim,):
        raise nc.ShapeError(f"latent shape {z_t.shape} != ({cfg.latent_dim},)")
    x = nc.concat([nc.Tensor(z_t), nc.Tensor(time_features(t, cfg.t_features)), fused])
    h = nc.tanh(nc.add(nc.matmul(store["gen.w1"], x), store["gen.b1"]))
    return nc.add(nc.matmul(store["gen.w2"], h), store["gen.b2"])


def estimate_clean(z_t: np.ndarray, t: float, v):
    """One-shot clean estimate z_t - t * v; works on arrays or graph tensors."""
    if isinstance(v, nc.Tensor):
        return nc.sub(nc.Tensor(z_t), nc.scale(v, t))
    if z_t.shape != v.shape:
        raise nc.ShapeError(f"estimate_clean: {z_t.shape} vs {v.shape}")
    return z_t - t * v


def decode(latent, cfg: FlowConfig, store: nc.ParamStore | None = None):
    """Latent -> video: optional learned linear map, then clamp to [0,1].

    Graph tensors stay flat (frames are sliced downstream); arrays are
    reshaped to F x H x W.
    """
    if isinstance(latent, nc.Tensor):
        if latent.size != cfg.latent_dim:
            raise nc.ShapeError(f"decode: latent size {latent.size} != {cfg.latent_dim}")
        if store is not None and "dec.w" in store:
            latent = nc.matmul(store["dec.w"], latent)
        return nc.clip01(latent)
    flat = np.asarray(latent, dtype=np.float64).reshape(-1)
    if flat.size != cfg.latent_dim:
        raise nc.ShapeError(f"decode: latent size {flat.size} != {cfg.latent_dim}")
    if store is not None and "dec.w" in store:
        flat = store["dec.w"].data @ flat
    return np.clip(flat, 0.0, 1.0).reshape(cfg.frames, cfg.height, cfg.width)


def sample(store: nc.ParamStore, cfg: FlowConfig, source: np.ndarray,
           instruction: EditInstruction, steps: int = 16, seed: int = 0) -> np.ndarray:
    """Euler-integrate dz/dt = v from pure noise at t=1 down to t=0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5A)))
    z = rng.standard_normal(cfg.latent_dim)
    fused = encode_condition(store, cfg, source, instruction).fused
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        v = predict_velocity(store, cfg, z, t, fused).data
        z = z - dt * v
    return decode(z, cfg, store)
