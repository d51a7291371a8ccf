"""Training regimes for the editor: plain flow matching (sft), the unified
objective with the critic's reasoning loss added (uso), and the
reward-weighted objective where each sample's flow loss is scaled by how
strongly the critic rejects it (rwo).

Per-sample noise, timestep, and conditioning-dropout draws come from a
counter-based stream keyed by (seed, epoch, step, sample index), so regimes
that should coincide (uso at lambda=0 vs sft) consume identical randomness.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numcore as nc
from . import flowgen as fg
from . import reflector as rf
from .microworld import Triplet, oracle_judge
from .numcore.checkpoint import atomic_write_text

OBJECTIVES = ("sft", "uso", "rwo")


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    objective: str = "sft"
    lam: float = 0.75          # weight on the critic's reasoning loss (uso)
    lam_c: float = 0.2         # weight on the plain flow regularizer (rwo)
    lr: float = 3e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 6
    seed: int = 0
    cfg_drop: float = 0.2
    k_frames: int = 2
    optimizer: str = "adamw"
    val_every: int = 1
    val_samples: int = 64
    sample_steps: int = 16

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise TrainError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.lam < 0 or self.lam_c < 0:
            raise TrainError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    l_fm: float
    l_total: float
    per_sample_sqerr: list[float]
    l_reason: float | None = None
    p_yes: list[float] | None = None
    w: list[float] | None = None

    @property
    def p_yes_mean(self) -> float | None:
        return float(np.mean(self.p_yes)) if self.p_yes else None


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)

    def append_step(self, **row) -> None:
        if self.steps and row["step"] <= self.steps[-1]["step"]:
            raise TrainError("step indices must increase")
        self.steps.append(row)

    def rows_without_timing(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "seconds"} for r in self.steps]

    def to_csv(self, path: str | Path) -> None:
        lines = ["step,l_fm,l_reason,p_yes_mean,l_total,seconds"]
        for r in self.steps:
            lines.append("{step},{l_fm!r},{l_reason},{p_yes_mean},{l_total!r},{seconds:.3f}".format(
                step=r["step"], l_fm=r["l_fm"],
                l_reason="" if r["l_reason"] is None else repr(r["l_reason"]),
                p_yes_mean="" if r["p_yes_mean"] is None else repr(r["p_yes_mean"]),
                l_total=r["l_total"], seconds=r["seconds"]))
        atomic_write_text(path, "\n".join(lines) + "\n")


def sample_rng(seed: int, epoch: int, step: int, index: int) -> np.random.Generator:
    """Per-sample stream; every objective draws t, eps, then the dropout coin."""
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, step, index)))


# --------------------------------------------------------------------------
# loss kernels

def fm_loss(v_pred: list, v_target: list):
    """Mean over the batch of per-sample mean squared velocity error.

    Returns (total, per_sample) as graph nodes when predictions are graph
    tensors, else as floats.
    """
    if len(v_pred) != len(v_target):
        raise TrainError(f"batch sizes differ: {len(v_pred)} vs {len(v_target)}")
    graph = any(isinstance(v, nc.Tensor) for v in v_pred)
    per_sample = []
    for vp, vt in zip(v_pred, v_target):
        if graph:
            d = nc.sub(nc.as_tensor(vp), nc.as_tensor(vt))
            per_sample.append(nc.mean(nc.mul(d, d)))
        else:
            d = np.asarray(vp) - np.asarray(vt)
            per_sample.append(float(np.mean(d * d)))
    total = _mean_nodes(per_sample) if graph else float(np.mean(per_sample))
    return total, per_sample


def uso_loss(l_fm, l_reason, lam: float):
    """Flow loss plus lam times the critic's reasoning loss."""
    if lam < 0:
        raise TrainError("lam must be nonnegative")
    if isinstance(l_fm, nc.Tensor) or isinstance(l_reason, nc.Tensor):
        return nc.add(nc.as_tensor(l_fm), nc.scale(nc.as_tensor(l_reason), lam))
    return l_fm + lam * l_reason


def rwo_loss(per_sample_sqerr: list, p_yes: list, lam_c: float):
    """mean_i[(1 - p_yes_i) * sqerr_i] + lam_c * mean_i[sqerr_i].

    The weights are plain floats: the critic's score acts as a constant
    per-sample reward, with no gradient flowing through it.
    """
    if len(per_sample_sqerr) != len(p_yes):
        raise TrainError(f"lengths differ: {len(per_sample_sqerr)} vs {len(p_yes)}")
    for p in p_yes:
        if not (0.0 <= float(p) <= 1.0):
            raise TrainError(f"p_yes {p} outside [0,1]")
    if any(isinstance(s, nc.Tensor) for s in per_sample_sqerr):
        weighted = [nc.scale(nc.as_tensor(s), 1.0 - float(p))
                    for s, p in zip(per_sample_sqerr, p_yes)]
        return nc.add(_mean_nodes(weighted),
                      nc.scale(_mean_nodes([nc.as_tensor(s) for s in per_sample_sqerr]), lam_c))
    weighted = float(np.mean([(1.0 - float(p)) * s for s, p in zip(per_sample_sqerr, p_yes)]))
    return weighted + lam_c * float(np.mean(per_sample_sqerr))


def _mean_nodes(nodes: list[nc.Tensor]) -> nc.Tensor:
    acc = nodes[0]
    for n in nodes[1:]:
        acc = nc.add(acc, n)
    return nc.scale(acc, 1.0 / len(nodes))


def stop_gradient_policy(objective: str) -> dict:
    """What reaches the generator besides the plain flow-matching gradient."""
    if objective == "sft":
        return {"objective": "sft", "critic_in_graph": False, "w_backprop": False,
                "note": "flow matching only; no critic involvement"}
    if objective == "uso":
        return {"objective": "uso", "critic_in_graph": True, "w_backprop": False,
                "note": "reasoning loss backpropagates through decode into the generator; "
                        "critic parameters stay frozen"}
    if objective == "rwo":
        return {"objective": "rwo", "critic_in_graph": False, "w_backprop": False,
                "note": "per-sample weight 1 - p_yes is a constant; only the weighted "
                        "flow loss reaches the generator"}
    raise TrainError(f"unknown objective {objective!r}")


# --------------------------------------------------------------------------
# one optimization step

@dataclass
class TrainState:
    store: nc.ParamStore
    flow_cfg: fg.FlowConfig
    critic_store: nc.ParamStore | None = None
    critic_cfg: rf.CriticConfig | None = None
    opt: nc.OptimizerConfig | None = None
    epoch: int = 0
    step: int = 0
    source_feat_cache: dict = field(default_factory=dict)


def _critic_inputs(state: TrainState, triplet: Triplet, decoded_flat: nc.Tensor):
    """Select the critic's k frame slices from the flat decoded estimate."""
    ccfg = state.critic_cfg
    idx = rf.select_frame_indices(state.flow_cfg.frames, ccfg.k_frames)
    fd = ccfg.frame_dim
    edited = nc.concat([nc.slice1d(decoded_flat, i * fd, (i + 1) * fd) for i in idx])
    key = triplet.id
    if key not in state.source_feat_cache:
        src = rf.select_frames(triplet.source, ccfg.k_frames)
        state.source_feat_cache[key] = rf.stream_features(src, ccfg).data
    src_feats = nc.Tensor(state.source_feat_cache[key])
    return edited, src_feats


def compute_batch_loss(state: TrainState, batch: list[Triplet],
                       config: TrainConfig) -> tuple[nc.Tensor, LossBreakdown]:
    """Build the objective's loss graph for one batch (no update).

    Per sample: draw t and eps, encode conditioning (with dropout), predict
    velocity, accumulate the flow error; for the critic-aware objectives also
    estimate the clean latent, decode it, and ask the critic whether the edit
    is satisfied (expected answer: yes).
    """
    needs_critic = config.objective in ("uso", "rwo")
    if needs_critic and (state.critic_store is None or state.critic_cfg is None):
        raise TrainError(f"objective {config.objective!r} requires a loaded critic")

    store, cfg = state.store, state.flow_cfg
    sqerr_nodes: list[nc.Tensor] = []
    reason_nodes: list[nc.Tensor] = []
    p_list: list[float] = []

    for i, triplet in enumerate(batch):
        rng = sample_rng(config.seed, state.epoch, state.step, i)
        t = float(rng.uniform())
        eps = rng.standard_normal(cfg.latent_dim)
        cond = fg.encode_condition(store, cfg, triplet.source, triplet.instruction)
        cond = fg.cfg_dropout(store, cond, config.cfg_drop, rng)

        x0 = triplet.target.reshape(-1)
        z_t = fg.noise_path(x0, eps, t)
        v_pred = fg.predict_velocity(store, cfg, z_t, t, cond.fused)
        d = nc.sub(v_pred, nc.Tensor(fg.target_velocity(x0, eps)))
        sqerr_nodes.append(nc.mean(nc.mul(d, d)))

        if needs_critic:
            x_hat = fg.estimate_clean(z_t, t, v_pred)
            decoded = fg.decode(x_hat, cfg, store)
            edited, src_feats = _critic_inputs(state, triplet, decoded)
            l_yes, l_no = rf.critic_forward(
                state.critic_store, state.critic_cfg, None, edited,
                triplet.instruction, source_feats=src_feats)
            reason_nodes.append(rf.reason_loss(l_yes, l_no, "yes"))
            p_list.append(rf.p_yes(l_yes.item(), l_no.item()))

    l_fm = _mean_nodes(sqerr_nodes)
    if config.objective == "sft":
        total = l_fm
        breakdown = LossBreakdown(l_fm=l_fm.item(), l_total=l_fm.item(),
                                  per_sample_sqerr=[s.item() for s in sqerr_nodes])
    elif config.objective == "uso":
        l_reason = _mean_nodes(reason_nodes)
        total = uso_loss(l_fm, l_reason, config.lam)
        breakdown = LossBreakdown(l_fm=l_fm.item(), l_total=total.item(),
                                  per_sample_sqerr=[s.item() for s in sqerr_nodes],
                                  l_reason=l_reason.item(), p_yes=p_list)
    else:  # rwo
        total = rwo_loss(sqerr_nodes, p_list, config.lam_c)
        l_reason = _mean_nodes(reason_nodes)
        breakdown = LossBreakdown(l_fm=l_fm.item(), l_total=total.item(),
                                  per_sample_sqerr=[s.item() for s in sqerr_nodes],
                                  l_reason=l_reason.item(), p_yes=p_list,
                                  w=[1.0 - p for p in p_list])
    return total, breakdown


def train_step(state: TrainState, batch: list[Triplet], config: TrainConfig) -> LossBreakdown:
    """One optimizer step on the generator/encoder parameters (critic frozen)."""
    total, breakdown = compute_batch_loss(state, batch, config)
    state.store.zero_grads()
    if state.critic_store is not None:
        state.critic_store.zero_grads()
    nc.backward(total)
    nc.optimizer_step(state.store, state.store.grads(), state.opt,
                      select=fg.is_generator_param)
    state.step += 1
    return breakdown


# --------------------------------------------------------------------------
# the full loop

def validate(store: nc.ParamStore, cfg: fg.FlowConfig, triplets: list[Triplet],
             steps: int, seed: int, limit: int | None = None) -> dict:
    """Mean analytic scores of sampled edits over held-out triplets."""
    rows = []
    for triplet in triplets[:limit]:
        video = fg.sample(store, cfg, triplet.source, triplet.instruction,
                          steps=steps, seed=seed)
        s = oracle_judge(triplet.source, video, triplet.instruction)
        rows.append([s.ea, s.pc, s.gn, s.gr])
    means = np.mean(rows, axis=0) if rows else np.zeros(4)
    return {"ea": float(means[0]), "pc": float(means[1]),
            "gn": float(means[2]), "gr": float(means[3]), "n": len(rows)}


def train(config: TrainConfig, flow_cfg: fg.FlowConfig, train_triplets: list[Triplet],
          val_triplets: list[Triplet] | None = None,
          critic: tuple[nc.ParamStore, rf.CriticConfig] | None = None,
          checkpoint_path: str | Path | None = None,
          ) -> tuple[nc.ParamStore, TrainLog]:
    """Epoch loop with deterministic shuffling, periodic validation, and
    per-epoch checkpoints. Returns the trained store and the log."""
    if not train_triplets:
        raise TrainError("training set is empty")
    needs_critic = config.objective in ("uso", "rwo")
    if needs_critic and critic is None:
        raise TrainError(f"objective {config.objective!r} requires a critic checkpoint")

    store = nc.ParamStore(seed=config.seed)
    fg.init_params(store, flow_cfg)
    state = TrainState(
        store=store, flow_cfg=flow_cfg,
        critic_store=critic[0] if critic else None,
        critic_cfg=critic[1] if critic else None,
        opt=nc.OptimizerConfig(kind=config.optimizer, lr=config.lr,
                               weight_decay=config.weight_decay),
    )
    log = TrainLog()

    for epoch in range(config.epochs):
        state.epoch = epoch
        order = np.random.default_rng(
            np.random.SeedSequence((config.seed, 0x5F, epoch))).permutation(len(train_triplets))
        for start in range(0, len(order), config.batch_size):
            batch = [train_triplets[i] for i in order[start:start + config.batch_size]]
            t0 = time.perf_counter()
            b = train_step(state, batch, config)
            log.append_step(step=state.step, l_fm=b.l_fm, l_reason=b.l_reason,
                            p_yes_mean=b.p_yes_mean, l_total=b.l_total,
                            seconds=time.perf_counter() - t0)
        if val_triplets and config.val_every and (epoch + 1) % config.val_every == 0:
            scores = validate(store, flow_cfg, val_triplets, steps=config.sample_steps,
                              seed=config.seed, limit=config.val_samples)
            log.validations.append({"epoch": epoch, **scores})
        if checkpoint_path is not None:
            nc.save(checkpoint_path, store, extra={"epoch": epoch, "objective": config.objective})

    if checkpoint_path is not None and config.epochs == 0:
        nc.save(checkpoint_path, store, extra={"epoch": -1, "objective": config.objective})
    return store, log


def run_metadata(config: TrainConfig, flow_cfg: fg.FlowConfig,
                 critic_checkpoint: str | None = None) -> dict:
    return {
        "train_config": asdict(config),
        "flow_config": asdict(flow_cfg),
        "stop_gradient_policy": stop_gradient_policy(config.objective),
        "prompt_template_version": rf.DEFAULT_TEMPLATE.version,
        "critic_checkpoint": critic_checkpoint,
        "seed": config.seed,
    }


def save_run_metadata(path: str | Path, meta: dict) -> None:
    atomic_write_text(path, json.dumps(meta, indent=2) + "\n")
