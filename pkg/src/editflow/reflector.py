"""Internal critic: scores an edit with yes/no logits over four quality axes.

The critic reads two selected frames of the source and of the edited video.
Each frame passes through a fixed relational encoder (pooled means, roughness,
and object-mass moments, all built from differentiable graph ops) before a
small learned network produces (l_yes, l_no). The probability of "yes" is
sigmoid(l_yes - l_no), and the binary cross-entropy on it is the reasoning
loss whose gradient flows back through the decoded clean estimate into the
generator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .microworld import (
    EditInstruction,
    OracleScores,
    Triplet,
    apply_oracle_edit,
    oracle_judge,
    OPERATORS,
)
from .numcore.checkpoint import atomic_write_text

DIMENSION_RUBRICS = {
    "edit accuracy": "does the edited video do what the instruction implies?",
    "preservation consistency": "are regions the edit should not touch identical to the source?",
    "generation naturalness": "does the video evolve smoothly, without temporal jitter?",
    "generation realism": "are frames free of clipping, saturation, and artifacts?",
}

DEFAULT_THRESHOLDS = {"ea": 7.0, "pc": 7.0, "gn": 7.0, "gr": 7.0}

_OP_LIST = list(OPERATORS) + ["identity"]


class ReflectorError(ValueError):
    pass


@dataclass
class CriticConfig:
    frames: int = 8
    height: int = 8
    width: int = 8
    k_frames: int = 2
    hidden1: int = 64
    hidden2: int = 32

    @property
    def frame_dim(self) -> int:
        return self.height * self.width

    @property
    def frame_feature_dim(self) -> int:
        return _pooling(self.height, self.width).n_features

    @property
    def instr_dim(self) -> int:
        return len(_OP_LIST) + 2

    @property
    def input_dim(self) -> int:
        # source, edited, and edited-minus-source feature streams + instruction
        return 3 * self.k_frames * self.frame_feature_dim + self.instr_dim


@dataclass(frozen=True)
class Verdict:
    p_yes: float
    answer: str
    logits: tuple[float, float]

    @staticmethod
    def from_logits(l_yes: float, l_no: float) -> "Verdict":
        p = _sigmoid(l_yes - l_no)
        return Verdict(p_yes=p, answer="yes" if p >= 0.5 else "no",
                       logits=(float(l_yes), float(l_no)))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


# --------------------------------------------------------------------------
# frame selection

def select_frame_indices(n_frames: int, k: int) -> list[int]:
    """k indices spread over [0, F-1]: round(i*(F-1)/(k-1)), half away from zero."""
    if not (1 <= k <= n_frames):
        raise ReflectorError(f"k={k} outside [1, {n_frames}]")
    if k == 1:
        return [0]
    return [int(np.floor(i * (n_frames - 1) / (k - 1) + 0.5)) for i in range(k)]


def select_frames(video: np.ndarray, k: int) -> np.ndarray:
    return video[select_frame_indices(video.shape[0], k)]


# --------------------------------------------------------------------------
# fixed frame encoder

@dataclass(frozen=True)
class _Pooling:
    lin: np.ndarray     # block/row/col/mean pooling matrix
    d_h: np.ndarray     # horizontal neighbor differences
    d_v: np.ndarray     # vertical neighbor differences
    col_sum: np.ndarray
    row_sum: np.ndarray
    xs1: np.ndarray     # (1, W) column positions in [0,1]
    xs2: np.ndarray
    ys1: np.ndarray
    ys2: np.ndarray
    n_features: int


_POOL_CACHE: dict[tuple[int, int], _Pooling] = {}


def _pooling(h: int, w: int) -> _Pooling:
    key = (h, w)
    if key in _POOL_CACHE:
        return _POOL_CACHE[key]
    n = h * w

    def cell(r, c):
        return r * w + c

    rows = []
    row_groups = np.array_split(np.arange(h), min(4, h))
    col_groups = np.array_split(np.arange(w), min(4, w))
    for rg in row_groups:
        for cg in col_groups:
            m = np.zeros(n)
            for r in rg:
                for c in cg:
                    m[cell(r, c)] = 1.0 / (len(rg) * len(cg))
            rows.append(m)
    for r in range(h):
        m = np.zeros(n)
        m[r * w:(r + 1) * w] = 1.0 / w
        rows.append(m)
    for c in range(w):
        m = np.zeros(n)
        m[c::w] = 1.0 / h
        rows.append(m)
    rows.append(np.full(n, 1.0 / n))
    lin = np.array(rows)

    d_h = np.zeros((h * (w - 1), n)) if w > 1 else np.zeros((0, n))
    k = 0
    for r in range(h):
        for c in range(w - 1):
            d_h[k, cell(r, c + 1)] = 1.0
            d_h[k, cell(r, c)] = -1.0
            k += 1
    d_v = np.zeros(((h - 1) * w, n)) if h > 1 else np.zeros((0, n))
    k = 0
    for r in range(h - 1):
        for c in range(w):
            d_v[k, cell(r + 1, c)] = 1.0
            d_v[k, cell(r, c)] = -1.0
            k += 1

    col_sum = np.zeros((w, n))
    for c in range(w):
        col_sum[c, c::w] = 1.0
    row_sum = np.zeros((h, n))
    for r in range(h):
        row_sum[r, r * w:(r + 1) * w] = 1.0

    xs = (np.arange(w) / max(1, w - 1)).reshape(1, -1)
    ys = (np.arange(h) / max(1, h - 1)).reshape(1, -1)
    pooled = _Pooling(lin=lin, d_h=d_h, d_v=d_v, col_sum=col_sum, row_sum=row_sum,
                      xs1=xs, xs2=xs * xs, ys1=ys, ys2=ys * ys,
                      n_features=lin.shape[0] + 4 + 4)
    _POOL_CACHE[key] = pooled
    return pooled


def _mean_sq(x: nc.Tensor) -> nc.Tensor:
    return nc.mean(nc.mul(x, x))


def frame_features(frame, cfg: CriticConfig) -> nc.Tensor:
    """Fixed relational encoding of one H x W frame (graph-differentiable).

    Pooled block/row/column means, mean, roughness of neighbor differences,
    and object-mass moments of the above-mean excess: total mass, centroid,
    and spread per axis.
    """
    pool = _pooling(cfg.height, cfg.width)
    x = frame if isinstance(frame, nc.Tensor) else nc.Tensor(np.asarray(frame).reshape(-1))
    if x.size != cfg.frame_dim:
        raise nc.ShapeError(f"frame size {x.size} != {cfg.frame_dim}")

    lin = nc.matmul(nc.Tensor(pool.lin), x)
    sq = _mean_sq(x)
    rough_h = nc.scale(_mean_sq(nc.matmul(nc.Tensor(pool.d_h), x)), 10.0) \
        if pool.d_h.shape[0] else nc.Tensor(0.0)
    rough_v = nc.scale(_mean_sq(nc.matmul(nc.Tensor(pool.d_v), x)), 10.0) \
        if pool.d_v.shape[0] else nc.Tensor(0.0)

    obj = nc.relu(nc.sub(x, nc.mean(x)))
    mass = nc.scale(nc.mean(obj), float(cfg.frame_dim))
    denom = nc.add(mass, nc.Tensor(1e-6))
    col = nc.matmul(nc.Tensor(pool.col_sum), obj)
    row_ = nc.matmul(nc.Tensor(pool.row_sum), obj)
    cx = nc.div(nc.matmul(nc.Tensor(pool.xs1), col), denom)
    cy = nc.div(nc.matmul(nc.Tensor(pool.ys1), row_), denom)
    vx = nc.sub(nc.div(nc.matmul(nc.Tensor(pool.xs2), col), denom), nc.mul(cx, cx))
    vy = nc.sub(nc.div(nc.matmul(nc.Tensor(pool.ys2), row_), denom), nc.mul(cy, cy))

    extras = nc.stack([sq, rough_h, rough_v, nc.scale(mass, 0.1)])
    return nc.concat([lin, extras, cx, cy, nc.scale(vx, 10.0), nc.scale(vy, 10.0)])


def stream_features(frames, cfg: CriticConfig) -> nc.Tensor:
    """Concatenated frame features for k frames, flat input or (k,H,W) array."""
    fd = cfg.frame_dim
    if isinstance(frames, nc.Tensor):
        if frames.size != cfg.k_frames * fd:
            raise nc.ShapeError(f"stream size {frames.size} != {cfg.k_frames * fd}")
        parts = [frame_features(nc.slice1d(frames, i * fd, (i + 1) * fd), cfg)
                 for i in range(cfg.k_frames)]
    else:
        arr = np.asarray(frames, dtype=np.float64).reshape(cfg.k_frames, fd)
        parts = [frame_features(arr[i], cfg) for i in range(cfg.k_frames)]
    return nc.concat(parts)


def instruction_encoding(instruction: EditInstruction) -> np.ndarray:
    """Fixed instruction features: operator one-hot plus two normalized parameter slots."""
    onehot = np.zeros(len(_OP_LIST))
    onehot[_OP_LIST.index(instruction.operator_id)] = 1.0
    p = instruction.parameters
    op = instruction.operator_id
    if op == "translate":
        slots = [p["dx"] / 2.0, p["dy"] / 2.0]
    elif op == "reflect":
        slots = [1.0 if p["axis"] == "vertical" else -1.0, 0.0]
    elif op in ("decay", "grow"):
        slots = [float(p["rate"]), 0.0]
    elif op == "impact":
        slots = [float(p["t_star"]) / 8.0, 0.0]
    elif op == "threshold_brighten":
        slots = [float(p["threshold"]), float(p["delta"])]
    else:
        slots = [0.0, 0.0]
    return np.concatenate([onehot, slots])


# --------------------------------------------------------------------------
# critic network

def init_params(store: nc.ParamStore, cfg: CriticConfig) -> None:
    store.get_or_create("crit.w1", (cfg.hidden1, cfg.input_dim), fan_in=cfg.input_dim)
    store.get_or_create("crit.b1", (cfg.hidden1,), init="zeros")
    store.get_or_create("crit.w2", (cfg.hidden2, cfg.hidden1), fan_in=cfg.hidden1)
    store.get_or_create("crit.b2", (cfg.hidden2,), init="zeros")
    store.get_or_create("crit.w3", (2, cfg.hidden2), fan_in=cfg.hidden2)
    store.get_or_create("crit.b3", (2,), init="zeros")


def _head(store: nc.ParamStore, x: nc.Tensor) -> tuple[nc.Tensor, nc.Tensor]:
    h1 = nc.tanh(nc.add(nc.matmul(store["crit.w1"], x), store["crit.b1"]))
    h2 = nc.tanh(nc.add(nc.matmul(store["crit.w2"], h1), store["crit.b2"]))
    logits = nc.add(nc.matmul(store["crit.w3"], h2), store["crit.b3"])
    return nc.slice1d(logits, 0, 1), nc.slice1d(logits, 1, 2)


def critic_forward(store: nc.ParamStore, cfg: CriticConfig,
                   source_frames: np.ndarray, edited_frames,
                   instruction: EditInstruction | np.ndarray,
                   source_feats: nc.Tensor | None = None,
                   ) -> tuple[nc.Tensor, nc.Tensor]:
    """Yes/no logits; differentiable in both critic parameters and edited frames.

    The learned head sees [source features, edited features, their difference,
    instruction encoding]. ``source_feats`` may be passed to reuse a
    precomputed source stream.
    """
    if source_feats is None:
        if np.asarray(source_frames).reshape(-1).size != cfg.k_frames * cfg.frame_dim:
            raise nc.ShapeError(
                f"source frames size {np.asarray(source_frames).size} != "
                f"{cfg.k_frames * cfg.frame_dim}")
        source_feats = stream_features(source_frames, cfg)
    edited_feats = stream_features(edited_frames, cfg)
    enc = instruction if isinstance(instruction, np.ndarray) else instruction_encoding(instruction)
    x = nc.concat([source_feats, edited_feats,
                   nc.sub(edited_feats, source_feats), nc.Tensor(enc)])
    return _head(store, x)


def verdict(store: nc.ParamStore, cfg: CriticConfig, source: np.ndarray,
            edited: np.ndarray, instruction: EditInstruction) -> Verdict:
    l_yes, l_no = critic_forward(
        store, cfg, select_frames(source, cfg.k_frames),
        select_frames(edited, cfg.k_frames), instruction)
    return Verdict.from_logits(l_yes.item(), l_no.item())


def p_yes(l_yes: float, l_no: float) -> float:
    return _sigmoid(float(l_yes) - float(l_no))


def reason_loss(l_yes, l_no, correct_answer: str = "yes") -> nc.Tensor:
    """-log sigmoid(correct - opposite), in the overflow-safe softplus form."""
    if correct_answer not in ("yes", "no"):
        raise ReflectorError(f"correct_answer must be yes|no, got {correct_answer!r}")
    l_yes, l_no = nc.as_tensor(l_yes), nc.as_tensor(l_no)
    margin = nc.sub(l_yes, l_no) if correct_answer == "yes" else nc.sub(l_no, l_yes)
    return nc.softplus(nc.neg(margin))


def oracle_answer(scores: OracleScores, thresholds: dict | None = None) -> str:
    """Yes only when all four axes clear their thresholds."""
    th = DEFAULT_THRESHOLDS if thresholds is None else thresholds
    ok = (scores.ea >= th["ea"] and scores.pc >= th["pc"]
          and scores.gn >= th["gn"] and scores.gr >= th["gr"])
    return "yes" if ok else "no"


# --------------------------------------------------------------------------
# critic pretraining

@dataclass
class LabeledEdit:
    source: np.ndarray
    edited: np.ndarray
    instruction: EditInstruction
    label: str  # "yes" | "no"


def _wrong_operator(instr: EditInstruction, rng: np.random.Generator) -> EditInstruction:
    others = [op for op in OPERATORS if op != instr.operator_id]
    op = others[int(rng.integers(0, len(others)))]
    params = {
        "translate": {"dx": int(rng.choice([-2, -1, 1, 2])), "dy": int(rng.choice([-2, -1, 1, 2]))},
        "reflect": {"axis": str(rng.choice(["vertical", "horizontal"]))},
        "decay": {"rate": round(float(rng.uniform(0.5, 0.9)), 3)},
        "grow": {"rate": round(float(rng.uniform(0.15, 0.4)), 3)},
        "impact": {"t_star": int(rng.integers(2, 6))},
        "threshold_brighten": {"threshold": round(float(rng.uniform(0.12, 0.34)), 3),
                               "delta": round(float(rng.uniform(0.15, 0.3)), 3)},
    }[op]
    return EditInstruction(reasoning_type=OPERATORS[op], operator_id=op, parameters=params)


def build_critic_dataset(triplets: list[Triplet], seed: int = 0,
                         thresholds: dict | None = None) -> list[LabeledEdit]:
    """Per triplet: the oracle target, a lightly-noised target, a wrong-operator
    target, a heavily-noised target, and the unedited source. Every label comes
    from the analytic judge, never assumed."""
    out: list[LabeledEdit] = []
    for i, t in enumerate(triplets):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC1, i)))
        candidates = [
            t.target,
            np.clip(t.target + rng.uniform(-0.02, 0.02, size=t.target.shape), 0.0, 1.0),
            apply_oracle_edit(t.source, _wrong_operator(t.instruction, rng)),
            np.clip(t.target + rng.uniform(-0.35, 0.35, size=t.target.shape), 0.0, 1.0),
            t.source.copy(),
        ]
        for edited in candidates:
            label = oracle_answer(oracle_judge(t.source, edited, t.instruction), thresholds)
            out.append(LabeledEdit(source=t.source, edited=edited,
                                   instruction=t.instruction, label=label))
    return out


def _example_features(ex: LabeledEdit, cfg: CriticConfig) -> np.ndarray:
    s = stream_features(select_frames(ex.source, cfg.k_frames), cfg).data
    e = stream_features(select_frames(ex.edited, cfg.k_frames), cfg).data
    return np.concatenate([s, e, e - s, instruction_encoding(ex.instruction)])


def _accuracy_from_feats(store: nc.ParamStore, feats: list[np.ndarray],
                         labels: list[str]) -> float:
    hits = 0
    for x, label in zip(feats, labels):
        l_yes, l_no = _head(store, nc.Tensor(x))
        answer = "yes" if l_yes.item() - l_no.item() >= 0 else "no"
        hits += int(answer == label)
    return hits / len(labels)


def pretrain_critic(examples: list[LabeledEdit], cfg: CriticConfig,
                    epochs: int = 25, lr: float = 3e-3, batch_size: int = 16,
                    seed: int = 0, holdout_fraction: float = 0.2,
                    ) -> tuple[nc.ParamStore, dict]:
    """Train the critic on labeled edits; returns (store, report).

    Frame features are deterministic, so they are computed once up front and
    only the learned head trains per step. The report carries per-epoch
    held-out accuracy; readiness gating against it is the caller's job.
    """
    labels = {ex.label for ex in examples}
    if labels != {"yes", "no"}:
        raise ReflectorError(f"need both yes and no examples, got labels {sorted(labels)}")

    feats = [_example_features(ex, cfg) for ex in examples]
    labs = [ex.label for ex in examples]

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC2)))
    order = rng.permutation(len(examples))
    n_hold = max(1, int(len(examples) * holdout_fraction))
    hold_x = [feats[i] for i in order[:n_hold]]
    hold_y = [labs[i] for i in order[:n_hold]]
    train_x = [feats[i] for i in order[n_hold:]]
    train_y = [labs[i] for i in order[n_hold:]]

    store = nc.ParamStore(seed=seed)
    init_params(store, cfg)
    opt = nc.OptimizerConfig(kind="adamw", lr=lr, weight_decay=1e-4)

    history = []
    for epoch in range(epochs):
        perm = np.random.default_rng(np.random.SeedSequence((seed, 0xC3, epoch))).permutation(len(train_x))
        for start in range(0, len(train_x), batch_size):
            idx = perm[start:start + batch_size]
            store.zero_grads()
            losses = []
            for i in idx:
                l_yes, l_no = _head(store, nc.Tensor(train_x[i]))
                losses.append(reason_loss(l_yes, l_no, train_y[i]))
            total = nc.scale(_sum(losses), 1.0 / len(losses))
            nc.backward(total)
            nc.optimizer_step(store, store.grads(), opt)
        history.append({"epoch": epoch,
                        "holdout_accuracy": _accuracy_from_feats(store, hold_x, hold_y)})

    final = history[-1]["holdout_accuracy"] if history else _accuracy_from_feats(store, hold_x, hold_y)
    report = {
        "holdout_accuracy": final,
        "history": history,
        "n_train": len(train_x),
        "n_holdout": len(hold_x),
        "n_yes": sum(lab == "yes" for lab in labs),
        "n_no": sum(lab == "no" for lab in labs),
    }
    return store, report


def _sum(nodes: list[nc.Tensor]) -> nc.Tensor:
    acc = nodes[0]
    for n in nodes[1:]:
        acc = nc.add(acc, n)
    return acc


# --------------------------------------------------------------------------
# agreement

def agreement(verdicts_a: list[str], verdicts_b: list[str],
              rationales_a: list[np.ndarray] | None = None,
              rationales_b: list[np.ndarray] | None = None) -> dict:
    """Yes/no decision agreement, plus mean rationale cosine when both sides supply one."""
    if len(verdicts_a) != len(verdicts_b):
        raise ReflectorError(f"verdict lists differ in length: {len(verdicts_a)} vs {len(verdicts_b)}")
    matches = sum(a == b for a, b in zip(verdicts_a, verdicts_b))
    out = {"decision_agreement": matches / len(verdicts_a)}
    if rationales_a is not None and rationales_b is not None:
        if not (len(rationales_a) == len(rationales_b) == len(verdicts_a)):
            raise ReflectorError("rationale lists must align with verdicts")
        sims = []
        for ra, rb in zip(rationales_a, rationales_b):
            denom = np.linalg.norm(ra) * np.linalg.norm(rb)
            sims.append(float(np.dot(ra, rb) / denom) if denom > 0 else 0.0)
        out["rationale_similarity"] = float(np.mean(sims))
    return out


def agreement_rows(ids: list[str], verdicts_a: list[str], verdicts_b: list[str]) -> list[dict]:
    return [{"id": i, "answer_a": a, "answer_b": b, "match": int(a == b)}
            for i, a, b in zip(ids, verdicts_a, verdicts_b)]


# --------------------------------------------------------------------------
# prompt template (consumed by the remote judge, not the toy critic)

@dataclass(frozen=True)
class PromptTemplate:
    version: str
    body: str


_DEFAULT_BODY = """You are a strict video-editing evaluator.

Instruction under evaluation:
{instruction}

Assess the edited video against the source on four dimensions:
- edit accuracy: {r_ea}
- preservation consistency: {r_pc}
- generation naturalness: {r_gn}
- generation realism: {r_gr}

First reason concisely, step by step, about each dimension. Then output one
JSON object of the form
{{"SC": {{"score": [<edit accuracy>, <preservation consistency>], "reasoning": "..."}},
 "PQ": {{"score": [<naturalness>, <realism>], "reasoning": "..."}}}}
with every score between 0 and 10. Finish with a single line
"ANSWER: yes" if all four dimensions are satisfied, otherwise "ANSWER: no".
"""

DEFAULT_TEMPLATE = PromptTemplate(version="v1", body=_DEFAULT_BODY)


def render_prompt(template: PromptTemplate, instruction: EditInstruction) -> str:
    return template.body.format(
        instruction=instruction.text,
        r_ea=DIMENSION_RUBRICS["edit accuracy"],
        r_pc=DIMENSION_RUBRICS["preservation consistency"],
        r_gn=DIMENSION_RUBRICS["generation naturalness"],
        r_gr=DIMENSION_RUBRICS["generation realism"],
    )


def save_template(path: str | Path, template: PromptTemplate) -> None:
    atomic_write_text(path, json.dumps({"version": template.version, "body": template.body}))


def load_template(path: str | Path) -> PromptTemplate:
    rec = json.loads(Path(path).read_text())
    return PromptTemplate(version=rec["version"], body=rec["body"])
