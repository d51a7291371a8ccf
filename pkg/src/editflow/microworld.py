"""Synthetic video-editing world with exactly computable edit semantics.

Videos are F x H x W float64 arrays in [0,1]: a uniform background with one
or two bright rectangles moving frame to frame. Every edit operator is a
deterministic pure function of (source, instruction), so each generated
triplet carries its ground-truth target, the exact set of changed pixels,
and an analytic four-dimension quality score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore.checkpoint import atomic_write_text

REASONING_TYPES = ("causal", "commonsense", "spatial", "temporal")

# operator -> reasoning category; identity is valid under every category
OPERATORS = {
    "translate": "spatial",
    "reflect": "spatial",
    "decay": "temporal",
    "grow": "temporal",
    "impact": "causal",
    "threshold_brighten": "commonsense",
}

TEMPLATE_VERSION = "v1"

# pixels closer to the background than this are treated as background
_BG_TOL = 1e-9


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    top: int
    left: int
    height: int
    width: int
    intensity: float
    vy: float = 0.0  # rows per frame
    vx: float = 0.0  # columns per frame


@dataclass(frozen=True)
class SceneParams:
    background: float = 0.1
    objects: tuple[SceneObject, ...] = ()
    frames: int = 8
    height: int = 8
    width: int = 8


@dataclass(frozen=True)
class EditInstruction:
    reasoning_type: str
    operator_id: str
    parameters: dict
    text: str = ""

    def __post_init__(self):
        if self.reasoning_type not in REASONING_TYPES:
            raise WorldError(f"unknown reasoning type {self.reasoning_type!r}")
        if self.operator_id != "identity":
            if self.operator_id not in OPERATORS:
                raise WorldError(f"unknown operator {self.operator_id!r}")
            if OPERATORS[self.operator_id] != self.reasoning_type:
                raise WorldError(
                    f"operator {self.operator_id!r} is not a {self.reasoning_type} edit")
        if not self.text:
            object.__setattr__(self, "text", render_text(self.operator_id, self.parameters))


@dataclass
class Triplet:
    id: str
    source: np.ndarray
    instruction: EditInstruction
    target: np.ndarray
    subset: str = "editing"  # "editing" | "in_context"


@dataclass(frozen=True)
class OracleScores:
    ea: float
    pc: float
    gn: float
    gr: float

    def as_dict(self) -> dict:
        return {"ea": self.ea, "pc": self.pc, "gn": self.gn, "gr": self.gr}


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


# --------------------------------------------------------------------------
# instruction text

_LITERAL = {
    "identity": "leave the scene exactly as it is",
    "translate": "shift the object by {dx} column(s) and {dy} row(s)",
    "reflect": "mirror the scene across its {axis} axis",
    "decay": "dim the object by a factor of {rate} every frame",
    "grow": "enlarge the object by roughly {rate} pixel(s) of radius per frame",
    "impact": "split the object into two halves starting at frame {t_star}",
    "threshold_brighten": (
        "brighten the background by {delta} if its mean level is below {threshold}"),
}

_REASONING = {
    "identity": "imagine nothing in the scene had any reason to change",
    "translate": (
        "imagine the object drifted with the current, ending up {dx} column(s) "
        "over and {dy} row(s) down"),
    "reflect": "picture the whole scene observed in a mirror set along its {axis} axis",
    "decay": (
        "imagine the object cooling like an ember, fading to {rate} of its "
        "brightness with every passing frame"),
    "grow": "imagine the object swelling outward a little more in every frame, about {rate} per frame",
    "impact": (
        "suppose an impact at frame {t_star} cracked the object apart, its two "
        "halves drifting away from each other afterwards"),
    "threshold_brighten": (
        "if the scene is dim enough (below {threshold}), let dawn lift the "
        "background light by {delta}"),
}


def _fmt(template: str, parameters: dict) -> str:
    clean = {k: (round(float(v), 3) if isinstance(v, float) else v) for k, v in parameters.items()}
    return template.format(**clean)


def render_text(operator_id: str, parameters: dict) -> str:
    """Reasoning-form instruction text, deterministic per (operator, parameters)."""
    return _fmt(_REASONING[operator_id], parameters)


def render_literal(operator_id: str, parameters: dict) -> str:
    """Plain imperative form of the same instruction."""
    return _fmt(_LITERAL[operator_id], parameters)


# --------------------------------------------------------------------------
# rendering

def object_rect(obj: SceneObject, t: int) -> tuple[int, int, int, int]:
    top = round_half_up(obj.top + obj.vy * t)
    left = round_half_up(obj.left + obj.vx * t)
    return top, left, obj.height, obj.width


def render_scene(params: SceneParams, seed: int | None = None) -> np.ndarray:
    """Render a video from explicit scene parameters.

    If ``params.objects`` is empty and a seed is given, 1-2 objects are drawn
    from that seed first; rendering itself is deterministic.
    """
    if not (0.0 <= params.background <= 1.0):
        raise WorldError(f"background {params.background} outside [0,1]")
    objects = params.objects
    if not objects and seed is not None:
        objects = sample_objects(np.random.default_rng(seed), params)
    video = np.full((params.frames, params.height, params.width), params.background)
    for t in range(params.frames):
        for obj in objects:
            top, left, h, w = object_rect(obj, t)
            if top < 0 or left < 0 or top + h > params.height or left + w > params.width:
                raise WorldError(
                    f"object leaves the frame at t={t}: rect ({top},{left},{h},{w}) "
                    f"in {params.height}x{params.width}")
            if not (0.0 <= obj.intensity <= 1.0):
                raise WorldError(f"object intensity {obj.intensity} outside [0,1]")
            video[t, top:top + h, left:left + w] = obj.intensity
    return video


def sample_objects(rng: np.random.Generator, params: SceneParams,
                   n_objects: int | None = None) -> tuple[SceneObject, ...]:
    """Draw 1-2 rectangles guaranteed to stay in frame over all F frames."""
    n = n_objects if n_objects is not None else int(rng.integers(1, 3))
    objects = []
    for _ in range(n):
        h = int(rng.integers(1, min(3, params.height) + 1))
        w = int(rng.integers(1, min(3, params.width) + 1))
        vy = float(rng.choice([-0.5, 0.0, 0.0, 0.5]))
        vx = float(rng.choice([-0.5, 0.0, 0.0, 0.5]))
        span_y = round_half_up(abs(vy) * (params.frames - 1))
        span_x = round_half_up(abs(vx) * (params.frames - 1))
        max_top = params.height - h - span_y
        max_left = params.width - w - span_x
        if max_top < 0 or max_left < 0:
            vy = vx = 0.0
            span_y = span_x = 0
            max_top = params.height - h
            max_left = params.width - w
        top = int(rng.integers(0, max_top + 1)) + (span_y if vy < 0 else 0)
        left = int(rng.integers(0, max_left + 1)) + (span_x if vx < 0 else 0)
        intensity = float(rng.uniform(0.55, 0.95))
        objects.append(SceneObject(top, left, h, w, intensity, vy, vx))
    return tuple(objects)


def infer_background(video: np.ndarray) -> float:
    """Uniform background level; objects cover well under half the frame."""
    return float(np.median(video))


# --------------------------------------------------------------------------
# edit operators (pure pixel functions of source + parameters)

def _shift_frame(frame: np.ndarray, dy: int, dx: int, fill: float) -> np.ndarray:
    h, w = frame.shape
    out = np.full_like(frame, fill)
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = frame[src_r, src_c]
    return out


def _dilate(mag: np.ndarray, n: int) -> np.ndarray:
    """Grey dilation of a nonnegative magnitude image by an n-pixel square radius."""
    out = mag
    for _ in range(n):
        padded = np.pad(out, 1, mode="constant")
        stacked = [padded[1 + dy:1 + dy + out.shape[0], 1 + dx:1 + dx + out.shape[1]]
                   for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
        out = np.max(stacked, axis=0)
    return out


def _edit_translate(video: np.ndarray, p: dict, bg: float) -> np.ndarray:
    dy, dx = int(p["dy"]), int(p["dx"])
    return np.stack([_shift_frame(f, dy, dx, bg) for f in video])


def _edit_reflect(video: np.ndarray, p: dict, bg: float) -> np.ndarray:
    axis = p["axis"]
    if axis == "vertical":      # mirror left-right
        return video[:, :, ::-1].copy()
    if axis == "horizontal":    # mirror top-bottom
        return video[:, ::-1, :].copy()
    raise WorldError(f"reflect: unknown axis {axis!r}")


def _edit_decay(video: np.ndarray, p: dict, bg: float) -> np.ndarray:
    # object pixels fade as rate**t; the background keeps its level
    rate = float(p["rate"])
    t = np.arange(video.shape[0]).reshape(-1, 1, 1)
    obj = np.abs(video - bg) > _BG_TOL
    return np.where(obj, video * rate ** t, video)


def _edit_grow(video: np.ndarray, p: dict, bg: float) -> np.ndarray:
    rate = float(p["rate"])
    out = np.empty_like(video)
    for t in range(video.shape[0]):
        n = round_half_up(rate * t)
        out[t] = bg + _dilate(np.maximum(video[t] - bg, 0.0), n)
    return out


def _edit_impact(video: np.ndarray, p: dict, bg: float) -> np.ndarray:
    t_star = int(p["t_star"])
    out = video.copy()
    for t in range(t_star, video.shape[0]):
        frame = video[t]
        mask = np.abs(frame - bg) > _BG_TOL
        if not mask.any():
            continue
        cols = np.where(mask.any(axis=0))[0]
        mid = (cols[0] + cols[-1] + 1) // 2
        gap = 1 + (t - t_star)
        left = np.where(mask, frame, bg)
        left[:, mid:] = bg
        right = np.where(mask, frame, bg)
        right[:, :mid] = bg
        shifted = np.maximum(_shift_frame(left, 0, -gap, bg), _shift_frame(right, 0, gap, bg))
        out[t] = np.where(np.abs(shifted - bg) > _BG_TOL, shifted, bg)
    return out


def _edit_threshold_brighten(video: np.ndarray, p: dict, bg: float) -> np.ndarray:
    threshold, delta = float(p["threshold"]), float(p["delta"])
    bg_mask = np.abs(video - bg) <= _BG_TOL
    mean_bg = float(video[bg_mask].mean()) if bg_mask.any() else bg
    if mean_bg >= threshold:
        return video.copy()
    out = video.copy()
    out[bg_mask] = np.clip(out[bg_mask] + delta, 0.0, 1.0)
    return out


_EDITS = {
    "translate": _edit_translate,
    "reflect": _edit_reflect,
    "decay": _edit_decay,
    "grow": _edit_grow,
    "impact": _edit_impact,
    "threshold_brighten": _edit_threshold_brighten,
}


def apply_oracle_edit(source: np.ndarray, instruction: EditInstruction) -> np.ndarray:
    """Ground-truth target for an instruction applied to a pristine source."""
    if instruction.operator_id == "identity":
        return source.copy()
    fn = _EDITS.get(instruction.operator_id)
    if fn is None:
        raise WorldError(f"unknown operator {instruction.operator_id!r}")
    bg = infer_background(source)
    return fn(source, instruction.parameters, bg)


def edit_mask(source: np.ndarray, instruction: EditInstruction) -> np.ndarray:
    """Boolean F x H x W mask, true exactly where the oracle edit changes pixels."""
    return apply_oracle_edit(source, instruction) != source


# --------------------------------------------------------------------------
# analytic judge

_EA_RMSE_SCALE = 0.5
_GN_JITTER_SCALE = 0.25
_GR_BAND = 0.005


def _masked_rmse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return 0.0
    d = a[mask] - b[mask]
    return float(np.sqrt(np.mean(d * d)))


def oracle_judge(source: np.ndarray, edited: np.ndarray,
                 instruction: EditInstruction) -> OracleScores:
    """Score an edit on the 0-10 accuracy / preservation / naturalness / realism axes.

    Accuracy compares the edited region against the oracle target; preservation
    compares the untouched region against the source; naturalness penalizes
    frame-to-frame jitter the target does not have; realism penalizes values
    crowding the [0,1] clip boundaries.
    """
    if edited.shape != source.shape:
        raise WorldError(f"edited shape {edited.shape} != source shape {source.shape}")
    target = apply_oracle_edit(source, instruction)
    mask = target != source

    ea = 10.0 * (1.0 - min(1.0, _masked_rmse(edited, target, mask) / _EA_RMSE_SCALE))
    pc = 10.0 * (1.0 - min(1.0, _masked_rmse(edited, source, ~mask) / _EA_RMSE_SCALE))

    resid = edited - target
    if resid.shape[0] > 1:
        jitter = float(np.mean(np.abs(np.diff(resid, axis=0))))
    else:
        jitter = 0.0
    gn = 10.0 * (1.0 - min(1.0, jitter / _GN_JITTER_SCALE))

    outside = float(np.mean((edited < _GR_BAND) | (edited > 1.0 - _GR_BAND)))
    gr = 10.0 * (1.0 - min(1.0, 10.0 * outside))
    return OracleScores(ea=ea, pc=pc, gn=gn, gr=gr)


# --------------------------------------------------------------------------
# dataset generation

def _sample_parameters(rng: np.random.Generator, operator_id: str,
                       params: SceneParams, objects: tuple[SceneObject, ...]) -> dict:
    if operator_id == "translate":
        # pick a shift that keeps every object inside the frame at every t
        for _ in range(64):
            dx = int(rng.choice([-2, -1, 1, 2]))
            dy = int(rng.choice([-2, -1, 1, 2]))
            ok = True
            for obj in objects:
                for t in range(params.frames):
                    top, left, h, w = object_rect(obj, t)
                    if not (0 <= top + dy and top + dy + h <= params.height
                            and 0 <= left + dx and left + dx + w <= params.width):
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                return {"dx": dx, "dy": dy}
        return {"dx": 0, "dy": 0}
    if operator_id == "reflect":
        return {"axis": str(rng.choice(["vertical", "horizontal"]))}
    if operator_id == "decay":
        return {"rate": round(float(rng.uniform(0.5, 0.9)), 3)}
    if operator_id == "grow":
        return {"rate": round(float(rng.uniform(0.15, 0.4)), 3)}
    if operator_id == "impact":
        return {"t_star": int(rng.integers(2, min(6, params.frames - 1)))}
    if operator_id == "threshold_brighten":
        # condition holds for roughly half the draws given backgrounds in [0.08, 0.30]
        return {"threshold": round(float(rng.uniform(0.12, 0.34)), 3),
                "delta": round(float(rng.uniform(0.15, 0.3)), 3)}
    raise WorldError(f"no parameter sampler for {operator_id!r}")


def make_triplet(idx: int, seed: int, subset: str = "editing",
                 frames: int = 8, height: int = 8, width: int = 8,
                 reasoning_type: str | None = None) -> Triplet:
    """One deterministic triplet keyed by (seed, idx)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, idx)))
    if reasoning_type is None:
        reasoning_type = REASONING_TYPES[idx % len(REASONING_TYPES)]
    ops = [op for op, cat in OPERATORS.items() if cat == reasoning_type]
    operator_id = ops[(idx // len(REASONING_TYPES)) % len(ops)]

    base = SceneParams(background=round(float(rng.uniform(0.08, 0.30)), 3),
                       frames=frames, height=height, width=width)
    n_objects = 1 if operator_id == "impact" else None
    scene = SceneParams(background=base.background,
                        objects=sample_objects(rng, base, n_objects=n_objects),
                        frames=frames, height=height, width=width)
    source = render_scene(scene)
    parameters = _sample_parameters(rng, operator_id, scene, scene.objects)
    instruction = EditInstruction(reasoning_type=reasoning_type,
                                  operator_id=operator_id, parameters=parameters)
    target = apply_oracle_edit(source, instruction)
    return Triplet(id=f"{subset}-{idx:05d}", source=source,
                   instruction=instruction, target=target, subset=subset)


def split_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Floor each ratio of n; any remainder goes to train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise WorldError(f"split ratios {ratios} do not sum to 1")
    counts = [int(np.floor(n * r)) for r in ratios]
    counts[0] += n - sum(counts)
    return tuple(counts)


def gen_dataset(n: int, seed: int, subset: str = "editing",
                split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                frames: int = 8, height: int = 8, width: int = 8,
                ) -> tuple[list[Triplet], dict]:
    """Deterministic dataset with reasoning categories balanced within +-1.

    Returns the triplets in id order plus a manifest mapping split names to
    disjoint id lists.
    """
    if n <= 0:
        raise WorldError("dataset size must be positive")
    triplets = [make_triplet(i, seed, subset, frames, height, width) for i in range(n)]

    order = np.random.default_rng(np.random.SeedSequence((seed, 0xD5))).permutation(n)
    n_train, n_val, n_test = split_counts(n, tuple(split_ratios))
    ids = [triplets[i].id for i in order]
    manifest = {
        "seed": seed,
        "n": n,
        "subset": subset,
        "split_ratios": list(split_ratios),
        "splits": {
            "train": sorted(ids[:n_train]),
            "val": sorted(ids[n_train:n_train + n_val]),
            "test": sorted(ids[n_train + n_val:]),
        },
    }
    return triplets, manifest


# --------------------------------------------------------------------------
# JSONL dataset files

def triplet_to_record(t: Triplet) -> dict:
    return {
        "id": t.id,
        "subset": t.subset,
        "reasoning_type": t.instruction.reasoning_type,
        "operator_id": t.instruction.operator_id,
        "parameters": t.instruction.parameters,
        "instruction_text": t.instruction.text,
        "source": t.source.tolist(),
        "target": t.target.tolist(),
    }


def record_to_triplet(rec: dict) -> Triplet:
    instruction = EditInstruction(
        reasoning_type=rec["reasoning_type"],
        operator_id=rec["operator_id"],
        parameters=rec["parameters"],
        text=rec["instruction_text"],
    )
    return Triplet(id=rec["id"], source=np.asarray(rec["source"], dtype=np.float64),
                   instruction=instruction,
                   target=np.asarray(rec["target"], dtype=np.float64),
                   subset=rec.get("subset", "editing"))


def write_dataset_jsonl(path: str | Path, triplets: list[Triplet]) -> None:
    lines = [json.dumps(triplet_to_record(t)) for t in triplets]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_dataset_jsonl(path: str | Path) -> list[Triplet]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(record_to_triplet(json.loads(line)))
    return out
