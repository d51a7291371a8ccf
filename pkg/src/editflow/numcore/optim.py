"""Named parameter storage, SGD/AdamW steps, and a finite-difference gradient check."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .tensor import Tensor, ShapeError, backward


@dataclass
class OptimizerConfig:
    kind: str = "adamw"  # "sgd" | "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not (0.0 <= b < 1.0):
                raise ValueError(f"{name} must lie in [0, 1)")


@dataclass
class _MomentState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Named parameter tensors plus per-parameter optimizer state.

    Names are unique and shapes immutable after creation; weights default
    to uniform init in [-sqrt(1/fan_in), +sqrt(1/fan_in)] drawn from the
    store's seed.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self._params: dict[str, Tensor] = {}
        self._state: dict[str, _MomentState] = {}

    def create(self, name: str, shape: tuple[int, ...], fan_in: int | None = None,
               init: str = "uniform") -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "uniform":
            fan = fan_in if fan_in is not None else (shape[-1] if shape else 1)
            bound = float(np.sqrt(1.0 / max(1, fan)))
            data = self._rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        self._state[name] = _MomentState(m=np.zeros(shape), v=np.zeros(shape))
        return t

    def get_or_create(self, name: str, shape: tuple[int, ...], fan_in: int | None = None,
                      init: str = "uniform") -> Tensor:
        t = self._params.get(name)
        if t is not None:
            if t.shape != tuple(shape):
                raise ShapeError(f"parameter {name!r} exists with shape {t.shape}, requested {tuple(shape)}")
            return t
        return self.create(name, shape, fan_in=fan_in, init=init)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def state(self, name: str) -> _MomentState:
        return self._state[name]

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {name: t.grad for name, t in self._params.items()}

    def set_values(self, values: Mapping[str, np.ndarray]) -> None:
        for name, data in values.items():
            t = self._params[name]
            data = np.asarray(data, dtype=np.float64)
            if data.shape != t.data.shape:
                raise ShapeError(f"parameter {name!r}: checkpoint shape {data.shape} != {t.data.shape}")
            t.data[...] = data

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}


def optimizer_step(store: ParamStore, grads: Mapping[str, np.ndarray],
                   config: OptimizerConfig,
                   select: Callable[[str], bool] | None = None) -> None:
    """Apply one update in place.

    sgd does exactly ``p -= lr * g``; adamw applies bias-corrected moments
    plus decoupled weight decay. ``select`` restricts which parameters move
    (others keep their state untouched).
    """
    for name, g in grads.items():
        if g is None:
            continue
        if select is not None and not select(name):
            continue
        if name not in store._params:
            raise KeyError(f"unknown parameter {name!r}")
        p = store._params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter is {p.data.shape}")
        if config.kind == "sgd":
            p.data -= config.lr * g
        else:
            st = store._state[name]
            st.step += 1
            st.m = config.beta1 * st.m + (1.0 - config.beta1) * g
            st.v = config.beta2 * st.v + (1.0 - config.beta2) * (g * g)
            m_hat = st.m / (1.0 - config.beta1 ** st.step)
            v_hat = st.v / (1.0 - config.beta2 ** st.step)
            p.data -= config.lr * (m_hat / (np.sqrt(v_hat) + config.eps))
            if config.weight_decay:
                p.data -= config.lr * config.weight_decay * p.data


def grad_check(f: Callable[[], Tensor], store: ParamStore, step: float = 1e-5,
               param_names: Iterable[str] | None = None) -> float:
    """Max relative error between analytic gradients of ``f`` and central differences.

    ``f`` must rebuild its graph from the store's current parameter values on
    every call. Relative error per entry is |a - n| / max(1e-8, |a| + |n|).
    """
    if not step > 0:
        raise ValueError("step must be positive")
    names = list(param_names) if param_names is not None else store.names()

    store.zero_grads()
    loss = f()
    backward(loss)
    analytic = {n: (store[n].grad.copy() if store[n].grad is not None
                    else np.zeros_like(store[n].data)) for n in names}

    worst = 0.0
    for n in names:
        p = store[n]
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = f().item()
            flat[i] = keep - step
            down = f().item()
            flat[i] = keep
            numeric = (up - down) / (2.0 * step)
            a = analytic[n].reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
