"""Parameter containers, affine networks, gradient contract, Adam.

The generator is x_hat = A y + B z + b and the critic is
D(x, y) = w . [x; y] + c.  All trainable scalars of a network live in one
flat ParamVector with named slices, which is the unit both of gradient
computation and of Adam updates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import kernels
from .errors import InvalidArgumentError, NumericalFailureError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ParamLayout:
    """Ordered named slices over a flat vector.

    entries maps name -> (offset, shape); slices must be contiguous,
    disjoint, and cover the vector exactly.
    """

    entries: tuple[tuple[str, int, tuple[int, ...]], ...]

    def __post_init__(self):
        if not self.entries:
            raise InvalidArgumentError("layout needs at least one slice")
        pos = 0
        seen = set()
        for name, offset, shape in self.entries:
            if name in seen:
                raise InvalidArgumentError("duplicate slice name %r" % name)
            seen.add(name)
            if offset != pos:
                raise InvalidArgumentError(
                    "slice %r starts at %d, expected %d (gaps/overlaps forbidden)"
                    % (name, offset, pos)
                )
            pos += int(np.prod(shape, dtype=np.int64)) if shape else 1
        if pos <= 0:
            raise InvalidArgumentError("layout has zero total length")
        object.__setattr__(self, "_total", pos)

    @classmethod
    def of(cls, *specs: tuple[str, tuple[int, ...]]) -> "ParamLayout":
        entries = []
        pos = 0
        for name, shape in specs:
            entries.append((name, pos, tuple(shape)))
            pos += int(np.prod(shape, dtype=np.int64)) if shape else 1
        return cls(entries=tuple(entries))

    @property
    def total(self) -> int:
        return self._total

    def slice_of(self, name: str) -> tuple[slice, tuple[int, ...]]:
        for n, offset, shape in self.entries:
            if n == name:
                size = int(np.prod(shape, dtype=np.int64)) if shape else 1
                return slice(offset, offset + size), shape
        raise InvalidArgumentError("no slice named %r" % name)


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector plus its layout."""

    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != self.layout.total:
            raise InvalidArgumentError(
                "values length %r does not match layout total %d"
                % (values.shape, self.layout.total)
            )
        object.__setattr__(self, "values", values)

    def get(self, name: str) -> np.ndarray:
        sl, shape = self.layout.slice_of(name)
        view = self.values[sl]
        return view.reshape(shape) if shape else view

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values=values, layout=self.layout)

    @property
    def size(self) -> int:
        return self.values.shape[0]


def generator_layout(d: int, d_z: int) -> ParamLayout:
    return ParamLayout.of(("A", (d, d)), ("B", (d, d_z)), ("b", (d,)))


def discriminator_layout(d: int) -> ParamLayout:
    return ParamLayout.of(("w", (2 * d,)), ("c", ()))


@dataclass(frozen=True)
class AffineGenerator:
    """x_hat = A y + B z + b with code z ~ N(0, I_{d_z})."""

    d: int
    d_z: int
    params: ParamVector

    @classmethod
    def init_random(cls, d: int, d_z: int, rng: np.random.Generator) -> "AffineGenerator":
        """A, B entries ~ N(0, 1/d), bias zero: unit-variance outputs at start."""
        layout = generator_layout(d, d_z)
        values = np.zeros(layout.total)
        pv = ParamVector(values=values, layout=layout)
        pv.get("A")[:] = rng.standard_normal((d, d)) / np.sqrt(d)
        pv.get("B")[:] = rng.standard_normal((d, d_z)) / np.sqrt(d)
        return cls(d=d, d_z=d_z, params=pv)

    @property
    def A(self) -> np.ndarray:
        return self.params.get("A")

    @property
    def B(self) -> np.ndarray:
        return self.params.get("B")

    @property
    def b(self) -> np.ndarray:
        return self.params.get("b")

    def forward(self, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        return gen_forward(self, z, y)

    def sample(self, y: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        """n posterior samples for one measurement y, shape (n, d)."""
        z = rng.standard_normal((n, self.d_z))
        return self.A @ y + self.b + z @ self.B.T

    def with_params(self, pv: ParamVector) -> "AffineGenerator":
        return AffineGenerator(d=self.d, d_z=self.d_z, params=pv)


@dataclass(frozen=True)
class LinearDiscriminator:
    """D(x, y) = w . [x; y] + c."""

    d: int
    params: ParamVector

    @classmethod
    def init_random(cls, d: int, rng: np.random.Generator) -> "LinearDiscriminator":
        layout = discriminator_layout(d)
        values = np.zeros(layout.total)
        pv = ParamVector(values=values, layout=layout)
        pv.get("w")[:] = rng.standard_normal(2 * d) / np.sqrt(2 * d)
        return cls(d=d, params=pv)

    @property
    def w(self) -> np.ndarray:
        return self.params.get("w")

    @property
    def w_x(self) -> np.ndarray:
        return self.params.get("w")[: self.d]

    @property
    def w_y(self) -> np.ndarray:
        return self.params.get("w")[self.d :]

    @property
    def c(self) -> float:
        return float(self.params.get("c"))

    def forward(self, x: np.ndarray, y: np.ndarray) -> float:
        return disc_forward(self, x, y)

    def input_grad(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Gradient of D with respect to its x input (constant for an affine critic)."""
        return self.w_x.copy()

    def with_params(self, pv: ParamVector) -> "LinearDiscriminator":
        return LinearDiscriminator(d=self.d, params=pv)


def gen_forward(gen: AffineGenerator, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != (gen.d_z,) or y.shape != (gen.d,):
        raise InvalidArgumentError(
            "expected z of length %d and y of length %d, got %r / %r"
            % (gen.d_z, gen.d, z.shape, y.shape)
        )
    return gen.A @ y + gen.B @ z + gen.b


def disc_forward(disc: LinearDiscriminator, x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != (disc.d,) or y.shape != (disc.d,):
        raise InvalidArgumentError(
            "expected x and y of length %d, got %r / %r" % (disc.d, x.shape, y.shape)
        )
    return float(disc.w_x @ x + disc.w_y @ y + disc.c)


class LossFunction(Protocol):
    """A differentiable scalar function of one ParamVector.

    Implementations may contain stop-gradient boundaries; frozen_fn
    returns the plain scalar function those boundaries define at a base
    point (the function whose derivative value_and_grad reports), which is
    what finite-difference checks must probe.
    """

    def value(self, p: ParamVector) -> float: ...

    def value_and_grad(self, p: ParamVector) -> tuple[float, np.ndarray]: ...

    def frozen_fn(self, p0: ParamVector): ...


def grad_of(loss, p: ParamVector) -> tuple[float, np.ndarray]:
    """Value and gradient of a shipped loss at p.

    Raises NumericalFailureError if the value or any gradient entry is
    non-finite.
    """
    value, grad = loss.value_and_grad(p)
    if not np.isfinite(value):
        raise NumericalFailureError("loss value is non-finite")
    if not np.all(np.isfinite(grad)):
        raise NumericalFailureError("loss gradient has non-finite entries")
    if grad.shape != (p.size,):
        raise InvalidArgumentError(
            "gradient shape %r does not match parameter size %d" % (grad.shape, p.size)
        )
    return float(value), grad


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators plus hyperparameters."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    lr: float
    beta1: float
    beta2: float
    eps: float

    @classmethod
    def zeros(
        cls, n: int, lr: float = 1e-3, beta1: float = 0.0, beta2: float = 0.99,
        eps: float = 1e-8,
    ) -> "AdamState":
        return cls(
            first_moment=np.zeros(n),
            second_moment=np.zeros(n),
            step_count=0,
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(
    p: ParamVector, grad: np.ndarray, s: AdamState
) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update.  Deterministic and side-effect free."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (p.size,):
        raise InvalidArgumentError("gradient length %r != %d" % (grad.shape, p.size))
    if not np.all(np.isfinite(grad)):
        raise NumericalFailureError("non-finite gradient passed to adam_step")
    t = s.step_count + 1
    values, m, v = kernels.adam_kernel(
        p.values, grad, s.first_moment, s.second_moment, t, s.lr, s.beta1, s.beta2,
        s.eps,
    )
    new_state = AdamState(
        first_moment=m,
        second_moment=v,
        step_count=t,
        lr=s.lr,
        beta1=s.beta1,
        beta2=s.beta2,
        eps=s.eps,
    )
    return p.with_values(values), new_state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_to_dict(
    p: ParamVector, s: AdamState, config_hash: str, extra: dict | None = None
) -> dict:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "checkpoint",
        "layout": [
            {"name": n, "offset": o, "shape": list(sh)}
            for n, o, sh in p.layout.entries
        ],
        "values": p.values.tolist(),
        "adam": {
            "first_moment": s.first_moment.tolist(),
            "second_moment": s.second_moment.tolist(),
            "step_count": s.step_count,
            "lr": s.lr,
            "beta1": s.beta1,
            "beta2": s.beta2,
            "eps": s.eps,
        },
        "config_hash": config_hash,
    }
    if extra:
        doc.update(extra)
    return doc


def checkpoint_from_dict(doc: dict) -> tuple[ParamVector, AdamState, str]:
    if doc.get("kind") != "checkpoint" or doc.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidArgumentError("not a supported checkpoint document")
    layout = ParamLayout(
        entries=tuple(
            (e["name"], int(e["offset"]), tuple(e["shape"])) for e in doc["layout"]
        )
    )
    p = ParamVector(values=np.array(doc["values"]), layout=layout)
    a = doc["adam"]
    s = AdamState(
        first_moment=np.array(a["first_moment"]),
        second_moment=np.array(a["second_moment"]),
        step_count=int(a["step_count"]),
        lr=float(a["lr"]),
        beta1=float(a["beta1"]),
        beta2=float(a["beta2"]),
        eps=float(a["eps"]),
    )
    return p, s, str(doc.get("config_hash", ""))


def save_checkpoint(path, p: ParamVector, s: AdamState, config_hash: str, **extra):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_to_dict(p, s, config_hash, extra or None), fh)


def load_checkpoint(path) -> tuple[ParamVector, AdamState, str]:
    with open(path, encoding="utf-8") as fh:
        return checkpoint_from_dict(json.load(fh))
