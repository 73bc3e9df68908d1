"""Log-uniform hyperparameter distributions, one per ensemble member.

A member distribution is a product of ``m`` independent log-uniform laws on
``[a_i, b_i]``. It is optimized through the unconstrained pair
``(ln a, ln b)`` and projected back onto the schema's feasible box after
every update.
"""

from dataclasses import dataclass, field

import numpy as np

from .diffcore import ops
from .diffcore.tensor import Tensor

MIN_LOG_WIDTH = 1e-4
KINDS = ("l2", "dropout", "label_smoothing")


@dataclass(frozen=True)
class HyperSchema:
    """Ordered hyperparameter names with global bounds and kind tags."""

    names: tuple
    bounds: tuple  # ((a_min, b_max), ...)
    kinds: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "bounds", tuple((float(a), float(b)) for a, b in self.bounds))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if len(set(self.names)) != len(self.names):
            raise ValueError("hyperparameter names must be unique")
        if not (len(self.names) == len(self.bounds) == len(self.kinds)):
            raise ValueError("names, bounds and kinds must have equal length")
        for name, (a, b), kind in zip(self.names, self.bounds, self.kinds):
            if not 0.0 < a < b:
                raise ValueError(f"{name}: need 0 < a_min < b_max, got ({a}, {b})")
            if kind not in KINDS:
                raise ValueError(f"{name}: unknown kind {kind!r}")

    @property
    def m(self):
        return len(self.names)

    @property
    def lower(self):
        return np.array([a for a, _ in self.bounds])

    @property
    def upper(self):
        return np.array([b for _, b in self.bounds])

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown hyperparameter {name!r}") from None

    def normalize(self, lam):
        """Map λ (any leading shape, last axis m) to [-1, 1] on a log scale."""
        lo, hi = np.log(self.lower), np.log(self.upper)
        return 2.0 * (np.log(lam) - lo) / (hi - lo) - 1.0

    def check(self, lam, rtol=1e-9):
        lam = np.asarray(lam, dtype=np.float64)
        lo = self.lower * (1 - rtol)
        hi = self.upper * (1 + rtol)
        if np.any(lam < lo) or np.any(lam > hi):
            raise ValueError("hyperparameters outside the schema bounds")
        return lam

    def to_dict(self):
        return {"names": list(self.names), "bounds": [list(b) for b in self.bounds],
                "kinds": list(self.kinds)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["names"], d["bounds"], d["kinds"])


@dataclass
class MemberDistribution:
    """Bounds of ``m`` independent log-uniform distributions."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float64)).copy()
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float64)).copy()
        if self.lower.shape != self.upper.shape:
            raise ValueError("lower and upper bounds differ in length")

    @property
    def m(self):
        return self.lower.size

    @property
    def log_lower(self):
        return np.log(self.lower)

    @property
    def log_upper(self):
        return np.log(self.upper)

    @classmethod
    def from_logs(cls, log_lower, log_upper):
        return cls(np.exp(log_lower), np.exp(log_upper))

    @classmethod
    def full_range(cls, schema, shrink_l2_decades=0.0):
        """Initial distribution covering the schema box.

        ``shrink_l2_decades`` trims each end of l2-kind ranges by that many
        decades (clipping still uses the original schema bounds).
        """
        lo, hi = np.log(schema.lower), np.log(schema.upper)
        for i, kind in enumerate(schema.kinds):
            if kind == "l2" and shrink_l2_decades > 0:
                cut = shrink_l2_decades * np.log(10.0)
                if hi[i] - lo[i] > 2 * cut + MIN_LOG_WIDTH:
                    lo[i] += cut
                    hi[i] -= cut
        return cls.from_logs(lo, hi)

    def copy(self):
        return MemberDistribution(self.lower.copy(), self.upper.copy())

    def validate(self):
        if np.any(self.lower <= 0) or np.any(self.upper <= self.lower):
            raise ValueError("degenerate distribution: need 0 < a < b componentwise")


def sample(dist, rng, n=None, reparametrized=False):
    """Draw λ = exp(ln a + u (ln b - ln a)) with u ~ U[0, 1].

    ``rng`` is a numpy Generator. Returns an array of shape (m,) or (n, m);
    with ``reparametrized`` set, returns ``(lam, dlam_dlog_lower,
    dlam_dlog_upper)`` where the derivatives are λ(1-u) and λu.
    """
    dist.validate()
    shape = (dist.m,) if n is None else (n, dist.m)
    u = rng.random(shape)
    lo, hi = dist.log_lower, dist.log_upper
    lam = np.exp(lo + u * (hi - lo))
    if reparametrized:
        return lam, lam * (1.0 - u), lam * u
    return lam


def sample_tensor(log_lower, log_upper, u):
    """Differentiable λ rows from bound tensors (broadcast over rows) and fixed u."""
    return ops.exp(log_lower + u * (log_upper - log_lower))


def entropy(dist):
    """Closed-form entropy summed over dimensions."""
    dist.validate()
    lo, hi = dist.log_lower, dist.log_upper
    return float(np.sum(0.5 * (lo + hi) + np.log(hi - lo)))


def entropy_tensor(log_lower, log_upper):
    return (0.5 * (log_lower + log_upper) + ops.log(log_upper - log_lower)).sum()


def joint_entropy(dists):
    """Entropy of the product over independent members."""
    return float(sum(entropy(d) for d in dists))


def mean(dist):
    """Componentwise mean (b - a) / (ln b - ln a)."""
    dist.validate()
    a, b = dist.lower, dist.upper
    lo, hi = dist.log_lower, dist.log_upper
    width = hi - lo
    # (b - a)/(ln b - ln a) = a * expm1(w)/w, stable for small widths
    return a * np.expm1(width) / width


def log_density(dist, lam):
    lam = np.asarray(lam, dtype=np.float64)
    inside = np.all((lam >= dist.lower) & (lam <= dist.upper), axis=-1)
    val = -np.sum(np.log(lam) + np.log(dist.log_upper - dist.log_lower), axis=-1)
    return np.where(inside, val, -np.inf)


def project_logs(log_lower, log_upper, schema, min_width=MIN_LOG_WIDTH):
    """Project a pair of log-bound arrays onto the feasible set.

    Order is restored by swapping, both ends are clipped into the schema
    box, and widths below ``min_width`` are widened symmetrically (then
    shifted back inside the box).
    """
    lo_box, hi_box = np.log(schema.lower), np.log(schema.upper)
    lo = np.minimum(log_lower, log_upper)
    hi = np.maximum(log_lower, log_upper)
    lo = np.clip(lo, lo_box, hi_box)
    hi = np.clip(hi, lo_box, hi_box)
    narrow = hi - lo < min_width
    if np.any(narrow):
        mid = 0.5 * (lo + hi)
        mid = np.clip(mid, lo_box + 0.5 * min_width, hi_box - 0.5 * min_width)
        lo = np.where(narrow, mid - 0.5 * min_width, lo)
        hi = np.where(narrow, mid + 0.5 * min_width, hi)
    return lo, hi


def project(dist, schema, min_width=MIN_LOG_WIDTH):
    lo, hi = project_logs(np.log(dist.lower), np.log(dist.upper), schema, min_width)
    return MemberDistribution.from_logs(lo, hi)


@dataclass
class BoundParams:
    """Trainable (ln a, ln b) tensors for K members, shape (K, m) each."""

    log_lower: Tensor
    log_upper: Tensor
    history: list = field(default_factory=list)

    @classmethod
    def from_dists(cls, dists):
        lo = np.stack([d.log_lower for d in dists])
        hi = np.stack([d.log_upper for d in dists])
        return cls(Tensor.param(lo, name="log_lower"), Tensor.param(hi, name="log_upper"))

    def dists(self):
        return [MemberDistribution.from_logs(lo, hi)
                for lo, hi in zip(self.log_lower.values, self.log_upper.values)]

    def project_(self, schema, min_width=MIN_LOG_WIDTH):
        lo, hi = project_logs(self.log_lower.values, self.log_upper.values, schema, min_width)
        self.log_lower.values[...] = lo
        self.log_upper.values[...] = hi
