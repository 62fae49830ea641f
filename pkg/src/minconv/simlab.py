"""Monte Carlo study of how well magnitude operators track ``|x*w|``.

Two estimators:

* :func:`correlation` -- Pearson coefficient between ``h = |x*w|`` and a
  candidate ``g`` (min, sum or max of magnitudes) for independent operands.
* :func:`relative_error_L` -- mean of ``|H - G| / H`` with ``G`` the
  min-selector, dropping samples where ``H`` vanishes.

Normal distributions are written ``N(mean, sigma)`` with ``sigma`` the
standard deviation. All randomness comes from numpy's PCG64 generator
seeded explicitly, so estimates are reproducible bit for bit.
"""
import csv
from dataclasses import dataclass

import numpy as np

from minconv.errors import DegenerateInputError, FormatError, UndefinedCorrelationError

ABS_MUL = "abs_mul"
MIN_SELECTOR = "min_selector"
ADDITION = "addition"
MAX_SELECTOR = "max_selector"
OPERATORS = (ABS_MUL, MIN_SELECTOR, ADDITION, MAX_SELECTOR)
CANDIDATES = (MIN_SELECTOR, ADDITION, MAX_SELECTOR)

DEFAULT_SAMPLES = 1_000_000
DEFAULT_EPSILON = 1e-8


@dataclass(frozen=True)
class DistributionSpec:
    kind: str  # "normal" | "uniform"
    a: float  # mean | lower bound
    b: float  # standard deviation | upper bound

    def __post_init__(self):
        if self.kind == "normal":
            if not self.b > 0:
                raise ValueError(f"normal scale must be > 0, got {self.b}")
        elif self.kind == "uniform":
            if not self.a < self.b:
                raise ValueError(f"uniform needs a < b, got ({self.a}, {self.b})")
        else:
            raise ValueError(f"unknown distribution kind {self.kind!r}")

    @property
    def label(self):
        return f"{'N' if self.kind == 'normal' else 'U'}({self.a:g},{self.b:g})"

    def from_standard(self, z):
        """Map standard variates (N(0,1) or U[0,1)) onto this distribution."""
        if self.kind == "normal":
            return self.a + self.b * z
        return self.a + (self.b - self.a) * z

    def standard(self, rng, n):
        return rng.standard_normal(n) if self.kind == "normal" else rng.random(n)

    def sample(self, rng, n):
        return self.from_standard(self.standard(rng, n))


def normal(mean, sigma):
    return DistributionSpec("normal", float(mean), float(sigma))


def uniform(low, high):
    return DistributionSpec("uniform", float(low), float(high))


def parse_distribution(text):
    """Parse ``N(0,1)`` / ``U(0,10)`` (case-insensitive)."""
    t = text.strip().replace(" ", "")
    if len(t) < 5 or t[1] != "(" or t[-1] != ")" or t[0].upper() not in "NU":
        raise ValueError(f"cannot parse distribution {text!r}; expected e.g. N(0,1) or U(0,1)")
    try:
        a, b = (float(v) for v in t[2:-1].split(","))
    except ValueError as e:
        raise ValueError(f"cannot parse distribution {text!r}") from e
    return normal(a, b) if t[0].upper() == "N" else uniform(a, b)


def apply_operator(op, x, w):
    """Evaluate one operator on scalars or arrays of operands."""
    ax, aw = np.abs(x), np.abs(w)
    if op == ABS_MUL:
        return np.abs(np.multiply(x, w))
    if op == MIN_SELECTOR:
        return np.minimum(ax, aw)
    if op == ADDITION:
        return ax + aw
    if op == MAX_SELECTOR:
        return np.maximum(ax, aw)
    raise ValueError(f"unknown operator {op!r}; expected one of {OPERATORS}")


def pearson(h, g):
    """Sample Pearson coefficient, computed in float64 from centred data."""
    h = np.asarray(h, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if h.shape != g.shape or h.size < 2:
        raise DegenerateInputError("pearson needs two equally sized samples of length >= 2")
    hc = h - h.mean()
    gc = g - g.mean()
    vh = float(hc @ hc)
    vg = float(gc @ gc)
    if vh == 0.0 or vg == 0.0:
        raise UndefinedCorrelationError("correlation undefined: a sample has zero variance")
    r = float(hc @ gc) / np.sqrt(vh * vg)
    return float(np.clip(r, -1.0, 1.0))


def draw_operands(dx: DistributionSpec, dw: DistributionSpec, n, seed):
    """Independent operand samples; ``x`` and ``w`` use separate child streams."""
    sx, sw = np.random.SeedSequence(seed).spawn(2)
    return dx.sample(np.random.default_rng(sx), n), dw.sample(np.random.default_rng(sw), n)


def correlation(op, dx, dw, n_samples=DEFAULT_SAMPLES, seed=0):
    if n_samples < 2:
        raise DegenerateInputError("correlation needs at least 2 samples")
    if op not in OPERATORS:
        raise ValueError(f"unknown operator {op!r}")
    x, w = draw_operands(dx, dw, n_samples, seed)
    h = apply_operator(ABS_MUL, x, w)
    if op == ABS_MUL:
        pearson(h, h)  # still reject degenerate samples
        return 1.0
    return pearson(h, apply_operator(op, x, w))


def _relative_error(x, w, g, epsilon):
    h = np.abs(x * w)
    keep = h >= epsilon
    if not keep.any():
        raise DegenerateInputError("every sample fell on a break-point (|x*w| < epsilon)")
    h = h[keep]
    return float(np.mean(np.abs(h - apply_operator(g, x[keep], w[keep])) / h))


def relative_error_L(g, dx, dw, n_samples=DEFAULT_SAMPLES, epsilon=DEFAULT_EPSILON, seed=0):
    """Monte Carlo mean of ``|H - G| / H`` over retained samples."""
    if n_samples < 1:
        raise DegenerateInputError("n_samples must be >= 1")
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    x, w = draw_operands(dx, dw, n_samples, seed)
    return _relative_error(x, w, g, epsilon)


@dataclass
class SweepResult:
    params: np.ndarray
    values: np.ndarray
    argmin_param: float
    argmin_value: float
    # sample mean of |w| at the argmin (reported by the variance sweep)
    mean_abs_w: float = float("nan")

    @classmethod
    def from_grid(cls, params, values, **kw):
        params = np.asarray(params, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        i = int(np.argmin(values))
        return cls(params, values, float(params[i]), float(values[i]), **kw)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["param", "L"])
            for p, v in zip(self.params, self.values):
                w.writerow([f"{p:.12g}", f"{v:.12g}"])


def read_sweep_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["param", "L"]:
        raise FormatError(f"{path}: expected header param,L")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    return SweepResult.from_grid(data[:, 0], data[:, 1])


def default_k_grid():
    return np.round(np.arange(0.0, 2.0 + 1e-9, 0.05), 10)


def default_v_grid():
    return np.round(np.arange(0.05, 3.0 + 1e-9, 0.05), 10)


def _standard_pair(n, seed):
    sx, sw = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(sx).standard_normal(n), np.random.default_rng(sw).standard_normal(n)


def sweep_L_over_k(v, k_grid, n_samples=DEFAULT_SAMPLES, epsilon=DEFAULT_EPSILON, seed=0):
    """``L`` for ``x, w ~ N(k, v)`` at each ``k`` (``v`` is the standard deviation).

    Every grid point reuses the same standard variates (common random
    numbers), so the curve is smooth in ``k`` and the argmin is not
    dominated by independent per-point noise.
    """
    k_grid = list(k_grid)
    if not k_grid:
        raise ValueError("k_grid is empty")
    zx, zw = _standard_pair(n_samples, seed)
    values = [_relative_error(k + v * zx, k + v * zw, MIN_SELECTOR, epsilon) for k in k_grid]
    return SweepResult.from_grid(k_grid, values)


def sweep_L_over_v(k, v_grid, n_samples=DEFAULT_SAMPLES, epsilon=DEFAULT_EPSILON, seed=0, hold_x_standard=False):
    """``L`` as a function of the scale ``v`` at fixed mean ``k``.

    By default both operands follow ``N(k, v)``, i.e. this is the slice
    ``v -> L(k, v)`` of the same function the k-sweep explores. With
    ``hold_x_standard`` the input stays ``N(0, 1)`` and only ``w ~ N(k, v)``
    varies. The result also records the sample mean of ``|w|`` at the
    argmin.
    """
    v_grid = list(v_grid)
    if not v_grid:
        raise ValueError("v_grid is empty")
    if any(v <= 0 for v in v_grid):
        raise ValueError("every v must be > 0")
    zx, zw = _standard_pair(n_samples, seed)
    values = []
    for v in v_grid:
        x = zx if hold_x_standard else k + v * zx
        values.append(_relative_error(x, k + v * zw, MIN_SELECTOR, epsilon))
    res = SweepResult.from_grid(v_grid, values)
    res.mean_abs_w = float(np.mean(np.abs(k + res.argmin_param * zw)))
    return res


# Rows of the correlation table with the published coefficients for
# (min_selector, addition, max_selector).
TABLE1 = (
    (normal(0, 1), normal(0, 1), (0.908, 0.882, 0.673)),
    (normal(0, 1), normal(0, 10), (0.692, 0.683, 0.624)),
    (normal(0, 10), normal(0, 1), (0.692, 0.683, 0.624)),
    (uniform(0, 1), uniform(0, 1), (0.962, 0.926, 0.641)),
    (uniform(0, 10), uniform(0, 1), (0.716, 0.717, 0.655)),
    (uniform(0, 1), uniform(0, 10), (0.716, 0.717, 0.655)),
)


def correlation_table(n_samples=DEFAULT_SAMPLES, seed=0, rows=TABLE1):
    """All candidate operators over all rows; list of dicts with the
    estimate and the reference value."""
    out = []
    for dx, dw, ref in rows:
        x, w = draw_operands(dx, dw, n_samples, seed)
        h = apply_operator(ABS_MUL, x, w)
        for op, r in zip(CANDIDATES, ref):
            out.append({"x": dx.label, "w": dw.label, "operator": op, "rho": pearson(h, apply_operator(op, x, w)), "reference": r})
    return out


def write_table_csv(path, table):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x_dist", "w_dist", "operator", "rho", "reference"])
        for r in table:
            w.writerow([r["x"], r["w"], r["operator"], f"{r['rho']:.9f}", f"{r['reference']:.3f}"])


def read_table_csv(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["x_dist", "w_dist", "operator", "rho", "reference"]:
            raise FormatError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            {"x": r["x_dist"], "w": r["w_dist"], "operator": r["operator"], "rho": float(r["rho"]), "reference": float(r["reference"])}
            for r in reader
        ]
